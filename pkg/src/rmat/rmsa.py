"""Self-attention over atoms, with pair-relation conditioning.

Three families share the Q/K/V projections:

- vanilla: Softmax(Q K^T / sqrt(d_k)) V per head, optional output
  projection.
- mat_baseline: per head, a fixed convex-style mix of the softmax
  attention, a distance kernel g(D), and the bond adjacency A, applied
  to V; heads concatenate with no output projection.
- relative scores: e_ij adds relation-aware terms to Q K^T, and the
  values are shifted per pair by a projected relation embedding. Term
  subsets give the published ablations.

Score terms (per head, relation embedding b_ij projected to bK_ij):
  1: (x_i W^Q) (x_j W^K)^T      content-content
  2: (x_i W^Q) . bK_ij          content-relation
  3: (x_j W^K) . bK_ij          key-relation
  4: u . (x_j W^K)              global content bias
  5: v . bK_ij                  global relation bias
Output row i: sum_j Softmax(e_i / sqrt(d_z))_j (x_j W^V + bV_ij),
heads concatenated, then the output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    concat,
    constant,
    leaky_relu,
    matmul,
    mul,
    mul_scalar,
    reshape,
    slice_last,
    softmax,
    sum_sorted,
    tensor_sum,
    transpose_last,
)

LEAKY_SLOPE = 0.1

# score-term subsets per variant
VARIANT_TERMS = {
    "rmat": (1, 2, 3, 4, 5),
    "relative_shaw": (1, 2),
    "relative_attentive_bias": (1, 2, 4, 5),
    "relative_improved": (1, 2, 3),
}

ALL_VARIANTS = ("vanilla", "mat_baseline") + tuple(VARIANT_TERMS)


@dataclass
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    variant: str = "rmat"
    relation_dim: int = 45
    relation_hidden: int = 32
    mat_lambdas: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    mat_distance_g: str = "softmax"

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.variant not in ALL_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.mat_lambdas = tuple(float(v) for v in self.mat_lambdas)
        if len(self.mat_lambdas) != 3:
            raise ValueError("mat_lambdas needs exactly 3 weights")
        if self.mat_distance_g not in ("softmax", "exp"):
            raise ValueError("mat_distance_g must be 'softmax' or 'exp'")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class RelationProjector:
    """Two-layer map from relation features to per-head d_k vectors.

    The hidden layer is shared across heads; each head has its own
    output layer. One projector per role (keys, values).
    """

    def __init__(self, prefix: str, cfg: AttentionConfig, rng: np.random.Generator):
        hidden = cfg.relation_hidden
        self.hidden_w = Parameter(
            f"{prefix}.hidden_w", glorot(rng, (cfg.relation_dim, hidden))
        )
        self.hidden_b = Parameter(f"{prefix}.hidden_b", np.zeros(hidden))
        self.head_w = [
            Parameter(f"{prefix}.head{h}.w", glorot(rng, (hidden, cfg.d_k)))
            for h in range(cfg.n_heads)
        ]
        self.head_b = [
            Parameter(f"{prefix}.head{h}.b", np.zeros(cfg.d_k))
            for h in range(cfg.n_heads)
        ]

    def parameters(self):
        return [self.hidden_w, self.hidden_b, *self.head_w, *self.head_b]

    def apply(self, relation: Tensor):
        """relation (..., n, n, Dr) -> one (..., n, n, d_k) tensor per head."""
        h = leaky_relu(
            add(matmul(relation, self.hidden_w), self.hidden_b), LEAKY_SLOPE
        )
        return [
            add(matmul(h, w), b) for w, b in zip(self.head_w, self.head_b)
        ]


class AttentionParams:
    """All learned state of one attention layer."""

    def __init__(self, prefix: str, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.wq = Parameter(f"{prefix}.wq", glorot(rng, (d, d)))
        self.wk = Parameter(f"{prefix}.wk", glorot(rng, (d, d)))
        self.wv = Parameter(f"{prefix}.wv", glorot(rng, (d, d)))
        self.wo = Parameter(f"{prefix}.wo", glorot(rng, (d, d)))
        self.wo_b = Parameter(f"{prefix}.wo_b", np.zeros(d))
        # global content/relation biases start at zero so the relative
        # variants begin as pure content attention
        self.u = [
            Parameter(f"{prefix}.u{h}", np.zeros(cfg.d_k)) for h in range(cfg.n_heads)
        ]
        self.v = [
            Parameter(f"{prefix}.v{h}", np.zeros(cfg.d_k)) for h in range(cfg.n_heads)
        ]
        self.phi_k = RelationProjector(f"{prefix}.phi_k", cfg, rng)
        self.phi_v = RelationProjector(f"{prefix}.phi_v", cfg, rng)

    def parameters(self):
        out = [self.wq, self.wk, self.wv, self.wo, self.wo_b]
        out.extend(self.u)
        out.extend(self.v)
        out.extend(self.phi_k.parameters())
        out.extend(self.phi_v.parameters())
        return out


def _heads(full: Tensor, n_heads: int, d_k: int):
    return [slice_last(full, h * d_k, (h + 1) * d_k) for h in range(n_heads)]


def attend(weights: Tensor, values: Tensor, per_pair: bool = False) -> Tensor:
    """Weighted sum over source atoms, with order-stable summation.

    weights (..., n, n); values (..., n, d_k), or (..., n, n, d_k) per
    pair when per_pair is set.
    """
    w = reshape(weights, weights.data.shape + (1,))
    if not per_pair:
        values = reshape(
            values, values.data.shape[:-2] + (1,) + values.data.shape[-2:]
        )
    return sum_sorted(mul(w, values), axis=-2)


def vanilla_attention(
    x: Tensor,
    params: AttentionParams,
    cfg: AttentionConfig | None = None,
    mask_bias: Tensor | None = None,
    project: bool = True,
    capture: list | None = None,
) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V per head; concat; optional W^O."""
    cfg = cfg or params.cfg
    inv = 1.0 / math.sqrt(cfg.d_k)
    q_full = matmul(x, params.wq)
    k_full = matmul(x, params.wk)
    v_full = matmul(x, params.wv)
    outs = []
    for q, k, v in zip(
        _heads(q_full, cfg.n_heads, cfg.d_k),
        _heads(k_full, cfg.n_heads, cfg.d_k),
        _heads(v_full, cfg.n_heads, cfg.d_k),
    ):
        scores = mul_scalar(matmul(q, transpose_last(k)), inv)
        if mask_bias is not None:
            scores = add(scores, mask_bias)
        attn = softmax(scores)
        if capture is not None:
            capture.append(attn.data.copy())
        outs.append(attend(attn, v))
    out = concat(outs, axis=-1)
    if project:
        out = add(matmul(out, params.wo), params.wo_b)
    return out


def mat_attention(
    x: Tensor,
    adjacency: np.ndarray,
    distances: np.ndarray,
    params: AttentionParams,
    cfg: AttentionConfig | None = None,
    mask_bias: Tensor | None = None,
    mask_mult: Tensor | None = None,
    capture: list | None = None,
) -> Tensor:
    """Molecule-attention baseline: per head,
    (la * Softmax(QK^T/sqrt(dk)) + ld * g(D) + lg * A) V, no projection.

    g(D) is a row softmax over -D, or elementwise exp(-d); both are
    fixed functions of geometry, not learned.
    """
    cfg = cfg or params.cfg
    la, ld, lg = cfg.mat_lambdas
    inv = 1.0 / math.sqrt(cfg.d_k)
    neg_d = constant(-np.asarray(distances, dtype=np.float64))
    if cfg.mat_distance_g == "softmax":
        g_mat = softmax(add(neg_d, mask_bias) if mask_bias is not None else neg_d)
    else:
        g_data = np.exp(neg_d.data)
        g_mat = constant(g_data)
        if mask_mult is not None:
            g_mat = mul(g_mat, mask_mult)
    adj = constant(np.asarray(adjacency, dtype=np.float64))
    if mask_mult is not None:
        adj = mul(adj, mask_mult)

    q_full = matmul(x, params.wq)
    k_full = matmul(x, params.wk)
    v_full = matmul(x, params.wv)
    outs = []
    for q, k, v in zip(
        _heads(q_full, cfg.n_heads, cfg.d_k),
        _heads(k_full, cfg.n_heads, cfg.d_k),
        _heads(v_full, cfg.n_heads, cfg.d_k),
    ):
        scores = mul_scalar(matmul(q, transpose_last(k)), inv)
        if mask_bias is not None:
            scores = add(scores, mask_bias)
        attn = softmax(scores)
        if capture is not None:
            capture.append(attn.data.copy())
        mixed = add(
            add(mul_scalar(attn, la), mul_scalar(g_mat, ld)), mul_scalar(adj, lg)
        )
        outs.append(attend(mixed, v))
    return concat(outs, axis=-1)


def relative_scores(
    x: Tensor,
    bk_heads,
    params: AttentionParams,
    cfg: AttentionConfig | None = None,
    terms=None,
):
    """Unnormalized relative attention scores, one (..., n, n) per head."""
    cfg = cfg or params.cfg
    terms = tuple(terms) if terms is not None else VARIANT_TERMS[cfg.variant]
    q_full = matmul(x, params.wq)
    k_full = matmul(x, params.wk)
    scores = []
    for h, (q, k) in enumerate(
        zip(_heads(q_full, cfg.n_heads, cfg.d_k), _heads(k_full, cfg.n_heads, cfg.d_k))
    ):
        bk = bk_heads[h]
        lead = q.data.shape[:-2]
        n = q.data.shape[-2]
        e = matmul(q, transpose_last(k)) if 1 in terms else None
        if 2 in terms:
            q_i = reshape(q, lead + (n, 1, cfg.d_k))
            t2 = tensor_sum(mul(q_i, bk), axis=-1)
            e = t2 if e is None else add(e, t2)
        if 3 in terms:
            k_j = reshape(k, lead + (1, n, cfg.d_k))
            t3 = tensor_sum(mul(k_j, bk), axis=-1)
            e = t3 if e is None else add(e, t3)
        if 4 in terms:
            u_col = reshape(params.u[h], (cfg.d_k, 1))
            t4 = transpose_last(matmul(k, u_col))  # (..., 1, n)
            e = t4 if e is None else add(e, t4)
        if 5 in terms:
            v_vec = reshape(params.v[h], (1, 1, cfg.d_k))
            t5 = tensor_sum(mul(v_vec, bk), axis=-1)
            e = t5 if e is None else add(e, t5)
        if e is None:
            raise ValueError("empty score term set")
        scores.append(e)
    return scores


def rmsa_forward(
    x: Tensor,
    relation,
    params: AttentionParams,
    cfg: AttentionConfig | None = None,
    mask_bias: Tensor | None = None,
    capture: list | None = None,
    variant: str | None = None,
) -> Tensor:
    """Relative self-attention: scores from relative_scores, values
    shifted per pair by the projected relation, heads concatenated,
    output projection applied."""
    cfg = cfg or params.cfg
    name = variant or cfg.variant
    if name not in VARIANT_TERMS:
        raise ValueError(f"{name!r} is not a relative variant")
    terms = VARIANT_TERMS[name]
    rel = relation if isinstance(relation, Tensor) else constant(relation)
    bk_heads = params.phi_k.apply(rel)
    bv_heads = params.phi_v.apply(rel)
    scores = relative_scores(x, bk_heads, params, cfg, terms=terms)
    inv = 1.0 / math.sqrt(cfg.d_k)
    v_full = matmul(x, params.wv)
    outs = []
    for h, v in enumerate(_heads(v_full, cfg.n_heads, cfg.d_k)):
        s = mul_scalar(scores[h], inv)
        if mask_bias is not None:
            s = add(s, mask_bias)
        attn = softmax(s)
        if capture is not None:
            capture.append(attn.data.copy())
        lead = v.data.shape[:-2]
        n = v.data.shape[-2]
        v_j = reshape(v, lead + (1, n, cfg.d_k))
        values = add(v_j, bv_heads[h])  # (..., n, n, d_k)
        outs.append(attend(attn, values, per_pair=True))
    out = concat(outs, axis=-1)
    return add(matmul(out, params.wo), params.wo_b)
