"""The full molecule transformer: embedding, encoder blocks, pooling,
prediction head, plus batching/padding utilities.

Blocks are post-norm residual: x -> LN(x + attn(x)) -> LN(. + ffn(.)).
Padding is handled with a large negative additive bias before every
softmax (the exponent underflows to exactly zero), so outputs at real
positions do not depend on how much padding a batch carries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import featurize, molio, rmsa

NEG_BIAS = -1e30  # finite stand-in for -inf; exp underflows to 0.0 exactly

TASKS = ("regression", "classification")


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    relation_hidden: int = 32
    ffn_hidden: int = 0  # 0 means 2 * d_model
    pool_heads: int = 4
    pool_hidden: int = 128
    mlp_hidden: int = 128
    mlp_dropout: float = 0.1
    variant: str = "rmat"
    task: str = "regression"
    extra_feature_dim: int = 0
    max_neighbor_order: int = 4
    mat_lambdas: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    mat_distance_g: str = "softmax"
    seed: int = 0
    distance: featurize.DistanceConfig = field(default_factory=featurize.DistanceConfig)

    def __post_init__(self):
        if isinstance(self.distance, dict):
            self.distance = featurize.DistanceConfig(**self.distance)
        self.mat_lambdas = tuple(float(v) for v in self.mat_lambdas)
        if self.ffn_hidden == 0:
            self.ffn_hidden = 2 * self.d_model
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not 0.0 <= self.mlp_dropout < 1.0:
            raise ValueError("mlp_dropout must be in [0, 1)")
        for name in ("n_layers", "pool_heads", "pool_hidden", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # AttentionConfig re-validates d_model/n_heads/variant
        self.attention_config()

    @property
    def relation_dim(self) -> int:
        return featurize.NEIGHBOR_CODES + featurize.BOND_FEATURE_DIM + self.distance.n_emb

    def attention_config(self) -> rmsa.AttentionConfig:
        return rmsa.AttentionConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            variant=self.variant,
            relation_dim=self.relation_dim,
            relation_hidden=self.relation_hidden,
            mat_lambdas=self.mat_lambdas,
            mat_distance_g=self.mat_distance_g,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mat_lambdas"] = list(self.mat_lambdas)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "distance" in d and isinstance(d["distance"], dict):
            d["distance"] = featurize.DistanceConfig(**d["distance"])
        if "mat_lambdas" in d:
            d["mat_lambdas"] = tuple(d["mat_lambdas"])
        return cls(**d)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """The published large profile (~tens of millions of weights)."""
        base = dict(
            n_layers=10,
            n_heads=12,
            d_model=768,
            relation_hidden=128,
            ffn_hidden=0,
            pool_heads=4,
            pool_hidden=128,
            mlp_hidden=1024,
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Batching

@dataclass
class Batch:
    features: np.ndarray  # (B, n, 36)
    relation: np.ndarray  # (B, n, n, Dr)
    adjacency: np.ndarray  # (B, n, n)
    distances: np.ndarray  # (B, n, n)
    valid: np.ndarray  # (B, n) bool, True at real tokens (dummy included)
    n_atoms: list
    labels: np.ndarray | None = None  # (B,)
    extra: np.ndarray | None = None  # (B, E)
    mask_rows: np.ndarray | None = None  # (B, n) bool

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def n_padded(self) -> int:
        return self.features.shape[1]


def collate(
    bundles,
    labels=None,
    extra=None,
    pad_to: int | None = None,
    mask_rows=None,
) -> Batch:
    """Zero-pad per-molecule feature bundles into one batch."""
    bundles = list(bundles)
    if not bundles:
        raise ValueError("empty batch")
    n_max = max(b.n_atoms for b in bundles)
    if pad_to is not None:
        if pad_to < n_max:
            raise ValueError(f"pad_to {pad_to} smaller than largest molecule {n_max}")
        n_max = pad_to
    bsz = len(bundles)
    dr = bundles[0].relation.shape[-1]
    af = bundles[0].atom.shape[-1]
    features = np.zeros((bsz, n_max, af))
    relation = np.zeros((bsz, n_max, n_max, dr))
    adjacency = np.zeros((bsz, n_max, n_max))
    distances = np.zeros((bsz, n_max, n_max))
    valid = np.zeros((bsz, n_max), dtype=bool)
    for b, item in enumerate(bundles):
        n = item.n_atoms
        if item.relation.shape[-1] != dr or item.atom.shape[-1] != af:
            raise ValueError("inconsistent feature widths in batch")
        features[b, :n] = item.atom
        relation[b, :n, :n] = item.relation
        adjacency[b, :n, :n] = item.adjacency
        distances[b, :n, :n] = item.distances
        valid[b, :n] = True
    out_labels = None if labels is None else np.asarray(labels, dtype=np.float64)
    out_extra = None if extra is None else np.asarray(extra, dtype=np.float64)
    out_mask = None
    if mask_rows is not None:
        out_mask = np.zeros((bsz, n_max), dtype=bool)
        for b, rows in enumerate(mask_rows):
            for r in rows:
                out_mask[b, r] = True
    return Batch(
        features=features,
        relation=relation,
        adjacency=adjacency,
        distances=distances,
        valid=valid,
        n_atoms=[b.n_atoms for b in bundles],
        labels=out_labels,
        extra=out_extra,
        mask_rows=out_mask,
    )


# ---------------------------------------------------------------------------
# Model

class EncoderBlock:
    def __init__(self, prefix: str, cfg: ModelConfig, att_cfg, rng):
        d, f = cfg.d_model, cfg.ffn_hidden
        self.attn = rmsa.AttentionParams(f"{prefix}.attn", att_cfg, rng)
        self.ffn_w1 = ad.Parameter(f"{prefix}.ffn.w1", rmsa.glorot(rng, (d, f)))
        self.ffn_b1 = ad.Parameter(f"{prefix}.ffn.b1", np.zeros(f))
        self.ffn_w2 = ad.Parameter(f"{prefix}.ffn.w2", rmsa.glorot(rng, (f, d)))
        self.ffn_b2 = ad.Parameter(f"{prefix}.ffn.b2", np.zeros(d))

    def parameters(self):
        return self.attn.parameters() + [
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
        ]


class RMATModel:
    """Embedding + n_layers encoder blocks + attention pooling + MLP head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        att_cfg = cfg.attention_config()
        self.att_cfg = att_cfg
        d = cfg.d_model
        self.embed_w = ad.Parameter(
            "embed.w", rmsa.glorot(rng, (featurize.ATOM_FEATURE_DIM, d))
        )
        self.embed_b = ad.Parameter("embed.b", np.zeros(d))
        self.mask_vec = ad.Parameter("embed.mask", rng.normal(0.0, 0.02, size=d))
        self.blocks = [
            EncoderBlock(f"enc{i}", cfg, att_cfg, rng) for i in range(cfg.n_layers)
        ]
        self.pool_w1 = ad.Parameter("pool.w1", rmsa.glorot(rng, (cfg.pool_hidden, d)))
        self.pool_w2 = ad.Parameter(
            "pool.w2", rmsa.glorot(rng, (cfg.pool_heads, cfg.pool_hidden))
        )
        mlp_in = cfg.pool_heads * d + cfg.extra_feature_dim
        self.head_w1 = ad.Parameter("head.w1", rmsa.glorot(rng, (mlp_in, cfg.mlp_hidden)))
        self.head_b1 = ad.Parameter("head.b1", np.zeros(cfg.mlp_hidden))
        self.head_w2 = ad.Parameter("head.w2", rmsa.glorot(rng, (cfg.mlp_hidden, 1)))
        self.head_b2 = ad.Parameter("head.b2", np.zeros(1))

    # -- parameter plumbing

    def parameters(self):
        out = [self.embed_w, self.embed_b, self.mask_vec]
        for block in self.blocks:
            out.extend(block.parameters())
        out.extend(
            [
                self.pool_w1,
                self.pool_w2,
                self.head_w1,
                self.head_b1,
                self.head_w2,
                self.head_b2,
            ]
        )
        return out

    def param_dict(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def load_param_dict(self, params: dict, strict: bool = True) -> list:
        """Copy arrays by name; returns the names that were loaded."""
        own = {p.name: p for p in self.parameters()}
        loaded = []
        for name, arr in params.items():
            p = own.get(name)
            if p is None:
                if strict:
                    raise KeyError(f"checkpoint parameter {name!r} not in model")
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.copy()
            loaded.append(name)
        if strict:
            missing = sorted(set(own) - set(loaded))
            if missing:
                raise KeyError(f"checkpoint missing parameters: {missing[:4]}...")
        return loaded

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward pieces

    def _masks(self, batch: Batch):
        additive = np.where(batch.valid, 0.0, NEG_BIAS)[:, None, :]
        mult = batch.valid.astype(np.float64)[:, None, :]
        return ad.constant(additive), ad.constant(mult)

    def embed(self, batch: Batch, use_mask: bool = False) -> ad.Tensor:
        feats = batch.features
        if use_mask:
            if batch.mask_rows is None:
                raise ValueError("batch has no mask_rows")
            m = batch.mask_rows[..., None]
            feats = np.where(m, 0.0, feats)
        x = ad.add(ad.matmul(ad.constant(feats), self.embed_w), self.embed_b)
        if use_mask:
            mf = batch.mask_rows[..., None].astype(np.float64)
            keep = ad.mul(x, ad.constant(1.0 - mf))
            injected = ad.mul(
                ad.reshape(self.mask_vec, (1, 1, self.cfg.d_model)), ad.constant(mf)
            )
            x = ad.add(keep, injected)
        return x

    def encode(
        self,
        batch: Batch,
        use_mask: bool = False,
        capture: list | None = None,
    ) -> ad.Tensor:
        """(B, n, d_model) contextual atom states."""
        mask_bias, mask_mult = self._masks(batch)
        x = self.embed(batch, use_mask=use_mask)
        relation = ad.constant(batch.relation)
        for block in self.blocks:
            head_maps: list | None = [] if capture is not None else None
            if self.cfg.variant == "vanilla":
                attn = rmsa.vanilla_attention(
                    x, block.attn, self.att_cfg, mask_bias=mask_bias, capture=head_maps
                )
            elif self.cfg.variant == "mat_baseline":
                attn = rmsa.mat_attention(
                    x,
                    batch.adjacency,
                    batch.distances,
                    block.attn,
                    self.att_cfg,
                    mask_bias=mask_bias,
                    mask_mult=mask_mult,
                    capture=head_maps,
                )
            else:
                attn = rmsa.rmsa_forward(
                    x,
                    relation,
                    block.attn,
                    self.att_cfg,
                    mask_bias=mask_bias,
                    capture=head_maps,
                )
            x = ad.layer_norm(ad.add(x, attn))
            h = ad.leaky_relu(
                ad.add(ad.matmul(x, block.ffn_w1), block.ffn_b1), rmsa.LEAKY_SLOPE
            )
            ffn = ad.add(ad.matmul(h, block.ffn_w2), block.ffn_b2)
            x = ad.layer_norm(ad.add(x, ffn))
            if capture is not None:
                capture.append(head_maps)
        return x

    def pool(self, hidden: ad.Tensor, batch: Batch) -> ad.Tensor:
        """Multi-head attention pooling -> (B, pool_heads * d_model)."""
        mask_bias, _ = self._masks(batch)
        scores = ad.matmul(
            self.pool_w2, ad.tanh(ad.matmul(self.pool_w1, ad.transpose_last(hidden)))
        )  # (B, S, n)
        weights = ad.softmax(ad.add(scores, mask_bias))
        pooled = rmsa.attend(weights, hidden)  # (B, S, d)
        bsz = hidden.data.shape[0]
        return ad.reshape(pooled, (bsz, self.cfg.pool_heads * self.cfg.d_model))

    def forward(
        self,
        batch: Batch,
        train: bool = False,
        dropout_rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> ad.Tensor:
        """(B,) predictions: raw values for regression, logits for
        classification (apply a logistic link at evaluation time)."""
        pooled = self.pool(self.encode(batch, capture=capture), batch)
        if self.cfg.extra_feature_dim:
            if batch.extra is None:
                raise ValueError("model expects extra features, batch has none")
            if batch.extra.shape[1] != self.cfg.extra_feature_dim:
                raise ValueError("extra feature width mismatch")
            pooled = ad.concat([pooled, ad.constant(batch.extra)], axis=-1)
        h = ad.leaky_relu(
            ad.add(ad.matmul(pooled, self.head_w1), self.head_b1), rmsa.LEAKY_SLOPE
        )
        if train and self.cfg.mlp_dropout > 0.0:
            if dropout_rng is None:
                raise ValueError("training forward needs a dropout rng")
            keep = 1.0 - self.cfg.mlp_dropout
            mask = (dropout_rng.random(h.data.shape) < keep).astype(np.float64) / keep
            h = ad.mul(h, ad.constant(mask))
        out = ad.add(ad.matmul(h, self.head_w2), self.head_b2)
        return ad.reshape(out, (out.data.shape[0],))

    def attention_maps(self, batch: Batch) -> list:
        """Per layer, per head (B, n, n) softmax weight matrices."""
        maps: list = []
        self.encode(batch, capture=maps)
        return maps


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; asserted against the live model."""
    d, f = cfg.d_model, cfg.ffn_hidden
    dk = d // cfg.n_heads
    h = cfg.n_heads
    dr, rh = cfg.relation_dim, cfg.relation_hidden
    embed = featurize.ATOM_FEATURE_DIM * d + d + d
    projector = dr * rh + rh + h * (rh * dk + dk)
    attn = 4 * d * d + d + 2 * h * dk + 2 * projector
    ffn = d * f + f + f * d + d
    pool = cfg.pool_hidden * d + cfg.pool_heads * cfg.pool_hidden
    mlp_in = cfg.pool_heads * d + cfg.extra_feature_dim
    head = mlp_in * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden + 1
    return embed + cfg.n_layers * (attn + ffn) + pool + head


# ---------------------------------------------------------------------------
# Featurization glue

def featurize_dataset(molecules, cfg: ModelConfig):
    """prepare_molecule for every input, done once and reused."""
    return [
        featurize.prepare_molecule(m, cfg.distance, max_order=cfg.max_neighbor_order)
        for m in molecules
    ]


def predict_numpy(
    model: RMATModel,
    bundles,
    batch_size: int = 32,
    extra: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic eval-mode predictions as a flat array."""
    out = []
    for lo in range(0, len(bundles), batch_size):
        chunk = bundles[lo : lo + batch_size]
        ex = None if extra is None else extra[lo : lo + len(chunk)]
        batch = collate(chunk, extra=ex)
        out.append(model.forward(batch).data)
    return np.concatenate(out) if out else np.zeros(0)
