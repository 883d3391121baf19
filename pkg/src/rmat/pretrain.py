"""Self-supervised pretraining: label construction and training stages.

Two node-level tasks plus one graph-level task:

- contextual: mask a sample of atoms together with their bonded
  neighbors, then predict each masked center's local-context label, a
  canonical string like "C_N-DOUBLE1_O-SINGLE1" (center element, then
  per-neighbor element/bond-kind/count terms, sorted alphabetically).
- masking: mask the sampled atoms only (no neighbor expansion) and
  predict each center's 12-way element class.
- descriptors: regress standardized whole-molecule descriptors from the
  pooled representation.

pretrain_run chains stages on one encoder: each stage gets a fresh head
and a fresh optimizer, the encoder carries over.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import featurize, model as model_mod, molio, train as train_mod
from .rmsa import glorot

UNK_LABEL = "<UNK>"

_BOND_KIND = {1.0: "SINGLE", 1.5: "AROMATIC", 2.0: "DOUBLE", 3.0: "TRIPLE"}

STAGES = ("contextual", "masking", "descriptors")

ELEMENT_CLASSES = molio.ELEMENTS + (molio.DUMMY, molio.OTHER)


def context_label(mol: molio.Molecule, atom_index: int) -> str:
    """Canonical local-context string for one atom.

    Center element, underscore, then one term per distinct
    (neighbor element, bond kind): ELEM-KINDCOUNT, terms sorted
    alphabetically. An isolated atom is just its element.
    """
    atom = mol.atoms[atom_index]
    if atom.is_dummy:
        raise ValueError("dummy atoms have no context label")
    counts: dict = {}
    for bond in mol.bonds:
        if atom_index not in (bond.a, bond.b):
            continue
        other = bond.b if bond.a == atom_index else bond.a
        key = f"{mol.atoms[other].element}-{_BOND_KIND[bond.order]}"
        counts[key] = counts.get(key, 0) + 1
    terms = sorted(f"{key}{count}" for key, count in counts.items())
    return "_".join([atom.element] + terms)


@dataclass
class ContextVocab:
    labels: list

    def __post_init__(self):
        if UNK_LABEL not in self.labels:
            raise ValueError(f"vocabulary must contain {UNK_LABEL}")
        if self.labels != sorted(self.labels):
            raise ValueError("vocabulary must be sorted")
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self.index) != len(self.labels):
            raise ValueError("duplicate labels in vocabulary")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def unk_index(self) -> int:
        return self.index[UNK_LABEL]

    def lookup(self, label: str) -> int:
        return self.index.get(label, self.index[UNK_LABEL])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for lab in self.labels:
                fh.write(lab + "\n")

    @classmethod
    def load(cls, path: str) -> "ContextVocab":
        with open(path, "r", encoding="utf-8") as fh:
            labels = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(labels=labels)


def build_context_vocab(molecules) -> ContextVocab:
    """Sorted vocabulary over every real atom's label, plus <UNK>."""
    seen = {UNK_LABEL}
    for mol in molecules:
        for i, atom in enumerate(mol.atoms):
            if not atom.is_dummy:
                seen.add(context_label(mol, i))
    return ContextVocab(labels=sorted(seen))


# ---------------------------------------------------------------------------
# Mask plans

@dataclass
class MaskPlan:
    centers: list  # atom indices whose labels are predicted
    masked: list  # atom indices whose inputs are replaced
    labels: list  # context label per center


def make_mask_plan(
    mol: molio.Molecule,
    rng: np.random.Generator,
    rate: float = 0.15,
    include_neighbors: bool = True,
) -> MaskPlan:
    """Sample ceil(rate * n_real) centers; optionally mask their bonded
    neighborhood as well. Labels come from the unmasked graph."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must be in (0, 1]")
    real = [i for i, a in enumerate(mol.atoms) if not a.is_dummy]
    if not real:
        raise ValueError("molecule has no real atoms")
    k = math.ceil(rate * len(real))
    centers = sorted(int(c) for c in rng.choice(real, size=k, replace=False))
    masked = set(centers)
    if include_neighbors:
        nbrs = mol.neighbor_lists()
        for c in centers:
            masked.update(nbrs[c])
    labels = [context_label(mol, c) for c in centers]
    return MaskPlan(centers=centers, masked=sorted(masked), labels=labels)


def element_class_index(mol: molio.Molecule, atom_index: int) -> int:
    return ELEMENT_CLASSES.index(mol.atoms[atom_index].element)


# ---------------------------------------------------------------------------
# Descriptor targets

@dataclass
class DescriptorStats:
    mean: np.ndarray  # (12,)
    std: np.ndarray  # (12,) population std
    included: np.ndarray  # (12,) bool, False for zero-variance targets

    def standardize(self, values: np.ndarray) -> np.ndarray:
        safe = np.where(self.included, self.std, 1.0)
        out = (values - self.mean) / safe
        return np.where(self.included, out, 0.0)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "included": [bool(v) for v in self.included],
            "names": list(featurize.DESCRIPTOR_NAMES),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            included=np.asarray(d["included"], dtype=bool),
        )


def descriptor_stats(molecules) -> DescriptorStats:
    values = np.stack([featurize.descriptor_vector(m) for m in molecules])
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    included = std > 1e-12
    if not included.all():
        dropped = [
            featurize.DESCRIPTOR_NAMES[i] for i in np.nonzero(~included)[0]
        ]
        warnings.warn(
            f"constant descriptors excluded from the loss: {dropped}", stacklevel=2
        )
    return DescriptorStats(mean=mean, std=std, included=included)


def descriptor_targets(molecules, stats: DescriptorStats) -> np.ndarray:
    values = np.stack([featurize.descriptor_vector(m) for m in molecules])
    return stats.standardize(values)


# ---------------------------------------------------------------------------
# Heads and losses

class NodeHead:
    """Linear readout from atom states to class logits."""

    def __init__(self, prefix: str, d_model: int, n_classes: int, rng):
        self.w = ad.Parameter(f"{prefix}.w", glorot(rng, (d_model, n_classes)))
        self.b = ad.Parameter(f"{prefix}.b", np.zeros(n_classes))

    def parameters(self):
        return [self.w, self.b]


class PooledHead:
    """Linear readout from the pooled vector to a target vector."""

    def __init__(self, prefix: str, in_dim: int, out_dim: int, rng):
        self.w = ad.Parameter(f"{prefix}.w", glorot(rng, (in_dim, out_dim)))
        self.b = ad.Parameter(f"{prefix}.b", np.zeros(out_dim))

    def parameters(self):
        return [self.w, self.b]


def node_logits_at(
    net: model_mod.RMATModel, batch: model_mod.Batch, head: NodeHead, flat_centers
) -> ad.Tensor:
    hidden = net.encode(batch, use_mask=True)
    bsz, n, d = hidden.data.shape
    flat = ad.reshape(hidden, (bsz * n, d))
    rows = ad.embedding_lookup(flat, flat_centers)
    return ad.add(ad.matmul(rows, head.w), head.b)


def build_node_batch(bundles, plans, pad_to=None):
    """Batch with mask_rows set; returns (batch, flat center indices)."""
    batch = model_mod.collate(
        bundles, pad_to=pad_to, mask_rows=[p.masked for p in plans]
    )
    n = batch.n_padded
    flat = []
    for b, plan in enumerate(plans):
        flat.extend(b * n + c for c in plan.centers)
    return batch, np.asarray(flat, dtype=np.int64)


def contextual_loss(
    net: model_mod.RMATModel,
    head: NodeHead,
    batch: model_mod.Batch,
    flat_centers,
    target_idx,
) -> ad.Tensor:
    if len(flat_centers) == 0:
        raise ValueError("no masked centers in batch")
    logits = node_logits_at(net, batch, head, flat_centers)
    return ad.cross_entropy_with_logits(logits, target_idx)


def descriptor_loss(
    net: model_mod.RMATModel,
    head: PooledHead,
    batch: model_mod.Batch,
    targets_std: np.ndarray,
    included: np.ndarray,
) -> ad.Tensor:
    pooled = net.pool(net.encode(batch), batch)
    pred = ad.add(ad.matmul(pooled, head.w), head.b)
    diff = ad.sub(pred, ad.constant(targets_std))
    weight = included.astype(np.float64)[None, :]
    sq = ad.mul(ad.mul(diff, diff), ad.constant(weight))
    count = float(targets_std.shape[0] * max(int(included.sum()), 1))
    return ad.mul_scalar(ad.tensor_sum(sq), 1.0 / count)


# ---------------------------------------------------------------------------
# The pretraining driver

@dataclass
class PretrainConfig:
    stages: tuple = ("contextual", "descriptors")
    epochs: int = 3
    batch_size: int = 8
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.3
    mask_rate: float = 0.15
    valid_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.stages = tuple(self.stages)
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown pretraining stage {s!r}")
        if not self.stages:
            raise ValueError("no pretraining stages")


@dataclass
class PretrainResult:
    model: model_mod.RMATModel
    vocab: ContextVocab | None
    stats: DescriptorStats | None
    history: dict  # stage -> list of per-step train losses
    valid_history: dict  # stage -> list of per-epoch validation losses
    heads: dict = field(default_factory=dict)  # stage -> {name: array}


def pretrain_run(
    molecules,
    model_cfg: model_mod.ModelConfig,
    cfg: PretrainConfig | None = None,
    net: model_mod.RMATModel | None = None,
) -> PretrainResult:
    """Run the configured stages in order on one shared encoder."""
    if cfg is None:
        cfg = PretrainConfig()
    molecules = list(molecules)
    if not molecules:
        raise ValueError("empty pretraining corpus")
    rng = np.random.default_rng([cfg.seed, 101])
    if net is None:
        net = model_mod.RMATModel(model_cfg, rng=np.random.default_rng(model_cfg.seed))
    bundles = model_mod.featurize_dataset(molecules, model_cfg)

    n = len(molecules)
    n_valid = min(max(int(round(cfg.valid_fraction * n)), 1 if n > 1 else 0), n - 1)
    perm = np.random.default_rng([cfg.seed, 7]).permutation(n)
    valid_idx = perm[:n_valid]
    train_idx = perm[n_valid:]

    vocab = None
    stats = None
    history: dict = {}
    valid_history: dict = {}
    heads_out: dict = {}
    d = model_cfg.d_model

    for stage in cfg.stages:
        if stage == "contextual" and vocab is None:
            vocab = build_context_vocab(molecules)
        if stage == "descriptors" and stats is None:
            stats = descriptor_stats([molecules[i] for i in train_idx])
        head: NodeHead | PooledHead
        if stage == "contextual":
            head = NodeHead(f"{stage}_head", d, vocab.size, rng)
        elif stage == "masking":
            head = NodeHead(f"{stage}_head", d, len(ELEMENT_CLASSES), rng)
        else:
            head = PooledHead(
                f"{stage}_head",
                model_cfg.pool_heads * d,
                len(featurize.DESCRIPTOR_NAMES),
                rng,
            )
        params = net.parameters() + head.parameters()
        opt = train_mod.Adam(params)
        steps_per_epoch = max(1, math.ceil(len(train_idx) / cfg.batch_size))
        total_steps = cfg.epochs * steps_per_epoch
        warmup = max(1, int(round(cfg.warmup_fraction * total_steps)))
        scale = train_mod.noam_scale_for_peak(cfg.peak_lr, d, warmup)
        losses: list = []
        vlosses: list = []
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_idx))
            for lo in range(0, len(order), cfg.batch_size):
                sel = [train_idx[k] for k in order[lo : lo + cfg.batch_size]]
                loss = _stage_loss(
                    stage, net, head, bundles, molecules, sel, vocab, stats, cfg, rng
                )
                ad.zero_grad(params)
                ad.backward(loss)
                step += 1
                opt.step(train_mod.noam_lr(step, d, warmup, scale))
                losses.append(loss.item())
            if len(valid_idx):
                vrng = np.random.default_rng([cfg.seed, 23, epoch])
                vloss = _stage_loss(
                    stage,
                    net,
                    head,
                    bundles,
                    molecules,
                    list(valid_idx),
                    vocab,
                    stats,
                    cfg,
                    vrng,
                )
                vlosses.append(vloss.item())
        history[stage] = losses
        valid_history[stage] = vlosses
        heads_out[stage] = {p.name: p.data.copy() for p in head.parameters()}
    return PretrainResult(
        model=net,
        vocab=vocab,
        stats=stats,
        history=history,
        valid_history=valid_history,
        heads=heads_out,
    )


def _stage_loss(stage, net, head, bundles, molecules, indices, vocab, stats, cfg, rng):
    chunk = [bundles[i] for i in indices]
    if stage == "descriptors":
        batch = model_mod.collate(chunk)
        targets = descriptor_targets([molecules[i] for i in indices], stats)
        return descriptor_loss(net, head, batch, targets, stats.included)
    include_neighbors = stage == "contextual"
    plans = [
        make_mask_plan(
            molecules[i], rng, rate=cfg.mask_rate, include_neighbors=include_neighbors
        )
        for i in indices
    ]
    batch, flat = build_node_batch(chunk, plans)
    if stage == "contextual":
        targets = np.asarray(
            [vocab.lookup(lab) for plan in plans for lab in plan.labels],
            dtype=np.int64,
        )
        return contextual_loss(net, head, batch, flat, targets)
    targets = np.asarray(
        [
            element_class_index(molecules[i], c)
            for i, plan in zip(indices, plans)
            for c in plan.centers
        ],
        dtype=np.int64,
    )
    if len(flat) == 0:
        raise ValueError("no masked centers in batch")
    logits = node_logits_at(net, batch, head, flat)
    return ad.cross_entropy_with_logits(logits, targets)
