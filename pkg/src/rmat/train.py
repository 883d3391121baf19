"""Supervised training: Adam + Noam schedule, metrics, label handling,
and the learning-rate-grid finetune protocol.

finetune() trains one fresh (or checkpoint-initialized) model per grid
learning rate, tracks the best validation epoch of each run, selects
the best grid point by validation metric, and reports train/valid/test
metrics of the selected snapshot. Every grid point uses an RNG stream
derived from (seed, grid index), so results do not depend on execution
order and a parallel grid reproduces the sequential one.
"""

from __future__ import annotations

import concurrent.futures
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as model_mod


def _worker_cap() -> int:
    """RMAT_THREADS caps explicit parallelism; unset means all cores."""
    raw = os.environ.get("RMAT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1

# the published learning-rate grid, largest first
PAPER_LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)


class NumericError(RuntimeError):
    """Training failed numerically (all grid points diverged, etc.)."""


def noam_lr(step: int, d_model: int, warmup_steps: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step counts from 1")
    return (
        scale
        * d_model ** -0.5
        * min(step ** -0.5, step * warmup_steps ** -1.5)
    )


def noam_scale_for_peak(peak_lr: float, d_model: int, warmup_steps: int) -> float:
    """The scale that makes noam_lr peak at peak_lr (at step == warmup)."""
    return peak_lr * math.sqrt(d_model * warmup_steps)


class Adam:
    """Adam with externally supplied per-step learning rate."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Metrics

def rmse(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(np.mean(np.abs(pred - target)))


def roc_auc(scores, labels) -> float:
    """Rank-based AUC with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels > 0.5
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("ROC AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n0 * n1))


METRIC_FOR_TASK = {"regression": "rmse", "classification": "roc_auc"}


def _metric_value(task: str, pred, target) -> float:
    if task == "classification":
        return roc_auc(pred, target)
    return rmse(pred, target)


def _is_better(task: str, a: float, b: float) -> bool:
    """Is metric a strictly better than b for this task?"""
    if task == "classification":
        return a > b
    return a < b


# ---------------------------------------------------------------------------
# Labels and splits

@dataclass
class LabelTransform:
    mean: float
    std: float

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=float(d["mean"]), std=float(d["std"]))


IDENTITY_TRANSFORM = LabelTransform(mean=0.0, std=1.0)


def fit_label_transform(values) -> LabelTransform:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std())
    if std <= 1e-12:
        raise ValueError("labels have zero variance, cannot normalize")
    return LabelTransform(mean=float(values.mean()), std=std)


def random_split(n: int, fracs=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint index arrays covering range(n) with len ~ fracs * n."""
    if len(fracs) != 3 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError("fracs must be three non-negative values summing to 1")
    perm = np.random.default_rng([seed, 13]).permutation(n)
    n_train = int(round(fracs[0] * n))
    n_valid = int(round(fracs[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_valid]),
        np.sort(perm[n_train + n_valid :]),
    )


# ---------------------------------------------------------------------------
# Configs and results

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    warmup_fraction: float = 0.3
    lr_grid: tuple = PAPER_LR_GRID
    seed: int = 0
    normalize_labels: bool = True
    split_fracs: tuple = (0.8, 0.1, 0.1)
    n_splits: int = 1
    max_steps: int = 0  # 0 = no cap; caps total optimizer steps per grid point
    parallel_grid: bool = False  # evaluate grid points in a thread pool

    def __post_init__(self):
        self.lr_grid = tuple(float(v) for v in self.lr_grid)
        self.split_fracs = tuple(float(v) for v in self.split_fracs)
        if not self.lr_grid:
            raise ValueError("empty lr grid")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in (0, 1]")
        if self.n_splits < 1:
            raise ValueError("n_splits must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "warmup_fraction": self.warmup_fraction,
            "lr_grid": list(self.lr_grid),
            "seed": self.seed,
            "normalize_labels": self.normalize_labels,
            "split_fracs": list(self.split_fracs),
            "n_splits": self.n_splits,
            "max_steps": self.max_steps,
            "parallel_grid": self.parallel_grid,
        }


@dataclass
class LrCurve:
    lr: float
    train_losses: list  # one entry per optimizer step
    epoch_train_losses: list  # per-epoch means of the above
    valid_metrics: list  # one entry per epoch
    best_epoch: int
    best_valid: float
    diverged: bool = False


@dataclass
class FinetuneResult:
    task: str
    metric_name: str
    selected_lr: float
    best_epoch: int
    train_metric: float
    valid_metric: float
    test_metric: float
    per_lr: list
    params: dict
    label_transform: LabelTransform | None
    splits: tuple

    def metrics_dict(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric_name,
            "selected_lr": self.selected_lr,
            "best_epoch": self.best_epoch,
            "train": self.train_metric,
            "valid": self.valid_metric,
            "test": self.test_metric,
            "grid": [
                {
                    "lr": c.lr,
                    "best_epoch": c.best_epoch,
                    "best_valid": None if c.diverged else c.best_valid,
                    "diverged": c.diverged,
                }
                for c in self.per_lr
            ],
        }


@dataclass
class MetricReport:
    task: str
    metric_name: str
    n_splits: int
    per_split: dict  # split name -> list of values
    mean: dict
    std: dict

    @classmethod
    def from_results(cls, results) -> "MetricReport":
        per_split = {
            "train": [r.train_metric for r in results],
            "valid": [r.valid_metric for r in results],
            "test": [r.test_metric for r in results],
        }
        return cls(
            task=results[0].task,
            metric_name=results[0].metric_name,
            n_splits=len(results),
            per_split=per_split,
            mean={k: float(np.mean(v)) for k, v in per_split.items()},
            std={k: float(np.std(v)) for k, v in per_split.items()},
        )


# ---------------------------------------------------------------------------
# Single-model training

def train_steps(
    net: model_mod.RMATModel,
    bundles,
    labels: np.ndarray,
    *,
    peak_lr: float,
    total_steps: int,
    warmup_fraction: float = 0.3,
    batch_size: int = 32,
    seed: int = 0,
    eval_every: int = 0,
    eval_fn=None,
    stop_fn=None,
) -> list:
    """Minimal step-driven loop on one fixed training set.

    Returns per-step losses; eval_fn/stop_fn hooks let callers track
    convergence (used by the overfit check and by finetune epochs).
    """
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim == 2 and labels.shape[1] == 1:
            # a (n, 1) column would broadcast against (B,) predictions
            # inside the loss and silently fit the global mean
            labels = labels[:, 0]
    rng = np.random.default_rng([seed, 3])
    drop_rng = np.random.default_rng([seed, 5])
    params = net.parameters()
    opt = Adam(params)
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    scale = noam_scale_for_peak(peak_lr, net.cfg.d_model, warmup)
    task = net.cfg.task
    losses: list = []
    n = len(bundles)
    order: list = []
    for step in range(1, total_steps + 1):
        if not order:
            order = list(rng.permutation(n))
        sel = [order.pop() for _ in range(min(batch_size, len(order)))]
        batch = model_mod.collate(
            [bundles[i] for i in sel], labels=labels[sel] if labels is not None else None
        )
        pred = net.forward(batch, train=True, dropout_rng=drop_rng)
        if task == "classification":
            loss = ad.bce_with_logits_loss(pred, batch.labels)
        else:
            loss = ad.mse_loss(pred, batch.labels)
        value = loss.item()
        losses.append(value)
        if not math.isfinite(value):
            break
        ad.zero_grad(params)
        ad.backward(loss)
        opt.step(noam_lr(step, net.cfg.d_model, warmup, scale))
        if eval_every and step % eval_every == 0 and eval_fn is not None:
            eval_fn(step)
        if stop_fn is not None and stop_fn(step, value):
            break
    return losses


# ---------------------------------------------------------------------------
# The grid protocol

def finetune(
    dataset,
    model_cfg: model_mod.ModelConfig,
    train_cfg: TrainConfig | None = None,
    init_params: dict | None = None,
    split_seed: int | None = None,
    log=None,
) -> FinetuneResult:
    """Full protocol on one random split; see the module docstring."""
    if train_cfg is None:
        train_cfg = TrainConfig()
    molecules = dataset.molecules
    labels = _single_label_column(dataset)
    task = model_cfg.task
    if task == "classification":
        uniq = set(np.unique(labels))
        if not uniq <= {0.0, 1.0}:
            raise ValueError(f"classification labels must be 0/1, got {sorted(uniq)}")

    bundles = model_mod.featurize_dataset(molecules, model_cfg)
    seed = train_cfg.seed if split_seed is None else split_seed
    tr, va, te = random_split(len(molecules), train_cfg.split_fracs, seed=seed)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("empty train or valid split")

    transform = None
    y = labels.copy()
    if task == "regression" and train_cfg.normalize_labels:
        transform = fit_label_transform(labels[tr])
        y = transform.apply(labels)

    steps_per_epoch = max(1, math.ceil(len(tr) / train_cfg.batch_size))
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps)
    warmup = max(1, int(round(train_cfg.warmup_fraction * total_steps)))

    def run_point(args):
        gi, lr = args
        return _run_grid_point(
            gi,
            lr,
            bundles,
            y,
            labels,
            tr,
            va,
            model_cfg,
            train_cfg,
            transform,
            total_steps,
            warmup,
            init_params,
            log,
        )

    # stream index = the lr's rank in the sorted grid, not its tuple
    # position, so selection is invariant to grid order
    rank = {lr: i for i, lr in enumerate(sorted(set(train_cfg.lr_grid)))}
    jobs = [(rank[lr], lr) for lr in train_cfg.lr_grid]
    if train_cfg.parallel_grid and len(jobs) > 1:
        # each point derives its RNG streams from (seed, lr rank), so
        # execution order cannot change any result
        with concurrent.futures.ThreadPoolExecutor(
            max_workers=min(len(jobs), _worker_cap())
        ) as pool:
            outcomes = list(pool.map(run_point, jobs))
    else:
        outcomes = [run_point(j) for j in jobs]

    curves = [curve for curve, _ in outcomes]
    best: dict | None = None
    for (_, lr), (curve, snapshot) in zip(jobs, outcomes):
        if curve.diverged:
            continue
        # ties go to the smaller learning rate
        if (
            best is None
            or _is_better(task, curve.best_valid, best["valid"])
            or (curve.best_valid == best["valid"] and lr < best["lr"])
        ):
            best = {
                "valid": curve.best_valid,
                "lr": lr,
                "epoch": curve.best_epoch,
                "params": snapshot,
            }
    if best is None:
        raise NumericError("all grid learning rates diverged")

    net = model_mod.RMATModel(model_cfg, rng=np.random.default_rng([train_cfg.seed, 0]))
    net.load_param_dict(best["params"])
    inv = transform.invert if transform is not None else (lambda v: v)
    preds = {
        name: inv(model_mod.predict_numpy(net, [bundles[i] for i in idx]))
        for name, idx in (("train", tr), ("valid", va), ("test", te))
        if len(idx)
    }
    metric = lambda name, idx: _metric_value(task, preds[name], labels[idx])
    return FinetuneResult(
        task=task,
        metric_name=METRIC_FOR_TASK[task],
        selected_lr=best["lr"],
        best_epoch=best["epoch"],
        train_metric=metric("train", tr),
        valid_metric=metric("valid", va),
        test_metric=metric("test", te) if len(te) else float("nan"),
        per_lr=curves,
        params=best["params"],
        label_transform=transform,
        splits=(tr, va, te),
    )


def _single_label_column(dataset) -> np.ndarray:
    if dataset.labels.shape[1] != 1:
        raise ValueError(
            f"finetune expects exactly one label column, got {dataset.label_names}"
        )
    labels = dataset.labels[:, 0]
    if np.isnan(labels).any():
        raise ValueError("finetune labels contain missing values")
    return labels


def _run_grid_point(
    gi,
    lr,
    bundles,
    y,
    labels,
    tr,
    va,
    model_cfg,
    train_cfg,
    transform,
    total_steps,
    warmup,
    init_params,
    log,
):
    task = model_cfg.task
    scale = noam_scale_for_peak(lr, model_cfg.d_model, warmup)
    init_rng = np.random.default_rng([train_cfg.seed, gi, 11])
    net = model_mod.RMATModel(model_cfg, rng=init_rng)
    if init_params is not None:
        _restore_encoder(net, init_params)
    params = net.parameters()
    opt = Adam(params)
    shuffle_rng = np.random.default_rng([train_cfg.seed, gi, 17])
    drop_rng = np.random.default_rng([train_cfg.seed, gi, 19])

    train_bundles = [bundles[i] for i in tr]
    valid_bundles = [bundles[i] for i in va]
    y_train = y[tr]
    inv = transform.invert if transform is not None else (lambda v: v)

    losses: list = []
    valid_metrics: list = []
    epoch_means: list = []
    best_metric = None
    best_epoch = -1
    snapshot: dict = {}
    diverged = False
    step = 0
    epoch = 0
    while step < total_steps:
        epoch_start = len(losses)
        order = shuffle_rng.permutation(len(train_bundles))
        for lo in range(0, len(order), train_cfg.batch_size):
            if step >= total_steps:
                break
            sel = order[lo : lo + train_cfg.batch_size]
            batch = model_mod.collate(
                [train_bundles[i] for i in sel], labels=y_train[sel]
            )
            pred = net.forward(batch, train=True, dropout_rng=drop_rng)
            loss = (
                ad.bce_with_logits_loss(pred, batch.labels)
                if task == "classification"
                else ad.mse_loss(pred, batch.labels)
            )
            value = loss.item()
            losses.append(value)
            if not math.isfinite(value):
                diverged = True
                break
            ad.zero_grad(params)
            ad.backward(loss)
            step += 1
            opt.step(noam_lr(step, model_cfg.d_model, warmup, scale))
        if len(losses) > epoch_start:
            epoch_means.append(float(np.mean(losses[epoch_start:])))
        if diverged:
            break
        vpred = inv(model_mod.predict_numpy(net, valid_bundles, train_cfg.batch_size))
        try:
            vmetric = _metric_value(task, vpred, labels[va])
        except ValueError:
            vmetric = float("nan")
        if not math.isfinite(vmetric):
            diverged = True
            break
        valid_metrics.append(vmetric)
        if best_metric is None or _is_better(task, vmetric, best_metric):
            best_metric = vmetric
            best_epoch = epoch
            snapshot = {p.name: p.data.copy() for p in params}
        epoch += 1
    if log is not None:
        status = "diverged" if diverged else f"best_valid={best_metric:.6g}"
        log(f"lr={lr:g}: {status}")
    if diverged or best_metric is None:
        curve = LrCurve(
            lr=lr,
            train_losses=losses,
            epoch_train_losses=epoch_means,
            valid_metrics=valid_metrics,
            best_epoch=-1,
            best_valid=float("nan"),
            diverged=True,
        )
        return curve, {}
    curve = LrCurve(
        lr=lr,
        train_losses=losses,
        epoch_train_losses=epoch_means,
        valid_metrics=valid_metrics,
        best_epoch=best_epoch,
        best_valid=best_metric,
        diverged=False,
    )
    return curve, snapshot


def _restore_encoder(net: model_mod.RMATModel, init_params: dict) -> None:
    """Load pretrained weights by name, skipping the prediction head."""
    subset = {
        name: arr
        for name, arr in init_params.items()
        if not name.startswith("head.") and not name.endswith("_head.w")
        and not name.endswith("_head.b")
    }
    own = {p.name for p in net.parameters()}
    subset = {k: v for k, v in subset.items() if k in own}
    if not subset:
        raise ValueError("init checkpoint shares no parameters with the model")
    net.load_param_dict(subset, strict=False)


def cross_validate(
    dataset,
    model_cfg: model_mod.ModelConfig,
    train_cfg: TrainConfig | None = None,
    init_params: dict | None = None,
    log=None,
):
    """Repeat finetune over n_splits random splits; aggregate metrics."""
    if train_cfg is None:
        train_cfg = TrainConfig()
    results = []
    for k in range(train_cfg.n_splits):
        results.append(
            finetune(
                dataset,
                model_cfg,
                train_cfg,
                init_params=init_params,
                split_seed=train_cfg.seed + 1000 * k,
                log=log,
            )
        )
    return MetricReport.from_results(results), results
