import math

import numpy as np
import pytest

import conftest
from rmat import model, molio, train
from rmat.train import (
    Adam,
    LabelTransform,
    NumericError,
    TrainConfig,
    cross_validate,
    finetune,
    fit_label_transform,
    mae,
    noam_lr,
    noam_scale_for_peak,
    random_split,
    rmse,
    roc_auc,
    train_steps,
)


def heavy_atom_dataset(seed, size):
    """Synthetic regression target: heavy atom count."""
    mols = conftest.synthetic_corpus(seed, size)
    labels = np.array([[float(m.n_atoms)] for m in mols])
    return molio.Dataset(molecules=mols, labels=labels, label_names=["heavy"])


def fast_train_cfg(**kw):
    base = dict(epochs=2, batch_size=8, lr_grid=(1e-3,), seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# learning-rate schedule

def test_noam_peak_at_warmup():
    d, w = 64, 50
    values = [noam_lr(s, d, w) for s in range(1, 200)]
    assert int(np.argmax(values)) + 1 == w
    # the two branches join continuously at the peak
    left = (w - 1e-9) * w ** -1.5
    right = w ** -0.5
    assert abs(left - right) < 1e-9


def test_noam_double_warmup_ratio():
    # peak lr scales as warmup^-0.5: lr(2w at peak) / lr(w at peak) = 1/sqrt(2)
    d = 64
    a = noam_lr(50, d, 50)
    b = noam_lr(100, d, 100)
    assert abs(b / a - 1.0 / math.sqrt(2.0)) < 1e-12


def test_noam_closed_form_oracle():
    d, w = 128, 30
    for step in range(1, 101):
        expected = d ** -0.5 * min(step ** -0.5, step * w ** -1.5)
        assert noam_lr(step, d, w) == expected
    with pytest.raises(ValueError):
        noam_lr(0, d, w)


def test_noam_scale_for_peak():
    for d, w, peak in ((64, 50, 1e-3), (768, 4000, 5e-4), (16, 3, 0.01)):
        scale = noam_scale_for_peak(peak, d, w)
        assert abs(noam_lr(w, d, w, scale) - peak) < 1e-15 * max(1.0, peak)
        grid = [noam_lr(s, d, w, scale) for s in range(1, 5 * w)]
        assert max(grid) == noam_lr(w, d, w, scale)


# ---------------------------------------------------------------------------
# optimizer

def test_adam_scalar_closed_form_oracle():
    # ten steps against an independent scalar recurrence, 1e-12
    from rmat.autodiff import Parameter, backward, zero_grad, mul, tensor_sum

    p = Parameter("x", np.array([1.5]))
    opt = Adam([p])
    b1, b2, eps = opt.beta1, opt.beta2, opt.eps
    x = 1.5
    m = v = 0.0
    lr = 0.05
    for t in range(1, 11):
        zero_grad([p])
        backward(tensor_sum(mul(p, p)))  # d/dx x^2 = 2x
        opt.step(lr)
        g = 2.0 * x
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        x = x - lr * (m / (1.0 - b1**t)) / (math.sqrt(v / (1.0 - b2**t)) + eps)
        assert abs(p.data[0] - x) < 1e-12


def test_adam_skips_gradless_params():
    from rmat.autodiff import Parameter

    p = Parameter("frozen", np.ones(3))
    opt = Adam([p])
    opt.step(0.1)
    assert np.array_equal(p.data, np.ones(3))
    with pytest.raises(ValueError):
        Adam([Parameter("a", np.ones(1)), Parameter("a", np.ones(1))])


# ---------------------------------------------------------------------------
# metrics

def test_rmse_mae_values():
    assert rmse([1.0, 2.0], [0.0, 0.0]) == math.sqrt(2.5)
    assert mae([1.0, -2.0], [0.0, 0.0]) == 1.5
    assert rmse([3.0], [3.0]) == 0.0


def test_roc_auc_worked_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_roc_auc_perfect_and_reversed():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_roc_auc_ties_average():
    # all scores equal: AUC is 0.5 by average ranks
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    # one tied positive/negative pair counts half: (3 + 0.5) / 4
    assert roc_auc([0.2, 0.5, 0.5, 0.9], [0, 0, 1, 1]) == 0.875


def test_roc_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.9], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.9], [0, 0])


# ---------------------------------------------------------------------------
# label transform

def test_label_transform_worked_example():
    t = fit_label_transform([0.0, 2.0])
    assert (t.mean, t.std) == (1.0, 1.0)
    assert t.apply([0.0, 2.0]).tolist() == [-1.0, 1.0]


def test_label_transform_inverse():
    rng = np.random.default_rng(8)
    y = rng.normal(3.0, 2.5, size=40)
    t = fit_label_transform(y)
    np.testing.assert_allclose(t.invert(t.apply(y)), y, rtol=1e-12, atol=1e-12)
    z = t.apply(y)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1.0) < 1e-12


def test_label_transform_zero_variance_rejected():
    with pytest.raises(ValueError):
        fit_label_transform([4.0, 4.0, 4.0])


def test_label_transform_round_trip_dict():
    t = fit_label_transform([1.0, 3.0, 5.0])
    again = LabelTransform.from_dict(t.to_dict())
    assert (again.mean, again.std) == (t.mean, t.std)


def test_denormalized_metric_equals_scaled():
    # rmse in standardized space times std == rmse in label space
    rng = np.random.default_rng(9)
    y = rng.normal(10.0, 4.0, size=25)
    t = fit_label_transform(y)
    pred_std = t.apply(y) + rng.normal(0, 0.1, size=25)
    a = rmse(t.invert(pred_std), y)
    b = rmse(pred_std, t.apply(y)) * t.std
    assert abs(a - b) < 1e-12


# ---------------------------------------------------------------------------
# splits

def test_random_split_sizes_and_coverage():
    tr, va, te = random_split(100, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    joined = np.concatenate([tr, va, te])
    assert sorted(joined.tolist()) == list(range(100))


def test_random_split_disjoint_and_seeded():
    a = random_split(37, seed=4)
    b = random_split(37, seed=4)
    c = random_split(37, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))
    assert not set(a[0]) & set(a[1])
    assert not set(a[0]) & set(a[2])


def test_random_split_validation():
    with pytest.raises(ValueError):
        random_split(10, (0.5, 0.5))
    with pytest.raises(ValueError):
        random_split(10, (0.9, 0.2, -0.1))


# ---------------------------------------------------------------------------
# training loop

def test_train_steps_learns_constant_shift():
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    mols = conftest.synthetic_corpus(21, 16)
    bundles = model.featurize_dataset(mols, cfg)
    labels = np.array([float(m.n_real) for m in mols])
    t = fit_label_transform(labels)
    net = model.RMATModel(cfg)
    losses = train_steps(
        net, bundles, t.apply(labels),
        peak_lr=1e-3, total_steps=60, batch_size=8, seed=0,
    )
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_train_steps_deterministic():
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    mols = conftest.synthetic_corpus(22, 8)
    bundles = model.featurize_dataset(mols, cfg)
    labels = np.linspace(-1, 1, 8)

    def run():
        net = model.RMATModel(cfg)
        losses = train_steps(
            net, bundles, labels, peak_lr=5e-4, total_steps=12, batch_size=4, seed=3
        )
        return losses, net.param_dict()

    la, pa = run()
    lb, pb = run()
    assert la == lb
    for k in pa:
        assert np.array_equal(pa[k], pb[k])


def test_train_steps_column_labels_match_flat():
    # a (n, 1) label column must not broadcast against (B,) predictions
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    mols = conftest.synthetic_corpus(23, 8)
    bundles = model.featurize_dataset(mols, cfg)
    labels = np.linspace(-1, 1, 8)

    def run(y):
        net = model.RMATModel(cfg)
        return train_steps(
            net, bundles, y, peak_lr=5e-4, total_steps=8, batch_size=4, seed=3
        )

    assert run(labels.reshape(-1, 1)) == run(labels)


def test_train_steps_eval_hook_and_stop():
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    mols = conftest.synthetic_corpus(23, 8)
    bundles = model.featurize_dataset(mols, cfg)
    labels = np.linspace(-1, 1, 8)
    net = model.RMATModel(cfg)
    seen = []

    def eval_fn(step):
        seen.append(step)

    losses = train_steps(
        net, bundles, labels, peak_lr=5e-4, total_steps=20, batch_size=4,
        seed=0, eval_every=5, eval_fn=eval_fn,
    )
    assert seen == [5, 10, 15, 20]

    net2 = model.RMATModel(cfg)
    losses2 = train_steps(
        net2, bundles, labels, peak_lr=5e-4, total_steps=50, batch_size=4,
        seed=0, stop_fn=lambda step, value: step >= 7,
    )
    assert len(losses2) == 7


# ---------------------------------------------------------------------------
# finetune protocol

def test_finetune_selects_best_lr_and_reports():
    ds = heavy_atom_dataset(31, 24)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    tcfg = fast_train_cfg(epochs=3, lr_grid=(1e-3, 1e-5))
    result = finetune(ds, cfg, tcfg)
    assert result.metric_name == "rmse"
    assert result.selected_lr in tcfg.lr_grid
    assert len(result.per_lr) == 2
    valid_ok = [c for c in result.per_lr if not c.diverged]
    best = min(valid_ok, key=lambda c: (c.best_valid, c.lr))
    assert result.selected_lr == best.lr
    # the winning snapshot re-evaluates to its recorded validation score
    assert result.valid_metric == pytest.approx(best.best_valid, rel=1e-8)
    for curve in result.per_lr:
        assert len(curve.epoch_train_losses) == len(curve.valid_metrics)
        assert curve.best_epoch == int(np.argmin(curve.valid_metrics))
    md = result.metrics_dict()
    assert set(md) >= {"task", "metric", "selected_lr", "train", "valid", "test", "grid"}


def test_finetune_same_seed_identical():
    ds = heavy_atom_dataset(32, 16)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    tcfg = fast_train_cfg(epochs=2, lr_grid=(1e-3, 5e-4))
    a = finetune(ds, cfg, tcfg)
    b = finetune(ds, cfg, tcfg)
    assert a.metrics_dict() == b.metrics_dict()
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_finetune_grid_order_invariant():
    ds = heavy_atom_dataset(33, 16)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    a = finetune(ds, cfg, fast_train_cfg(epochs=2, lr_grid=(1e-3, 1e-4)))
    b = finetune(ds, cfg, fast_train_cfg(epochs=2, lr_grid=(1e-4, 1e-3)))
    assert a.selected_lr == b.selected_lr
    assert a.valid_metric == b.valid_metric
    assert a.test_metric == b.test_metric


def test_finetune_parallel_grid_matches_sequential():
    ds = heavy_atom_dataset(34, 16)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    seq = finetune(ds, cfg, fast_train_cfg(epochs=2, lr_grid=(1e-3, 5e-4, 1e-4)))
    par = finetune(
        ds, cfg,
        fast_train_cfg(epochs=2, lr_grid=(1e-3, 5e-4, 1e-4), parallel_grid=True),
    )
    assert seq.metrics_dict() == par.metrics_dict()
    for k in seq.params:
        assert np.array_equal(seq.params[k], par.params[k])


def test_finetune_classification_path():
    mols = conftest.synthetic_corpus(35, 24)
    labels = np.array([[1.0 if m.n_atoms > 5 else 0.0] for m in mols])
    if len(np.unique(labels)) < 2:
        pytest.skip("degenerate synthetic labels")
    ds = molio.Dataset(molecules=mols, labels=labels, label_names=["big"])
    cfg = conftest.tiny_model_config(task="classification", mlp_dropout=0.0)
    result = finetune(ds, cfg, fast_train_cfg(epochs=2))
    assert result.metric_name == "roc_auc"
    assert 0.0 <= result.valid_metric <= 1.0
    assert result.label_transform is None

    bad = molio.Dataset(molecules=mols, labels=labels * 3.0, label_names=["big"])
    with pytest.raises(ValueError):
        finetune(bad, cfg, fast_train_cfg(epochs=1))


def test_finetune_all_diverged_raises():
    ds = heavy_atom_dataset(36, 12)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    with np.errstate(all="ignore"):
        with pytest.raises(NumericError):
            finetune(ds, cfg, fast_train_cfg(epochs=2, lr_grid=(1e100,)))


def test_finetune_label_validation():
    mols = conftest.synthetic_corpus(37, 8)
    labels = np.array([[1.0, 2.0]] * 8)
    ds = molio.Dataset(molecules=mols, labels=labels, label_names=["a", "b"])
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    with pytest.raises(ValueError):
        finetune(ds, cfg, fast_train_cfg())
    nan_ds = heavy_atom_dataset(38, 8)
    nan_ds.labels[2, 0] = np.nan
    with pytest.raises(ValueError):
        finetune(nan_ds, cfg, fast_train_cfg())


def test_finetune_init_params_restore():
    ds = heavy_atom_dataset(39, 16)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    donor = model.RMATModel(cfg, rng=np.random.default_rng(777))
    encoder_only = {
        k: v for k, v in donor.param_dict().items() if not k.startswith("head.")
    }
    result = finetune(ds, cfg, fast_train_cfg(epochs=1), init_params=encoder_only)
    assert math.isfinite(result.valid_metric)


def test_cross_validate_aggregates():
    ds = heavy_atom_dataset(40, 16)
    cfg = conftest.tiny_model_config(mlp_dropout=0.0)
    tcfg = fast_train_cfg(epochs=1, n_splits=3)
    report, results = cross_validate(ds, cfg, tcfg)
    assert report.n_splits == 3 and len(results) == 3
    for name in ("train", "valid", "test"):
        vals = report.per_split[name]
        assert len(vals) == 3
        assert report.mean[name] == pytest.approx(float(np.mean(vals)))
        assert report.std[name] == pytest.approx(float(np.std(vals)))
    # different splits actually differ
    assert len({r.valid_metric for r in results}) > 1


def test_train_config_validation_and_grid():
    assert train.PAPER_LR_GRID == (1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
    assert len(train.PAPER_LR_GRID) == 7
    assert TrainConfig().lr_grid == train.PAPER_LR_GRID
    with pytest.raises(ValueError):
        TrainConfig(lr_grid=())
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(n_splits=0)
