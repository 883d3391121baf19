"""Command line entry point (installed as `rmat`).

Subcommands:
  featurize       molecules -> plain-text feature dumps
  pretrain        corpus -> pretrained encoder checkpoint + artifacts
  finetune        labeled CSV -> trained model, metrics, summary
  evaluate        labeled CSV + checkpoint -> metrics + predictions
  attention-dump  one molecule + checkpoint -> attention weight CSVs
  gridsearch      labeled CSV + matrix config -> per-point runs + summary

Config files are flat "key = value" lines ('#' starts a comment).
Unknown keys are rejected; the fully resolved configuration is echoed
into metrics files, checkpoints, and the run manifest. In a gridsearch
config, scalar keys may hold comma-separated values, which become
search axes.

Every command writes <out>/manifest.json recording the command line,
resolved config, input/output hashes, and wall time (the manifest is
the only place timing appears, so result files stay byte-stable).

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numeric failure. RMAT_THREADS caps worker pools (featurize,
gridsearch --parallel).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import itertools
import json
import os
import sys
import time
import warnings

import numpy as np

from . import autodiff as ad
from . import featurize as feat_mod
from . import model as model_mod
from . import molio
from . import pretrain as pretrain_mod
from . import train as train_mod


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Flat configuration schema

_MODEL_KEYS = {
    "n_layers": "int",
    "n_heads": "int",
    "d_model": "int",
    "relation_hidden": "int",
    "ffn_hidden": "int",
    "pool_heads": "int",
    "pool_hidden": "int",
    "mlp_hidden": "int",
    "mlp_dropout": "float",
    "variant": "str",
    "task": "str",
    "extra_feature_dim": "int",
    "max_neighbor_order": "int",
    "mat_lambda_a": "float",
    "mat_lambda_d": "float",
    "mat_lambda_g": "float",
    "mat_distance_g": "str",
    "seed": "int",
}

_DISTANCE_KEYS = {
    "cutoff": "float",
    "n_emb": "int",
    "envelope_p": "int",
    "distance_encoding": "str",
}

_TRAIN_KEYS = {
    "epochs": "int",
    "batch_size": "int",
    "warmup_fraction": "float",
    "lr_grid": "float_list",
    "normalize_labels": "bool",
    "train_frac": "float",
    "valid_frac": "float",
    "test_frac": "float",
    "n_splits": "int",
    "max_steps": "int",
    "parallel_grid": "bool",
}

_PRETRAIN_KEYS = {
    "stages": "str_list",
    "mask_rate": "float",
    "pretrain_epochs": "int",
    "pretrain_batch_size": "int",
    "pretrain_lr": "float",
    "pretrain_warmup_fraction": "float",
    "pretrain_valid_fraction": "float",
}

SCHEMA = {**_MODEL_KEYS, **_DISTANCE_KEYS, **_TRAIN_KEYS, **_PRETRAIN_KEYS}

_LIST_TYPES = ("float_list", "str_list")


def default_config() -> dict:
    m = model_mod.ModelConfig()
    t = train_mod.TrainConfig()
    p = pretrain_mod.PretrainConfig()
    d = m.distance
    return {
        "n_layers": m.n_layers,
        "n_heads": m.n_heads,
        "d_model": m.d_model,
        "relation_hidden": m.relation_hidden,
        "ffn_hidden": m.ffn_hidden,
        "pool_heads": m.pool_heads,
        "pool_hidden": m.pool_hidden,
        "mlp_hidden": m.mlp_hidden,
        "mlp_dropout": m.mlp_dropout,
        "variant": m.variant,
        "task": m.task,
        "extra_feature_dim": m.extra_feature_dim,
        "max_neighbor_order": m.max_neighbor_order,
        "mat_lambda_a": m.mat_lambdas[0],
        "mat_lambda_d": m.mat_lambdas[1],
        "mat_lambda_g": m.mat_lambdas[2],
        "mat_distance_g": m.mat_distance_g,
        "seed": m.seed,
        "cutoff": d.cutoff,
        "n_emb": d.n_emb,
        "envelope_p": d.envelope_p,
        "distance_encoding": d.encoding,
        "epochs": t.epochs,
        "batch_size": t.batch_size,
        "warmup_fraction": t.warmup_fraction,
        "lr_grid": list(t.lr_grid),
        "normalize_labels": t.normalize_labels,
        "train_frac": t.split_fracs[0],
        "valid_frac": t.split_fracs[1],
        "test_frac": t.split_fracs[2],
        "n_splits": t.n_splits,
        "max_steps": t.max_steps,
        "parallel_grid": t.parallel_grid,
        "stages": list(p.stages),
        "mask_rate": p.mask_rate,
        "pretrain_epochs": p.epochs,
        "pretrain_batch_size": p.batch_size,
        "pretrain_lr": p.peak_lr,
        "pretrain_warmup_fraction": p.warmup_fraction,
        "pretrain_valid_fraction": p.valid_fraction,
    }


def _parse_scalar(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def _parse_value(key: str, raw: str):
    kind = SCHEMA[key]
    if kind == "float_list":
        return [_parse_scalar(key, "float", v) for v in raw.split(",") if v.strip()]
    if kind == "str_list":
        return [v.strip() for v in raw.split(",") if v.strip()]
    return _parse_scalar(key, kind, raw)


def parse_config_file(path: str, matrix: bool = False) -> dict:
    """Read overrides from a config file.

    matrix=False: scalar keys take single values (a comma is an error).
    matrix=True: scalar keys may take comma-separated value lists, which
    become search axes; every value comes back as a list.
    """
    out: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for no, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{no}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{no}: duplicate config key {key!r}")
        kind = SCHEMA[key]
        if kind in _LIST_TYPES:
            out[key] = [_parse_value(key, raw)] if matrix else _parse_value(key, raw)
        elif matrix:
            out[key] = [_parse_scalar(key, kind, v) for v in raw.split(",") if v.strip()]
            if not out[key]:
                raise ConfigError(f"{path}:{no}: empty value for {key!r}")
        else:
            if "," in raw:
                raise ConfigError(
                    f"{path}:{no}: comma lists for {key!r} are only valid in a "
                    "gridsearch matrix config"
                )
            out[key] = _parse_value(key, raw)
    return out


def resolve_config(overrides: dict | None) -> dict:
    cfg = default_config()
    if overrides:
        cfg.update(overrides)
    return cfg


def _resolved(args) -> dict:
    """Config file plus flag overrides (--seed, --variant)."""
    cfg = resolve_config(
        parse_config_file(args.config) if getattr(args, "config", None) else None
    )
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        cfg["variant"] = args.variant
    return cfg


def build_model_config(cfg: dict) -> model_mod.ModelConfig:
    try:
        return model_mod.ModelConfig(
            n_layers=cfg["n_layers"],
            n_heads=cfg["n_heads"],
            d_model=cfg["d_model"],
            relation_hidden=cfg["relation_hidden"],
            ffn_hidden=cfg["ffn_hidden"],
            pool_heads=cfg["pool_heads"],
            pool_hidden=cfg["pool_hidden"],
            mlp_hidden=cfg["mlp_hidden"],
            mlp_dropout=cfg["mlp_dropout"],
            variant=cfg["variant"],
            task=cfg["task"],
            extra_feature_dim=cfg["extra_feature_dim"],
            max_neighbor_order=cfg["max_neighbor_order"],
            mat_lambdas=(cfg["mat_lambda_a"], cfg["mat_lambda_d"], cfg["mat_lambda_g"]),
            mat_distance_g=cfg["mat_distance_g"],
            seed=cfg["seed"],
            distance=feat_mod.DistanceConfig(
                cutoff=cfg["cutoff"],
                n_emb=cfg["n_emb"],
                envelope_p=cfg["envelope_p"],
                encoding=cfg["distance_encoding"],
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(cfg: dict) -> train_mod.TrainConfig:
    try:
        return train_mod.TrainConfig(
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            warmup_fraction=cfg["warmup_fraction"],
            lr_grid=tuple(cfg["lr_grid"]),
            seed=cfg["seed"],
            normalize_labels=cfg["normalize_labels"],
            split_fracs=(cfg["train_frac"], cfg["valid_frac"], cfg["test_frac"]),
            n_splits=cfg["n_splits"],
            max_steps=cfg["max_steps"],
            parallel_grid=cfg["parallel_grid"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_pretrain_config(cfg: dict) -> pretrain_mod.PretrainConfig:
    try:
        return pretrain_mod.PretrainConfig(
            stages=tuple(cfg["stages"]),
            epochs=cfg["pretrain_epochs"],
            batch_size=cfg["pretrain_batch_size"],
            peak_lr=cfg["pretrain_lr"],
            warmup_fraction=cfg["pretrain_warmup_fraction"],
            mask_rate=cfg["mask_rate"],
            valid_fraction=cfg["pretrain_valid_fraction"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def worker_count() -> int:
    raw = os.environ.get("RMAT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RMAT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"RMAT_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# Inputs, outputs, manifest

def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(
    out_dir: str,
    command: str,
    argv,
    config: dict,
    inputs,
    outputs,
    t0: float,
    config_path: str | None = None,
) -> str:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_path": config_path,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": {
            os.path.relpath(p, out_dir): _sha256(p) for p in sorted(outputs)
        },
        "wall_time_s": time.time() - t0,
    }
    path = os.path.join(out_dir, "manifest.json")
    _write_json(path, manifest)
    return path


def _detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".sdf":
        return "sdf"
    if ext == ".csv":
        return "csv"
    if ext in (".smi", ".smiles"):
        return "smiles"
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            head = fh.read(4096)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if "V2000" in head or "$$$$" in head:
        return "sdf"
    first = head.splitlines()[0] if head.splitlines() else ""
    if "," in first and ("smiles" in first or "sdf_path" in first):
        return "csv"
    return "smiles"


def load_molecules(path: str, fmt: str = "auto", errors: list | None = None):
    """Read molecules from SDF, SMILES lines, or a dataset CSV.

    Per-record failures are appended to `errors` as strings.
    """
    if fmt == "auto":
        fmt = _detect_format(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if fmt == "sdf":
        sdf_errors: list = []
        mols = molio.parse_sdf(text, errors=sdf_errors)
        if errors is not None:
            errors.extend(str(e) for e in sdf_errors)
        return mols, fmt
    if fmt == "csv":
        try:
            dataset = molio.read_dataset_csv(path)
        except molio.DatasetError as exc:
            raise DataError(str(exc)) from exc
        return list(dataset.molecules), fmt
    mols = []
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        # '#' is the triple-bond character, so only whole-line comments
        if not body or body.startswith("#"):
            continue
        parts = body.split(None, 1)
        try:
            mol = molio.parse_smiles(parts[0])
        except molio.SmilesError as exc:
            if errors is not None:
                errors.append(f"{path}:{no}: {exc}")
            else:
                warnings.warn(f"{path}:{no}: {exc}", stacklevel=2)
            continue
        if len(parts) > 1:
            mol.name = parts[1].strip()
        mols.append(mol)
    return mols, fmt


def _read_dataset(path: str):
    try:
        return molio.read_dataset_csv(path)
    except molio.DatasetError as exc:
        raise DataError(str(exc)) from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _load_checkpoint(path: str):
    try:
        return ad.load_checkpoint(path)
    except (ad.CheckpointError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _model_from_checkpoint(params: dict, ckpt_cfg: dict) -> model_mod.RMATModel:
    if "model" not in ckpt_cfg:
        raise DataError("checkpoint carries no model configuration")
    model_cfg = model_mod.ModelConfig.from_dict(ckpt_cfg["model"])
    net = model_mod.RMATModel(model_cfg)
    own = {p.name for p in net.parameters()}
    covered = set(params) & own
    needed = {n for n in own if not n.startswith("head.")}
    if not needed <= set(params):
        missing = sorted(needed - set(params))
        raise DataError(f"checkpoint missing encoder parameters: {missing[:4]}...")
    net.load_param_dict({k: v for k, v in params.items() if k in own}, strict=False)
    if not {n for n in own if n.startswith("head.")} <= covered:
        warnings.warn("checkpoint has no prediction head; head stays at init")
    return net


# ---------------------------------------------------------------------------
# Subcommands

def cmd_featurize(args, argv) -> int:
    t0 = time.time()
    cfg = _resolved(args)
    model_cfg = build_model_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    errors: list = []
    mols, fmt = load_molecules(args.input, args.fmt, errors=errors)

    outputs = []
    err_path = os.path.join(args.out, "featurize_errors.log")
    with open(err_path, "w", encoding="utf-8") as fh:
        for line in errors:
            fh.write(line + "\n")
    outputs.append(err_path)

    if not mols and not errors:
        warnings.warn(f"{args.input}: no molecules found")
    if not mols and errors:
        print(f"featurize: all {len(errors)} records failed", file=sys.stderr)
        return 2

    def work(mol):
        return feat_mod.prepare_molecule(
            mol, model_cfg.distance, max_order=model_cfg.max_neighbor_order
        )

    workers = min(worker_count(), max(len(mols), 1))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            bundles = list(pool.map(work, mols))
    else:
        bundles = [work(m) for m in mols]

    index_path = os.path.join(args.out, "index.csv")
    with open(index_path, "w", encoding="utf-8") as idx_fh:
        idx_fh.write("index,file,name,atoms_with_dummy\n")
        for i, (mol, bundle) in enumerate(zip(mols, bundles)):
            fname = f"features_{i:05d}.txt"
            fpath = os.path.join(args.out, fname)
            with open(fpath, "w", encoding="utf-8") as fh:
                feat_mod.write_feature_dump(bundle, fh)
            outputs.append(fpath)
            name = mol.name.replace(",", " ")
            idx_fh.write(f"{i},{fname},{name},{bundle.n_atoms}\n")
    outputs.append(index_path)
    write_manifest(args.out, "featurize", argv, cfg, [args.input], outputs, t0,
                   config_path=args.config)
    print(f"featurize: wrote {len(mols)} dumps to {args.out} ({fmt} input)")
    return 0


def cmd_pretrain(args, argv) -> int:
    t0 = time.time()
    cfg = _resolved(args)
    model_cfg = build_model_config(cfg)
    pre_cfg = build_pretrain_config(cfg)
    errors: list = []
    mols, _ = load_molecules(args.input, args.fmt, errors=errors)
    if len(mols) < 2:
        raise DataError(f"{args.input}: pretraining needs at least 2 molecules")
    os.makedirs(args.out, exist_ok=True)

    result = pretrain_mod.pretrain_run(mols, model_cfg, pre_cfg)
    outputs = []
    ckpt_cfg = {
        "kind": "pretrain",
        "model": model_cfg.to_dict(),
        "config": cfg,
        "stages": list(pre_cfg.stages),
    }
    ckpt_path = os.path.join(args.out, "encoder.ckpt")
    ad.save_checkpoint(ckpt_path, result.model.param_dict(), ckpt_cfg)
    outputs.append(ckpt_path)
    for stage, head in result.heads.items():
        spath = os.path.join(args.out, f"head_{stage}.ckpt")
        ad.save_checkpoint(spath, head, {**ckpt_cfg, "stage": stage})
        outputs.append(spath)
    if result.vocab is not None:
        vpath = os.path.join(args.out, "context_vocab.txt")
        result.vocab.save(vpath)
        outputs.append(vpath)
    if result.stats is not None:
        spath = os.path.join(args.out, "descriptor_stats.json")
        _write_json(spath, result.stats.to_dict())
        outputs.append(spath)
    lpath = os.path.join(args.out, "losses.json")
    _write_json(
        lpath,
        {
            "train": result.history,
            "valid": result.valid_history,
        },
    )
    outputs.append(lpath)
    write_manifest(args.out, "pretrain", argv, cfg, [args.input], outputs, t0,
                   config_path=args.config)
    last = {s: (h[-1] if h else None) for s, h in result.history.items()}
    print(f"pretrain: stages {list(pre_cfg.stages)} final losses {last}")
    return 0


def cmd_finetune(args, argv) -> int:
    t0 = time.time()
    cfg = _resolved(args)
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg)
    dataset = _read_dataset(args.input)
    init_params = None
    inputs = [args.input]
    if args.init:
        init_params, _ = _load_checkpoint(args.init)
        inputs.append(args.init)
    os.makedirs(args.out, exist_ok=True)

    try:
        if train_cfg.n_splits > 1:
            report, results = train_mod.cross_validate(
                dataset, model_cfg, train_cfg, init_params=init_params, log=_log
            )
            result = results[0]
            metrics = {
                "task": report.task,
                "metric": report.metric_name,
                "n_splits": report.n_splits,
                "mean": report.mean,
                "std": report.std,
                "per_split": report.per_split,
                "config": cfg,
            }
        else:
            result = train_mod.finetune(
                dataset, model_cfg, train_cfg, init_params=init_params, log=_log
            )
            metrics = {**result.metrics_dict(), "config": cfg}
            metrics["curves"] = [
                {
                    "lr": c.lr,
                    "epoch_train_loss": c.epoch_train_losses,
                    "valid_metric": c.valid_metrics,
                }
                for c in result.per_lr
            ]
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    outputs = []
    mpath = os.path.join(args.out, "metrics.json")
    _write_json(mpath, metrics)
    outputs.append(mpath)
    spath = os.path.join(args.out, "summary.csv")
    with open(spath, "w", encoding="utf-8") as fh:
        fh.write("lr,best_epoch,best_valid,diverged\n")
        for curve in result.per_lr:
            bv = "" if curve.diverged else "%.10g" % curve.best_valid
            fh.write(f"{curve.lr:g},{curve.best_epoch},{bv},{int(curve.diverged)}\n")
    outputs.append(spath)
    ckpt_cfg = {
        "kind": "finetune",
        "model": model_cfg.to_dict(),
        "config": cfg,
        "label_transform": (
            result.label_transform.to_dict() if result.label_transform else None
        ),
        "metric": result.metric_name,
    }
    cpath = os.path.join(args.out, "best.ckpt")
    ad.save_checkpoint(cpath, result.params, ckpt_cfg)
    outputs.append(cpath)
    write_manifest(args.out, "finetune", argv, cfg, inputs, outputs, t0,
                   config_path=args.config)
    print(
        f"finetune: {result.metric_name} valid {result.valid_metric:.6g} "
        f"test {result.test_metric:.6g} (lr {result.selected_lr:g})"
    )
    return 0


def cmd_evaluate(args, argv) -> int:
    t0 = time.time()
    params, ckpt_cfg = _load_checkpoint(args.checkpoint)
    net = _model_from_checkpoint(params, ckpt_cfg)
    dataset = _read_dataset(args.input)
    if dataset.labels.shape[1] != 1:
        raise DataError("evaluate expects exactly one label column")
    labels = dataset.labels[:, 0]
    if np.isnan(labels).any():
        raise DataError("evaluate labels contain missing values")
    os.makedirs(args.out, exist_ok=True)

    bundles = model_mod.featurize_dataset(dataset.molecules, net.cfg)
    preds = model_mod.predict_numpy(net, bundles)
    task = net.cfg.task
    if task == "classification":
        preds = 1.0 / (1.0 + np.exp(-preds))
        value = train_mod.roc_auc(preds, labels)
        metric = "roc_auc"
    else:
        lt = ckpt_cfg.get("label_transform")
        if lt:
            preds = train_mod.LabelTransform.from_dict(lt).invert(preds)
        value = train_mod.rmse(preds, labels)
        metric = "rmse"

    outputs = []
    mpath = os.path.join(args.out, "metrics.json")
    _write_json(
        mpath,
        {
            "metric": metric,
            "value": value,
            "count": len(labels),
            "checkpoint_kind": ckpt_cfg.get("kind"),
            "config": ckpt_cfg.get("config", {}),
        },
    )
    outputs.append(mpath)
    ppath = os.path.join(args.out, "predictions.csv")
    with open(ppath, "w", encoding="utf-8") as fh:
        fh.write("index,label,prediction\n")
        for i, (lab, pred) in enumerate(zip(labels, preds)):
            fh.write("%d,%.17g,%.17g\n" % (i, lab, pred))
    outputs.append(ppath)
    write_manifest(
        args.out,
        "evaluate",
        argv,
        ckpt_cfg.get("config", {}),
        [args.input, args.checkpoint],
        outputs,
        t0,
    )
    print(f"evaluate: {metric} {value:.6g} over {len(labels)} molecules")
    return 0


def cmd_attention_dump(args, argv) -> int:
    t0 = time.time()
    params, ckpt_cfg = _load_checkpoint(args.checkpoint)
    net = _model_from_checkpoint(params, ckpt_cfg)
    errors: list = []
    mols, _ = load_molecules(args.input, args.fmt, errors=errors)
    if not mols:
        raise DataError(f"{args.input}: no parseable molecule" + (f" ({errors[0]})" if errors else ""))
    mol = mols[0]
    with_dummy = molio.add_dummy_node(mol, net.cfg.distance.cutoff)
    bundle = feat_mod.featurize_molecule(
        with_dummy, net.cfg.distance, max_order=net.cfg.max_neighbor_order
    )
    batch = model_mod.collate([bundle])
    maps = net.attention_maps(batch)

    if args.layer == "all":
        layers = range(len(maps))
    else:
        try:
            li = int(args.layer)
        except ValueError:
            raise ConfigError(f"--layer must be an integer or 'all', got {args.layer!r}") from None
        if not 0 <= li < len(maps):
            raise ConfigError(f"--layer {li} out of range (model has {len(maps)} layers)")
        layers = [li]

    os.makedirs(args.out, exist_ok=True)
    outputs = []
    apath = os.path.join(args.out, "atoms.csv")
    with open(apath, "w", encoding="utf-8") as fh:
        fh.write("index,element,symbol,is_dummy\n")
        for i, atom in enumerate(with_dummy.atoms):
            fh.write(f"{i},{atom.element},{atom.symbol},{int(atom.is_dummy)}\n")
    outputs.append(apath)
    for li in layers:
        for h, mat in enumerate(maps[li]):
            path = os.path.join(args.out, f"attn_layer{li}_head{h}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                for row in mat[0]:
                    fh.write(",".join("%.17g" % v for v in row) + "\n")
            outputs.append(path)
    write_manifest(
        args.out,
        "attention-dump",
        argv,
        ckpt_cfg.get("config", {}),
        [args.input, args.checkpoint],
        outputs,
        t0,
    )
    print(f"attention-dump: wrote {len(outputs) - 1} weight matrices to {args.out}")
    return 0


def _grid_point_run(payload):
    """One gridsearch point; module-level so process pools can pickle it."""
    dataset_path, cfg, index = payload
    dataset = molio.read_dataset_csv(dataset_path)
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg)
    result = train_mod.finetune(dataset, model_cfg, train_cfg)
    return index, result.metrics_dict()


def cmd_gridsearch(args, argv) -> int:
    t0 = time.time()
    if not args.config:
        raise ConfigError("gridsearch requires --config with the search matrix")
    matrix = parse_config_file(args.config, matrix=True)
    base = {k: v[0] for k, v in matrix.items() if len(v) == 1}
    axes = {k: v for k, v in matrix.items() if len(v) > 1}
    for key in axes:
        if SCHEMA[key] in _LIST_TYPES:
            raise ConfigError(f"list-valued key {key!r} cannot be a search axis")
    axis_keys = sorted(axes)
    combos = list(itertools.product(*(axes[k] for k in axis_keys))) or [()]
    _read_dataset(args.input)  # validate before spawning work
    os.makedirs(args.out, exist_ok=True)

    jobs = []
    for idx, combo in enumerate(combos):
        cfg = resolve_config(base)
        cfg.update(dict(zip(axis_keys, combo)))
        jobs.append((args.input, cfg, idx))

    workers = min(worker_count(), len(jobs))
    results: dict = {}
    try:
        if args.parallel and workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                for idx, metrics in pool.map(_grid_point_run, jobs):
                    results[idx] = metrics
        else:
            for payload in jobs:
                idx, metrics = _grid_point_run(payload)
                results[idx] = metrics
    except train_mod.NumericError:
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    outputs = []
    for idx, combo in enumerate(combos):
        pdir = os.path.join(args.out, f"point_{idx:03d}")
        os.makedirs(pdir, exist_ok=True)
        payload = {**results[idx], "point": dict(zip(axis_keys, combo))}
        ppath = os.path.join(pdir, "metrics.json")
        _write_json(ppath, payload)
        outputs.append(ppath)
    spath = os.path.join(args.out, "summary.csv")
    with open(spath, "w", encoding="utf-8") as fh:
        header = ["point", *axis_keys, "metric", "selected_lr", "valid", "test"]
        fh.write(",".join(header) + "\n")
        for idx, combo in enumerate(combos):
            m = results[idx]
            row = [str(idx), *(str(v) for v in combo)]
            row += [m["metric"], "%g" % m["selected_lr"], "%.10g" % m["valid"], "%.10g" % m["test"]]
            fh.write(",".join(row) + "\n")
    outputs.append(spath)
    cfg_echo = resolve_config(base)
    cfg_echo["_axes"] = {k: axes[k] for k in axis_keys}
    write_manifest(args.out, "gridsearch", argv, cfg_echo, [args.input, args.config],
                   outputs, t0, config_path=args.config)
    print(f"gridsearch: {len(combos)} points done, summary at {spath}")
    return 0


def _log(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors to exit code 1
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rmat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, config=True):
        p.add_argument("input", help="input file")
        p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", default=None, help="key = value config file")
            p.add_argument("--seed", type=int, default=None, help="override config seed")
            p.add_argument("--variant", default=None, help="override attention variant")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")
        p.add_argument(
            "--format",
            dest="fmt",
            default="auto",
            choices=("auto", "sdf", "smiles", "csv"),
            help="input format (default: sniff)",
        )

    common(sub.add_parser("featurize", help="write feature dumps"))
    common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p_ft = sub.add_parser("finetune", help="supervised lr-grid training")
    common(p_ft)
    p_ft.add_argument("--init", default=None, help="pretraining checkpoint to start from")
    common(sub.add_parser("evaluate", help="metrics for a checkpoint"), checkpoint=True, config=False)
    p_ad = sub.add_parser("attention-dump", help="dump attention weights")
    common(p_ad, checkpoint=True, config=False)
    p_ad.add_argument("--layer", default="all", help="layer index or 'all'")
    p_gs = sub.add_parser("gridsearch", help="hyperparameter matrix search")
    common(p_gs)
    p_gs.add_argument("--parallel", action="store_true", help="run points in a process pool")
    return parser


_COMMANDS = {
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "attention-dump": cmd_attention_dump,
    "gridsearch": cmd_gridsearch,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args, argv)
    except SystemExit as exc:  # --help lands here
        return 0 if not exc.code else 1
    except ConfigError as exc:
        print(f"rmat: config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, molio.MoleculeError, molio.SmilesError, molio.DatasetError) as exc:
        print(f"rmat: data error: {exc}", file=sys.stderr)
        return 2
    except train_mod.NumericError as exc:
        print(f"rmat: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
