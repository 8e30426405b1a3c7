"""Config-driven experiment runner.

Verbs: run (one experiment end to end), sweep (grid over one knob),
inspect (container header), metrics (diversity/discriminability of a
stored container). Artifacts per run: the reduced-dataset container, a
JSON report with per-seed results, and a summary CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from drupi import config as CFG
from drupi import coreset as C
from drupi import data as D
from drupi import distill as DI
from drupi import lupi as L
from drupi import models as M
from drupi import privileged as P
from drupi import rng as R
from drupi.config import ConfigError, ExperimentConfig

CSV_COLUMNS = [
    "config_hash", "seed", "init", "backend", "lambda_reg", "lambda_task",
    "n_feat", "accuracy", "grad_cosine", "diversity", "discriminability",
    "wall_time_s", "error",
]

SWEEP_PARAMS = ("lambda_task", "lambda_reg", "n_feat", "tap")


def _model_spec(cfg: ExperimentConfig) -> M.ModelSpec:
    return M.ModelSpec(
        family=cfg.model.family, depth=cfg.model.depth, width=cfg.model.width,
        input_shape=tuple(cfg.data.image_size), classes=cfg.data.classes,
    ).validate()


def _loss_cfg(cfg: ExperimentConfig) -> P.DrupiLossConfig:
    return P.DrupiLossConfig(
        lambda_reg=cfg.privileged.lambda_reg,
        lambda_task=cfg.privileged.lambda_task,
        lambda_soft=cfg.privileged.lambda_soft,
        aggregation=cfg.privileged.aggregation,
        soft_temperature=cfg.privileged.soft_temperature,
    ).validate()


def _tap(cfg: ExperimentConfig):
    return None if cfg.privileged.tap == 0 else cfg.privileged.tap


def build_datasets(cfg: ExperimentConfig):
    if cfg.data.source == "idx":
        train = D.load_idx(cfg.data.train_images, cfg.data.train_labels).validate()
        test = D.load_idx(cfg.data.test_images, cfg.data.test_labels).validate(training=False)
        return train, test
    d = cfg.data
    spec = D.BlobSpec(classes=d.classes, per_class=d.per_class, size=tuple(d.image_size),
                      template_seed=d.template_seed, sigma=d.sigma,
                      class_sep=d.class_sep, smoothness=d.smoothness)
    train = D.make_blobs(spec, seed=R.stream_seed(cfg.master_seed, "noise", 0))
    test_spec = replace(spec, per_class=d.test_per_class)
    test = D.make_blobs(test_spec, seed=R.stream_seed(cfg.master_seed, "noise", 1))
    return train, test


def build_reduced(cfg: ExperimentConfig, train: D.LabeledDataset) -> D.ReducedDataset:
    """Selection/initialization, privileged channels, and synthesis."""
    spec = _model_spec(cfg)
    loss = _loss_cfg(cfg)
    tap = _tap(cfg)
    r = cfg.reduce
    p = cfg.privileged
    ipc = r.ipc if r.ipc > 0 else D.ipc_from_fraction(train, r.fraction)
    sel_seed = R.stream_seed(cfg.master_seed, "init", 0)

    if r.init in ("random", "dc", "dm"):
        idx = C.select_random(train, ipc, seed=sel_seed)
    elif r.init in ("herding", "kcenter"):
        scorer = C.train_proxy(train, spec=spec, epochs=r.score_epochs, lr=0.1,
                               seed=R.stream_seed(cfg.master_seed, "model-init", 0))
        feats = C.extractor_features(train, scorer)
        if r.init == "herding":
            idx = C.select_herding(feats, train.labels, ipc)
        else:
            idx = C.select_kcenter(feats, train.labels, ipc, seed=sel_seed)
    else:
        idx = C.select_forgetting(train, ipc, epochs=max(r.score_epochs, 2),
                                  seed=R.stream_seed(cfg.master_seed, "model-init", 0),
                                  spec=spec, lr=0.1)
    DS = D.subset(train, idx, provenance={"init": r.init, "ipc": ipc})

    teacher = None
    if p.feature_init == "assign" or p.lambda_soft > 0:
        teacher = C.train_proxy(train, spec=spec, epochs=p.teacher_epochs,
                                lr=p.teacher_lr,
                                seed=R.stream_seed(cfg.master_seed, "model-init", 1))

    if p.feature_init == "weak-model":
        weak = C.train_proxy(train, spec=spec, epochs=1, lr=0.05,
                             seed=R.stream_seed(cfg.master_seed, "model-init", 2))
        DS.feature_sets = P.init_features(
            DS, "weak-model", seed=R.stream_seed(cfg.master_seed, "noise", 2),
            n_feat=p.n_feat, weak_model=weak, tap=tap)
    elif p.feature_init == "noise":
        DS.feature_sets = P.init_features(
            DS, "noise", seed=R.stream_seed(cfg.master_seed, "noise", 2),
            n_feat=p.n_feat, feature_shape=spec.feature_shape(tap))
    elif p.feature_init == "assign":
        DS.feature_sets = np.repeat(P.assign_features(DS, teacher, tap=tap),
                                    p.n_feat, axis=1)

    update_images = {"auto": r.init in ("dc", "dm"),
                     "true": True, "false": False}[r.update_images]
    synthesize = p.feature_init in ("weak-model", "noise") or r.init in ("dc", "dm")
    if synthesize:
        bi = DI.BiLevelConfig(
            model_spec=spec, loss=loss, outer_steps=r.outer_steps,
            inner_steps=r.inner_steps, model_lr=r.model_lr, data_lr=r.data_lr,
            batch_real=r.batch_real, batch_syn=r.batch_syn, backend=r.backend,
            update_images=update_images, tap=tap,
        )
        DS = DI.run_synthesis(train, DS, bi, seed=cfg.master_seed)

    if p.attention != "none":
        if DS.feature_sets is None:
            raise ConfigError("[privileged] attention labels need feature labels")
        DS.attention_labels = P.pool_attention(DS.feature_sets.mean(axis=1), p.attention)
        DS.attention_kind = p.attention
        DS.feature_sets = None      # the pooled label is the stored artifact

    if p.lambda_soft > 0:
        DS.soft_labels = P.soft_labels(DS, teacher, temperature=p.soft_temperature)

    DS.provenance.update(config_hash=cfg.config_hash, master_seed=cfg.master_seed)
    return DS.validate()


def dataset_metrics(DS: D.ReducedDataset):
    """Diversity/discriminability when computable, else (None, None)."""
    if DS.feature_sets is None:
        return None, None
    counts = np.bincount(DS.labels)
    if len(counts) < 2 or counts.min() < 2:
        return None, None
    div, disc = P.diversity_discriminability(DS.feature_sets, DS.labels, seed=0)
    return div, disc


def evaluate_run(cfg: ExperimentConfig, DS: D.ReducedDataset,
                 train: D.LabeledDataset, test: D.LabeledDataset):
    """Per-seed LUPI training, accuracy, and alignment diagnostics."""
    spec = _model_spec(cfg)
    loss = _loss_cfg(cfg)
    tap = _tap(cfg)
    div, disc = dataset_metrics(DS)
    rows, reports = [], []
    failed = False
    for s in cfg.seeds:
        t0 = time.time()
        row = {
            "config_hash": cfg.config_hash, "seed": s, "init": cfg.reduce.init,
            "backend": cfg.reduce.backend, "lambda_reg": cfg.privileged.lambda_reg,
            "lambda_task": cfg.privileged.lambda_task, "n_feat": cfg.privileged.n_feat,
            "accuracy": "", "grad_cosine": "", "diversity": _fmt(div),
            "discriminability": _fmt(disc), "wall_time_s": "", "error": "",
        }
        try:
            state = L.train_lupi(DS, spec, loss, epochs=cfg.eval.epochs,
                                 lr=cfg.eval.lr, seed=s, tap=tap)
            acc = L.evaluate(state, test)
            probe = C.train_proxy(train, spec=spec, epochs=cfg.eval.probe_epochs,
                                  lr=cfg.eval.probe_lr,
                                  seed=R.stream_seed(cfg.master_seed, "eval", s))
            align = L.gradient_alignment(DS, train, probe, loss, tap=tap)
            row["accuracy"] = f"{acc:.6f}"
            row["grad_cosine"] = f"{align['with_pi']:.6f}"
            reports.append({"seed": s, "accuracy": acc, "alignment": align})
        except Exception as e:   # partial failure turns into an error row
            row["error"] = f"{type(e).__name__}: {e}"
            failed = True
        row["wall_time_s"] = f"{time.time() - t0:.2f}"
        rows.append(row)

    accs = [r["accuracy"] for r in rows if r["accuracy"] != ""]
    agg = dict(rows[0])
    agg.update(seed="mean", wall_time_s="", error="")
    agg["accuracy"] = f"{np.mean([float(a) for a in accs]):.6f}" if accs else ""
    cosines = [r["grad_cosine"] for r in rows if r["grad_cosine"] != ""]
    agg["grad_cosine"] = f"{np.mean([float(c) for c in cosines]):.6f}" if cosines else ""
    rows.append(agg)
    return rows, reports, failed


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_csv(path, rows, extra_cols=()):
    cols = list(extra_cols) + CSV_COLUMNS
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def execute(cfg: ExperimentConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = build_datasets(cfg)
    DS = build_reduced(cfg, train)
    D.save_reduced(DS, out_dir / "reduced.drpi")
    rows, reports, failed = evaluate_run(cfg, DS, train, test)
    write_csv(out_dir / "summary.csv", rows)
    (out_dir / "report.json").write_text(json.dumps(
        {"config_hash": cfg.config_hash, "seeds": reports}, indent=2))
    (out_dir / "config.resolved.ini").write_text(CFG.dump_config(cfg))
    return rows, failed


# --- verbs ------------------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        cfg = CFG.load_config(args.config)
        if args.seed is not None:
            cfg.master_seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        cfg.validate()
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(CFG.dump_config(cfg))
        print(f"config_hash = {cfg.config_hash}")
        return 0
    rows, failed = execute(cfg, Path(cfg.out_dir))
    print(f"wrote {cfg.out_dir}/summary.csv ({len(rows)} rows)")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    try:
        base = CFG.load_config(args.config)
        if args.seed is not None:
            base.master_seed = args.seed
        if args.out:
            base.out_dir = args.out
        base.validate()
        if args.param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}")
        values = [v.strip() for v in args.values.split(",") if v.strip() != ""]
        if not values:
            raise ConfigError("sweep values must be non-empty")
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    def point_config(value: str) -> ExperimentConfig:
        cfg = CFG.load_config(args.config)
        if args.seed is not None:
            cfg.master_seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        if args.param in ("lambda_task", "lambda_reg"):
            setattr(cfg.privileged, args.param, float(value))
        elif args.param == "n_feat":
            cfg.privileged.n_feat = int(value)
        else:
            cfg.privileged.tap = int(value)
        cfg.out_dir = str(Path(cfg.out_dir) / f"{args.param}_{value}")
        return cfg.validate()

    if args.dry_run:
        for v in values:
            cfg = point_config(v)
            print(f"{args.param}={v}: out={cfg.out_dir} hash={cfg.config_hash}")
        return 0

    workforce = int(os.environ.get("DRUPI_THREADS", "0")) or min(2, len(values))
    points = [point_config(v) for v in values]
    results = {}
    with ThreadPoolExecutor(max_workers=workforce) as pool:
        futures = {v: pool.submit(execute, cfg, Path(cfg.out_dir))
                   for v, cfg in zip(values, points)}
        for v in values:                      # single writer, grid order
            results[v] = futures[v].result()

    all_rows, failed = [], False
    for v in values:
        rows, f = results[v]
        failed |= f
        for row in rows:
            row = dict(row)
            row.update(param=args.param, value=v)
            all_rows.append(row)
    out = Path(args.out or base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", all_rows, extra_cols=("param", "value"))
    print(f"wrote {out}/sweep.csv ({len(all_rows)} rows)")
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    try:
        header = D.read_header(args.container)
    except (D.DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(header, indent=2, sort_keys=True))
    return 0


def cmd_metrics(args) -> int:
    try:
        DS = D.load_reduced(args.container)
    except (D.DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    div, disc = dataset_metrics(DS)
    if div is None:
        print("metrics unavailable: need feature labels and >= 2 examples per class",
              file=sys.stderr)
        return 1
    print("diversity,discriminability")
    print(f"{div:.6f},{disc:.6f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="drupi",
                                     description="dataset reduction with privileged information")
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None, help="override master_seed")
    run_p.add_argument("--out", default=None, help="override out_dir")
    run_p.add_argument("--dry-run", action="store_true")
    run_p.set_defaults(fn=cmd_run)

    sweep_p = sub.add_parser("sweep", help="grid over one knob")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sweep_p.add_argument("--values", required=True, help="comma-separated grid")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--out", default=None)
    sweep_p.add_argument("--dry-run", action="store_true")
    sweep_p.set_defaults(fn=cmd_sweep)

    ins_p = sub.add_parser("inspect", help="print a container's JSON header")
    ins_p.add_argument("container")
    ins_p.set_defaults(fn=cmd_inspect)

    met_p = sub.add_parser("metrics", help="diversity/discriminability of a container")
    met_p.add_argument("container")
    met_p.set_defaults(fn=cmd_metrics)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
