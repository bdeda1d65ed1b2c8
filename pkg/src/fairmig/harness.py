"""Two-stage pipeline runner: variants, per-seed artifacts, aggregation,
sweeps, evaluation of saved runs and cross-run ranking."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import __version__
from .config import ExperimentConfig, stream, stream_seed
from .errors import ComparisonError, ConfigError
from .graph import generate_synthetic, load_dataset, make_splits
from .metrics import binarize, fairness_report
from .models import ModelBundle, load_checkpoint, save_checkpoint
from .ssl import (TRACE_COLUMNS, SSLConfig, frozen_start, migrate_until_stable,
                  ssl_stage_train)
from .sup import EPOCH_LOG_COLUMNS, SupConfig, sup_stage_train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS = ("auc", "delta_sp", "delta_eo")
HIGHER_IS_BETTER = {"auc": True, "delta_sp": False, "delta_eo": False}


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("schema_version", *columns))
        for row in rows:
            w.writerow((SCHEMA_VERSION, *(_fmt(row[c]) for c in columns)))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# variant semantics


def stage_settings(cfg):
    """Resolve a variant into (run_stage1, migrate, reweight, lam, beta)."""
    v = cfg.variant
    run_stage1 = v not in ("wo_ssf", "vanilla")
    migrate = v != "wo_mig"
    reweight = v != "wo_wei"
    lam = 0.0 if v in ("vanilla", "wo_mig") else cfg.lam
    beta = 0.0 if v in ("vanilla", "wo_adv") else cfg.beta
    return run_stage1, migrate, reweight, lam, beta


def build_graph(cfg, seed):
    if cfg.dataset:
        g = load_dataset(cfg.dataset)
    else:
        g = generate_synthetic(cfg.synthetic_spec(seed))
    return make_splits(g, cfg.split_fractions, seed=stream_seed(seed, "split"))


def init_bundle(cfg, g, seed):
    return ModelBundle.init(stream(seed, "init"), g.n_features, g.sensitive_index,
                            backbone=cfg.backbone.upper(), hidden_dim=cfg.hidden_dim,
                            out_dim=cfg.out_dim, n_layers=cfg.n_layers, out_act=cfg.out_act,
                            teleport=cfg.appnp_teleport, iterations=cfg.appnp_iterations)


def score_test_split(cfg, g, bundle):
    z = bundle.encoder(g.norm_adj, g.features)
    scores = bundle.classifier(z)[:, 0]
    mask = g.mask("test")
    rep = fairness_report(scores, g.labels, g.sensitive, mask, z, cfg.threshold, "test")
    positive_rate = float(binarize(scores[mask], cfg.threshold).mean())
    return rep, positive_rate


def run_seed(cfg, seed, seed_dir):
    """Both stages for one seed; writes report, logs, trace and checkpoint into ``seed_dir``."""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    g = build_graph(cfg, seed)
    bundle = init_bundle(cfg, g, seed)
    run_stage1, migrate, reweight, lam, beta = stage_settings(cfg)

    convergence = None
    if run_stage1:
        ssl_cfg = SSLConfig(alpha=cfg.alpha, gamma=cfg.gamma, epochs=cfg.ssl_epochs, lr=cfg.lr,
                            weight_decay=cfg.weight_decay, migrate=migrate,
                            migration_every=cfg.migration_every, reweight=reweight)
        ssl_res = ssl_stage_train(g, bundle, ssl_cfg, stream(seed, "shuffle"))
        frozen = ssl_res.state
        if migrate:
            z = bundle.encoder(g.norm_adj, g.features)
            probe = replace(frozen, frozen=False, history=[])
            _, status, rounds = migrate_until_stable(z, probe, cfg.migration_max_rounds)
            convergence = {"status": status, "rounds": rounds}
    else:
        frozen = frozen_start(g.sensitive)
    _write_csv(seed_dir / "migration_trace.csv", TRACE_COLUMNS, frozen.history)
    p_hash = frozen.p_hash()

    sup_cfg = SupConfig(lam=lam, beta=beta, epochs=cfg.sup_epochs,
                        adversary_steps=cfg.adversary_steps, lr=cfg.lr, lr_estimator=cfg.lr,
                        lr_adversary=cfg.lr, weight_decay=cfg.weight_decay,
                        adversary_objective=cfg.adversary_objective, threshold=cfg.threshold,
                        reweight=reweight)
    sup_res = sup_stage_train(g, bundle, frozen, sup_cfg)
    if frozen.p_hash() != p_hash:  # pragma: no cover - contract guard
        raise RuntimeError("frozen pseudo-groups changed during supervised training")
    _write_csv(seed_dir / "epoch_log.csv", EPOCH_LOG_COLUMNS, sup_res.log)

    rep, positive_rate = score_test_split(cfg, g, bundle)
    save_checkpoint(seed_dir / "checkpoint.npz", bundle, seed=seed,
                    extra={"config_hash": cfg.hash(), "variant": cfg.variant})
    n_flips = sum(r["n_flips_0to1"] + r["n_flips_1to0"] for r in frozen.history)
    report = rep.to_dict(
        seed=seed, variant=cfg.variant, config_hash=cfg.hash(), version=__version__,
        dataset=cfg.dataset_id(), backbone=cfg.backbone.upper(), best_epoch=sup_res.best_epoch,
        positive_rate=positive_rate, n_flips=n_flips,
        pseudo_diff_fraction=float(np.mean(frozen.P != g.sensitive)),
        migration_convergence=convergence,
    )
    _dump_json(seed_dir / "report.json", report)
    return report


def aggregate(cfg, reports, errors):
    out = {"schema_version": SCHEMA_VERSION, "version": __version__, "config_hash": cfg.hash(),
           "variant": cfg.variant, "dataset": cfg.dataset_id(), "backbone": cfg.backbone.upper(),
           "seeds": list(cfg.seeds), "n_ok": len(reports), "partial": bool(errors),
           "errors": errors}
    for m in (*METRICS, "positive_rate"):
        vals = np.array([r[m] for r in reports], dtype=np.float64)
        out[m] = {"mean": float(vals.mean()) if vals.size else None,
                  "std": float(vals.std()) if vals.size else None,
                  "median": float(np.median(vals)) if vals.size else None,
                  "values": vals.tolist()}
    return out


def run(cfg, run_dir=None):
    """Run every seed of ``cfg``; returns the run directory."""
    run_dir = Path(run_dir) if run_dir else cfg.resolved_output_dir() / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    reports, errors = [], {}
    for seed in cfg.seeds:
        try:
            reports.append(run_seed(cfg, seed, run_dir / f"seed_{seed}"))
        except Exception as exc:  # noqa: BLE001 - recorded per seed, run continues
            log.error("seed %s failed: %s", seed, exc)
            errors[str(seed)] = f"{type(exc).__name__}: {exc}"
            (run_dir / f"seed_{seed}").mkdir(exist_ok=True)
            (run_dir / f"seed_{seed}" / "error.txt").write_text(traceback.format_exc())
    _dump_json(run_dir / "aggregate.json", aggregate(cfg, reports, errors))
    return run_dir


def load_aggregate(run_dir):
    return json.loads((Path(run_dir) / "aggregate.json").read_text())


def ablate(cfg, root=None, variants=("full", "wo_mig", "wo_adv", "wo_ssf", "wo_wei", "vanilla")):
    root = Path(root) if root else cfg.resolved_output_dir() / f"{cfg.name}_ablation"
    dirs = [run(replace(cfg, variant=v, name=v), root / v) for v in variants]
    table = compare(dirs)
    write_ranking(root / "ranking.csv", table)
    return root, table


# --------------------------------------------------------------------------
# sweeps


def sweep(cfg, grid, root=None):
    """Run one aggregate per grid cell. ``grid`` maps config keys to value lists."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid must be non-empty")
    root = Path(root) if root else cfg.resolved_output_dir() / f"{cfg.name}_sweep"
    root.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        tag = "_".join(f"{k}={v}" for k, v in cell.items())
        row = {**cell, "status": "ok"}
        try:
            cell_cfg = cfg.with_overrides(**{k: str(v) for k, v in cell.items()}, name=tag)
            agg = load_aggregate(run(cell_cfg, root / tag))
            if agg["partial"]:
                row["status"] = "partial"
            for m in (*METRICS, "positive_rate"):
                row[f"{m}_mean"] = agg[m]["mean"]
                row[f"{m}_std"] = agg[m]["std"]
                row[f"{m}_median"] = agg[m]["median"]
        except Exception as exc:  # noqa: BLE001
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
    cols = keys + ["status"] + [f"{m}_{s}" for m in (*METRICS, "positive_rate")
                                for s in ("mean", "std", "median")]
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["schema_version", *cols])
        w.writeheader()
        for row in rows:
            w.writerow({"schema_version": SCHEMA_VERSION, **{c: row.get(c, "") for c in cols}})
    return root, rows


# --------------------------------------------------------------------------
# evaluation and comparison


def evaluate(run_dir):
    """Recompute each seed's test report from its checkpoint.

    Returns ``{seed: (report_dict, matches_saved)}``.
    """
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_file(run_dir / "config.txt")
    out = {}
    for seed in cfg.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        if not (seed_dir / "checkpoint.npz").exists():
            continue
        g = build_graph(cfg, seed)
        bundle, _, header = load_checkpoint(seed_dir / "checkpoint.npz")
        rep, positive_rate = score_test_split(cfg, g, bundle)
        saved = json.loads((seed_dir / "report.json").read_text())
        fresh = rep.to_dict()
        fresh["positive_rate"] = positive_rate
        same = all(saved[k] == fresh[k] for k in (*METRICS, "group_stats", "positive_rate"))
        out[seed] = (fresh, same)
    return out


def compare(run_dirs):
    """Per-metric ranks (1 = best, ties averaged) and average rank across runs."""
    if len(run_dirs) < 2:
        raise ComparisonError("compare needs at least two runs")
    aggs = [load_aggregate(d) for d in run_dirs]
    for a in aggs[1:]:
        if a["dataset"] != aggs[0]["dataset"] or a["backbone"] != aggs[0]["backbone"]:
            raise ComparisonError("runs differ in dataset or backbone")
    table = [{"run": str(d), "variant": a["variant"]} for d, a in zip(run_dirs, aggs)]
    ranks = []
    for m in METRICS:
        vals = np.array([a[m]["mean"] for a in aggs], dtype=np.float64)
        r = rankdata(-vals if HIGHER_IS_BETTER[m] else vals)
        ranks.append(r)
        for row, v, rk in zip(table, vals, r):
            row[m] = float(v)
            row[f"{m}_rank"] = float(rk)
    avg = np.mean(ranks, axis=0)
    for row, a in zip(table, avg):
        row["avg_rank"] = float(a)
    return table


def write_ranking(path, table):
    cols = ["run", "variant", *(c for m in METRICS for c in (m, f"{m}_rank")), "avg_rank"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["schema_version", *cols])
        w.writeheader()
        for row in table:
            w.writerow({"schema_version": SCHEMA_VERSION, **row})
