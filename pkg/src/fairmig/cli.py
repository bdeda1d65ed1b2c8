"""Command line: train, evaluate, ablate, sweep, compare, synth."""
import argparse
import logging
import sys
from dataclasses import fields

from .config import ExperimentConfig
from .errors import FairMigError
from .graph import SyntheticSpec, generate_synthetic, save_dataset
from . import harness


def _load(args):
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    cfg = ExperimentConfig.from_file(args.config, overrides) if args.config else \
        ExperimentConfig.from_mapping(overrides)
    if getattr(args, "output", None):
        cfg = cfg.with_overrides(output_dir=args.output)
    return cfg


def _parse_grid(items):
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        grid[key.strip()] = [v for v in values.split(",") if v]
    return grid


def _print_table(rows, cols):
    print("\t".join(cols))
    for r in rows:
        print("\t".join(f"{r[c]:.4f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in cols))


def cmd_train(args):
    cfg = _load(args)
    run_dir = harness.run(cfg)
    agg = harness.load_aggregate(run_dir)
    for m in (*harness.METRICS, "positive_rate"):
        print(f"{m:14s} {agg[m]['mean']:.4f} +- {agg[m]['std']:.4f}" if agg[m]["mean"] is not None
              else f"{m:14s} n/a")
    print(f"run directory: {run_dir}")
    return 1 if agg["partial"] else 0


def cmd_evaluate(args):
    results = harness.evaluate(args.run_dir)
    ok = True
    for seed, (rep, same) in sorted(results.items()):
        ok &= same
        print(f"seed {seed}: auc={rep['auc']:.4f} dsp={rep['delta_sp']:.4f} "
              f"deo={rep['delta_eo']:.4f} {'matches' if same else 'DIFFERS from'} saved report")
    return 0 if ok and results else 1


def cmd_ablate(args):
    cfg = _load(args)
    root, table = harness.ablate(cfg)
    _print_table(table, ["variant", *harness.METRICS, "avg_rank"])
    print(f"ablation directory: {root}")
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    grid = _parse_grid(args.grid)
    root, rows = harness.sweep(cfg, grid)
    _print_table(rows, [*grid, "status", "auc_mean", "delta_sp_mean", "delta_eo_mean"])
    print(f"sweep directory: {root}")
    return 0


def cmd_compare(args):
    table = harness.compare(args.run_dirs)
    _print_table(table, ["run", *(c for m in harness.METRICS for c in (m, f"{m}_rank")), "avg_rank"])
    if args.out:
        harness.write_ranking(args.out, table)
    return 0


def cmd_synth(args):
    kw = {}
    for f in fields(SyntheticSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            kw[f.name] = tuple(float(x) for x in v.split(",")) if isinstance(f.default, tuple) else type(f.default)(v)
    g = generate_synthetic(SyntheticSpec(**kw))
    out = save_dataset(g, args.out)
    print(f"wrote {g.n_nodes} nodes, {g.n_edges} edges to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fairmig", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", nargs="?", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--output", help="output directory (default: $FAIRMIG_OUTPUT_ROOT or ./runs)")
        return sp

    with_config(sub.add_parser("train", help="run the configured variant over all seeds")).set_defaults(fn=cmd_train)
    ev = sub.add_parser("evaluate", help="recompute test reports from a run's checkpoints")
    ev.add_argument("run_dir")
    ev.set_defaults(fn=cmd_evaluate)
    with_config(sub.add_parser("ablate", help="run full, wo_* and vanilla variants")).set_defaults(fn=cmd_ablate)
    sw = with_config(sub.add_parser("sweep", help="grid over two hyperparameters"))
    sw.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    sw.set_defaults(fn=cmd_sweep)
    cp = sub.add_parser("compare", help="rank runs on AUC, dSP and dEO")
    cp.add_argument("run_dirs", nargs="+")
    cp.add_argument("--out", help="write the ranking CSV here")
    cp.set_defaults(fn=cmd_compare)
    sy = sub.add_parser("synth", help="write a synthetic biased graph in the dataset file format")
    sy.add_argument("--out", required=True)
    for f in fields(SyntheticSpec):
        sy.add_argument("--" + f.name.replace("_", "-"), dest=f.name)
    sy.set_defaults(fn=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FairMigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
