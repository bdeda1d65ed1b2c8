"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--nodes 2000] [--dim 16] [--repeat 50]

Also times one full training run under the active backend; run it again with
FAIRMIG_DISABLE_NUMBA=1 to time the pure numpy path end to end.
"""
import argparse
import time
import timeit

import numpy as np

from fairmig import _accel
from fairmig.graph import SyntheticSpec, generate_synthetic


def best_of(fn, repeat):
    fn()  # warm-up (triggers compilation for numba)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args()

    g = generate_synthetic(SyntheticSpec(n_nodes=args.nodes, seed=0))
    rng = np.random.default_rng(0)
    adj = g.norm_adj
    z = rng.standard_normal((args.nodes, args.dim))
    z2 = rng.standard_normal((args.nodes, args.dim))
    groups = g.sensitive
    fwd = _accel.row_cosine_numpy(z, z2, 1e-12)
    gvec = rng.standard_normal(args.nodes)
    q = fwd[0]

    cases = {
        "spmm": lambda impl: impl(adj, z),
        "row_cosine": lambda impl: impl(z, z2, 1e-12),
        "row_cosine_backward": lambda impl: impl(z, z2, *fwd, gvec),
        "group_sums": lambda impl: impl(z, groups, 2),
        "group_mean_std": lambda impl: impl(q, groups, 2),
    }
    print(f"backend in use: {_accel.BACKEND}; n={args.nodes}, d={args.dim}, edges={g.n_edges}")
    print(f"{'kernel':22s} {'numpy (us)':>11s} {'numba (us)':>11s} {'speedup':>8s}")
    for name, call in cases.items():
        t_np = best_of(lambda: call(getattr(_accel, f"{name}_numpy")), args.repeat)
        if hasattr(_accel, f"{name}_numba"):
            t_nb = best_of(lambda: call(getattr(_accel, f"{name}_numba")), args.repeat)
            print(f"{name:22s} {t_np * 1e6:11.1f} {t_nb * 1e6:11.1f} {t_np / t_nb:7.2f}x")
        else:
            print(f"{name:22s} {t_np * 1e6:11.1f} {'n/a':>11s}")

    if not args.skip_training:
        from fairmig import harness
        from fairmig.config import ExperimentConfig
        import tempfile
        cfg = ExperimentConfig.from_mapping({"synth_n_nodes": str(args.nodes), "seeds": "0"})
        with tempfile.TemporaryDirectory() as tmp:
            t0 = time.perf_counter()
            harness.run(cfg, tmp)
            print(f"full two-stage run (200 + 500 epochs), backend {_accel.BACKEND}: "
                  f"{time.perf_counter() - t0:.2f}s")


if __name__ == "__main__":
    main()
