"""Time the compiled and pure-Python branch-and-bound kernels.

    python benchmarks/bench_solver.py [--m 5] [--instances 20] [--repeat 3]
"""
import argparse
import statistics
import time

from sweepd.workloads import kernels
from sweepd.workloads.assignment import VARIANTS, _mode, generate_instances, options_str


def bench(kernel, instances, mode, repeat):
    best = []
    for _ in range(repeat):
        start = time.perf_counter()
        for inst in instances:
            kernel(inst.costs, mode)
        best.append(time.perf_counter() - start)
    return min(best)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=5)
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if "compiled" not in kernels.BACKENDS:
        print("compiled kernel not built; only the Python backend is available")
    insts = generate_instances(args.m, 2 * args.m - 1, 0, args.instances - 1, args.seed)
    print(f"m={args.m} n={2 * args.m - 1} instances={len(insts)} best of {args.repeat}")
    print(f"{'variant':<14}{'backend':<10}{'seconds':>10}{'speedup':>10}")
    for options in VARIANTS:
        mode = _mode(frozenset(options))
        name = options_str(options)
        times = {b: bench(k, insts, mode, args.repeat)
                 for b, k in sorted(kernels.BACKENDS.items(), reverse=True)}
        # same answers from both backends, or the comparison is meaningless
        outs = {b: [k(i.costs, mode)[::2] for i in insts[:3]]
                for b, k in kernels.BACKENDS.items()}
        assert len({str(v) for v in outs.values()}) == 1, outs
        base = times["python"]
        for b, t in times.items():
            print(f"{name:<14}{b:<10}{t:>10.4f}{base / t:>9.1f}x")
    print(f"median instance nodes (B&B): "
          f"{statistics.median(kernels.get_kernel()(i.costs, 1)[2] for i in insts)}")


if __name__ == "__main__":
    main()
