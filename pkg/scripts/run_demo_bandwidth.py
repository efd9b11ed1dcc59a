"""Run the three-node bandwidth experiment and print the dwell mix.

Usage: python3 scripts/run_demo_bandwidth.py [--out DIR] [--rates table2|fig6]
"""
import argparse
import time

from edgecloud import scenario as sc


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="also write the output bundle here")
    ap.add_argument("--rates", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    cfg = sc.load(sc.builtin_path("demo_bandwidth"))
    t0 = time.perf_counter()
    r = sc.run(cfg, seed=args.seed, rates=args.rates)
    elapsed = time.perf_counter() - t0
    total = cfg.duration_ms
    print(f"{'node':6} {'mode0':>7} {'mode1':>7} {'mode2':>7}")
    for cam, dwell in sorted(r.dwell_ms.items()):
        print(f"{cam:6} " + " ".join(f"{float(dwell[l]) / total:7.3f}" for l in (0, 1, 2)))
    print(f"measured reduction  {r.reduction_pct:.2f}%")
    print(f"analytic reduction  {float(r.analytic_reduction * 100):.2f}%")
    print(f"wall time           {elapsed:.1f} s")
    if args.out:
        print(f"bundle              {r.write(args.out)}")


if __name__ == "__main__":
    main()
