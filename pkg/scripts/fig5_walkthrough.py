"""Replay the two-camera intrusion scenario and print its command and track timeline."""
import argparse

from edgecloud import scenario as sc


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    r = sc.run(sc.load(sc.builtin_path("demo_fig5")), seed=args.seed)
    timeline = [(float(c.timestamp_ms), f"command {c.camera_id} {c.from_level}->{c.to_level} "
                                        f"({c.cause})") for c in r.cloud.command_log]
    timeline += [(e.timestamp_ms, f"track {e.track_id} {e.kind} via {e.camera_id}")
                 for e in r.cloud.track_events if e.kind != "created"]
    for t, what in sorted(timeline):
        print(f"{t / 1000:8.2f} s  {what}")
    if r.mot is not None:
        m = r.mot
        print(f"MOTA {m.MOTA:.1f}  MOTP {m.MOTP:.1f}  ID switches {m.ID}")
    print(f"bandwidth reduction {r.reduction_pct:.2f}%")


if __name__ == "__main__":
    main()
