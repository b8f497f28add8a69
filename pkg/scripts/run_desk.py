"""Build the desk lab and write the experiment grid as a report CSV.

    python scripts/run_desk.py --cache runs/desk --out runs/desk_report.csv
"""

import argparse
import logging
import time

from advlab import evalharness as H
from advlab.desk import DeskConfig, build_desk_lab, desk_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default=None, help="directory for checkpoints and the patch database")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target", type=float, default=0.06)
    ap.add_argument("--out", default="desk_report.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    t0 = time.perf_counter()
    lab = build_desk_lab(DeskConfig(seed=args.seed), cache_dir=args.cache)
    t1 = time.perf_counter()
    report = desk_report(lab, seed=args.seed, target=args.target)
    t2 = time.perf_counter()
    H.emit_report(report, args.out)
    print(f"lab {t1 - t0:.1f}s, experiments {t2 - t1:.1f}s, {len(report.rows)} rows -> {args.out}")


if __name__ == "__main__":
    main()
