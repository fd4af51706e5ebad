"""Multi-seed vanilla KD vs GKD-CLS (with and without student dropout).

    python scripts/trend_study.py --out runs/trend --seeds 0 1 2 3 4

Prints per-run rows and per-variant medians; everything is also written to
<out>/trend.csv and <out>/trend.json.
"""

import argparse
import json
import logging

from gkdlab.harness.config import load_config
from gkdlab.harness.studies import TREND_OVERRIDES, VARIANTS, TrendSpec, trend_study


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/trend")
    ap.add_argument("--config", help="JSON config; defaults to the desk-scale noisy task")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--tau", type=float, default=10.0)
    ap.add_argument("--beta", type=float, default=10.0)
    ap.add_argument("--gamma", type=float, default=0.2)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = TREND_OVERRIDES if args.config is None else []
    cfg = load_config(args.config, base + args.overrides + [f"out_dir={json.dumps(args.out)}"])
    spec = TrendSpec(seeds=tuple(args.seeds), alpha=args.alpha, tau=args.tau, beta=args.beta, gamma=args.gamma)
    res = trend_study(cfg, spec, args.out)

    print(f"{'variant':<18}{'seed':>5}{'val':>8}{'LL':>8}{'PL':>8}{'SL':>8}")
    for r in res["rows"]:
        print(f"{r['variant']:<18}{r['seed']:>5}{r['val_acc']:>8.2f}{r['LL']:>8.2f}{r['PL']:>8.2f}{r['SL']:>8.2f}")
    print("medians")
    for v in VARIANTS:
        m = res["median"][v]
        print(f"{v:<18}{'':>5}{m['val_acc']:>8.2f}{m['LL']:>8.2f}{m['PL']:>8.2f}{m['SL']:>8.2f}")
    print(f"total {res['seconds']:.0f}s")


if __name__ == "__main__":
    main()
