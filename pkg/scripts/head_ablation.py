"""Drop one fusion term at a time and see what it costs in ranking quality.

Trains heads on the synthetic set, then scores test videos with the zero-shot
weights, with each of alpha, beta and epsilon zeroed, relevance only, and with
weights grid-searched on the validation split.

    python3 scripts/head_ablation.py --steps 500
"""
import argparse
import sys

import numpy as np

from _common import head_outputs, trained
from streamhl.fusion import DEFAULT_GRID, PRESETS, FusionParams, ValidationItem, fuse, grid_search
from streamhl.metrics import kendall_tau, spearman_rho, top5_map


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--videos", type=int, default=10)
    ap.add_argument("--length", type=int, default=120)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--no-grid", action="store_true", help="skip the validation grid search")
    args = ap.parse_args(argv)

    cfg, ds, decoder, heads = trained(args.seed, args.steps, args.lr, args.videos, args.length)
    outs = {v.vid: head_outputs(cfg, decoder, heads, v) for v in ds.videos}
    zs = PRESETS["zero_shot"]
    settings = {
        "zero_shot": zs,
        "alpha=0": FusionParams(0.0, zs.beta, zs.epsilon, zs.tau),
        "beta=0": FusionParams(zs.alpha, 0.0, zs.epsilon, zs.tau),
        "epsilon=0": FusionParams(zs.alpha, zs.beta, 0.0, zs.tau),
        "relevance_only": PRESETS["relevance_only"],
    }
    if not args.no_grid:
        items = [ValidationItem(outs[v.vid]["i_hat"], outs[v.vid]["r_hat"], outs[v.vid]["l_clamped"], v.r)
                 for v in ds.split("val")]
        settings["grid(val)"], _ = grid_search(items, spearman_rho, DEFAULT_GRID)

    print(f"{'setting':<16} {'rho':>7} {'tau':>7} {'top5':>7}   params")
    for name, p in settings.items():
        rho, tau, m = [], [], []
        for v in ds.split("test"):
            o = outs[v.vid]
            y = fuse(o["i_hat"], o["r_hat"], o["l_clamped"], p)
            rho.append(spearman_rho(y, v.r))
            tau.append(kendall_tau(y, v.r))
            m.append(top5_map(y, v.r))
        print(f"{name:<16} {np.nanmean(rho):>7.3f} {np.nanmean(tau):>7.3f} {np.mean(m):>7.3f}   "
              f"({p.alpha}, {p.beta}, {p.epsilon}, {p.tau})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
