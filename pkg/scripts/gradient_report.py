"""Finite-difference check of the hand-written backward pass over many seeds."""

import argparse

import numpy as np

from movelight.experiment import read_scenario
from movelight.frap import FrapConfig, PhaseStructure, check_case, gradient_check

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=40)
    ap.add_argument("--scale", type=float, default=1.0, help="parameter draw range +-scale")
    args = ap.parse_args()
    net, _ = read_scenario("single.json")
    st = PhaseStructure.from_intersection(net.intersections[0])
    cfg = FrapConfig()
    errs = np.array([gradient_check(*check_case(cfg, st, s, param_scale=args.scale), st, cfg, seed=s)
                     for s in range(args.seeds)])
    print(f"seeds={args.seeds} max={errs.max():.2e} median={np.median(errs):.2e} "
          f"over 1e-4: {int((errs >= 1e-4).sum())}")
