"""Calibrate IDM on noiseless synthetic drivers and compare with the generating parameters.

    python scripts/calibrate_oracle.py --seeds 0 1 2 --events 20
"""

import argparse
import time

from cflab.data import FleetConfig, generate_fleet
from cflab.ga import GAConfig, calibrate
from cflab.physics import DEFAULT_IDM_BOX


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--events", type=int, default=20)
    ap.add_argument("--population", type=int, default=GAConfig.population)
    ap.add_argument("--generations", type=int, default=GAConfig.generations)
    args = ap.parse_args()
    noiseless = FleetConfig(accel_noise_sigma=0.0, drift_vol=(0.0,) * 6)
    for seed in args.seeds:
        fleet = generate_fleet(1, args.events, profiles_seed=seed, config=noiseless)
        truth = fleet.profiles["D01"].base
        t0 = time.perf_counter()
        res = calibrate("IDM", fleet.events, DEFAULT_IDM_BOX,
                        GAConfig(population=args.population, generations=args.generations, seed=seed))
        errs = "  ".join(f"{k} {getattr(res.params, k) / getattr(truth, k) - 1:+.1%}"
                         for k in ("a0", "b", "v_des", "t_des", "s0"))
        print(f"seed {seed}: mse {res.fitness:.4f} m^2 in {time.perf_counter() - t0:.0f} s | {errs}")


if __name__ == "__main__":
    main()
