"""Print representative driving modes and gamma fits for an events CSV or a fresh synthetic fleet.

    python scripts/style_report.py                 # default synthetic fleet
    python scripts/style_report.py events.csv --derive
"""

import argparse

from cflab.data import generate_fleet, read_events_csv
from cflab.style import (ACCEL_LABELS, GAP_LABELS, RELSPEED_LABELS, derive_thresholds, feature_gamma_fits,
                         mode_matrices, representative_modes)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("events", nargs="?", help="events CSV; omit for a generated fleet")
    ap.add_argument("--derive", action="store_true", help="also print quantile-derived thresholds")
    args = ap.parse_args()
    events = read_events_csv(args.events) if args.events else generate_fleet(44, 25).events
    m = mode_matrices(events)
    for rep in representative_modes(m):
        head = f"{GAP_LABELS[rep.gap_bin]:11s} ({int(m.gap_totals[rep.gap_bin])} steps)"
        if not rep.has_data:
            print(f"{head}: no data")
            continue
        print(f"{head}: mode {rep.mode_id:2d}  p={rep.probability:.3f}  "
              f"{RELSPEED_LABELS[rep.relspeed_bin]} / {ACCEL_LABELS[rep.accel_bin]}")
    for name, fit in feature_gamma_fits(events).items():
        if "error" in fit:
            print(f"gamma {name:18s} {fit['error']}")
        else:
            print(f"gamma {name:18s} shape {fit['shape']:.3f} scale {fit['scale']:.4f} (n={fit['n']})")
    if args.derive:
        print("derived thresholds:", derive_thresholds(events).to_dict())


if __name__ == "__main__":
    main()
