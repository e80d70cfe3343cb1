"""Private-zone edge and held-mode error bound as the occupancy budget psi varies.

Prints alpha from the closed form and from the brute-force flip search,
plus the worst-case held-mode density error, for a 4-lane sensor.
"""

import argparse

import numpy as np

from privtraffic.dynamics import reference_diagram
from privtraffic.zones import NoPrivateZoneError, ZoneParams, flip_bound_oracle, held_mode_error_bound, private_alpha


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lanes", type=int, default=4)
    ap.add_argument("--T-seconds", type=float, default=30.0)
    args = ap.parse_args()
    fd = reference_diagram()
    T = args.T_seconds / 3600
    print("psi,alpha,alpha_oracle,held_error_bound")
    for psi in np.round(np.arange(0.0, 0.55, 0.05), 2):
        zp = ZoneParams.from_feet(20, 0.51, float(psi))
        try:
            a = private_alpha(fd, zp, args.lanes, T)
        except NoPrivateZoneError:
            print(f"{psi},none,none,none")
            continue
        o = flip_bound_oracle(fd, zp, args.lanes, T, flow_grid_step=1.0)
        print(f"{psi},{a:.1f},{o:.0f},{held_mode_error_bound(fd, a):.1f}")


if __name__ == "__main__":
    main()
