"""RMSE table for every scenario over a range of seeds, as CSV on stdout."""

import argparse
import csv
import math
import sys

import numpy as np

from privtraffic.pipeline import PipelineConfig, run_pipeline
from privtraffic.scenarios import scenario_library


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--epsilon", type=float, default=math.log(2))
    ap.add_argument("--delta", type=float, default=0.05)
    ap.add_argument("--sensitive-rule", default="hold", choices=("hold", "flow_trend"))
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["scenario", "median_rmse_nonprivate", "median_rmse_private", "median_free_gap",
                "median_mode_error_private", "median_held_fraction_private"])
    for name in scenario_library():
        reps = [run_pipeline(PipelineConfig(scenario=name, seed=s, epsilon=args.epsilon, delta=args.delta,
                                            sensitive_rule=args.sensitive_rule)).report
                for s in range(args.seeds)]
        gap = [r.rmse_free_private - r.rmse_free_nonprivate for r in reps]
        w.writerow([name,
                    f"{np.median([r.rmse_nonprivate for r in reps]):.3f}",
                    f"{np.median([r.rmse_private for r in reps]):.3f}",
                    f"{np.nanmedian(gap):.3f}" if not np.all(np.isnan(gap)) else "nan",
                    f"{np.median([r.mode_error_rate_private for r in reps]):.4f}",
                    f"{np.median([r.held_fraction_private for r in reps]):.4f}"])


if __name__ == "__main__":
    main()
