"""Command-line entry point: ``privtraffic <subcommand> [flags]``.

Every subcommand writes CSV into ``--out-dir``. Failures exit nonzero and
print one line to stderr of the form ``error kind=<Name> message=<text>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .detectors import ingest_csv, write_csv, synthesize_detector_data
from .dp import dp_audit_gaussian, flow_sensitivity
from .dynamics import ProcessNoiseConfig, read_geometry, write_geometry, write_trajectory
from .ekf import batches_from_measurements, build_density_map
from .modes import (density_measurements_nonprivate, density_measurements_private, free_flow_toy,
                    mode_equality_audit)
from .pipeline import (PipelineConfig, _stream_seed, emit_plot_data, load_config, run_pipeline,
                       write_density_map, write_diagnostics, write_mode_track, write_outputs,
                       write_privacy_report, write_zone_csv)
from .scenarios import build_scenario, default_geometry

SUBCOMMANDS = ("simulate", "sense", "estimate", "zones", "audit", "run", "report")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--scenario", help="free, jam, wave or rush")
    common.add_argument("--seed", type=int)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--psi", type=float)
    common.add_argument("--mode", choices=("nonprivate", "private", "both"))
    common.add_argument("--sensitive-rule", dest="sensitive_rule", choices=("hold", "flow_trend"))
    common.add_argument("--out-dir", default="out")

    parser = _Parser(prog="privtraffic", description="Differentially private traffic density estimation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="simulate a scenario and write ground truth")
    sub.add_parser("sense", parents=[common], help="simulate and write synthetic detector CSV")
    p = sub.add_parser("estimate", parents=[common], help="estimate density maps from detector CSV")
    p.add_argument("--detectors", required=True, help="CSV with k,sensor_id,lane,count,occupancy")
    p.add_argument("--geometry", help="cell CSV (defaults to the built-in road)")
    p.add_argument("--sensors", help="sensor CSV")
    p = sub.add_parser("zones", parents=[common], help="write per-sensor zone geometry")
    p.add_argument("--geometry")
    p.add_argument("--sensors")
    p = sub.add_parser("audit", parents=[common], help="Monte-Carlo privacy audits on the toy scenario")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--dp-trials", type=int, default=10**6)
    sub.add_parser("run", parents=[common], help="end-to-end run writing every artifact")
    sub.add_parser("report", parents=[common], help="summarise a finished run as CSV and JSON")
    return parser


def _config(args) -> PipelineConfig:
    return load_config(args.config, scenario=args.scenario, seed=args.seed, epsilon=args.epsilon,
                       delta=args.delta, psi=args.psi, mode=args.mode, sensitive_rule=args.sensitive_rule)


def _geometry(args, cfg: PipelineConfig):
    cells = getattr(args, "geometry", None) or cfg.geometry_file
    sensors = getattr(args, "sensors", None) or cfg.sensors_file
    if cells:
        return read_geometry(cells, sensors or None, dt=cfg.sensor_cfg.T, fd=cfg.fd)
    return default_geometry(cfg.fd, cfg.sensor_cfg)


def _scenario(cfg: PipelineConfig):
    return build_scenario(cfg.scenario, cfg.fd, cfg.sensor_cfg, cfg.periods,
                          ProcessNoiseConfig(cfg.sim_sigma_interior, cfg.sim_sigma_ghost),
                          seed=_stream_seed(cfg.seed, "simulation"))


def cmd_simulate(args, cfg, out: Path):
    scn = _scenario(cfg)
    write_geometry(scn.geom, out / "geometry.csv", out / "sensors.csv")
    write_trajectory(out / "truth.csv", scn.truth)
    return scn


def cmd_sense(args, cfg, out: Path):
    scn = cmd_simulate(args, cfg, out)
    records = synthesize_detector_data(scn.truth, scn.geom, cfg.fd, cfg.sensor_cfg, cfg.count_noise,
                                       cfg.occ_jitter_std, seed=_stream_seed(cfg.seed, "count_noise"))
    write_csv(records, out / "detectors.csv")


def cmd_estimate(args, cfg, out: Path):
    geom = _geometry(args, cfg)
    records = ingest_csv(args.detectors)
    if not records:
        raise CliError("detector file has no records")
    periods = max(r.k for r in records) + 1
    fd, ekf = cfg.fd, cfg.ekf
    if cfg.mode in ("nonprivate", "both"):
        ms = density_measurements_nonprivate(records, geom, fd, cfg.zone_params, cfg.sensor_cfg, cfg.hmm)
        dm = build_density_map(geom, fd, ekf, batches_from_measurements(ms, geom, fd, ekf), periods)
        _write_map(out, "nonprivate", dm, ms, geom)
    if cfg.mode in ("private", "both"):
        ms, ledger = density_measurements_private(records, geom, fd, cfg.zone_params, cfg.sensor_cfg,
                                                  cfg.hmm, cfg.privacy, cfg.seed, cfg.sensitive_rule)
        sigma = ledger.charges[0][3]["sigma"]
        dm = build_density_map(geom, fd, ekf, batches_from_measurements(ms, geom, fd, ekf, sigma), periods)
        _write_map(out, "private", dm, ms, geom)
        write_privacy_report(out / "privacy", ledger)


def _write_map(out, name, dm, ms, geom):
    write_density_map(out / f"density_{name}.csv", dm)
    write_diagnostics(out / f"diagnostics_{name}.csv", dm)
    write_mode_track(out / f"modes_{name}.csv", ms)
    emit_plot_data(out / f"plot_{name}.csv", dm, geom)


def cmd_zones(args, cfg, out: Path):
    write_zone_csv(out / "zones.csv", cfg.fd, cfg.zone_params, _geometry(args, cfg), cfg.sensor_cfg.T)


def cmd_audit(args, cfg, out: Path):
    scn = free_flow_toy(fd=cfg.fd, sensor_cfg=cfg.sensor_cfg)
    mode_rep = mode_equality_audit(scn, cfg.fd, cfg.zone_params, cfg.privacy, trials=args.trials,
                                   seed=cfg.seed, hmm=cfg.hmm)
    delta_f = flow_sensitivity([scn.lanes], cfg.sensor_cfg.T).delta_f
    dp_rep = dp_audit_gaussian(cfg.epsilon, cfg.delta, delta_f, trials=args.dp_trials, seed=cfg.seed)
    rows = [
        ("mode_equality", mode_rep.passed, mode_rep.raw_violations, mode_rep.same_cell_pairs, mode_rep.trials),
        ("gaussian_dp", dp_rep.passed, len(dp_rep.violations), len(dp_rep.thresholds), dp_rep.trials),
    ]
    with open(out / "audit.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["audit", "passed", "violations", "checked", "trials"])
        for r in rows:
            w.writerow([r[0], int(r[1]), *r[2:]])
    summary = {"mode_equality": asdict(mode_rep),
               "gaussian_dp": {"trials": dp_rep.trials, "violations": dp_rep.violations,
                               "max_ratio_excess": dp_rep.max_ratio_excess, "passed": dp_rep.passed}}
    (out / "audit.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    for name, passed, *_ in rows:
        print(f"{name}: {'PASS' if passed else 'FAIL'}")


def cmd_run(args, cfg, out: Path):
    result = run_pipeline(cfg)
    write_outputs(result, out, cfg)
    print(json.dumps(asdict(result.report), sort_keys=True))


def cmd_report(args, cfg, out: Path):
    path = out / "report.json"
    if not path.exists():
        raise CliError(f"{path} not found; run the 'run' subcommand first")
    rep = json.loads(path.read_text())
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(rep):
            v = rep[k]
            w.writerow([k, "" if v is None else v])
    print(json.dumps(rep, sort_keys=True))


COMMANDS = {"simulate": cmd_simulate, "sense": cmd_sense, "estimate": cmd_estimate, "zones": cmd_zones,
            "audit": cmd_audit, "run": cmd_run, "report": cmd_report}


def _one_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"error kind={type(exc).__name__} message={msg}"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (CliError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        print(_one_line(exc), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
