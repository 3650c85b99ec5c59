"""Command-line front end.

    cgflow run-al       [-c CONFIG] [-o DIR] [--seed N] [--set section.key=value ...]
    cgflow run-grid     ...
    cgflow run-baseline ...
    cgflow eval RUN_DIR [--seed N]
    cgflow export RUN_DIR {pmf,trajectory,backmapped} [-n N] [--out FILE]

Exit codes: 0 success, 1 run failure, 2 configuration or usage error.
Without ``-o`` runs go to ``$CGFLOW_OUTPUT_ROOT/<mode>-seed<N>`` (``runs/`` if unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, parse_config
from .flow import load_flow
from .pmf import PmfEnsemble
from .systems import make_system
from .workflow import (
    RunFailure,
    RunReport,
    backmapped_samples,
    forward_kld_pmf,
    output_root,
    reverse_ess,
    rng_for,
    run_active_learning,
    run_grid_conditioning,
    run_mc_baseline,
    truth_pmf,
)

logger = logging.getLogger("cgflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

RUNNERS = {"run-al": run_active_learning, "run-grid": run_grid_conditioning, "run-baseline": run_mc_baseline}
MODES = {"run-al": "al", "run-grid": "grid", "run-baseline": "baseline"}


class ArtifactError(RuntimeError):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="cgflow", description="Active learning of coarse-grained PMFs with flows.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        r = sub.add_parser(name)
        r.add_argument("-c", "--config", help="INI config file (defaults: Müller-Brown recipe)")
        r.add_argument("-o", "--out", help="run directory")
        r.add_argument("--seed", type=int)
        r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    e = sub.add_parser("eval")
    e.add_argument("run_dir")
    e.add_argument("--seed", type=int, help="seed for ESS sampling (defaults to the run seed)")
    x = sub.add_parser("export")
    x.add_argument("run_dir")
    x.add_argument("what", help="pmf | trajectory | backmapped")
    x.add_argument("-n", type=int, help="number of backmapped samples")
    x.add_argument("--out", help="output CSV path")
    x.add_argument("--seed", type=int)
    return p


def _run(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"workflow.seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    mode = MODES[args.command]
    out = Path(args.out or cfg.workflow.output_dir or Path(output_root()) / f"{mode}-seed{cfg.workflow.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))

    def on_term(signum, _frame):
        manifest = out / "manifest.json"
        data = json.loads(manifest.read_text()) if manifest.exists() else {}
        data["status"] = "interrupted"
        manifest.write_text(json.dumps(data, indent=1))
        sys.exit(EXIT_FAIL)

    signal.signal(signal.SIGTERM, on_term)
    try:
        report = RUNNERS[args.command](cfg, out)
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{mode} run complete: {out}")
    print(f"  stop reason     {report.stop_reason}")
    print(f"  energy evals    {report.total_energy}")
    print(f"  MC steps        {report.total_mc_steps}")
    print(f"  forward KLD     {report.final_kld:.4e}")
    return EXIT_OK


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        raise ArtifactError(f"missing artifacts in {run_dir}: manifest.json")
    data = json.loads(manifest.read_text())
    cfg_path = run_dir / "config.ini"
    cfg = parse_config(cfg_path if cfg_path.exists() else None)
    if data.get("config_hash") != cfg.digest():
        raise ArtifactError("manifest config hash does not match config.ini")
    return run_dir, data, cfg


def _require(run_dir, *names):
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise ArtifactError(f"missing artifacts in {run_dir}: {', '.join(missing)}")


def cmd_eval(run_dir, seed=None, stream=None):
    """Recompute metrics from checkpoints; prints a table and writes ``metrics.json``."""
    stream = stream or sys.stdout
    run_dir, manifest, cfg = _load_run(run_dir)
    _require(run_dir, "report.json")
    report = RunReport.load(run_dir / "report.json")
    system = make_system(cfg.system.name, cfg.system.beta)
    m = cfg.metrics
    grid = np.linspace(m.grid_lo, m.grid_hi, m.n_grid)
    truth = truth_pmf(system, grid)
    metrics = {"mode": manifest.get("mode"), "seed": manifest.get("seed")}
    if manifest.get("mode") == "baseline":
        _require(run_dir, "pmf.csv")
        pmf = np.loadtxt(run_dir / "pmf.csv", delimiter=",", skiprows=1)[:, 1]
        metrics["kld"] = forward_kld_pmf(pmf, truth, system.beta)
        metrics["ess_percent"] = None
    else:
        _require(run_dir, "ensemble.npz", "flow.npz")
        ens = PmfEnsemble.load(run_dir / "ensemble.npz")
        flow = load_flow(run_dir / "flow.npz")
        metrics["kld"] = forward_kld_pmf(ens.predict(grid[:, None])[0], truth, system.beta)
        rng = rng_for(manifest["seed"] if seed is None else seed, "eval/ess")
        metrics["ess_percent"] = reverse_ess(
            flow, lambda s: ens.predict(s)[0], system, m.ess_samples, m.ess_clip, rng, m.grid_lo, m.grid_hi, m.ess_grid
        )
    metrics["energy_evals"] = report.total_energy
    metrics["mc_steps"] = report.total_mc_steps
    metrics["iterations"] = [
        {"iteration": it.iteration, "n_energy": it.n_energy, "mc_steps": it.mc_steps, "kld": it.kld}
        for it in report.iterations
    ]
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))

    print(f"{'iteration':>9} {'energy evals':>12} {'MC steps':>10} {'forward KLD':>12}", file=stream)
    for it in report.iterations:
        print(f"{it.iteration:>9d} {it.n_energy:>12d} {it.mc_steps:>10d} {it.kld:>12.4e}", file=stream)
    print(f"final forward KLD (recomputed): {metrics['kld']:.4e}", file=stream)
    if metrics["ess_percent"] is not None:
        print(f"reverse ESS: {metrics['ess_percent']:.2f} %", file=stream)
    return metrics


def cmd_export(run_dir, what, n=None, out=None, seed=None):
    """Write ``pmf``, ``trajectory`` or ``backmapped`` CSV; returns the output path."""
    if what not in ("pmf", "trajectory", "backmapped"):
        raise ConfigError(f"unknown export kind {what!r}")
    run_dir, manifest, cfg = _load_run(run_dir)
    out = Path(out) if out else run_dir / f"export_{what}.csv"
    if what == "pmf":
        _require(run_dir, "pmf.csv")
        out.write_text((run_dir / "pmf.csv").read_text())
    elif what == "trajectory":
        files = sorted(run_dir.glob("iter_*/trajectory.csv"))
        if not files:
            raise ArtifactError("trajectory not recorded (set sampler.record_trajectories = true)")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            for k, f in enumerate(files):
                with open(f) as src:
                    rows = list(csv.reader(src))
                if k == 0:
                    w.writerow(["iteration"] + rows[0])
                it = int(f.parent.name.split("_")[1])
                w.writerows([str(it)] + r for r in rows[1:])
    else:
        _require(run_dir, "ensemble.npz", "flow.npz")
        ens = PmfEnsemble.load(run_dir / "ensemble.npz")
        flow = load_flow(run_dir / "flow.npz")
        system = make_system(cfg.system.name, cfg.system.beta)
        m = cfg.metrics
        rng = rng_for(manifest["seed"] if seed is None else seed, "export/backmapped")
        x, logd = backmapped_samples(
            flow, lambda s: ens.predict(s)[0], system, n or m.backmapped_samples, rng, m.grid_lo, m.grid_hi, m.ess_grid
        )
        cols = [f"x{i + 1}" for i in range(x.shape[1])]
        np.savetxt(out, np.column_stack([x, logd]), delimiter=",", header=",".join(cols + ["logdensity"]),
                   comments="", fmt="%.10g")
    return out


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        if args.command in RUNNERS:
            return _run(args)
        if args.command == "eval":
            cmd_eval(args.run_dir, args.seed)
            return EXIT_OK
        print(cmd_export(args.run_dir, args.what, args.n, args.out, args.seed))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
