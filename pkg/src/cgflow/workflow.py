"""Active-learning cycle, grid conditioning, the MC baseline and evaluation metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .flow import CondAffineFlow, SplineCouplingFlow, evaluate_energy_loss, train_by_energy, train_by_example
from .nnkernel import Adam, scaler_fit
from .pmf import EnsembleConfig, PmfEnsemble, ensemble_train, pmf_estimate_alt, pmf_targets
from .sampler import AlDataset, broaden, dataset_add, find_high_error, mc_trajectory, replay_sample
from .systems import MB_GLOBAL_MIN, MB_START, CountingSystem, ground_truth_pmf, make_system

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- configuration


@dataclass
class SystemConfig:
    name: str = "muller_brown"
    beta: float = 0.1


@dataclass
class FlowConfig:
    kind: str = "affine"
    hidden: tuple = (64, 64)
    n_layers: int = 6
    n_bins: int = 8
    bound: float = 5.0
    example_lr: float = 5e-4
    example_batch: int = 16
    example_epochs: int = 300
    energy_lr: float = 5e-3
    energy_batch: int = 8
    energy_epochs_first: int = 12
    energy_epochs: int = 7
    clip_norm: float = 20.0
    n_drop: int = 0


@dataclass
class PmfConfig:
    n_models: int = 10
    hidden: tuple = (64, 64)
    nu_min: float = 0.1
    nu_max: float = 3.0
    lr: float = 1e-3
    batch_size: int = 5
    epochs: int = 1000
    bootstrap: str = "bagging"
    n_clip: int = 0
    estimator: str = "exp"

    def ensemble(self) -> EnsembleConfig:
        return EnsembleConfig(
            n_models=self.n_models,
            hidden=tuple(self.hidden),
            nu_range=(self.nu_min, self.nu_max),
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            bootstrap=self.bootstrap,
        )


@dataclass
class SamplerConfig:
    proposal_scale: float = 0.1
    threshold_kT: float = 0.4
    n_targets: int = 1
    n_parallel: int = 50
    min_len: int = 10
    max_len: int = 30000
    broaden_width: float = 1.0
    n_broaden: int = 65
    copies: int = 30
    train_frac: float = 0.8
    gamma: float = 0.3
    split_by: str = "record"
    start_steps: int = 500
    start_scale: float = 0.2
    start_unique: int = 100
    record_trajectories: bool = False


@dataclass
class WorkflowConfig:
    seed: int = 0
    max_iterations: int = 100
    kld_threshold: float | None = None
    grid_lo: float = -2.5
    grid_hi: float = 1.1
    grid_points: int = 100
    grid_train_frac: float = 0.8
    grid_epochs: int = 10
    grid_copies: int = 120
    grid_pmf_epochs: int = 3000
    baseline_steps: int = 1_000_000
    baseline_scale: float = 0.1
    baseline_smoothing: float = 1e-12
    output_dir: str = ""


@dataclass
class MetricsConfig:
    grid_lo: float = -2.5
    grid_hi: float = 1.1
    n_grid: int = 100
    ess_samples: int = 10000
    ess_clip: int = 0
    ess_grid: int = 2000
    backmapped_samples: int = 100000


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    pmf: PmfConfig = field(default_factory=PmfConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self):
        positive = {
            "system.beta": self.system.beta,
            "sampler.proposal_scale": self.sampler.proposal_scale,
            "sampler.threshold_kT": self.sampler.threshold_kT,
            "sampler.broaden_width": self.sampler.broaden_width,
            "sampler.max_len": self.sampler.max_len,
            "sampler.copies": self.sampler.copies,
            "sampler.n_parallel": self.sampler.n_parallel,
            "sampler.n_broaden": self.sampler.n_broaden,
            "flow.energy_batch": self.flow.energy_batch,
            "flow.example_batch": self.flow.example_batch,
            "pmf.batch_size": self.pmf.batch_size,
            "pmf.n_models": self.pmf.n_models,
            "workflow.grid_points": self.workflow.grid_points,
            "workflow.grid_copies": self.workflow.grid_copies,
            "workflow.baseline_steps": self.workflow.baseline_steps,
            "workflow.baseline_scale": self.workflow.baseline_scale,
            "metrics.n_grid": self.metrics.n_grid,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ValueError(f"{key} must be positive, got {value!r}")
        if not 0 < self.sampler.train_frac < 1:
            raise ValueError("sampler.train_frac must lie in (0, 1)")
        if self.sampler.gamma < 0:
            raise ValueError("sampler.gamma must be non-negative")
        if self.flow.kind not in ("affine", "spline"):
            raise ValueError(f"flow.kind: unknown flow {self.flow.kind!r}")
        if self.pmf.estimator not in ("exp", "alt"):
            raise ValueError(f"pmf.estimator: unknown estimator {self.pmf.estimator!r}")
        make_system(self.system.name, self.system.beta)
        return self

    def to_dict(self):
        return asdict(self)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------- seeds


def derive_seed(master: int, label: str) -> int:
    """64-bit child seed from the master seed and a consumer label."""
    h = hashlib.blake2b(f"{int(master)}/{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def rng_for(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))


# ---------------------------------------------------------------- report


@dataclass
class IterationReport:
    iteration: int
    n_energy: int
    mc_steps: int
    train_loss: float
    test_loss: float
    kld: float
    n_configs: int
    n_new_points: int = 0


@dataclass
class RunReport:
    mode: str
    seed: int
    iterations: list = field(default_factory=list)
    total_energy: int = 0
    total_mc_steps: int = 0
    final_kld: float = float("nan")
    stop_reason: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def add(self, it: IterationReport):
        if self.iterations:
            last = self.iterations[-1]
            if it.n_energy < last.n_energy or it.mc_steps < last.mc_steps:
                raise ValueError("report counters must not decrease")
        self.iterations.append(it)
        self.total_energy = it.n_energy
        self.total_mc_steps = it.mc_steps
        self.final_kld = it.kld

    def to_dict(self):
        d = asdict(self)
        d["iterations"] = [asdict(i) for i in self.iterations]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        its = [IterationReport(**i) for i in d.pop("iterations", [])]
        rep = cls(**d)
        rep.iterations = its
        return rep

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class RunFailure(RuntimeError):
    """A run aborted; ``report`` holds everything recorded up to the failure."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


# ---------------------------------------------------------------- metrics


def _discrete_log_p(u, beta):
    l = -beta * np.asarray(u, dtype=float)
    return l - np.logaddexp.reduce(l)


def forward_kld_pmf(model_pmf, truth_pmf, beta):
    """``sum p_t ln(p_t / p_m)`` for ``p ∝ exp(-beta U)`` normalized over the grid.

    A model that assigns zero mass where the truth has mass gives ``inf``.
    """
    model_pmf = np.asarray(model_pmf, dtype=float)
    truth_pmf = np.asarray(truth_pmf, dtype=float)
    if model_pmf.shape != truth_pmf.shape:
        raise ValueError("model and truth PMFs must share the grid")
    if not np.all(np.isfinite(truth_pmf)):
        raise ValueError("truth PMF must be finite on the grid")
    if np.any(np.isnan(model_pmf)):
        raise ValueError("model PMF contains NaN")
    lt = _discrete_log_p(truth_pmf, beta)
    lm = _discrete_log_p(model_pmf, beta)
    pt = np.exp(lt)
    mask = pt > 0
    if np.any(np.isneginf(lm[mask])):
        logger.warning("model PMF has zero mass on a bin supported by the truth")
        return float("inf")
    return float(max(np.sum(pt[mask] * (lt[mask] - lm[mask])), 0.0))


def ess_from_log_weights(log_w, clip_count=0):
    """Normalized effective sample size ``1 / (n sum wbar^2)`` as a percentage of ``n``."""
    log_w = np.asarray(log_w, dtype=float).reshape(-1)
    n = log_w.size
    if n == 0 or np.all(np.isneginf(log_w)):
        raise ValueError("all importance weights are zero")
    if clip_count > 0:
        order = np.argsort(log_w, kind="stable")
        top = order[-min(clip_count, n) :]
        log_w = log_w.copy()
        log_w[top] = log_w[top].min()
    lw = log_w - np.logaddexp.reduce(log_w)
    return float(100.0 / (n * np.exp(np.logaddexp.reduce(2.0 * lw))))


class GridDensity:
    """Piecewise-constant density on a grid from PMF values, ``p(s) ∝ exp(-beta U)``."""

    def __init__(self, edges, pmf_centers, beta):
        self.edges = np.asarray(edges, dtype=float)
        width = np.diff(self.edges)
        logm = -beta * np.asarray(pmf_centers, dtype=float) + np.log(width)
        logm -= np.logaddexp.reduce(logm)
        self.mass = np.exp(logm)
        self.log_dens = logm - np.log(width)
        self.cdf = np.concatenate([[0.0], np.cumsum(self.mass)])
        self.cdf[-1] = 1.0

    def sample(self, n, rng):
        u = rng.uniform(size=n)
        k = np.clip(np.searchsorted(self.cdf, u, side="right") - 1, 0, self.mass.size - 1)
        frac = (u - self.cdf[k]) / np.where(self.mass[k] > 0, self.mass[k], 1.0)
        s = self.edges[k] + np.clip(frac, 0.0, 1.0) * (self.edges[k + 1] - self.edges[k])
        return s, self.log_dens[k]


def pmf_grid_density(pmf_fn, lo, hi, n_cells, beta):
    edges = np.linspace(lo, hi, n_cells + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    return GridDensity(edges, pmf_fn(centers[:, None]), beta)


def reverse_ess(flow, pmf_fn, system, n, clip_count, rng, lo=-2.5, hi=1.1, n_cells=2000):
    """Reverse ESS (percent) of cascaded sampling ``s ~ p_PMF``, ``x_fg ~ q(. | s)``.

    Weights are ``exp(-beta E(x)) / (q(x_fg | s) p(s))``; the constant Jacobian
    of the coordinate split cancels in the normalization.
    """
    dens = pmf_grid_density(pmf_fn, lo, hi, n_cells, system.beta)
    s, log_ps = dens.sample(n, rng)
    s = s[:, None]
    x_fg, log_q, _ = flow.sample(s, rng)
    e = np.asarray(system.energy_fg(x_fg, s), dtype=float)
    log_w = -system.beta * e - log_q - log_ps
    return ess_from_log_weights(log_w, clip_count)


def backmapped_samples(flow, pmf_fn, system, n, rng, lo=-2.5, hi=1.1, n_cells=2000):
    """Full-space samples with their log density under cascaded PMF and flow sampling.

    Returns ``(x, log_density)`` where the density is with respect to the full
    coordinates (the split Jacobian is included).
    """
    dens = pmf_grid_density(pmf_fn, lo, hi, n_cells, system.beta)
    s, log_ps = dens.sample(n, rng)
    s = s[:, None]
    x_fg, log_q, _ = flow.sample(s, rng)
    x = system.reconstruct(x_fg, s)
    log_jac = _split_log_jacobian(system)
    return x, log_q + log_ps + log_jac


def _split_log_jacobian(system):
    # (x1, x2) -> (x1 - x2, x1 + x2) has |det| = 2; other systems split by selection
    return np.log(2.0) if system.name == "muller_brown" else 0.0


def truth_pmf(system, grid):
    grid = np.asarray(grid, dtype=float)
    if hasattr(system, "exact_pmf"):
        return system.exact_pmf(grid)
    return ground_truth_pmf(grid.reshape(-1), system.beta)


def stopping_check(terminated, kld=None, kld_threshold=None, iteration=0, max_iterations=None):
    """``None`` to continue, otherwise the reason to stop."""
    if terminated:
        return "max_traj_len"
    if kld_threshold is not None and kld is not None and kld <= kld_threshold:
        return "kld_threshold"
    if max_iterations is not None and iteration + 1 >= max_iterations:
        return "max_iterations"
    return None


# ---------------------------------------------------------------- run helpers


def _metric_grid(cfg: RunConfig):
    m = cfg.metrics
    return np.linspace(m.grid_lo, m.grid_hi, m.n_grid)


def _start_point(system):
    return MB_START.copy() if system.name == "muller_brown" else np.zeros(system.dim_cg + system.dim_fg)


def _minimum_cg(system):
    if system.name == "muller_brown":
        s, _ = system.split(MB_GLOBAL_MIN[None, :])
        return s
    return np.zeros((1, system.dim_cg))


def _make_flow(cfg: RunConfig, system, scaler, rng):
    f = cfg.flow
    if f.kind == "affine":
        return CondAffineFlow.create(rng, system.dim_cg, system.dim_fg, tuple(f.hidden), scaler)
    return SplineCouplingFlow.create(
        rng, system.dim_fg, system.dim_cg, f.n_layers, f.n_bins, f.bound, tuple(f.hidden), scaler
    )


def starting_dataset(system, cfg: RunConfig, rng):
    """Short full-space MC from the start point; returns ``n_unique`` distinct visited configurations."""
    sc = cfg.sampler
    path, _, _ = mc_trajectory(_start_point(system), system.energy, system.beta, sc.start_scale, sc.start_steps, rng)
    uniq = np.unique(path, axis=0)
    if uniq.shape[0] < sc.start_unique:
        logger.warning("starting MC visited only %d unique positions", uniq.shape[0])
        return uniq[rng.permutation(uniq.shape[0])]
    return uniq[rng.choice(uniq.shape[0], size=sc.start_unique, replace=False)]


def _targets(dataset: AlDataset, beta, pmf_cfg: PmfConfig, min_points=2, mask=None):
    mask = dataset.is_train if mask is None else mask
    if pmf_cfg.estimator == "exp":
        t = pmf_targets(dataset.energy, dataset.log_q, beta, pmf_cfg.n_clip, mask=mask)
    else:
        t = np.full(dataset.n_configs, np.nan)
        for i in range(dataset.n_configs):
            m = mask[i]
            try:
                t[i] = pmf_estimate_alt(dataset.energy[i, m], dataset.log_q[i, m], beta).value
            except ValueError:
                pass
    ok = np.isfinite(t)
    if ok.sum() < min_points:
        raise RunFailure(f"fewer than {min_points} configurations have a finite PMF target")
    t = t[ok]
    return dataset.s[ok], t - t.min()


class RunDir:
    """Output directory layout: manifest, report, and per-iteration artifacts."""

    def __init__(self, path, cfg: RunConfig, mode: str):
        self.path = Path(path) if path else None
        self.cfg = cfg
        self.mode = mode
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)

    def manifest(self, status, **extra):
        if self.path is None:
            return
        data = {
            "mode": self.mode,
            "status": status,
            "seed": self.cfg.workflow.seed,
            "config_hash": self.cfg.digest(),
            "version": __version__,
            "config": self.cfg.to_dict(),
        }
        data.update(extra)
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(data, fh, indent=1, default=list)

    def iteration(self, i, flow=None, ensemble=None, dataset=None, trace=None):
        if self.path is None:
            return
        d = self.path / f"iter_{i:03d}"
        d.mkdir(exist_ok=True)
        if flow is not None:
            flow.save(d / "flow.npz")
        if ensemble is not None:
            ensemble.save(d / "ensemble.npz")
            write_pmf_csv(d / "pmf.csv", ensemble, _metric_grid(self.cfg))
        if dataset is not None:
            dataset.save(d / "dataset.json")
        if trace:
            write_trajectory_csv(d / "trajectory.csv", trace)

    def final(self, report: RunReport, flow=None, ensemble=None, dataset=None):
        if self.path is None:
            return
        report.save(self.path / "report.json")
        if flow is not None:
            flow.save(self.path / "flow.npz")
        if ensemble is not None:
            ensemble.save(self.path / "ensemble.npz")
            write_pmf_csv(self.path / "pmf.csv", ensemble, _metric_grid(self.cfg))
        if dataset is not None:
            dataset.save(self.path / "dataset.json")


def write_pmf_csv(path, ensemble: PmfEnsemble, grid):
    mean, std = ensemble.predict(np.asarray(grid)[:, None])
    mean = mean - mean.min()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "mean", "std"])
        for row in zip(grid, mean, std):
            w.writerow([f"{v:.10g}" for v in row])


def write_trajectory_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = len(trace[0]) - 4
        w.writerow(["step", "chain"] + (["s"] if dim == 1 else [f"s{i}" for i in range(dim)]) + ["U", "accepted"])
        w.writerows(trace)


def _flow_loss_on(flow, system, dataset, cfg_idx, train, rng):
    recs = dataset.records(cfg_idx, train=train)
    if recs.size == 0:
        return float("nan")
    losses, e, q = evaluate_energy_loss(flow, system, dataset.record_s(recs), rng)
    dataset.write(recs, e, q)
    finite = losses[np.isfinite(losses)]
    return float(finite.mean()) if finite.size else float("inf")


# ---------------------------------------------------------------- runs


def run_active_learning(cfg: RunConfig, out_dir=None) -> RunReport:
    """Iterate: train by energy, fit the PMF ensemble, harvest high-error points, extend the dataset."""
    cfg.validate()
    t0 = time.perf_counter()
    seed = cfg.workflow.seed
    sc, fc = cfg.sampler, cfg.flow
    system = CountingSystem(make_system(cfg.system.name, cfg.system.beta))
    beta = system.beta
    run = RunDir(out_dir, cfg, "al")
    run.manifest("running")
    report = RunReport("al", seed)

    start = starting_dataset(system, cfg, rng_for(seed, "start"))
    s0, x0 = system.split(start)
    flow = _make_flow(cfg, system, scaler_fit(s0), rng_for(seed, "flow-init"))
    ex = train_by_example(
        flow, x0, s0, epochs=fc.example_epochs, lr=fc.example_lr, batch_size=fc.example_batch,
        rng=rng_for(seed, "example"),
    )
    report.extra["example_loss"] = ex.losses[-1] if ex.losses else None

    dataset = AlDataset(k=sc.copies, dim_cg=system.dim_cg)
    split_rng = rng_for(seed, "split")
    dataset_add(dataset, s0, sc.train_frac, split_rng, sc.split_by)
    opt = Adam(flow.parameters(), lr=fc.energy_lr)
    train_rng = rng_for(seed, "energy")
    eval_rng = rng_for(seed, "test-loss")
    replay_rng = rng_for(seed, "replay")
    harvest_rng = rng_for(seed, "harvest")
    broaden_rng = rng_for(seed, "broaden")
    grid = _metric_grid(cfg)
    truth = truth_pmf(system.inner, grid)
    starts = _minimum_cg(system)
    mc_steps = 0
    ensemble = None

    it = 0
    try:
        while True:
            current = dataset.configs_in(it)
            recs = dataset.records(current, train=True)
            n_current = current.size

            def replay(_epoch):
                cfg_idx = replay_sample(dataset, it, sc.gamma, replay_rng, n_current=n_current)
                r = dataset.records(cfg_idx, train=True)
                return dataset.record_s(r), r

            res = train_by_energy(
                flow, system, dataset.record_s(recs), ids=recs,
                epochs=fc.energy_epochs_first if it == 0 else fc.energy_epochs,
                lr=fc.energy_lr, batch_size=fc.energy_batch, rng=train_rng, n_drop=fc.n_drop,
                clip_norm=fc.clip_norm, replay=replay, record=dataset.write, optimizer=opt, iteration=it,
            )
            test_loss = _flow_loss_on(flow, system, dataset, current, False, eval_rng)

            s_t, y_t = _targets(dataset, beta, cfg.pmf)
            ensemble = ensemble_train(s_t, y_t, cfg.pmf.ensemble(), rng_for(seed, f"ensemble/{it}"), unit=1.0 / beta)
            kld = forward_kld_pmf(ensemble.predict(grid[:, None])[0], truth, beta)

            trace = [] if sc.record_trajectories else None
            harvest = find_high_error(
                ensemble.predict, beta, sc.threshold_kT, sc.n_targets, sc.n_parallel, sc.min_len, sc.max_len,
                starts, harvest_rng, sc.proposal_scale, trace=trace,
            )
            mc_steps += harvest.total_steps
            reason = stopping_check(harvest.terminated, kld, cfg.workflow.kld_threshold, it, cfg.workflow.max_iterations)
            n_new = 0
            if harvest.points.shape[0] and reason is None:
                new = broaden(harvest.points, sc.broaden_width, sc.n_broaden, broaden_rng)
                dataset_add(dataset, new, sc.train_frac, split_rng, sc.split_by)
                starts = harvest.points
                n_new = new.shape[0]
            elif reason is None:
                reason = "no_new_points"

            report.add(IterationReport(
                it, system.n_energy, mc_steps, res.losses[-1], test_loss, kld, dataset.n_configs, n_new,
            ))
            logger.info(
                "AL iteration %d: evals %d, MC steps %d, train %.4f, test %.4f, KLD %.3e",
                it, system.n_energy, mc_steps, res.losses[-1], test_loss, kld,
            )
            run.iteration(it, flow, ensemble, dataset, trace)
            if reason is not None:
                report.stop_reason = reason
                break
            it += 1
    except (FloatingPointError, RuntimeError, ValueError) as exc:
        report.stop_reason = f"failed: {exc}"
        report.wall_time = time.perf_counter() - t0
        run.final(report, flow, ensemble, dataset)
        run.manifest("failed", error=str(exc))
        raise RunFailure(str(exc), report) from exc

    report.wall_time = time.perf_counter() - t0
    run.final(report, flow, ensemble, dataset)
    run.manifest("complete")
    return report


def run_grid_conditioning(cfg: RunConfig, out_dir=None) -> RunReport:
    """Train by energy on a uniform CG grid instead of exploring; fit the ensemble once at the end."""
    cfg.validate()
    t0 = time.perf_counter()
    seed = cfg.workflow.seed
    sc, fc, wc = cfg.sampler, cfg.flow, cfg.workflow
    system = CountingSystem(make_system(cfg.system.name, cfg.system.beta))
    beta = system.beta
    run = RunDir(out_dir, cfg, "grid")
    run.manifest("running")
    report = RunReport("grid", seed)

    start = starting_dataset(system, cfg, rng_for(seed, "start"))
    s0, x0 = system.split(start)
    flow = _make_flow(cfg, system, scaler_fit(s0), rng_for(seed, "flow-init"))
    train_by_example(
        flow, x0, s0, epochs=fc.example_epochs, lr=fc.example_lr, batch_size=fc.example_batch,
        rng=rng_for(seed, "example"),
    )
    grid_s = np.linspace(wc.grid_lo, wc.grid_hi, wc.grid_points)[:, None]
    dataset = AlDataset(k=wc.grid_copies, dim_cg=system.dim_cg)
    if wc.grid_points == 1:
        # a single config cannot be split; all its copies train
        dataset_add(dataset, grid_s, sc.train_frac, rng_for(seed, "split"), "record")
        dataset.is_train[:] = True
    else:
        dataset_add(dataset, grid_s, wc.grid_train_frac, rng_for(seed, "split"), "config")
    train_cfg = np.flatnonzero(dataset.is_train.any(axis=1))
    test_cfg = np.flatnonzero(~dataset.is_train.any(axis=1))
    recs = dataset.records(train_cfg, train=True)
    try:
        res = train_by_energy(
            flow, system, dataset.record_s(recs), ids=recs, epochs=wc.grid_epochs, lr=fc.energy_lr,
            batch_size=fc.energy_batch, rng=rng_for(seed, "energy"), n_drop=fc.n_drop, clip_norm=fc.clip_norm,
            record=dataset.write,
        )
        test_loss = _flow_loss_on(flow, system, dataset, test_cfg, False, rng_for(seed, "test-loss"))
        # the flow never sees the held-out grid configs, but their evaluated records still inform the PMF
        s_t, y_t = _targets(dataset, beta, cfg.pmf, min_points=1, mask=np.isfinite(dataset.energy))
        if np.unique(s_t, axis=0).shape[0] < 2:
            # degenerate grid: a constant PMF around the single trained point
            s_t = np.concatenate([s_t, s_t + 1e-3])
            y_t = np.concatenate([y_t, y_t])
        ens_cfg = cfg.pmf.ensemble()
        ens_cfg.epochs = wc.grid_pmf_epochs
        ensemble = ensemble_train(s_t, y_t, ens_cfg, rng_for(seed, "ensemble/0"), unit=1.0 / beta)
    except (FloatingPointError, RuntimeError, ValueError) as exc:
        report.stop_reason = f"failed: {exc}"
        run.manifest("failed", error=str(exc))
        raise RunFailure(str(exc), report) from exc
    grid = _metric_grid(cfg)
    kld = forward_kld_pmf(ensemble.predict(grid[:, None])[0], truth_pmf(system.inner, grid), beta)
    report.add(IterationReport(0, system.n_energy, 0, res.losses[-1], test_loss, kld, dataset.n_configs))
    report.stop_reason = "complete"
    report.extra["test_configs"] = dataset.s[test_cfg, 0].tolist()
    report.wall_time = time.perf_counter() - t0
    run.iteration(0, flow, ensemble, dataset)
    run.final(report, flow, ensemble, dataset)
    run.manifest("complete")
    logger.info("grid run: evals %d, KLD %.3e", system.n_energy, kld)
    return report


def histogram_pmf(samples_s, grid, beta, smoothing=1e-12):
    """PMF on ``grid`` from a histogram of ``samples_s`` with bins centred on the grid points.

    Empty bins receive ``smoothing`` times the total mass so the PMF stays finite.
    """
    grid = np.asarray(grid, dtype=float)
    half = 0.5 * (grid[1] - grid[0])
    edges = np.concatenate([grid - half, [grid[-1] + half]])
    counts, _ = np.histogram(np.asarray(samples_s).reshape(-1), bins=edges)
    p = counts / max(counts.sum(), 1)
    p = p + smoothing
    p /= p.sum()
    return -np.log(p) / beta


def run_mc_baseline(cfg: RunConfig, out_dir=None) -> RunReport:
    """Full-space Metropolis MC on ``E(x)``; PMF from a histogram of ``s``."""
    cfg.validate()
    t0 = time.perf_counter()
    wc = cfg.workflow
    system = CountingSystem(make_system(cfg.system.name, cfg.system.beta))
    run = RunDir(out_dir, cfg, "baseline")
    run.manifest("running")
    path = metropolis_full_space(
        system, _start_point(system), wc.baseline_scale, wc.baseline_steps, rng_for(wc.seed, "baseline")
    )
    s, _ = system.split(path)
    grid = _metric_grid(cfg)
    pmf = histogram_pmf(s, grid, system.beta, wc.baseline_smoothing)
    kld = forward_kld_pmf(pmf, truth_pmf(system.inner, grid), system.beta)
    report = RunReport("baseline", wc.seed)
    report.add(IterationReport(0, system.n_energy, wc.baseline_steps, float("nan"), float("nan"), kld, 0))
    report.stop_reason = "complete"
    report.wall_time = time.perf_counter() - t0
    if run.path is not None:
        with open(run.path / "pmf.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "mean", "std"])
            for g, u in zip(grid, pmf - pmf.min()):
                w.writerow([f"{g:.10g}", f"{u:.10g}", "0"])
    run.final(report)
    run.manifest("complete")
    logger.info("baseline: %d steps, KLD %.3e", wc.baseline_steps, kld)
    return report


def metropolis_full_space(system, start, scale, n_steps, rng, block=100_000):
    """Random-walk Metropolis on ``exp(-beta E(x))``; returns the visited path.

    Every proposal costs one energy evaluation through ``system``; random
    numbers are drawn in blocks of ``block`` steps.
    """
    x = np.array(start, dtype=float)
    u = float(system.energy(x[None, :])[0])
    beta = system.beta
    path = np.empty((n_steps, x.size))
    done = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        steps = rng.standard_normal((m, x.size)) * scale
        log_r = np.log(rng.uniform(size=m))
        for i in range(m):
            prop = x + steps[i]
            u_new = _scalar_energy(system, prop)
            if u_new <= u or log_r[i] < -beta * (u_new - u):
                x, u = prop, u_new
            path[done + i] = x
        done += m
    return path


def _scalar_energy(system, x):
    return float(system.energy(x[None, :])[0])


def output_root():
    return os.environ.get("CGFLOW_OUTPUT_ROOT", "runs")
