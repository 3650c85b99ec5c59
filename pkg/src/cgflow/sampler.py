"""Metropolis Monte Carlo in CG space, high-error harvesting and the AL dataset."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


def _rows(s, dim=None):
    s = np.asarray(s, dtype=float)
    if s.ndim <= 1:
        s = s.reshape(-1, dim or 1) if dim or s.ndim == 1 else s.reshape(1, 1)
    return s


def mc_trajectory(start, potential, beta, proposal_scale, n_steps, rng, record=True):
    """Metropolis chain on ``potential(s)`` (vectorized over rows of its input).

    Returns ``(path, energies, accepted)``; ``path`` has one row per step and
    repeats the current state on rejection. ``record=False`` keeps only the
    final state (path of length 1).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    s = np.array(start, dtype=float).reshape(-1)
    u = float(np.asarray(potential(s[None, :])).reshape(-1)[0])
    if not np.isfinite(u):
        raise ValueError("potential is not finite at the start point")
    dim = s.size
    steps = rng.standard_normal((n_steps, dim)) * proposal_scale
    log_u = np.log(rng.uniform(size=n_steps))
    path = np.empty((n_steps, dim)) if record else None
    energies = np.empty(n_steps) if record else None
    accepted = np.zeros(n_steps, dtype=bool)
    for i in range(n_steps):
        prop = s + steps[i]
        u_new = float(np.asarray(potential(prop[None, :])).reshape(-1)[0])
        if u_new <= u or log_u[i] < -beta * (u_new - u):
            s, u = prop, u_new
            accepted[i] = True
        if record:
            path[i] = s
            energies[i] = u
    if not record:
        path, energies = s[None, :], np.array([u])
    return path, energies, accepted


def mc_chains(starts, potential, beta, proposal_scale, n_steps, rng, thin=1):
    """Run independent Metropolis chains in lock-step, one potential call per round.

    ``starts`` has shape ``(n_chains, dim)``. Returns ``(samples, n_accepted)``
    where ``samples`` holds every ``thin``-th state of each chain with shape
    ``(n_steps // thin, n_chains, dim)``.
    """
    s = np.array(starts, dtype=float)
    n, dim = s.shape
    u = np.asarray(potential(s), dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("potential is not finite at a start point")
    out = np.empty((n_steps // thin, n, dim))
    n_acc = np.zeros(n, dtype=np.int64)
    for i in range(n_steps):
        prop = s + rng.standard_normal((n, dim)) * proposal_scale
        u_new = np.asarray(potential(prop), dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            acc = (u_new <= u) | (np.log(rng.uniform(size=n)) < -beta * (u_new - u))
        acc &= np.isfinite(u_new)
        s[acc] = prop[acc]
        u[acc] = u_new[acc]
        n_acc += acc
        if (i + 1) % thin == 0:
            out[(i + 1) // thin - 1] = s
    return out, n_acc


@dataclass
class HarvestResult:
    points: np.ndarray
    total_steps: int
    terminated: bool
    chain_lengths: np.ndarray
    rounds: int


def find_high_error(
    ensemble_predict,
    beta,
    threshold_kT,
    n_targets,
    n_parallel,
    min_len,
    max_len,
    starts,
    rng,
    proposal_scale=0.1,
    trace=None,
):
    """Search for CG points whose ensemble std exceeds ``threshold_kT`` (in kT).

    ``ensemble_predict(s) -> (mean, std)`` in energy units. Chains move by
    Metropolis on the ensemble mean; a chain that has taken at least
    ``min_len`` steps yields its current point once ``beta * std`` exceeds the
    threshold, and then stops. All chains advance in lock-step. If the chains
    reach ``max_len`` steps before ``n_targets`` points are found the result is
    flagged ``terminated`` and its steps are not counted in ``total_steps``.

    ``trace``, if a list, receives one ``(step, chain, s..., U, accepted)``
    tuple per chain and step.
    """
    if threshold_kT <= 0:
        raise ValueError("threshold must be positive")
    if n_parallel < 1 or n_targets < 1:
        raise ValueError("n_parallel and n_targets must be at least 1")
    starts = _rows(starts)
    if starts.shape[0] == 0:
        raise ValueError("need at least one start point")
    dim = starts.shape[1]
    s = starts[np.arange(n_parallel) % starts.shape[0]].copy()
    u, std = (np.array(v, dtype=float) for v in ensemble_predict(s))
    active = np.ones(n_parallel, dtype=bool)
    lengths = np.zeros(n_parallel, dtype=np.int64)
    found = []
    rounds = 0
    while rounds < max_len:
        rounds += 1
        idx = np.flatnonzero(active)
        prop = s[idx] + rng.standard_normal((idx.size, dim)) * proposal_scale
        u_new, std_new = ensemble_predict(prop)
        log_r = np.log(rng.uniform(size=idx.size))
        with np.errstate(over="ignore", invalid="ignore"):
            acc = (u_new <= u[idx]) | (log_r < -beta * (u_new - u[idx]))
        acc &= np.isfinite(u_new)
        moved = idx[acc]
        s[moved] = prop[acc]
        u[moved] = u_new[acc]
        std[moved] = std_new[acc]
        lengths[idx] += 1
        if trace is not None:
            for j, c in enumerate(idx):
                trace.append((rounds, int(c), *s[c].tolist(), float(u[c]), bool(acc[j])))
        if rounds >= min_len:
            for c in idx[beta * std[idx] > threshold_kT]:
                found.append(s[c].copy())
                active[c] = False
                if len(found) >= n_targets:
                    break
        if len(found) >= n_targets or not active.any():
            break
    points = np.array(found).reshape(-1, dim)
    terminated = len(found) < n_targets and rounds >= max_len
    total = 0 if terminated else int(lengths.sum())
    return HarvestResult(points, total, terminated, lengths, rounds)


def broaden(points, width, n_per_point, rng):
    """Uniform samples in a radius-``width/2`` ball around each point (interval in 1-D)."""
    points = _rows(points)
    if width < 0 or n_per_point < 1:
        raise ValueError("width must be non-negative and n_per_point at least 1")
    n, dim = points.shape
    r = 0.5 * width
    if dim == 1:
        offs = rng.uniform(-r, r, size=(n, n_per_point, 1))
    else:
        d = rng.standard_normal((n, n_per_point, dim))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        rad = r * rng.uniform(size=(n, n_per_point, 1)) ** (1.0 / dim)
        offs = d * rad
    return (points[:, None, :] + offs).reshape(-1, dim)


@dataclass
class AlDataset:
    """CG configurations grouped by AL iteration, each with ``k`` copy slots.

    A slot holds the latest ``(energy, log_q)`` evaluated for that copy
    (NaN until visited) and a train/test flag.
    """

    k: int
    dim_cg: int = 1
    s: np.ndarray = None
    group: np.ndarray = None
    energy: np.ndarray = None
    log_q: np.ndarray = None
    is_train: np.ndarray = None

    def __post_init__(self):
        if self.s is None:
            self.s = np.zeros((0, self.dim_cg))
            self.group = np.zeros(0, dtype=np.int64)
            self.energy = np.zeros((0, self.k))
            self.log_q = np.zeros((0, self.k))
            self.is_train = np.zeros((0, self.k), dtype=bool)

    @property
    def n_configs(self):
        return self.s.shape[0]

    @property
    def n_groups(self):
        return int(self.group.max()) + 1 if self.group.size else 0

    def configs_in(self, g):
        return np.flatnonzero(self.group == g)

    def records(self, cfg_idx, train=True):
        """Flat record ids ``cfg * k + copy`` of the train (or test) copies of configs."""
        cfg_idx = np.asarray(cfg_idx, dtype=np.int64)
        flags = self.is_train[cfg_idx] if train else ~self.is_train[cfg_idx]
        c, j = np.nonzero(flags)
        return cfg_idx[c] * self.k + j

    def record_s(self, rec_ids):
        return self.s[np.asarray(rec_ids) // self.k]

    def write(self, rec_ids, energies, log_q):
        rec_ids = np.asarray(rec_ids, dtype=np.int64)
        self.energy.reshape(-1)[rec_ids] = energies
        self.log_q.reshape(-1)[rec_ids] = log_q

    def to_json(self):
        return {
            "k": self.k,
            "dim_cg": self.dim_cg,
            "s": self.s.tolist(),
            "group": self.group.tolist(),
            "energy": [[None if math.isnan(v) else v for v in row] for row in self.energy.tolist()],
            "log_q": [[None if math.isnan(v) else v for v in row] for row in self.log_q.tolist()],
            "is_train": self.is_train.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, d):
        def arr(rows):
            return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float).reshape(-1, d["k"])

        return cls(
            k=int(d["k"]),
            dim_cg=int(d["dim_cg"]),
            s=np.array(d["s"], dtype=float).reshape(-1, int(d["dim_cg"])),
            group=np.array(d["group"], dtype=np.int64),
            energy=arr(d["energy"]),
            log_q=arr(d["log_q"]),
            is_train=np.array(d["is_train"], dtype=bool).reshape(-1, d["k"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def dataset_add(dataset: AlDataset, configs, train_frac, rng, split_by="record"):
    """Append ``configs`` as a new iteration group with ``k`` empty copy slots each.

    With ``split_by="record"`` the ``n * k`` records are shuffled and
    ``round(train_frac * n * k)`` of them flagged train; ``"config"`` splits
    whole configurations instead (all copies share the flag).
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    configs = _rows(configs, dataset.dim_cg)
    n, k = configs.shape[0], dataset.k
    g = dataset.n_groups
    flags = np.zeros(n * k, dtype=bool)
    if split_by == "record":
        flags[rng.permutation(n * k)[: int(round(train_frac * n * k))]] = True
        flags = flags.reshape(n, k)
    elif split_by == "config":
        cfg_flags = np.zeros(n, dtype=bool)
        cfg_flags[rng.permutation(n)[: int(round(train_frac * n))]] = True
        flags = np.repeat(cfg_flags[:, None], k, axis=1)
    else:
        raise ValueError(f"unknown split mode {split_by!r}")
    dataset.s = np.concatenate([dataset.s, configs])
    dataset.group = np.concatenate([dataset.group, np.full(n, g, dtype=np.int64)])
    dataset.energy = np.concatenate([dataset.energy, np.full((n, k), np.nan)])
    dataset.log_q = np.concatenate([dataset.log_q, np.full((n, k), np.nan)])
    dataset.is_train = np.concatenate([dataset.is_train, flags])
    return dataset


def replay_count(n_current, gamma):
    return int(math.ceil(gamma * n_current - 1e-9)) if gamma > 0 else 0


def replay_sample(dataset: AlDataset, current_group, gamma, rng, n_current=None):
    """``ceil(gamma * N)`` config indices drawn uniformly from groups older than ``current_group``.

    ``N`` defaults to the number of configs in the current group.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    older = np.flatnonzero(dataset.group < current_group)
    if n_current is None:
        n_current = dataset.configs_in(current_group).size
    count = replay_count(n_current, gamma)
    if older.size == 0 or count == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(older, size=count, replace=count > older.size)
