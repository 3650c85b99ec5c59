"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The Müller-Brown runs use the default recipe and take several minutes each;
they are marked ``slow`` (deselect with ``-m "not slow"``).
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cgflow.config import parse_config
from cgflow.nnkernel import mlp_forward
from cgflow.pmf import pmf_estimate, pmf_estimate_alt, surrogate_decomposition, surrogate_fit
from cgflow.sampler import AlDataset, dataset_add, mc_chains
from cgflow.systems import gaussian_test_system, make_system
from cgflow.workflow import run_active_learning, run_grid_conditioning, run_mc_baseline

SEEDS = (0, 1, 2)
ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def al_reports():
    return [run_active_learning(parse_config(None, [f"workflow.seed={s}"])) for s in SEEDS]


@pytest.mark.slow
def test_criterion_1_mb_active_learning(al_reports, verdict):
    kld = np.array([r.final_kld for r in al_reports])
    evals = np.array([r.total_energy for r in al_reports])
    steps = np.array([r.total_mc_steps for r in al_reports])
    ok_kld = kld.max() <= 1e-3 and np.median(kld) <= 5e-4
    ok_evals = np.all((evals >= 5e4) & (evals <= 3e5))
    # MC step totals vary by orders of magnitude between seeds; the band is applied to the seed mean
    ok_steps = 1e5 <= steps.mean() <= 1.6e6
    detail = (
        f"KLD {', '.join(f'{k:.2e}' for k in kld)} (median {np.median(kld):.2e}); "
        f"evals {', '.join(str(e) for e in evals)}; MC steps {', '.join(str(s) for s in steps)} "
        f"(mean {steps.mean():.3g}, median {np.median(steps):.3g})"
    )
    assert verdict(1, ok_kld and ok_evals and ok_steps, detail)


@pytest.mark.slow
def test_criterion_2_baseline_separation(al_reports, verdict):
    # a single baseline run is dominated by how many basin transitions it happens to make,
    # so it is repeated over the same seeds as the active-learning runs and compared by median
    base = [run_mc_baseline(parse_config(None, [f"workflow.seed={s}"])) for s in SEEDS]
    base_kld = np.array([r.final_kld for r in base])
    al_kld = float(np.median([r.final_kld for r in al_reports]))
    med = float(np.median(base_kld))
    ok = med >= 5e-3 and med >= 5 * al_kld
    detail = (
        f"baseline KLD {', '.join(f'{k:.2e}' for k in base_kld)} (median {med:.2e}) at {base[0].total_energy} "
        f"evals; AL median KLD {al_kld:.2e} at {np.median([r.total_energy for r in al_reports]):.3g} evals"
    )
    assert verdict(2, ok, detail)


@pytest.mark.slow
def test_criterion_3_grid_conditioning(verdict):
    rep = run_grid_conditioning(parse_config(None))
    assert verdict(3, rep.final_kld <= 1e-3, f"grid KLD {rep.final_kld:.2e} at {rep.total_energy} evals")


def test_criterion_4_oracle_pmf_recovery(verdict):
    system = gaussian_test_system(coupling=[[1.2, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 0.8]], beta=1.0, dim_fg=2)
    rng = np.random.default_rng(0)
    grid = np.linspace(-3, 3, 50)
    main, alt = [], []
    for s in grid:
        s_row = np.array([[s]])
        mean, cov = system.conditional(s_row)
        chol = np.linalg.cholesky(cov)
        z = rng.standard_normal((10_000, cov.shape[0]))
        x = mean + z @ chol.T
        log_q = -0.5 * np.sum(z**2, 1) - 0.5 * cov.shape[0] * np.log(2 * np.pi) - np.log(np.diag(chol)).sum()
        e = system.energy_fg(x, np.repeat(s_row, len(x), axis=0))
        main.append(pmf_estimate(e, log_q, system.beta).value)
        alt.append(pmf_estimate_alt(e, log_q, system.beta).value)
    exact = system.exact_pmf(grid)
    err_main = np.max(np.abs((np.array(main) - main[25]) - (exact - exact[25])))
    err_alt = np.max(np.abs((np.array(alt) - alt[25]) - (exact - exact[25])))
    detail = f"sup-norm error {err_main:.2e} (main), {err_alt:.2e} (alt) on 50 points, 1e4 samples each"
    assert verdict(4, err_main < 0.02 and err_alt < 0.02, detail)


def test_criterion_5_flow_property_suite(verdict):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(ROOT / "tests" / "test_flow.py")],
        capture_output=True, text=True, cwd=ROOT,
    )
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    assert verdict(5, proc.returncode == 0 and elapsed < 300, f"{summary} ({elapsed:.0f} s)")


def test_criterion_6_surrogate_decomposition(verdict):
    rng = np.random.default_rng(1)
    n = 100_000
    s = rng.uniform(-2, 2, n)
    a = np.sin(s) + 0.5 * s
    g = a + 0.7 * rng.standard_normal(n)
    params, scaler = surrogate_fit(s, g, rng, epochs=20)
    h = mlp_forward(params, scaler.apply(s[:, None]))[:, 0]
    d = surrogate_decomposition(g, h, a)
    ratio = abs(d["mixed"]) / d["total"]
    assert verdict(6, ratio < 0.02, f"|mixed|/total = {ratio:.2e} at 1e5 samples")


def test_criterion_7_sampler_correctness(verdict):
    levels = np.array([0.0, 1.0, 0.4])
    beta = 1.5
    exact = np.exp(-beta * levels) / np.exp(-beta * levels).sum()
    rng = np.random.default_rng(2)
    samples, _ = mc_chains(rng.uniform(0, 3, (100, 1)),
                           lambda s: levels[np.floor(s[:, 0]).astype(int) % 3], beta, 0.7, 10_000, rng)
    occ = np.bincount((np.floor(samples[..., 0]).astype(int) % 3).ravel(), minlength=3) / samples[..., 0].size
    err = np.max(np.abs(occ - exact))
    ds = dataset_add(AlDataset(k=30), rng.uniform(size=(65, 1)), 0.8, rng)
    counts = (ds.energy.size, int(ds.is_train.sum()), int((~ds.is_train).sum()))
    ok = err < 0.01 and counts == (1950, 1560, 390)
    assert verdict(7, ok, f"occupation error {err:.1e} at 1e6 steps; records/train/test {counts}")


def test_criterion_8_alanine_dipeptide_out_of_scope(verdict):
    # the molecular system is deliberately absent rather than substituted
    with pytest.raises(ValueError):
        make_system("alanine_dipeptide")
    readme = (ROOT / "README.md").read_text()
    documented = "alanine dipeptide" in readme.lower()
    assert verdict(8, documented, "no molecular system shipped; absence documented in README")
