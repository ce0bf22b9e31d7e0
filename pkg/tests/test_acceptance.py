"""Acceptance suite: one PASS/FAIL line per criterion.

Experiment-backed criteria run the shipped configs through the ``bdq run``
entry point (each config once per session, shared between criteria) and
read the checks from the run manifest. Criteria 2 and 3 are computed here
directly. The summary block is printed at the end of the pytest session.

Run only this suite with ``pytest -m acceptance -s``; expect roughly 40
minutes on one core.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from bdq import cli
from bdq.config import load_config
from bdq.control import ControlProblem, first_order_guess, gateaux, gateaux_fd, random_smooth_control, simulate
from bdq.gff import Enhanced, NoiseEnsemble, TimeGrid, gmc_density, sample_paths, wick_power
from bdq.interactions import (
    InteractionSpec,
    grad_potential_direct,
    grad_potential_exp,
    grad_potential_phi4,
    potential_direct,
    potential_exp,
    potential_phi4_direct,
    potential_phi4_expanded,
)
from bdq.lattice import LatticeSpec
from bdq.oracles import MCMCConfig, log_partition_ti

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def run_config(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_runs")
    cache: dict[str, dict] = {}

    def run(name: str) -> dict:
        if name not in cache:
            path = CONFIGS / f"{name}.ini"
            code = cli.main(["run", str(path), "--output", str(out)])
            assert code in (cli.EXIT_OK, cli.EXIT_FAIL), f"{name} exited with {code}"
            cfg = load_config(path)
            cfg.output = str(out)
            manifest = json.loads((cli.run_dir_for(cfg) / "manifest.json").read_text(encoding="utf-8"))
            assert manifest["status"] == "complete"
            cache[name] = manifest
        return cache[name]

    return run


@pytest.fixture
def report(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, title: str, failures: list[str], n_checked: int):
        ok = not failures and n_checked > 0
        detail = f"{n_checked} checks" if ok else "; ".join(failures) or "nothing checked"
        lines.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
        print(lines[-1])
        return ok

    return record


ACCEPTANCE_KEY = pytest.StashKey[list]()


def _select(run_config, names_and_filters):
    """Checks from several runs; each filter is a predicate on the check name."""
    picked = []
    for config, keep in names_and_filters:
        for c in run_config(config)["checks"]:
            if keep(c["name"]):
                picked.append((config, c))
    return picked


def _failures(picked):
    return [f"{cfg}:{c['name']}={c['value']:.4g}" for cfg, c in picked if not c["pass"]]


def _everything(name):
    return True


def test_criterion_01_gaussian_exactness(run_config, report):
    picked = _select(run_config, [("bd_value_gaussian", _everything), ("sandwich_gaussian", _everything),
                                  ("derivative_gaussian", _everything)])
    failures = _failures(picked)
    # thermodynamic integration against the exact determinant of a Gaussian mass perturbation
    spec = LatticeSpec(8, 1.0, 1.0)
    c = 0.3
    exact = 0.5 * float(np.sum(np.log1p(2 * c / (spec.m**2 + spec.eigenvalues))))
    ti = log_partition_ti(InteractionSpec("mass", c), spec, np.linspace(0, c, 9),
                          MCMCConfig(n_burn=200, n_samples=2000, n_chains=4, seed=4242), rule="simpson")
    z = ti.estimate.z(exact)
    if abs(z) > 3:
        failures.append(f"log_partition_ti_mass z={z:.2f}")
    assert report(1, "Gaussian exactness", failures, len(picked) + 1)


def test_criterion_02_wick_expansion(report):
    rng = np.random.default_rng(2024)
    isp = InteractionSpec("phi4", 0.7)
    worst = 0.0
    for L in (4, 8, 16):
        spec = LatticeSpec(L, 1.0, 1.0)
        s2 = 0.9
        for _ in range(100):
            W, Z = rng.standard_normal((2,) + spec.shape)
            enh = Enhanced(W, wick_power(W, 2, s2), wick_power(W, 3, s2), s2)
            direct = potential_phi4_direct(spec, W + Z, isp, s2) - potential_phi4_direct(spec, W, isp, s2)
            assembled = potential_phi4_expanded(spec, enh, Z, isp)
            worst = max(worst, abs(assembled - direct) / max(abs(direct), 1e-300))
    failures = [] if worst <= 1e-9 else [f"max relative error {worst:.2e}"]
    assert report(2, "Wick expansion identity", failures, 300)


def _fd_rel(fn, grad, x, v, h):
    fd = (fn(x + h * v) - fn(x - h * v)) / (2 * h)
    an = float(np.sum(grad(x) * v))
    return abs(fd - an) / max(abs(an), 1e-12)


def test_criterion_03_gradient_fidelity(report):
    spec, grid = LatticeSpec(8, 1.0, 1.0), TimeGrid(8)
    paths = sample_paths(spec, grid, NoiseEnsemble(303, 64))
    problems = {
        "phi4": ControlProblem(spec, grid, InteractionSpec("phi4", 0.5)),
        "exponential": ControlProblem(spec, grid, InteractionSpec("exponential", 1.0, beta=math.sqrt(2 * math.pi))),
    }
    failures, n = [], 0
    for name, problem in problems.items():
        theta = first_order_guess(problem)
        theta.coef += 0.05 * np.random.default_rng(7).standard_normal(theta.coef.shape)
        ce = simulate(problem, theta, paths)
        for k in range(10):
            K = random_smooth_control(spec, 100 + k, scale=0.5)
            g = gateaux(ce, K).value
            rel = abs(g - gateaux_fd(ce, K)) / abs(g)
            n += 1
            if rel > 1e-4:
                failures.append(f"gateaux {name} direction {k}: {rel:.2e}")

    # interaction gradients (per-site, so the potential carries the cell factor)
    rng = np.random.default_rng(8)
    s2 = 0.4
    phi4 = InteractionSpec("phi4", 0.5)
    expo = InteractionSpec("exponential", 1.0, beta=math.sqrt(2 * math.pi))
    W = rng.standard_normal(spec.shape)
    enh = Enhanced(W, wick_power(W, 2, s2), wick_power(W, 3, s2), s2)
    gmc = gmc_density(spec, W, expo.beta, s2)
    cases = {
        "phi4 direct": (lambda p: potential_direct(spec, p, phi4, s2),
                        lambda p: spec.cell * grad_potential_direct(spec, p, phi4, s2)),
        "exponential direct": (lambda p: potential_direct(spec, p, expo, s2),
                               lambda p: spec.cell * grad_potential_direct(spec, p, expo, s2)),
        "phi4 shifted": (lambda z: potential_phi4_expanded(spec, enh, z, phi4),
                         lambda z: spec.cell * grad_potential_phi4(spec, enh, z, phi4)),
        "exponential shifted": (lambda z: potential_exp(spec, gmc, z, expo),
                                lambda z: spec.cell * grad_potential_exp(spec, gmc, z, expo)),
    }
    for name, (fn, grad) in cases.items():
        x = 0.3 * rng.standard_normal(spec.shape)
        for k in range(10):
            rel = _fd_rel(fn, grad, x, rng.standard_normal(spec.shape), 1e-6)
            n += 1
            if rel > 1e-5:
                failures.append(f"{name} direction {k}: {rel:.2e}")
    assert report(3, "Gradient fidelity", failures, n)


def test_criterion_04_bd_value(run_config, report):
    picked = _select(run_config, [("bd_value", lambda n: n in ("upper_bound", "ansatz_gap"))])
    assert report(4, "BD value for phi^4 (upper bound, ansatz gap)", _failures(picked), len(picked))


def test_criterion_05_coupling_law(run_config, report):
    moments = lambda n: n.startswith("moment_")  # noqa: E731
    picked = _select(run_config, [("coupling_compare_phi4_l01", moments), ("coupling_compare_phi4_l05", moments),
                                  ("coupling_compare_exp", moments)])
    assert report(5, "Coupling law against MCMC", _failures(picked), len(picked))


def test_criterion_06_el_residuals(run_config, report):
    el = lambda n: n.startswith("el_residual")  # noqa: E731
    picked = _select(run_config, [("el_residual_phi4", el), ("el_residual_exp", el)])
    assert report(6, "Euler-Lagrange residuals", _failures(picked), len(picked))


def test_criterion_07_apriori_trend(run_config, report):
    picked = _select(run_config, [("apriori_sweep", lambda n: n == "apriori_lhs_ratio")])
    assert report(7, "A-priori bound across volumes", _failures(picked), len(picked))


def test_criterion_08_gmc(run_config, report):
    picked = _select(run_config, [("gff_check", lambda n: n in ("gmc_mean_mass", "gmc_second_moment")),
                                  ("gmc_scaling", lambda n: n.startswith("slope_"))])
    assert report(8, "GMC moments and scaling", _failures(picked), len(picked))


def test_criterion_09_exponential_structure(run_config, report):
    names = ("simplified_form_nonnegative", "raw_vs_simplified", "sign_site_mean_nonpositive")
    picked = _select(run_config, [("exp_model", lambda n: n in names)])
    assert report(9, "Exponential-model structure", _failures(picked), len(picked))


def test_criterion_10_semiclassical(run_config, report):
    def keep(n):
        return n in ("deterministic_el_residual", "deterministic_two_start", "gap_decreasing", "final_gap") or \
            n.startswith("chain_gap_decreasing") or n.startswith("chain_final_gap")

    picked = _select(run_config, [("semiclassical", keep)])
    assert report(10, "Semiclassical limit", _failures(picked), len(picked))


def test_criterion_11_cutoff_growth(run_config, report):
    picked = _select(run_config, [("cutoff_growth_exp", lambda n: n == "successive_differences_shrink"),
                                  ("coupling_compare_cutoff", lambda n: n == "cutoff_stability")])
    assert report(11, "Cutoff-growth trends", _failures(picked), len(picked))


def _csv_bytes(directory: Path) -> dict[str, bytes]:
    files = sorted(directory.glob("*.csv")) + sorted(directory.glob("*.bdqe"))
    return {p.name: p.read_bytes() for p in files}


def test_criterion_12_determinism(tmp_path, report):
    failures, n = [], 0
    for name in ("gff_check", "el_residual_exp"):
        path = CONFIGS / f"{name}.ini"
        dirs = []
        for k in range(2):
            out = tmp_path / f"{name}-{k}"
            cli.main(["run", str(path), "--output", str(out)])
            cfg = load_config(path)
            cfg.output = str(out)
            dirs.append(cli.run_dir_for(cfg))
        a, b = _csv_bytes(dirs[0]), _csv_bytes(dirs[1])
        if not a or a.keys() != b.keys():
            failures.append(f"{name}: file sets differ or are empty")
            continue
        for fname in a:
            n += 1
            if a[fname] != b[fname]:
                failures.append(f"{name}/{fname} differs")
    assert report(12, "Bit-identical reruns", failures, n)
