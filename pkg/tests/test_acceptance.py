"""Acceptance checks. Each test prints one ``CRITERION n: PASS/FAIL`` line.

The DIGITS grid (10 seeds per cell) takes most of an hour on one core. Its
``runs.csv`` is cached under ``.cache/acceptance/<key>`` where the key hashes
the package source and the grid definition, so a rerun with unchanged code
only reads the cache. Set ``DPVD_ACCEPTANCE_CACHE`` to move the cache.
"""

import csv
import hashlib
import importlib.util
import json
import math
import os
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from dpvd import accountant as acc
from dpvd import vdnet
from dpvd.core import Rng
from dpvd.datasets import load_benchmark, sklearn_digits_path
from dpvd.experiment import ExperimentSpec, run_experiment
from dpvd.trainer import TrainConfig, dp_step, train
from dpvd.vdnet import init_network

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("DPVD_ACCEPTANCE_CACHE", ROOT / ".cache" / "acceptance"))

SEEDS = 10
EPSILONS = (10.0, 1.0, 0.1)
BASELINE_TARGET, BASELINE_BAND = 0.9535, 0.02
TABLE_DIGITS = {  # reference accuracies at epsilon = 0.1
    "dpvd-zcdp": 0.9038, "svi-zcdp": 0.8712, "dpvd-ac": 0.8217,
}
MAGNITUDE_BAND = 0.03
# reference noise multipliers at epsilon = 1: (nu, T) -> (sigma_ac, sigma_zcdp)
SIGMA_REFERENCE = {
    "mnist": (0.01, 20000, 8.24, 2.68),
    "digits": (0.05, 2000, 9.73, 2.97),
}
NOISE_REL_TOL = 0.01
GRAD_REL_TOL = 1e-4
KL_TOL = 0.02
MNIST_TARGET = 0.90
SMOKE_EPOCHS = 3

needs_digits = pytest.mark.skipif(not sklearn_digits_path().exists(), reason="bundled DIGITS file missing")


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "dpvd").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def cached_grid(spec: ExperimentSpec) -> list[dict]:
    """Rows of runs.csv for ``spec``, computing them once per source version."""
    key = hashlib.sha256((source_hash() + json.dumps(asdict(spec), sort_keys=True, default=str)).encode())
    out = CACHE / key.hexdigest()[:16]
    runs = out / "runs.csv"
    if not runs.exists():
        run_experiment(spec, out, log=print)
    with open(runs, newline="") as fh:
        return list(csv.DictReader(fh))


def mean_acc(rows, cell, eps=None) -> float:
    accs = [float(r["final_test_acc"]) for r in rows
            if r["cell"] == cell and r["status"] == "ok" and (eps is None or float(r["epsilon"]) == eps)]
    assert len(accs) == SEEDS, f"{cell} eps={eps}: {len(accs)} successful runs"
    return float(np.mean(accs))


@pytest.fixture(scope="session")
def digits_grid():
    spec = ExperimentSpec(cells=("dpvd-zcdp", "dpvd-ac", "svi-zcdp", "nonprivate"), epsilons=EPSILONS,
                          repeats=SEEDS, base=TrainConfig())
    rows = cached_grid(spec)
    means = {("nonprivate", None): mean_acc(rows, "nonprivate")}
    for cell in ("dpvd-zcdp", "dpvd-ac", "svi-zcdp"):
        for eps in EPSILONS:
            means[(cell, eps)] = mean_acc(rows, cell, eps)
    return means


@needs_digits
def test_criterion_1_nonprivate_digits_baseline(digits_grid, criterion):
    got = digits_grid[("nonprivate", None)]
    ok = abs(got - BASELINE_TARGET) <= BASELINE_BAND
    criterion(1, ok, f"nonprivate DIGITS mean over {SEEDS} seeds {got:.4f} "
                     f"(target {BASELINE_TARGET} +- {BASELINE_BAND})")
    assert ok


@needs_digits
def test_criterion_2_private_ordering(digits_grid, criterion):
    g = digits_grid
    checks = [
        ("dpvd-zcdp >= svi-zcdp @0.1", g[("dpvd-zcdp", 0.1)] >= g[("svi-zcdp", 0.1)]),
        ("svi-zcdp >= dpvd-ac @0.1", g[("svi-zcdp", 0.1)] >= g[("dpvd-ac", 0.1)]),
        ("dpvd-zcdp >= dpvd-ac @1", g[("dpvd-zcdp", 1.0)] >= g[("dpvd-ac", 1.0)]),
        ("dpvd-zcdp >= dpvd-ac @10", g[("dpvd-zcdp", 10.0)] >= g[("dpvd-ac", 10.0)]),
    ]
    table = " ".join(f"{cell}@{eps:g}={g[(cell, eps)]:.4f}" for cell in TABLE_DIGITS for eps in EPSILONS)
    magnitude = " ".join(f"{cell}@0.1 off by {g[(cell, 0.1)] - ref:+.4f}"
                         f"{'' if abs(g[(cell, 0.1)] - ref) <= MAGNITUDE_BAND else ' (outside +-0.03)'}"
                         for cell, ref in TABLE_DIGITS.items())
    failed = [name for name, ok in checks if not ok]
    criterion(2, not failed, f"{table}; failed: {failed or 'none'}; magnitudes: {magnitude}")
    assert not failed


@needs_digits
def test_criterion_3_privacy_monotonicity(digits_grid, criterion):
    g = digits_grid
    bad = []
    for cell in ("dpvd-zcdp", "dpvd-ac"):
        seq = [g[(cell, eps)] for eps in EPSILONS]
        if not all(a >= b for a, b in zip(seq, seq[1:])):
            bad.append(f"{cell} {np.round(seq, 4).tolist()}")
    detail = " ".join(f"{cell}: " + " -> ".join(f"{g[(cell, e)]:.4f}" for e in EPSILONS)
                      for cell in ("dpvd-zcdp", "dpvd-ac"))
    criterion(3, not bad, detail + (f"; not monotone: {bad}" if bad else ""))
    assert not bad


def test_criterion_4_accountant_dominance(criterion):
    lines, ok = [], True
    for name, (nu, t, ref_ac, ref_zcdp) in SIGMA_REFERENCE.items():
        for eps in EPSILONS:
            s = {m: acc.solve_sigma(acc.PrivacyParams(eps, 1e-5, 2.0, nu, t, m)) for m in acc.METHODS}
            ok &= s["zcdp"] < s["ac"]
            if eps == 1.0:
                lines.append(f"{name} eps=1 ac {s['ac']:.3f} (ref {ref_ac}, x{s['ac'] / ref_ac:.2f}) "
                             f"zcdp {s['zcdp']:.3f} (ref {ref_zcdp}, x{s['zcdp'] / ref_zcdp:.2f})")
    criterion(4, ok, "zcdp < ac for every setting; " + "; ".join(lines))
    assert ok


def test_criterion_5_noise_calibration(criterion):
    clip_c, sigma = 2.0, 1.5
    config = TrainConfig(mode="svi", clip_c=clip_c, sigma=sigma, minibatch=2, kl_weight=0.0, hidden_units=1000)
    net = init_network([1000, 1000, 10], Rng(0), alpha0=0.0)
    x = np.random.default_rng(0).random((2, 1000))
    ledger = acc.BudgetLedger(acc.PrivacyParams(1.0, 1e-5, clip_c, 0.5, 10), sigma, enforce=False)
    injected = dp_step(net, x, np.array([1, 2]), ledger, config, Rng(21), 0.01, 4)
    coords = np.concatenate([np.concatenate([z.phi.ravel(), z.bias.ravel()]) for z in injected])
    rel = coords.std() / (2 * clip_c * sigma) - 1
    ok = coords.size >= 10**6 and abs(rel) <= NOISE_REL_TOL
    criterion(5, ok, f"{coords.size} coordinates, std/(2C sigma) - 1 = {rel:+.5f} (tol {NOISE_REL_TOL})")
    assert ok


def test_criterion_6_gradient_finite_differences(criterion):
    worst = {}
    for kind in ("lrt", "weights"):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            layers = [vdnet.VariationalLayer(rng.normal(0, 0.7, (a, b)), rng.uniform(0.1, 0.5, (a, b)),
                                             rng.normal(0, 0.1, (1, b))) for a, b in ((4, 2), (2, 3))]
            net = vdnet.Network(layers)
            x = rng.normal(size=(5, 4))
            y = rng.integers(0, 3, 5)
            noise = vdnet.sample_noise(net, 5, Rng(seed), kind)
            grads = vdnet.loss_and_grads(net, x, y, noise, kind, 20, 1.0)[1]
            h = 1e-6
            for name in ("phi", "zeta", "bias"):
                fd_all, an_all = [], []
                for layer, g in zip(net.layers, grads):
                    param = getattr(layer, name)
                    for idx in np.ndindex(param.shape):
                        old = param[idx]
                        param[idx] = old + h
                        up = vdnet.loss_and_grads(net, x, y, noise, kind, 20, 1.0)[0]
                        param[idx] = old - h
                        down = vdnet.loss_and_grads(net, x, y, noise, kind, 20, 1.0)[0]
                        param[idx] = old
                        fd_all.append((up - down) / (2 * h))
                    an_all.extend(getattr(g, name).ravel())
                fd_v, an_v = np.array(fd_all), np.array(an_all)
                err = np.linalg.norm(fd_v - an_v) / np.linalg.norm(fd_v)
                worst[name] = max(worst.get(name, 0.0), err)
    ok = max(worst.values()) <= GRAD_REL_TOL
    criterion(6, ok, "worst relative error on 4-2-3 nets " +
              " ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f" (tol {GRAD_REL_TOL})")
    assert ok


def quadrature_neg_kl(alpha: float) -> float:
    """-KL(N(1, alpha) || log-uniform) up to a constant: 0.5 log alpha - E log|1 + sqrt(alpha) e|."""
    s = math.sqrt(alpha)
    pdf = lambda e: math.exp(-0.5 * e * e) / math.sqrt(2 * math.pi)
    root = -1.0 / s
    # log|1 + s e| has a log singularity at the root; split there
    f = lambda e: pdf(e) * math.log(abs(1.0 + s * e))
    left = integrate.quad(f, -np.inf, root - 1.0, limit=200)[0] + integrate.quad(f, root - 1.0, root, limit=200)[0]
    right = integrate.quad(f, root, root + 1.0, limit=200)[0] + integrate.quad(f, root + 1.0, np.inf, limit=200)[0]
    return 0.5 * math.log(alpha) - (left + right)


def test_criterion_7_kl_vs_quadrature(criterion):
    alphas = np.logspace(-3, 3, 61)
    approx = vdnet.neg_kl_approx(np.log(alphas))
    exact = np.array([quadrature_neg_kl(a) for a in alphas])
    const = vdnet.neg_kl_approx(np.log(1e4)) - quadrature_neg_kl(1e4)
    dev = np.max(np.abs(approx - exact - const))
    ok = dev <= KL_TOL
    criterion(7, ok, f"max |deviation| over alpha in [1e-3, 1e3] = {dev:.4f} (tol {KL_TOL})")
    assert ok


@needs_digits
def test_criterion_8_budget_bookkeeping(criterion):
    train_set, test_set = load_benchmark("digits")
    details, ok = [], True
    for method in acc.METHODS:
        for eps in (1.0, 0.1):
            cfg = TrainConfig(method=method, epsilon=eps, epochs=3, hidden_units=50, seed=3)
            _, report = train(train_set, cfg, test_set)
            rho_step = acc.zcdp_step_subsampled(report.sigma, cfg.minibatch / len(train_set))
            exact = report.rho_spent == report.steps * rho_step
            within = report.eps_spent <= eps
            ok &= exact and within
            details.append(f"{method}@{eps:g}: eps {report.eps_spent:.4f} rho==T*rho_step {exact}")
    criterion(8, ok, "; ".join(details))
    assert ok


def mnist_surrogate(tmp_path_factory):
    real = os.environ.get("MNIST_DIR")
    if real:
        train_set, test_set = load_benchmark("mnist", real)
        keep = np.arange(5000)
        return replace(train_set, features=train_set.features[keep], labels=train_set.labels[keep]), test_set, real
    spec = importlib.util.spec_from_file_location("make_mnist_subset", ROOT / "scripts" / "make_mnist_subset.py")
    script = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(script)
    try:
        source = script.mlxtend_sample_path()
    except ImportError:
        pytest.skip("neither MNIST_DIR nor the mlxtend MNIST sample is available")
    out = tmp_path_factory.mktemp("mnist")
    script.main([str(out), "--source", str(source)])
    train_set, test_set = load_benchmark("mnist", out)
    return train_set, test_set, "mlxtend 4000/1000 sample"


def test_criterion_9_mnist_surrogate(tmp_path_factory, criterion):
    train_set, test_set, origin = mnist_surrogate(tmp_path_factory)
    cfg = TrainConfig(mode="nonprivate", hidden_units=256, epochs=20, seed=0)
    _, report = train(train_set, cfg, test_set)
    ok = report.final_test_acc >= MNIST_TARGET
    criterion(9, ok, f"non-private MNIST ({origin}, {len(train_set)} train) test acc "
                     f"{report.final_test_acc:.4f} (target >= {MNIST_TARGET})")
    assert ok


@needs_digits
def test_criterion_10_parameter_sweeps(tmp_path, criterion):
    sweeps = {"hidden_units": (500, 1000, 2000), "clip_c": (1.0, 2.0, 4.0), "minibatch": (50, 100, 200)}
    data = load_benchmark("digits")
    summary, ok = [], True
    for key, values in sweeps.items():
        spec = ExperimentSpec(cells=("dpvd-zcdp",), epsilons=(1.0,), repeats=1, sweep=key, sweep_values=values,
                              base=TrainConfig(epochs=SMOKE_EPOCHS))
        out = tmp_path / key
        results = run_experiment(spec, out, data=data)
        with open(out / "aggregate.csv", newline="") as fh:
            agg = list(csv.DictReader(fh))
        finals = {r["sweep_value"]: float(r["test_acc_mean"]) for r in agg if int(r["epoch"]) == SMOKE_EPOCHS}
        good = (all(r.status == "ok" for r in results) and len(finals) == len(values)
                and all(math.isfinite(v) for v in finals.values()))
        ok &= good
        summary.append(f"{key} " + " ".join(f"{v}:{a:.3f}" for v, a in finals.items()))
    criterion(10, ok, f"sweeps complete, aggregates written ({SMOKE_EPOCHS} epochs): " + "; ".join(summary))
    assert ok
