"""Repeated-run grids over privacy levels and model parameters, with CSV aggregation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import accountant as acc
from .datasets import load_benchmark
from .trainer import TrainConfig, TrainReport, train

SWEEP_KEYS = ("hidden_units", "epochs", "clip_c", "minibatch")
# cell name -> (trainer mode, accounting method)
CELLS = {
    "dpvd-zcdp": ("dpvd", "zcdp"),
    "dpvd-ac": ("dpvd", "ac"),
    "svi-zcdp": ("svi", "zcdp"),
    "svi-ac": ("svi", "ac"),
    "nonprivate": ("nonprivate", "zcdp"),
}
RUN_COLUMNS = ("cell", "epsilon", "sweep_value", "seed", "status", "final_test_acc",
               "final_train_acc", "sigma", "eps_spent", "rho_spent", "steps", "error")
AGG_COLUMNS = ("cell", "epsilon", "sweep_value", "epoch", "n_runs", "test_acc_mean", "test_acc_std",
               "train_acc_mean", "train_acc_std", "elbo_mean")


@dataclass
class ExperimentSpec:
    dataset: str = "digits"
    data_path: str | None = None
    split_rule: str = "interleaved"
    cells: tuple[str, ...] = ("dpvd-zcdp", "dpvd-ac", "svi-zcdp")
    epsilons: tuple[float, ...] = (10.0, 1.0, 0.1)
    delta: float = 1e-5
    repeats: int = 10
    sweep: str | None = None
    sweep_values: tuple = ()
    seed_base: int = 0
    base: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if not self.cells or not self.epsilons:
            raise ValueError("cells and epsilons must be nonempty")
        unknown = [c for c in self.cells if c not in CELLS]
        if unknown:
            raise ValueError(f"unknown cells {unknown}; expected some of {sorted(CELLS)}")
        if self.sweep is not None:
            if self.sweep not in SWEEP_KEYS:
                raise ValueError(f"sweep must be one of {SWEEP_KEYS}")
            if not self.sweep_values:
                raise ValueError("sweep_values must be nonempty")

    def jobs(self) -> list[tuple[str, float, object, int, TrainConfig]]:
        """Every (cell, epsilon, sweep value, seed) with its TrainConfig."""
        values = self.sweep_values if self.sweep else (None,)
        out = []
        for cell in self.cells:
            mode, method = CELLS[cell]
            # a non-private cell has no privacy axis
            epsilons = (math.inf,) if mode == "nonprivate" else self.epsilons
            for eps in epsilons:
                for value in values:
                    for r in range(self.repeats):
                        seed = self.seed_base + r
                        cfg = replace(self.base, mode=mode, method=method, delta=self.delta, seed=seed,
                                      epsilon=eps if math.isfinite(eps) else self.base.epsilon)
                        if self.sweep:
                            cfg = replace(cfg, **{self.sweep: value})
                        out.append((cell, eps, value, seed, cfg))
        return out


@dataclass
class RunResult:
    cell: str
    epsilon: float
    sweep_value: object
    seed: int
    status: str
    report: TrainReport | None = None
    error: str = ""

    def row(self) -> dict:
        r = self.report
        get = (lambda k: getattr(r, k)) if r is not None else (lambda k: "")
        return {
            "cell": self.cell, "epsilon": self.epsilon, "sweep_value": "" if self.sweep_value is None else self.sweep_value,
            "seed": self.seed, "status": self.status, "final_test_acc": get("final_test_acc"),
            "final_train_acc": get("final_train_acc"), "sigma": get("sigma"), "eps_spent": get("eps_spent"),
            "rho_spent": get("rho_spent"), "steps": get("steps"), "error": self.error,
        }


def _run_one(args) -> RunResult:
    (cell, eps, value, seed, cfg), train_set, test_set, run_dir = args
    try:
        _, report = train(train_set, cfg, test_set)
    except acc.InfeasibleBudget as err:
        return RunResult(cell, eps, value, seed, "infeasible", error=str(err))
    except Exception as err:  # a failed child is recorded, the grid keeps going
        return RunResult(cell, eps, value, seed, "failed", error=f"{type(err).__name__}: {err}")
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(run_dir / "report.csv")
    return RunResult(cell, eps, value, seed, "ok", report)


def run_dir_for(out_dir: Path, cell: str, eps: float, value, seed: int) -> Path:
    name = f"{cell}_eps{eps:g}" + ("" if value is None else f"_{value}") + f"_seed{seed}"
    return out_dir / "runs" / name


def run_experiment(spec: ExperimentSpec, out_dir=None, data=None, workers: int = 1,
                   log=None) -> list[RunResult]:
    """Run the whole grid; writes runs.csv and aggregate.csv when ``out_dir`` is given.

    ``data`` is an optional preloaded ``(train, test)`` pair.
    """
    spec.validate()
    train_set, test_set = data if data is not None else load_benchmark(spec.dataset, spec.data_path, spec.split_rule)
    out_dir = None if out_dir is None else Path(out_dir)
    tasks = []
    for job in spec.jobs():
        cell, eps, value, seed, _ = job
        rd = None if out_dir is None else run_dir_for(out_dir, cell, eps, value, seed)
        tasks.append((job, train_set, test_set, rd))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for res in pool.map(_run_one, tasks):
                results.append(res)
                _progress(log, res, len(results), len(tasks))
    else:
        for task in tasks:
            res = _run_one(task)
            results.append(res)
            _progress(log, res, len(results), len(tasks))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_runs(results, out_dir / "runs.csv")
        write_aggregate(aggregate(results), out_dir / "aggregate.csv")
    return results


def _progress(log, res: RunResult, done: int, total: int) -> None:
    if log is None:
        return
    acc_text = f"{res.report.final_test_acc:.4f}" if res.report else res.error
    log(f"[{done}/{total}] {res.cell} eps={res.epsilon:g} {res.sweep_value or ''} seed={res.seed}: "
        f"{res.status} {acc_text}")


def write_runs(results: list[RunResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RUN_COLUMNS)
        writer.writeheader()
        for res in results:
            writer.writerow(res.row())


def aggregate(results: list[RunResult]) -> list[dict]:
    """Mean and (population) std across seeds, per cell and epoch."""
    groups = defaultdict(lambda: defaultdict(list))
    for res in results:
        if res.report is None:
            continue
        key = (res.cell, res.epsilon, "" if res.sweep_value is None else res.sweep_value)
        for row in res.report.rows:
            groups[key][row["epoch"]].append(row)
    out = []
    for (cell, eps, value), by_epoch in groups.items():
        for epoch in sorted(by_epoch):
            rows = by_epoch[epoch]
            test = np.array([r["test_acc"] for r in rows])
            tr = np.array([r["train_acc"] for r in rows])
            out.append({
                "cell": cell, "epsilon": eps, "sweep_value": value, "epoch": epoch, "n_runs": len(rows),
                "test_acc_mean": float(test.mean()), "test_acc_std": float(test.std()),
                "train_acc_mean": float(tr.mean()), "train_acc_std": float(tr.std()),
                "elbo_mean": float(np.mean([r["elbo"] for r in rows])),
            })
    return out


def write_aggregate(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def final_means(results: list[RunResult]) -> dict:
    """``{(cell, epsilon, sweep_value): mean final test accuracy}`` over successful runs."""
    acc_by = defaultdict(list)
    for res in results:
        if res.report is not None:
            acc_by[(res.cell, res.epsilon, res.sweep_value)].append(res.report.final_test_acc)
    return {k: float(np.mean(v)) for k, v in acc_by.items()}

