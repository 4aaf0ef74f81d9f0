"""Private and non-private training loops for variational-dropout networks.

Modes:

``dpvd``
    Variational dropout with per-example clipped, Gaussian-noised likelihood
    gradients. The weight noise scale ``zeta`` is tied to the parameter-space
    std of the injected update noise (``zeta_pin="sum"`` ties it to the noise
    std on the gradient sum instead) unless ``learn_zeta`` is set.
``svi``
    Same clipping and noise on a deterministic network (no dropout, no KL).
``nonprivate``
    Plain stochastic variational inference with learnable ``zeta``.

Each example carries the objective ``(N/S) * -log p(y_i | x_i) + KL/S``, so a
minibatch sums to the usual ELBO estimate and the update direction is that sum
divided by ``S``. One private iteration clips every example's gradient to norm
``C`` per layer, adds ``N(0, (2 C sigma)^2 I)`` to the per-layer sum and divides
by ``S``. Clipping the KL share along with the likelihood keeps their ratio
when clipping binds.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import accountant as acc
from .core import Rng, gaussian_sample
from .datasets import LabeledDataset, N_CLASSES
from .vdnet import (
    FORWARD_KINDS,
    LayerGrads,
    Network,
    clipped_grad_sum,
    elbo_minibatch,
    init_network,
    kl_grads,
    loss_and_grads,
    predict,
    sample_noise,
)

MODES = ("dpvd", "svi", "nonprivate")
# pinned zeta: std of the injected noise in parameter units (eta * 2 C sigma / S)
# or in gradient-sum units (2 C sigma)
ZETA_PINS = ("update", "sum")
_MAX_LOG_STEP = 1.0


class ConfigError(ValueError):
    """Inconsistent training configuration."""


@dataclass
class TrainConfig:
    epochs: int = 100
    minibatch: int = 100
    lr0: float = 0.05
    decay: float = 1.0
    clip_c: float = 2.0
    hidden_units: int = 1000
    mode: str = "dpvd"
    method: str = "zcdp"
    epsilon: float = 1.0
    delta: float = 1e-5
    seed: int = 0
    forward: str = "lrt"
    kl_weight: float = 1.0
    alpha0: float = 0.01
    # learnable zeta in private modes; its gradient is clipped and noised with phi's
    learn_zeta: bool = False
    zeta_pin: str = "update"
    # fixed noise multiplier instead of solving for it; disables budget checks
    sigma: float | None = None
    eval_every: int = 1

    def validate(self, n_train: int) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method not in acc.METHODS:
            raise ConfigError(f"method must be one of {acc.METHODS}, got {self.method!r}")
        if self.zeta_pin not in ZETA_PINS:
            raise ConfigError(f"zeta_pin must be one of {ZETA_PINS}")
        if self.forward not in FORWARD_KINDS:
            raise ConfigError(f"forward must be one of {FORWARD_KINDS}")
        if not 1 <= self.minibatch <= n_train:
            raise ConfigError(f"minibatch must be in [1, {n_train}]")
        if self.epochs < 1 or self.hidden_units < 1 or self.eval_every < 1:
            raise ConfigError("epochs, hidden_units and eval_every must be positive")
        if not self.lr0 > 0 or self.decay < 0 or not self.clip_c > 0:
            raise ConfigError("need lr0 > 0, decay >= 0, clip_c > 0")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    @property
    def private(self) -> bool:
        return self.mode != "nonprivate"


def learning_rate(lr0: float, decay: float, epoch: int) -> float:
    return lr0 / epoch**decay


def n_iterations(epochs: int, minibatch: int, n_train: int) -> int:
    """``ceil(E / nu)`` with ``nu = S / N``, in exact integer arithmetic."""
    return -(-epochs * n_train // minibatch)


def privacy_params(config: TrainConfig, n_train: int) -> acc.PrivacyParams:
    return acc.PrivacyParams(
        epsilon_total=config.epsilon,
        delta_total=config.delta,
        clip_c=config.clip_c,
        sampling_nu=config.minibatch / n_train,
        iterations_t=n_iterations(config.epochs, config.minibatch, n_train),
        method=config.method,
    )


def make_ledger(config: TrainConfig, n_train: int) -> acc.BudgetLedger | None:
    """Budget ledger for a private run, or ``None`` when no noise is added."""
    if not config.private:
        return None
    params = privacy_params(config, n_train)
    if config.sigma is None:
        return acc.BudgetLedger(params, acc.solve_sigma(params))
    if config.sigma == 0:
        return None
    return acc.BudgetLedger(params, config.sigma, enforce=False)


def sample_minibatch(n: int, s: int, rng: Rng) -> np.ndarray:
    """``s`` distinct indices drawn uniformly from ``range(n)``."""
    if not 1 <= s <= n:
        raise ValueError(f"minibatch size {s} outside [1, {n}]")
    return rng.choice(n, s)


def evaluate(net: Network, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(net, data.features) == data.labels))


def kl_share(net: Network, n_total: int, kl_weight: float) -> list[LayerGrads] | None:
    """Per-example share ``kl_weight * grad KL / N`` of the KL gradient."""
    if not kl_weight:
        return None
    out = []
    for layer in net.layers:
        k_phi, k_zeta = kl_grads(layer.zeta, layer.phi)
        out.append(LayerGrads(kl_weight * k_phi / n_total, kl_weight * k_zeta / n_total,
                              np.zeros_like(layer.bias)))
    return out


def clipped_avg_gradient(net: Network, x, y, noise, kind: str, clip_c: float, n_total: int | None = None,
                         kl_weight: float = 0.0, include_zeta: bool = False) -> list[LayerGrads]:
    """Batch average of per-example objective gradients, clipped per layer.

    Example ``i`` contributes ``(N/S) * -log p(y_i | x_i) + kl_weight * KL / S``.
    """
    s = len(x)
    n_total = s if n_total is None else n_total
    w = n_total / s
    # clip(w g + K / S, C) == w clip(g + K / N, C / w)
    sums, _ = clipped_grad_sum(net, x, y, noise, kind, clip_c / w, include_zeta,
                               kl_share(net, n_total, kl_weight))
    return [LayerGrads(g.phi / s * w, g.zeta / s * w, g.bias / s * w) for g in sums]


def _pin_zeta(net: Network, value: float) -> None:
    for layer in net.layers:
        layer.zeta.fill(value)


def _apply(net: Network, grads: list[LayerGrads], eta: float, update_zeta: bool) -> None:
    for layer, g in zip(net.layers, grads):
        layer.phi -= eta * g.phi
        layer.bias -= eta * g.bias
        if update_zeta:
            # gradient step on log(zeta): well conditioned where the KL
            # gradient grows like 1/zeta, keeps zeta > 0 and zeta == 0 fixed
            layer.zeta *= np.exp(np.clip(-eta * layer.zeta * g.zeta, -_MAX_LOG_STEP, _MAX_LOG_STEP))


def sgd_step(net: Network, x, y, config: TrainConfig, rng: Rng, eta: float, n_total: int) -> None:
    """Non-private variational update of phi, zeta and bias."""
    noise = sample_noise(net, len(x), rng, config.forward)
    _, grads = loss_and_grads(net, x, y, noise, config.forward, n_total, config.kl_weight)
    w = n_total / len(x)
    for g in grads:
        g.phi, g.zeta, g.bias = g.phi * w, g.zeta * w, g.bias * w
    _apply(net, grads, eta, update_zeta=True)


def dp_step(net: Network, x, y, ledger: acc.BudgetLedger | None, config: TrainConfig, rng: Rng,
            eta: float, n_total: int) -> list[LayerGrads]:
    """One private iteration; returns the injected (gradient-sum scale) noise.

    The ledger is charged before the network is touched, so an exhausted
    budget leaves the parameters unchanged.
    """
    s = len(x)
    sigma = 0.0 if ledger is None else ledger.sigma
    std = acc.noise_std_for_update(sigma, config.clip_c)
    if ledger is not None:
        ledger.step()
    dropout = config.mode == "dpvd"
    if not dropout:
        kind = "mean"
        _pin_zeta(net, 0.0)
    else:
        kind = config.forward
        if not config.learn_zeta:
            _pin_zeta(net, eta * std / s if config.zeta_pin == "update" else std)
    noise = sample_noise(net, s, rng, kind)
    learn_zeta = dropout and config.learn_zeta
    w = n_total / s
    shared = kl_share(net, n_total, config.kl_weight) if dropout else None
    sums, _ = clipped_grad_sum(net, x, y, noise, kind, config.clip_c / w, learn_zeta, shared)
    injected = []
    for g in sums:
        z = LayerGrads(
            gaussian_sample(rng, *g.phi.shape, std=std),
            gaussian_sample(rng, *g.zeta.shape, std=std) if learn_zeta else np.zeros_like(g.zeta),
            gaussian_sample(rng, *g.bias.shape, std=std),
        )
        injected.append(z)
        # (w * sum + z) / s, arranged so that z == 0 reproduces the
        # non-private arithmetic bit for bit
        g.phi = (g.phi + z.phi / w) / s * w
        g.zeta = (g.zeta + z.zeta / w) / s * w
        g.bias = (g.bias + z.bias / w) / s * w
    _apply(net, sums, eta, update_zeta=learn_zeta)
    return injected


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    final_test_acc: float = float("nan")
    final_train_acc: float = float("nan")
    wall_time: float = 0.0
    sigma: float | None = None
    steps: int = 0
    rho_spent: float = 0.0
    eps_spent: float = 0.0

    COLUMNS = ("epoch", "elbo", "train_acc", "test_acc", "rho_spent", "eps_spent")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def summary(self, config: TrainConfig, delta: float | None = None) -> dict:
        return {
            "final_test_acc": self.final_test_acc,
            "final_train_acc": self.final_train_acc,
            "epsilon": config.epsilon if config.private else None,
            "delta": config.delta if config.private else None,
            "eps_spent": self.eps_spent,
            "rho_spent": self.rho_spent,
            "sigma": self.sigma,
            "steps": self.steps,
            "seed": config.seed,
            "config": asdict(config),
        }


def _epoch_row(net, epoch, train, test, n_total, ledger, rng) -> dict:
    est = elbo_minibatch(net, train.features, train.labels, n_total, rng, "lrt")
    return {
        "epoch": epoch,
        "elbo": est.elbo,
        "train_acc": evaluate(net, train),
        "test_acc": evaluate(net, test) if test is not None else float("nan"),
        "rho_spent": 0.0 if ledger is None else ledger.rho_spent,
        "eps_spent": 0.0 if ledger is None else ledger.eps_spent,
    }


def train(data: LabeledDataset, config: TrainConfig, test: LabeledDataset | None = None,
          net: Network | None = None) -> tuple[Network, TrainReport]:
    config.validate(len(data))
    start = time.perf_counter()
    n, s = len(data), config.minibatch
    init_rng, step_rng, eval_rng = Rng(config.seed).spawn(3)
    if net is None:
        alpha0 = 0.0 if config.mode == "svi" else config.alpha0
        net = init_network([data.n_features, config.hidden_units, N_CLASSES], init_rng, alpha0)
    ledger = make_ledger(config, n)
    t_total = n_iterations(config.epochs, s, n)
    report = TrainReport(sigma=None if ledger is None else ledger.sigma)
    x_all, y_all = data.features, data.labels
    for k in range(t_total):
        epoch = k * s // n + 1
        eta = learning_rate(config.lr0, config.decay, epoch)
        idx = sample_minibatch(n, s, step_rng)
        x, y = x_all[idx], y_all[idx]
        if config.private:
            dp_step(net, x, y, ledger, config, step_rng, eta, n)
        else:
            sgd_step(net, x, y, config, step_rng, eta, n)
        done = (k + 1) * s // n
        if done > (k * s) // n and (done % config.eval_every == 0 or k == t_total - 1):
            report.rows.append(_epoch_row(net, done, data, test, n, ledger, eval_rng))
    report.steps = t_total
    report.final_train_acc = evaluate(net, data)
    report.final_test_acc = evaluate(net, test) if test is not None else float("nan")
    if ledger is not None:
        report.rho_spent = ledger.rho_spent
        report.eps_spent = ledger.eps_spent
    report.wall_time = time.perf_counter() - start
    return net, report


def config_from_mapping(values: dict) -> TrainConfig:
    """Build a TrainConfig from string or typed values, ignoring unknown keys."""
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        kwargs[f.name] = _coerce(f.name, f.type, raw)
    return TrainConfig(**kwargs)


def _coerce(name: str, type_name, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if "bool" in str(type_name):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "None" in str(type_name) and text.lower() in ("", "none"):
            return None
        if "int" in str(type_name):
            return int(text)
        if "float" in str(type_name):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return text


def summary_json(report: TrainReport, config: TrainConfig) -> str:
    return json.dumps(report.summary(config), indent=2, sort_keys=True)
