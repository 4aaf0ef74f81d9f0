"""Feed-forward classifier with variational-dropout weight posteriors.

Each weight is Gaussian, ``theta = phi + zeta * eps`` with ``eps ~ N(0, 1)``,
so the dropout rate ``alpha = zeta**2 / phi**2`` is a derived quantity and
``d theta / d phi = 1``. Layers are affine with ReLU in between and a
log-softmax output.

Three forward flavours share one backprop routine:

* ``"lrt"``: noise on pre-activations (local reparameterization), one draw
  per example and unit.
* ``"weights"``: one weight matrix sample per layer, shared by the batch.
* ``"mean"``: deterministic pass with the means ``phi``.

The training objective is the negative ELBO per datum,
``mean_i(-log p(y_i | x_i, theta)) + kl_weight * KL / n_total``, so that
learning rates do not depend on the dataset size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import DimensionError, Rng, as_matrix, log_softmax, relu

KL_K1 = 0.63576
KL_K2 = 1.87320
KL_K3 = 1.48695

FORWARD_KINDS = ("lrt", "weights", "mean")
CHECKPOINT_VERSION = 1


@dataclass
class VariationalLayer:
    phi: np.ndarray
    zeta: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.phi = as_matrix(self.phi)
        self.zeta = as_matrix(self.zeta)
        self.bias = as_matrix(self.bias)
        if self.zeta.shape != self.phi.shape:
            raise DimensionError("zeta must match phi")
        if self.bias.shape != (1, self.phi.shape[1]):
            raise DimensionError("bias must be a row vector over output units")
        if np.any(self.zeta < 0):
            raise ValueError("zeta entries must be non-negative")

    @property
    def n_in(self) -> int:
        return self.phi.shape[0]

    @property
    def n_out(self) -> int:
        return self.phi.shape[1]

    @property
    def alpha(self) -> np.ndarray:
        """Per-weight dropout rate; ``inf`` where ``phi == 0``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            a = self.zeta**2 / self.phi**2
        a[self.phi == 0] = np.inf
        return a

    def copy(self) -> "VariationalLayer":
        return VariationalLayer(self.phi.copy(), self.zeta.copy(), self.bias.copy())


@dataclass
class Network:
    layers: list[VariationalLayer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise DimensionError(f"layer sizes do not compose: {prev.n_out} -> {nxt.n_in}")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers])

    def n_params(self) -> int:
        return sum(layer.phi.size + layer.bias.size for layer in self.layers)


@dataclass(frozen=True)
class ElboEstimate:
    expected_loglik: float
    kl: float

    @property
    def elbo(self) -> float:
        return self.expected_loglik - self.kl


@dataclass
class LayerGrads:
    phi: np.ndarray
    zeta: np.ndarray
    bias: np.ndarray

    def flat(self, include_zeta: bool = True) -> np.ndarray:
        parts = [self.phi.ravel(), self.bias.ravel()]
        if include_zeta:
            parts.insert(1, self.zeta.ravel())
        return np.concatenate(parts)


def init_network(sizes, rng: Rng, alpha0: float = 0.01) -> Network:
    """He-initialized means, zero biases, and ``zeta = sqrt(alpha0) * |phi|``."""
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        phi = rng.normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        zeta = np.sqrt(alpha0) * np.abs(phi)
        layers.append(VariationalLayer(phi, zeta, np.zeros((1, n_out))))
    return Network(layers)


# --- KL to the log-uniform prior -------------------------------------------


def _log_alpha(zeta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 2.0 * (np.log(np.abs(zeta)) - np.log(np.abs(phi)))


def neg_kl_approx(log_alpha) -> np.ndarray:
    """Full-range approximation of ``-KL(q || log-uniform)`` per weight."""
    la = np.asarray(log_alpha, dtype=np.float64)
    return KL_K1 * expit(KL_K2 + KL_K3 * la) - 0.5 * np.logaddexp(0.0, -la) - KL_K1


def _kl_mask(zeta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    # zeta == 0 marks a point-mass (non-variational) weight; phi == 0 with
    # zeta > 0 is the alpha -> inf limit whose KL is exactly 0.
    return (zeta != 0) & (phi != 0)


def kl_term(zeta, phi) -> float:
    zeta, phi = as_matrix(zeta), as_matrix(phi)
    mask = _kl_mask(zeta, phi)
    if not mask.any():
        return 0.0
    return float(-neg_kl_approx(_log_alpha(zeta[mask], phi[mask])).sum())


def kl_grads(zeta, phi) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``kl_term`` with respect to ``phi`` and ``zeta``."""
    zeta, phi = as_matrix(zeta), as_matrix(phi)
    g_phi = np.zeros_like(phi)
    g_zeta = np.zeros_like(zeta)
    mask = _kl_mask(zeta, phi)
    if mask.any():
        la = _log_alpha(zeta[mask], phi[mask])
        s = expit(KL_K2 + KL_K3 * la)
        # d(-kl)/d(log alpha)
        d = KL_K1 * KL_K3 * s * (1.0 - s) + 0.5 * expit(-la)
        g_phi[mask] = 2.0 * d / phi[mask]
        g_zeta[mask] = -2.0 * d / zeta[mask]
    return g_phi, g_zeta


def network_kl(net: Network) -> float:
    return sum(kl_term(layer.zeta, layer.phi) for layer in net.layers)


# --- forward / backward -----------------------------------------------------


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != net.layers[0].n_in:
        raise DimensionError(f"input has {x.shape[1]} features, network expects {net.layers[0].n_in}")
    return x


def sample_noise(net: Network, batch_size: int, rng: Rng, kind: str = "lrt") -> list | None:
    if kind == "lrt":
        return [rng.normal((batch_size, layer.n_out)) for layer in net.layers]
    if kind == "weights":
        return [rng.normal(layer.phi.shape) for layer in net.layers]
    if kind == "mean":
        return None
    raise ValueError(f"unknown forward kind {kind!r}")


def _forward(net: Network, x: np.ndarray, noise, kind: str):
    """Forward pass returning log-probabilities and a per-layer cache."""
    a = _check_input(net, x)
    cache = []
    last = len(net.layers) - 1
    for idx, layer in enumerate(net.layers):
        entry = {"a": a}
        if kind == "lrt":
            mean = a @ layer.phi + layer.bias
            sd = np.sqrt((a * a) @ (layer.zeta * layer.zeta))
            eps = noise[idx]
            pre = mean + sd * eps
            entry.update(sd=sd, eps=eps)
        elif kind == "weights":
            eps = noise[idx]
            theta = layer.phi + layer.zeta * eps
            pre = a @ theta + layer.bias
            entry.update(theta=theta, eps=eps)
        elif kind == "mean":
            pre = a @ layer.phi + layer.bias
        else:
            raise ValueError(f"unknown forward kind {kind!r}")
        entry["pre"] = pre
        cache.append(entry)
        a = pre if idx == last else relu(pre)
    return log_softmax(a), cache


def _lrt_u(entry) -> np.ndarray:
    sd = entry["sd"]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = entry["delta"] * entry["eps"] / sd
    u[sd == 0] = 0.0
    return u


def _backprop(net: Network, logp: np.ndarray, y: np.ndarray, cache, kind: str) -> None:
    """Store per-example ``delta = d(-log p_i) / d pre`` in each cache entry."""
    delta = np.exp(logp)
    delta[np.arange(len(y)), y] -= 1.0
    for idx in range(len(net.layers) - 1, -1, -1):
        layer, entry = net.layers[idx], cache[idx]
        entry["delta"] = delta
        if idx == 0:
            break
        if kind == "lrt":
            u = _lrt_u(entry)
            da = delta @ layer.phi.T + entry["a"] * (u @ (layer.zeta * layer.zeta).T)
        elif kind == "weights":
            da = delta @ entry["theta"].T
        else:
            da = delta @ layer.phi.T
        delta = da * (cache[idx - 1]["pre"] > 0)


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).ravel()
    if len(y) != n:
        raise DimensionError("labels and inputs disagree in length")
    if n == 0:
        raise ValueError("empty batch")
    return y


def forward_deterministic(net: Network, x) -> np.ndarray:
    return _forward(net, x, None, "mean")[0]


def forward_sampled(net: Network, x, rng: Rng) -> np.ndarray:
    x = _check_input(net, x)
    return _forward(net, x, sample_noise(net, len(x), rng, "weights"), "weights")[0]


def forward_lrt(net: Network, x, rng: Rng) -> np.ndarray:
    x = _check_input(net, x)
    return _forward(net, x, sample_noise(net, len(x), rng, "lrt"), "lrt")[0]


def preactivations(net: Network, x, noise, kind: str) -> list[np.ndarray]:
    """Pre-activations of every layer under the given noise draw."""
    return [entry["pre"] for entry in _forward(net, x, noise, kind)[1]]


def predict(net: Network, x) -> np.ndarray:
    return np.argmax(forward_deterministic(net, x), axis=1)


def elbo_minibatch(net: Network, x, y, n_total: int, rng: Rng, kind: str = "lrt") -> ElboEstimate:
    x = _check_input(net, x)
    y = _check_labels(y, len(x))
    if n_total < len(x):
        raise ValueError("n_total must be at least the batch size")
    logp, _ = _forward(net, x, sample_noise(net, len(x), rng, kind), kind)
    loglik = logp[np.arange(len(y)), y].sum() * (n_total / len(x))
    return ElboEstimate(float(loglik), network_kl(net))


def loss_and_grads(net: Network, x, y, noise, kind: str = "lrt", n_total: int | None = None,
                   kl_weight: float = 1.0) -> tuple[float, list[LayerGrads]]:
    """Per-datum negative ELBO and its pathwise gradient with ``noise`` held fixed."""
    x = _check_input(net, x)
    y = _check_labels(y, len(x))
    n_total = len(x) if n_total is None else n_total
    logp, cache = _forward(net, x, noise, kind)
    _backprop(net, logp, y, cache, kind)
    s = len(x)
    value = -logp[np.arange(s), y].mean()
    grads = []
    for layer, entry in zip(net.layers, cache):
        a, delta = entry["a"], entry["delta"]
        g_phi = a.T @ delta / s
        g_bias = delta.mean(axis=0, keepdims=True)
        if kind == "lrt":
            g_zeta = ((a * a).T @ _lrt_u(entry)) * layer.zeta / s
        elif kind == "weights":
            g_zeta = g_phi * entry["eps"]
        else:
            g_zeta = np.zeros_like(layer.zeta)
        grads.append(LayerGrads(g_phi, g_zeta, g_bias))
    if kl_weight:
        value += kl_weight * network_kl(net) / n_total
        for layer, g in zip(net.layers, grads):
            k_phi, k_zeta = kl_grads(layer.zeta, layer.phi)
            g.phi += kl_weight * k_phi / n_total
            g.zeta += kl_weight * k_zeta / n_total
    return float(value), grads


def backward(net: Network, x, y, rng: Rng, n_total: int | None = None, kind: str = "lrt",
             kl_weight: float = 1.0) -> list[LayerGrads]:
    x = _check_input(net, x)
    return loss_and_grads(net, x, y, sample_noise(net, len(x), rng, kind), kind, n_total, kl_weight)[1]


def clipped_grad_sum(net: Network, x, y, noise, kind: str, clip_c: float, include_zeta: bool = False,
                     shared: list[LayerGrads] | None = None) -> tuple[list[LayerGrads], list[np.ndarray]]:
    """Sum over examples of per-example gradients, each clipped per layer.

    Example ``i`` contributes ``grad(-log p(y_i | x_i, theta)) + shared``
    where ``shared`` is an optional per-layer term common to every example
    (a share of the KL, say). Each layer's (phi, [zeta,] bias) part is
    scaled to L2 norm at most ``clip_c``. Returns the summed clipped gradients
    and, per layer, the unclipped per-example norms. Norms come from rank-one
    identities, so no per-example gradient is materialized.
    """
    if not clip_c > 0:
        raise ValueError("clip_c must be positive")
    x = _check_input(net, x)
    y = _check_labels(y, len(x))
    logp, cache = _forward(net, x, noise, kind)
    _backprop(net, logp, y, cache, kind)
    sums, norms = [], []
    for idx, (layer, entry) in enumerate(zip(net.layers, cache)):
        a, delta = entry["a"], entry["delta"]
        a2 = a * a
        d2 = delta * delta
        sq = a2.sum(axis=1) * d2.sum(axis=1) + d2.sum(axis=1)
        zeta_part = include_zeta and kind in ("lrt", "weights")
        if zeta_part and kind == "lrt":
            u = _lrt_u(entry)
            # per-example zeta gradient is outer(a_i^2, u_i) * zeta
            sq = sq + ((a2 * a2) @ (layer.zeta * layer.zeta) * (u * u)).sum(axis=1)
        elif zeta_part:
            sq = sq + ((a2 @ (entry["eps"] ** 2)) * d2).sum(axis=1)
        k = None if shared is None else shared[idx]
        if k is not None:
            sq = sq + 2.0 * ((a @ k.phi) * delta).sum(axis=1) + 2.0 * (delta @ k.bias.T)[:, 0]
            sq = sq + (k.phi ** 2).sum() + (k.bias ** 2).sum()
            if zeta_part and kind == "lrt":
                sq = sq + 2.0 * ((a2 @ (layer.zeta * k.zeta)) * u).sum(axis=1)
                sq = sq + (k.zeta ** 2).sum()
            elif zeta_part:
                sq = sq + 2.0 * ((a @ (entry["eps"] * k.zeta)) * delta).sum(axis=1)
                sq = sq + (k.zeta ** 2).sum()
        norm = np.sqrt(np.maximum(sq, 0.0))
        scale = 1.0 / np.maximum(1.0, norm / clip_c)
        sd = delta * scale[:, None]
        g_phi = a.T @ sd
        g_bias = sd.sum(axis=0, keepdims=True)
        if zeta_part and kind == "lrt":
            g_zeta = (a2.T @ (u * scale[:, None])) * layer.zeta
        elif zeta_part:
            g_zeta = g_phi * entry["eps"]
        else:
            g_zeta = np.zeros_like(layer.zeta)
        if k is not None:
            total = scale.sum()
            g_phi = g_phi + total * k.phi
            g_bias = g_bias + total * k.bias
            if zeta_part:
                g_zeta = g_zeta + total * k.zeta
        sums.append(LayerGrads(g_phi, g_zeta, g_bias))
        norms.append(norm)
    return sums, norms


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(net: Network, path) -> None:
    arrays = {"version": np.array(CHECKPOINT_VERSION), "sizes": np.array(net.sizes, dtype=np.int64)}
    for i, layer in enumerate(net.layers):
        arrays[f"phi_{i}"] = layer.phi
        arrays[f"zeta_{i}"] = layer.zeta
        arrays[f"bias_{i}"] = layer.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Network:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n_layers = len(data["sizes"]) - 1
        layers = [VariationalLayer(data[f"phi_{i}"], data[f"zeta_{i}"], data[f"bias_{i}"])
                  for i in range(n_layers)]
    return Network(layers)
