"""Privacy accounting for noisy clipped-gradient training.

Two routes turn a total ``(epsilon, delta)`` budget into a per-step noise
multiplier ``sigma`` (noise std divided by sensitivity):

* ``"zcdp"``: each subsampled Gaussian step costs ``nu**2 / (2 sigma**2)``
  zCDP, steps add up, and the total converts to ``(epsilon, delta)``-DP.
* ``"ac"``: each step is an ``(eps0, delta0)`` Gaussian mechanism, amplified
  by subsampling, then combined with the advanced composition theorem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

METHODS = ("zcdp", "ac")

SIGMA_BRACKET = (1e-3, 1e6)
SIGMA_REL_TOL = 1e-6


class PrivacyError(ValueError):
    """Invalid privacy parameters."""


class InfeasibleBudget(PrivacyError):
    """No noise level in the search bracket meets the budget."""


class BudgetExhausted(RuntimeError):
    """A training step would overspend the configured budget."""


@dataclass(frozen=True)
class PrivacyParams:
    epsilon_total: float
    delta_total: float
    clip_c: float
    sampling_nu: float
    iterations_t: int
    method: str = "zcdp"

    def __post_init__(self):
        if not self.epsilon_total > 0:
            raise PrivacyError("epsilon_total must be positive")
        if not 0 < self.delta_total < 1:
            raise PrivacyError("delta_total must lie in (0, 1)")
        if not self.clip_c > 0:
            raise PrivacyError("clip_c must be positive")
        if not 0 < self.sampling_nu <= 1:
            raise PrivacyError("sampling_nu must lie in (0, 1]")
        if self.iterations_t < 1:
            raise PrivacyError("iterations_t must be at least 1")
        if self.method not in METHODS:
            raise PrivacyError(f"method must be one of {METHODS}")

    @classmethod
    def from_epochs(cls, epsilon_total, delta_total, clip_c, sampling_nu, epochs, method="zcdp"):
        return cls(epsilon_total, delta_total, clip_c, sampling_nu,
                   iterations_for_epochs(epochs, sampling_nu), method)


def iterations_for_epochs(epochs: float, nu: float) -> int:
    # ceil with a guard against 100 / 0.01 = 10000.000000000002
    return max(1, math.ceil(epochs / nu - 1e-9))


# --- single-mechanism facts -------------------------------------------------


def gaussian_sigma_for(eps0: float, delta0: float, sensitivity: float) -> float:
    """Absolute noise std making the Gaussian mechanism ``(eps0, delta0)``-DP."""
    if not 0 < eps0 <= 1:
        raise PrivacyError("the classical Gaussian calibration needs 0 < eps0 <= 1")
    if not 0 < delta0 < 1 or not sensitivity > 0:
        raise PrivacyError("need 0 < delta0 < 1 and sensitivity > 0")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta0)) / eps0


def gaussian_eps_for(sigma_rel: float, delta0: float) -> float:
    """Inverse of ``gaussian_sigma_for`` at unit sensitivity."""
    return math.sqrt(2.0 * math.log(1.25 / delta0)) / sigma_rel


def zcdp_of_gaussian(sigma: float, sensitivity: float) -> float:
    if not sigma > 0:
        raise PrivacyError("sigma must be positive")
    return sensitivity**2 / (2.0 * sigma**2)


def zcdp_step_subsampled(sigma_rel: float, nu: float) -> float:
    if not sigma_rel > 0 or not 0 < nu <= 1:
        raise PrivacyError("need sigma_rel > 0 and 0 < nu <= 1")
    return nu**2 / (2.0 * sigma_rel**2)


def zcdp_compose(steps) -> float:
    steps = list(steps)
    if any(rho < 0 for rho in steps):
        raise PrivacyError("zCDP costs are non-negative")
    return math.fsum(steps)


def zcdp_to_dp(rho: float, delta: float) -> float:
    if rho < 0 or not 0 < delta < 1:
        raise PrivacyError("need rho >= 0 and 0 < delta < 1")
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def amplify_subsample(eps0: float, delta0: float, nu: float) -> tuple[float, float]:
    if not eps0 > 0 or not 0 < nu <= 1:
        raise PrivacyError("need eps0 > 0 and 0 < nu <= 1")
    return math.log1p(nu * math.expm1(eps0)), nu * delta0


def ac_total_epsilon(eps_i: float, t: int, delta_slack: float) -> float:
    """Advanced composition of ``t`` mechanisms, each ``eps_i``-DP."""
    if not eps_i > 0 or t < 1 or not 0 < delta_slack < 1:
        raise PrivacyError("need eps_i > 0, t >= 1 and 0 < delta_slack < 1")
    return math.sqrt(2.0 * t * math.log(1.0 / delta_slack)) * eps_i + t * eps_i * math.expm1(eps_i)


# --- budget curves and inversion ---------------------------------------------


def ac_step_params(sigma_rel: float, nu: float, t: int, delta_total: float) -> tuple[float, float]:
    """Amplified per-step ``(eps_i, delta_i)`` under the AC delta split.

    Half of ``delta_total`` is composition slack; the other half is spread
    evenly over the ``t`` amplified per-step deltas. Returns ``eps_i = inf``
    when the Gaussian calibration is outside its ``eps0 <= 1`` regime.
    """
    delta_i = delta_total / (2.0 * t)
    delta0 = delta_i / nu
    eps0 = gaussian_eps_for(sigma_rel, delta0)
    if eps0 > 1:
        return math.inf, delta_i
    return amplify_subsample(eps0, delta0, nu)[0], delta_i


def total_epsilon(sigma_rel: float, nu: float, t: int, delta_total: float, method: str) -> float:
    if method == "zcdp":
        return zcdp_to_dp(t * zcdp_step_subsampled(sigma_rel, nu), delta_total)
    if method == "ac":
        eps_i, _ = ac_step_params(sigma_rel, nu, t, delta_total)
        if math.isinf(eps_i):
            return math.inf
        return ac_total_epsilon(eps_i, t, delta_total / 2.0)
    raise PrivacyError(f"unknown method {method!r}")


def solve_sigma_bracket(params: PrivacyParams) -> tuple[float, float]:
    """Bisection bracket ``(lo, hi)``: ``lo`` overspends, ``hi`` meets the budget."""
    lo, hi = SIGMA_BRACKET

    def spent(s):
        return total_epsilon(s, params.sampling_nu, params.iterations_t, params.delta_total, params.method)

    if spent(hi) > params.epsilon_total:
        raise InfeasibleBudget(f"budget {params.epsilon_total} unreachable even at sigma={hi:g}")
    if spent(lo) <= params.epsilon_total:
        return lo, lo
    while hi - lo > SIGMA_REL_TOL * hi:
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        if spent(mid) <= params.epsilon_total:
            hi = mid
        else:
            lo = mid
    return lo, hi


def solve_sigma(params: PrivacyParams) -> float:
    """Smallest noise multiplier (to bisection precision) that fits the budget."""
    return solve_sigma_bracket(params)[1]


def noise_std_for_update(sigma_rel: float, clip_c: float) -> float:
    """Per-coordinate std of the noise added to a clipped gradient sum (sensitivity 2C)."""
    return 2.0 * clip_c * sigma_rel


@dataclass
class BudgetLedger:
    """Running privacy spend of one training run."""

    params: PrivacyParams
    sigma: float
    steps_taken: int = 0
    enforce: bool = True

    @property
    def rho_spent(self) -> float:
        # identical steps: fsum of k copies equals k * rho_step exactly
        return self.steps_taken * self.rho_step

    @property
    def rho_step(self) -> float:
        return zcdp_step_subsampled(self.sigma, self.params.sampling_nu)

    @property
    def eps_step(self) -> float:
        """Amplified per-step epsilon on the AC route."""
        return ac_step_params(self.sigma, self.params.sampling_nu, self.params.iterations_t,
                              self.params.delta_total)[0]

    def epsilon_after(self, steps: int, rho: float) -> float:
        if steps == 0:
            return 0.0
        if self.params.method == "zcdp":
            return zcdp_to_dp(rho, self.params.delta_total)
        return ac_total_epsilon(self.eps_step, steps, self.params.delta_total / 2.0)

    @property
    def eps_spent(self) -> float:
        return self.epsilon_after(self.steps_taken, self.rho_spent)

    def step(self) -> None:
        steps = self.steps_taken + 1
        rho = steps * self.rho_step
        if self.enforce and (steps > self.params.iterations_t
                             or self.epsilon_after(steps, rho) > self.params.epsilon_total):
            raise BudgetExhausted(f"step {steps} would exceed epsilon={self.params.epsilon_total}")
        self.steps_taken = steps
