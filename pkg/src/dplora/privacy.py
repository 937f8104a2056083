"""Gradient clipping, the Gaussian mechanism and privacy accounting.

Two accountants are provided.  ``sequential`` adds per-step ``(eps, delta)``
pairs.  ``moments`` composes the dominant term of the subsampled-Gaussian
log-moment bound,

    alpha(lam) <= q^2 lam (lam + 1) / ((1 - q) rho_bar^2 sigma^2),

over ``T`` steps and converts to ``eps(delta) = min_lam (T alpha(lam) + ln(1/delta)) / lam``
over the integer orders where the bound holds.  ``rho_bar`` is the Euclidean
norm of the aggregation weights; averaging K independently noised uploads with
weights ``rho`` leaves noise of standard deviation ``rho_bar * sigma * C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AccountantInapplicable, ParameterError
from .numerics import frobenius_norm, gaussian_sample

LAMBDA_CAP = 512
SIGMA_GRID = 1e-4
_GRID_STEPS = 10_000  # grid points per unit sigma

DOMINANT_TERM_NOTE = (
    "dominant-term bound: the O(q^3 lam^3 / (rho_bar^1.5 sigma^3)) remainder of the "
    "log-moment bound is omitted"
)
SAMPLING_NOTE = (
    "batches are drawn as fixed-size samples without replacement (q = B/N_k); the "
    "log-moment bound assumes independent inclusion with probability q"
)


@dataclass(frozen=True)
class PrivacyParams:
    """Noise calibration and accounting inputs.

    ``epsilon`` is a target budget and may be ``None`` when only accounting.
    ``c1`` is only used to check the ``epsilon < c1 q^2 T`` precondition,
    which is reported as a warning because no value for the constant is known.
    """

    delta: float
    q: float
    t_rounds: int
    sigma: float = 0.0
    epsilon: float | None = None
    clip_c: float = 1.0
    rho_bar: float = 1.0
    c2: float = 1.0
    c1: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.q <= 1.0:
            raise ParameterError(f"q must lie in (0, 1], got {self.q}")
        if int(self.t_rounds) != self.t_rounds or self.t_rounds < 1:
            raise ParameterError(f"t_rounds must be a positive integer, got {self.t_rounds}")
        if not self.sigma >= 0.0:
            raise ParameterError(f"sigma must be non-negative, got {self.sigma}")
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not self.clip_c > 0.0:
            raise ParameterError(f"clip_c must be positive, got {self.clip_c}")
        if not 0.0 < self.rho_bar <= 1.0 + 1e-12:
            raise ParameterError(f"rho_bar must lie in (0, 1], got {self.rho_bar}")
        if not self.c2 > 0.0 or not self.c1 > 0.0:
            raise ParameterError("c1 and c2 must be positive")

    @property
    def lambda_max(self) -> int:
        return moments_lambda_max(self.q, self.sigma, self.rho_bar)

    @property
    def regime_valid(self) -> bool:
        return moments_regime_reason(self.q, self.sigma, self.rho_bar) is None

    def precondition_warnings(self, epsilon: float | None = None) -> list[str]:
        eps = self.epsilon if epsilon is None else epsilon
        if eps is None:
            return []
        bound = self.c1 * self.q**2 * self.t_rounds
        if eps < bound:
            return []
        return [f"epsilon={eps:.6g} is not below c1*q^2*T={bound:.6g} (c1={self.c1:g}); guarantee precondition unmet"]


@dataclass(frozen=True)
class PrivacySpent:
    epsilon: float
    delta: float
    accountant: str
    lambda_star: int | None = None
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.accountant not in ("sequential", "moments"):
            raise ParameterError(f"unknown accountant {self.accountant!r}")
        if not self.epsilon >= 0.0 or not 0.0 <= self.delta < 1.0:
            raise ParameterError(f"invalid privacy spend ({self.epsilon}, {self.delta})")


def clip_gradient(g: np.ndarray, c: float) -> np.ndarray:
    """Scale ``g`` by ``1 / max(1, ||g|| / c)``.

    Inside the ball the input object is returned untouched.  Outside it the
    scaled result is nudged down by whole ulps if rounding left its norm a hair
    above ``c``.
    """
    if not c > 0:
        raise ParameterError(f"clipping bound must be positive, got {c}")
    norm = frobenius_norm(g)
    if norm <= c:
        return g
    out = g / (norm / c)
    shrink = 1.0
    while frobenius_norm(out) > c:
        shrink = np.nextafter(shrink, 0.0)
        out = (g / (norm / c)) * shrink
    return out


def clip_global(grads: Sequence[np.ndarray], c: float) -> list[np.ndarray]:
    """Clip a list of gradients jointly by their combined norm."""
    if not c > 0:
        raise ParameterError(f"clipping bound must be positive, got {c}")
    norm = math.sqrt(sum(frobenius_norm(g) ** 2 for g in grads))
    if norm <= c:
        return list(grads)
    factor = norm / c
    return [g / factor for g in grads]


def gaussian_mechanism(g_clipped: np.ndarray, sigma: float, c: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. ``N(0, (sigma * c)^2)`` noise to every entry."""
    if not sigma >= 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if not c > 0:
        raise ParameterError(f"clipping bound must be positive, got {c}")
    if sigma == 0:
        return g_clipped
    if not math.isfinite(c):
        raise ParameterError("noise needs a finite clipping bound")
    noise = gaussian_sample(rng, g_clipped.shape, 0.0, sigma * c)
    return g_clipped + noise.astype(g_clipped.dtype, copy=False)


def _check_eps_delta(epsilon: float, delta: float) -> None:
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")


def sigma_single_step(epsilon: float, delta: float) -> float:
    """Noise multiplier making one Gaussian step ``(epsilon, delta)``-DP."""
    _check_eps_delta(epsilon, delta)
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def epsilon_single_step(sigma: float, delta: float) -> float:
    """Inverse of :func:`sigma_single_step` in ``epsilon``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def sigma_calibrate_formula(p: PrivacyParams, form: str = "theorem") -> float:
    """Closed-form noise multiplier ``c2 q sqrt(T ln(1/delta)) / (rho_bar eps)``.

    ``form="proof"`` returns twice that.
    """
    if p.epsilon is None:
        raise ParameterError("calibration needs a target epsilon")
    factor = {"theorem": 1.0, "proof": 2.0}.get(form)
    if factor is None:
        raise ParameterError(f"unknown calibration form {form!r}")
    return factor * p.c2 * p.q * math.sqrt(p.t_rounds * math.log(1.0 / p.delta)) / (p.rho_bar * p.epsilon)


def sequential_composition(steps: Sequence[tuple[float, float]]) -> PrivacySpent:
    """Sum the per-step ``(epsilon, delta)`` pairs."""
    eps = 0.0
    delta = 0.0
    for eps_t, delta_t in steps:
        if not eps_t >= 0 or not 0 <= delta_t < 1:
            raise ParameterError(f"invalid step ({eps_t}, {delta_t})")
        eps += eps_t
        delta += delta_t
    if delta >= 1:
        raise ParameterError(f"composed delta {delta} is not below 1")
    return PrivacySpent(eps, delta, "sequential")


def sequential_epsilon(sigma: float, delta: float, t: int, steps_done: int | None = None) -> PrivacySpent:
    """Composition of ``steps_done`` Gaussian steps, each charged ``delta / t``.

    The per-step epsilon inverts :func:`sigma_single_step`; no subsampling
    amplification is credited.
    """
    steps_done = t if steps_done is None else steps_done
    per_delta = delta / t
    per_eps = epsilon_single_step(sigma, per_delta)
    return sequential_composition([(per_eps, per_delta)] * steps_done)


def moments_lambda_max(q: float, sigma: float, rho_bar: float) -> int:
    """Largest integer order the bound covers, capped at ``LAMBDA_CAP``; 0 if none."""
    if not (sigma > 0 and 0 < q and q * sigma < 1):
        return 0
    limit = rho_bar**2 * sigma**2 * math.log(1.0 / (q * sigma))
    return int(min(LAMBDA_CAP, math.floor(limit)))


def moments_regime_reason(q: float, sigma: float, rho_bar: float) -> str | None:
    """Why the log-moment bound does not apply, or ``None`` if it does."""
    if not sigma > 1:
        return f"sigma={sigma:g} must exceed 1"
    if not q < 1.0 / (16.0 * sigma):
        return f"q={q:g} must be below 1/(16 sigma)={1.0 / (16.0 * sigma):g}"
    if moments_lambda_max(q, sigma, rho_bar) < 1:
        return "no integer order satisfies lam <= rho_bar^2 sigma^2 ln(1/(q sigma))"
    return None


def moments_alpha(lam: int, q: float, sigma: float, rho_bar: float) -> float:
    """Dominant-term log-moment bound of one subsampled Gaussian step."""
    if int(lam) != lam or lam < 1:
        raise ParameterError(f"order must be a positive integer, got {lam}")
    reason = moments_regime_reason(q, sigma, rho_bar)
    if reason is not None:
        raise AccountantInapplicable(reason)
    if lam > moments_lambda_max(q, sigma, rho_bar):
        raise AccountantInapplicable(
            f"order {lam} exceeds rho_bar^2 sigma^2 ln(1/(q sigma)) bound {moments_lambda_max(q, sigma, rho_bar)}"
        )
    return q * q * lam * (lam + 1) / ((1.0 - q) * rho_bar**2 * sigma**2)


def _epsilon_at(lam: int, t: int, q: float, sigma: float, rho_bar: float, log_inv_delta: float) -> float:
    return (t * moments_alpha(lam, q, sigma, rho_bar) + log_inv_delta) / lam


def moments_epsilon(p: PrivacyParams, steps_done: int | None = None) -> PrivacySpent:
    """Epsilon after ``steps_done`` (default ``T``) steps under the moments bound.

    The objective ``T k (lam + 1) + ln(1/delta) / lam`` is convex in ``lam``,
    so only the integers around its continuous minimiser (clamped to the valid
    range) are evaluated.
    """
    t = p.t_rounds if steps_done is None else steps_done
    if t < 1:
        raise ParameterError("at least one step is needed")
    reason = moments_regime_reason(p.q, p.sigma, p.rho_bar)
    if reason is not None:
        raise AccountantInapplicable(reason)
    lam_max = p.lambda_max
    log_inv_delta = math.log(1.0 / p.delta)
    k = p.q * p.q / ((1.0 - p.q) * p.rho_bar**2 * p.sigma**2)
    centre = math.sqrt(log_inv_delta / (t * k))
    lo = max(1, min(lam_max, math.floor(centre) - 1))
    hi = max(1, min(lam_max, math.ceil(centre) + 1))
    best_eps, best_lam = math.inf, 0
    for lam in range(lo, hi + 1):
        eps = _epsilon_at(lam, t, p.q, p.sigma, p.rho_bar, log_inv_delta)
        if eps < best_eps:
            best_eps, best_lam = eps, lam
    warnings = (DOMINANT_TERM_NOTE, SAMPLING_NOTE, *p.precondition_warnings(best_eps))
    return PrivacySpent(best_eps, p.delta, "moments", best_lam, warnings)


def sigma_calibrate_numeric(
    target_epsilon: float, delta: float, q: float, t: int, rho_bar: float
) -> float:
    """Smallest sigma on the 1e-4 grid whose moments epsilon meets the target.

    Valid sigmas form an interval (sigma > 1, q sigma < 1/16) on which the
    moments epsilon is non-increasing, so bisection over grid indices is exact.
    """
    _check_eps_delta(target_epsilon, delta)

    def meets(k: int) -> bool:
        sigma = k / _GRID_STEPS
        if moments_regime_reason(q, sigma, rho_bar) is not None:
            return False
        return moments_epsilon(PrivacyParams(delta, q, t, sigma=sigma, rho_bar=rho_bar)).epsilon <= target_epsilon

    hi = math.ceil(_GRID_STEPS / (16.0 * q)) + 1
    while hi > 0 and not (hi / _GRID_STEPS) * q < 1.0 / 16.0:
        hi -= 1
    if hi <= _GRID_STEPS or not meets(hi):
        raise AccountantInapplicable(
            f"target epsilon {target_epsilon:g} is not reachable while q sigma < 1/16 (q={q:g}, T={t}, rho_bar={rho_bar:g})"
        )
    lo = _GRID_STEPS  # sigma = 1 is outside the regime, so meets(lo) is False
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if meets(mid):
            hi = mid
        else:
            lo = mid
    return hi / _GRID_STEPS


def rho_bar(weights: Sequence[float]) -> float:
    """Euclidean norm of the aggregation weights (which must sum to 1)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ParameterError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite and non-negative")
    if abs(math.fsum(w) - 1.0) > 1e-12:
        raise ParameterError(f"weights must sum to 1, got {math.fsum(w)!r}")
    return math.sqrt(math.fsum(w * w))
