"""Beta family, beta-binomial, PAL priors and constrained Dirichlet-process beta mixtures.

Everything here is plain numpy/scipy and works on floats or arrays; the
differentiable counterparts used by the samplers live in `rbayes.model`.
"""

import logging
import math
from enum import Enum
from typing import Any, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from scipy import optimize, special, stats

from .errors import ConstraintInfeasibleError, DomainError, UnsupportedMomentError

logger = logging.getLogger(__name__)

FArray = NDArray[np.float64]

NEWTON_STEPS = 5
MEAN_RESIDUAL_TOL = 1e-10
TWO_MOMENT_TOL = 1e-8
TWO_MOMENT_STARTS = (1.0, 0.5, 2.0, 0.25, 4.0)
MAX_MOMENT_ORDER = 4


class BetaView(str, Enum):
    ALPHA_BETA = "alpha_beta"
    MEAN_VARIANCE = "mean_variance"
    MEAN_SECOND = "mean_second"
    MEAN_T = "mean_t"
    MEAN_R = "mean_r"
    MEAN_S = "mean_s"


class BetaParams(BaseModel):
    """Two numbers describing a beta distribution in one of six views.

    `a` is α for the (α, β) view and the mean μ otherwise; `b` is β, σ², μ₂,
    t, r or s respectively.
    """

    model_config = ConfigDict(frozen=True)

    view: BetaView
    a: float
    b: float

    @model_validator(mode="after")
    def _check_box(self) -> "BetaParams":
        a, b = self.a, self.b
        if self.view == BetaView.ALPHA_BETA:
            if not (a > 0 and b > 0):
                raise ValueError(f"alpha and beta must be positive, got ({a}, {b})")
            return self
        if not 0 < a < 1:
            raise ValueError(f"mean must lie in (0, 1), got {a}")
        bounds = {
            BetaView.MEAN_VARIANCE: (0.0, a * (1 - a)),
            BetaView.MEAN_SECOND: (a * a, a),
            BetaView.MEAN_T: (0.0, 1.0),
            BetaView.MEAN_R: (0.0, 1.0),
            BetaView.MEAN_S: (0.0, math.inf),
        }
        lo, hi = bounds[self.view]
        if not lo < b < hi:
            raise ValueError(f"{self.view.value} second parameter {b} outside ({lo}, {hi})")
        return self

    def alpha_beta(self) -> tuple[float, float]:
        a, b = self.a, self.b
        match self.view:
            case BetaView.ALPHA_BETA:
                return a, b
            case BetaView.MEAN_VARIANCE:
                return a * a * (1 - a) / b - a, a * (1 - a) ** 2 / b - (1 - a)
            case BetaView.MEAN_SECOND:
                k = (a - b) / (b - a * a)
                return a * k, (1 - a) * k
            case BetaView.MEAN_T:
                return a * (1 / b - 1), (1 - a) * (1 - b) / b
            case BetaView.MEAN_R:
                return 1 / (b - b * a) - a, 1 / (b * a) + a - 1
            case BetaView.MEAN_S:
                return b * a, b * (1 - a)
        raise DomainError(f"unknown beta view {self.view}")

    @classmethod
    def from_alpha_beta(cls, alpha: float, beta: float, view: BetaView) -> "BetaParams":
        s = alpha + beta
        mu = alpha / s
        match view:
            case BetaView.ALPHA_BETA:
                return cls(view=view, a=alpha, b=beta)
            case BetaView.MEAN_VARIANCE:
                second = alpha * beta / (s * s * (s + 1))
            case BetaView.MEAN_SECOND:
                second = alpha * (1 + alpha) / (s * (1 + s))
            case BetaView.MEAN_T:
                second = 1 / (1 + s)
            case BetaView.MEAN_R:
                second = s * s / (alpha * beta * (1 + s))
            case BetaView.MEAN_S:
                second = s
        return cls(view=view, a=mu, b=second)

    @property
    def mean(self) -> float:
        alpha, beta = self.alpha_beta()
        return alpha / (alpha + beta)

    @property
    def variance(self) -> float:
        alpha, beta = self.alpha_beta()
        s = alpha + beta
        return alpha * beta / (s * s * (s + 1))


def beta_convert(params: BetaParams, target: BetaView) -> BetaParams:
    alpha, beta = params.alpha_beta()
    try:
        return BetaParams.from_alpha_beta(alpha, beta, target)
    except ValidationError as e:
        raise DomainError(f"cannot express {params} in the {target.value} view: {e}")


def beta_logpdf(q: ArrayLike, params: BetaParams) -> Any:
    x = np.asarray(q, dtype=np.float64)
    if np.any((x <= 0) | (x >= 1)):
        raise DomainError("beta density is evaluated on the open interval (0, 1)")
    alpha, beta = params.alpha_beta()
    return (alpha - 1) * np.log(x) + (beta - 1) * np.log1p(-x) - special.betaln(alpha, beta)


def _check_counts(Q: ArrayLike, N: ArrayLike) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    q = np.asarray(Q)
    n = np.asarray(N)
    if np.any(q < 0) or np.any(q > n) or np.any(n < 0):
        raise DomainError("counts need 0 <= Q <= N")
    return q.astype(np.int64), n.astype(np.int64)


def beta_binomial_logpmf(Q: ArrayLike, N: ArrayLike, mu: ArrayLike, t: ArrayLike) -> Any:
    """log BetaBinom(Q | N, μ, t) with α = μ(1/t - 1), β = (1 - μ)(1/t - 1).

    t = 0 is the binomial limit.
    """
    q, n = _check_counts(Q, N)
    mu_a = np.asarray(mu, dtype=np.float64)
    t_a = np.asarray(t, dtype=np.float64)
    if np.any((mu_a <= 0) | (mu_a >= 1)) or np.any((t_a < 0) | (t_a >= 1)):
        raise DomainError("beta-binomial needs 0 < mu < 1 and 0 <= t < 1")
    log_choose = special.gammaln(n + 1) - special.gammaln(q + 1) - special.gammaln(n - q + 1)
    safe_t = np.where(t_a > 0, t_a, 0.5)
    s = 1 / safe_t - 1
    alpha, beta = mu_a * s, (1 - mu_a) * s
    mixed = log_choose + special.betaln(q + alpha, n - q + beta) - special.betaln(alpha, beta)
    return np.where(t_a > 0, mixed, stats.binom.logpmf(q, n, mu_a))


def beta_raw_moment(j: int, mu: float, t: float) -> float:
    """E[q^j] for q ~ Beta with mean mu and dispersion t (t = 0 is a point mass)."""
    out = 1.0
    for i in range(j):
        out *= (mu * (1 - t) + i * t) / ((1 - t) + i * t)
    return out


def stirling2(k: int, j: int) -> int:
    return round(sum((-1) ** i * math.comb(j, i) * (j - i) ** k for i in range(j + 1)) / math.factorial(j))


def beta_binomial_moment(order: int, N: int, mu: float, mu2: float) -> float:
    """E[Q^k] for Q ~ BetaBinom(N) with survival mean mu and second moment mu2.

    Raw moments are assembled from factorial moments,
    E[(Q)_j] = N!/(N-j)! E[q^j], through Stirling numbers of the second kind.
    """
    if not 1 <= order <= MAX_MOMENT_ORDER:
        raise UnsupportedMomentError(f"beta-binomial moments up to order {MAX_MOMENT_ORDER}")
    if not (0 < mu < 1 and mu * mu <= mu2 <= mu):
        raise DomainError(f"(mu, mu2) = ({mu}, {mu2}) outside the valid moment box")
    t = (mu2 - mu * mu) / (mu - mu * mu)
    total = 0.0
    for j in range(1, order + 1):
        if j > N:
            break
        falling = math.perm(N, j)
        total += stirling2(order, j) * falling * beta_raw_moment(j, mu, t)
    return total


class PALParams(BaseModel):
    """'Probably at least' prior: flat above p0, mass z below it."""

    model_config = ConfigDict(frozen=True)

    p0: float
    z: float
    smooth: bool = False

    @model_validator(mode="after")
    def _check(self) -> "PALParams":
        if not 0 < self.z <= self.p0 < 1:
            raise ValueError(f"PAL needs 0 < z <= p0 < 1, got p0={self.p0}, z={self.z}")
        return self

    @property
    def plateau(self) -> float:
        return (1 - self.z) / (1 - self.p0)

    @property
    def exponent(self) -> float:
        m = (self.p0 - self.z) / (self.z * (1 - self.p0))
        return 2 * m if self.smooth else m


def pal_logpdf(x: ArrayLike, params: PALParams) -> Any:
    """Log density of PAL, or of its smoothed form PAL′.

    Below p0 the density is c (x/p0)^m for PAL and c g(x) (x/p0)^m for PAL′,
    with g(x) = 1 + m (1 - x/p0). The smoothed exponent is doubled so that
    the mass below p0 stays z while value and slope match the plateau at p0.
    """
    xa = np.asarray(x, dtype=np.float64)
    if np.any((xa < 0) | (xa > 1)):
        raise DomainError("PAL density is supported on [0, 1]")
    p0, m = params.p0, params.exponent
    log_c = math.log(params.plateau)
    ratio = np.clip(xa / p0, 1e-300, None)
    below = m * np.log(ratio)
    if params.smooth:
        below = below + np.log1p(m * (1 - np.minimum(ratio, 1.0)))
    return log_c + np.where(xa < p0, below, 0.0)


def pal_mean(params: PALParams) -> float:
    """Mean of PAL or PAL′: plateau mass on [p0, 1] plus the power-law tail below p0."""
    p0, m, c = params.p0, params.exponent, params.plateau
    tail = (1 + m) / (m + 2) - m / (m + 3) if params.smooth else 1 / (m + 2)
    return c * p0**2 * tail + (1 - params.z) * (1 + p0) / 2


def stick_break(v: ArrayLike) -> FArray:
    """w_k = v_k Π_{l<k}(1 - v_l) with the remainder as the final weight."""
    va = np.asarray(v, dtype=np.float64).ravel()
    if np.any((va <= 0) | (va >= 1)):
        raise DomainError("stick fractions must lie in (0, 1)")
    remaining = np.concatenate([[1.0], np.cumprod(1 - va)])
    w = np.empty(va.size + 1)
    w[:-1] = va * remaining[:-1]
    w[-1] = remaining[-1]
    return w


def _mean_shift(nu_star: FArray, w: FArray, mu1: float) -> float:
    """h with Σ w expit(ν* + h) = mu1: five Newton steps, bisection if that falls short."""
    target = special.logit(mu1)
    h = target - float(np.dot(w, nu_star))
    for _ in range(NEWTON_STEPS):
        nu = special.expit(nu_star + h)
        f = float(np.dot(w, nu)) - mu1
        df = float(np.dot(w, nu * (1 - nu)))
        if df <= 0:
            break
        h -= f / df
    if abs(float(np.dot(w, special.expit(nu_star + h))) - mu1) < MEAN_RESIDUAL_TOL:
        return h
    lo, hi = target - float(np.max(nu_star)), target - float(np.min(nu_star))
    if lo == hi:
        return lo
    logger.debug("mean constraint fell back to bisection")
    return float(
        optimize.brentq(
            lambda s: float(np.dot(w, special.expit(nu_star + s))) - mu1,
            lo,
            hi,
            xtol=1e-14,
            rtol=4 * np.finfo(float).eps,
        )
    )


def _check_simplex(w: FArray) -> None:
    if np.any(w < 0) or abs(float(w.sum()) - 1) > 1e-12:
        raise DomainError("mixture weights must lie on the simplex")


def cdpbm_constrain_mean(nu_star: ArrayLike, w: ArrayLike, mu1: float) -> FArray:
    """Shift the logit locations so the weighted mean of ν is exactly mu1."""
    ns = np.asarray(nu_star, dtype=np.float64).ravel()
    wa = np.asarray(w, dtype=np.float64).ravel()
    _check_simplex(wa)
    if not 0 < mu1 < 1:
        raise DomainError(f"target mean {mu1} must lie in (0, 1)")
    return np.asarray(special.expit(ns + _mean_shift(ns, wa, mu1)))


class BetaMixture(BaseModel):
    """Σ w_k Beta(ν_k, r_k) in the (μ, r) view."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray
    nu: np.ndarray
    r: np.ndarray

    @field_validator("weights", "nu", "r", mode="before")
    @classmethod
    def _as_array(cls, v: Any) -> FArray:
        a = np.array(v, dtype=np.float64).ravel()
        a.setflags(write=False)
        return a

    @model_validator(mode="after")
    def _check(self) -> "BetaMixture":
        if not self.weights.size == self.nu.size == self.r.size:
            raise ValueError("weights, nu and r must have equal length")
        if np.any(self.weights < 0) or abs(float(self.weights.sum()) - 1) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any((self.nu <= 0) | (self.nu >= 1)) or np.any((self.r <= 0) | (self.r >= 1)):
            raise ValueError("component (nu, r) must lie in (0, 1)^2")
        return self

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @property
    def effective_components(self) -> float:
        return float(1 / np.sum(self.weights**2))

    def alpha_beta(self) -> tuple[FArray, FArray]:
        nu, r = self.nu, self.r
        return 1 / (r * (1 - nu)) - nu, 1 / (r * nu) + nu - 1

    def component_moments(self, order: int) -> FArray:
        alpha, beta = self.alpha_beta()
        out = np.ones_like(alpha)
        for i in range(order):
            out *= (alpha + i) / (alpha + beta + i)
        return out


def mixture_logpdf(q: ArrayLike, mixture: BetaMixture) -> Any:
    x = np.asarray(q, dtype=np.float64)
    if np.any((x <= 0) | (x >= 1)):
        raise DomainError("mixture density is evaluated on the open interval (0, 1)")
    alpha, beta = mixture.alpha_beta()
    xs = x[..., None]
    comp = (alpha - 1) * np.log(xs) + (beta - 1) * np.log1p(-xs) - special.betaln(alpha, beta)
    with np.errstate(divide="ignore"):
        logw = np.log(mixture.weights)
    return special.logsumexp(comp + logw, axis=-1)


def mixture_moment(order: int, mixture: BetaMixture) -> float:
    return float(np.dot(mixture.weights, mixture.component_moments(order)))


def _two_moment_residual(
    h: FArray, nu_star: FArray, r: FArray, w: FArray, mu1: float, mu2: float
) -> FArray:
    nu = special.expit(h[0] * nu_star + h[1])
    second = nu * nu * (1 + r * (1 - nu) ** 2)
    return np.array([np.dot(w, nu) - mu1, np.dot(w, second) - mu2])


def _damped_newton(
    h: FArray, nu_star: FArray, r: FArray, w: FArray, mu1: float, mu2: float, max_iter: int = 100
) -> Optional[FArray]:
    args = (nu_star, r, w, mu1, mu2)
    f = _two_moment_residual(h, *args)
    for _ in range(max_iter):
        norm = float(np.linalg.norm(f))
        if norm < TWO_MOMENT_TOL:
            return h
        jac = np.empty((2, 2))
        for k in range(2):
            step = 1e-7 * max(1.0, abs(h[k]))
            e = np.zeros(2)
            e[k] = step
            jac[:, k] = (_two_moment_residual(h + e, *args) - _two_moment_residual(h - e, *args)) / (
                2 * step
            )
        try:
            delta = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return None
        lam = 1.0
        for _ in range(30):
            trial = h + lam * delta
            ft = _two_moment_residual(trial, *args)
            if np.all(np.isfinite(ft)) and np.linalg.norm(ft) < norm:
                h, f = trial, ft
                break
            lam /= 2
        else:
            return None
    return h if float(np.linalg.norm(f)) < TWO_MOMENT_TOL else None


def solve_two_moment_shift(
    nu_star: ArrayLike, r: ArrayLike, w: ArrayLike, mu1: float, mu2: float
) -> tuple[float, float]:
    """(h1, h2) with ν = expit(h1 ν* + h2) matching both mixture moments.

    Several starts are tried; among the distinct roots the one keeping ν
    closest to expit(ν*) in squared distance wins.
    """
    ns = np.asarray(nu_star, dtype=np.float64).ravel()
    ra = np.asarray(r, dtype=np.float64).ravel()
    wa = np.asarray(w, dtype=np.float64).ravel()
    _check_simplex(wa)
    if not (0 < mu1 < 1 and mu1 * mu1 < mu2 < mu1):
        raise DomainError(f"(mu1, mu2) = ({mu1}, {mu2}) outside mu1² < mu2 < mu1")
    roots: list[FArray] = []
    for h1 in TWO_MOMENT_STARTS:
        h2 = _mean_shift(h1 * ns, wa, mu1)
        root = _damped_newton(np.array([h1, h2]), ns, ra, wa, mu1, mu2)
        if root is not None and not any(np.allclose(root, s, atol=1e-6) for s in roots):
            roots.append(root)
    if not roots:
        raise ConstraintInfeasibleError(
            f"no (h1, h2) matches moments ({mu1}, {mu2}) for this mixture"
        )
    anchor = special.expit(ns)
    best = min(roots, key=lambda h: float(np.sum((special.expit(h[0] * ns + h[1]) - anchor) ** 2)))
    if len(roots) > 1:
        logger.debug(f"two-moment constraint found {len(roots)} roots, kept {best}")
    return float(best[0]), float(best[1])


def cdpbm_constrain_two_moments(
    nu_star: ArrayLike, r: ArrayLike, w: ArrayLike, mu1: float, mu2: float
) -> BetaMixture:
    """Mixture whose first two moments equal (mu1, mu2).

    A single component has its location fixed at mu1, so the spread r is
    solved from the second moment instead.
    """
    ns = np.asarray(nu_star, dtype=np.float64).ravel()
    ra = np.asarray(r, dtype=np.float64).ravel()
    wa = np.asarray(w, dtype=np.float64).ravel()
    if ns.size == 1:
        if not (0 < mu1 < 1 and mu1 * mu1 < mu2 < mu1):
            raise DomainError(f"(mu1, mu2) = ({mu1}, {mu2}) outside mu1² < mu2 < mu1")
        r1 = (mu2 - mu1 * mu1) / (mu1 * mu1 * (1 - mu1) ** 2)
        if not 0 < r1 < 1:
            raise ConstraintInfeasibleError(
                f"variance {mu2 - mu1 * mu1} exceeds what one (mu, r) component can carry"
            )
        return BetaMixture(weights=[1.0], nu=[mu1], r=[r1])
    h1, h2 = solve_two_moment_shift(ns, ra, wa, mu1, mu2)
    return BetaMixture(weights=wa, nu=special.expit(h1 * ns + h2), r=ra)
