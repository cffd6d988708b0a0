"""Sequence-reuse planning: how many shots N to spend on each random sequence.

First moment: the Fisher information of one beta-binomial sequence, weighted
by the wall-clock cost t_pick + N·t_flip of running it. Second moment: the
MSE of the plug-in estimator ΣQ²/(I·N²) of μ2, averaged over a uniform
prior on the valid (μ, μ2) region and minimized over N for a fixed total
shot budget.
"""

import logging
import math
from typing import Optional

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import special, stats

from . import dists
from .errors import DomainError
from .structs import BagParams, CostModel

logger = logging.getLogger(__name__)

FArray = NDArray[np.float64]

QUADRATURE_NODES = 64
MIN_BUDGET = 2.0
# leading-order coefficient of N_opt / T^(1/3) for lower = 0
EXACT_COEFFICIENT = (16 / (40 + 32 * math.log(2) - 3 * math.log(3))) ** (1 / 3)


def mean_estimator_variance(bag: BagParams, N: int, I: int) -> float:
    """Var[ΣQ_i / (N·I)] by the law of total variance."""
    if N < 1 or I < 1:
        raise DomainError("N and I must be at least 1")
    q = bag.qbar
    return (q * (1 - q) / N + (N - 1) / N * bag.variance) / I


def _check_qt(qbar: float, t: float) -> None:
    if not 0 < qbar < 1:
        raise DomainError(f"qbar={qbar} must lie in (0, 1)")
    if not 0 < t < 1:
        raise DomainError(f"t={t} must lie in (0, 1)")


def fisher_info_betabin(qbar: float, t: float, N: int) -> FArray:
    """Fisher information of one BetaBinom(N) observation in (qbar, t).

    The expected negative Hessian is summed exactly over Q = 0..N in the
    (α, β) shape coordinates and mapped to (qbar, t) with the Jacobian of
    α = qbar(1/t - 1), β = (1 - qbar)(1/t - 1). The off-diagonal entries
    vanish only at qbar = 0.5.
    """
    _check_qt(qbar, t)
    if N < 1:
        raise DomainError("N must be at least 1")
    s = 1 / t - 1
    a, b = qbar * s, (1 - qbar) * s
    Q = np.arange(N + 1)
    pmf = stats.betabinom.pmf(Q, N, a, b)

    def tri(x: FArray | float) -> FArray:
        return np.asarray(special.polygamma(1, x))

    common = tri(a + b) - tri(N + a + b)
    h_aa = tri(Q + a) - tri(a) + common
    h_bb = tri(N - Q + b) - tri(b) + common
    info_ab = -np.array(
        [
            [np.dot(pmf, h_aa), float(common)],
            [float(common), np.dot(pmf, h_bb)],
        ]
    )
    jac = np.array([[s, -qbar / t**2], [-s, -(1 - qbar) / t**2]])
    return np.asarray(jac.T @ info_ab @ jac)


def wcrb(qbar: float, t: float, N: int, cost: CostModel) -> float:
    """Cost-weighted Cramér-Rao bound on qbar, in variance·seconds.

    Uses 1/J[0, 0], the bound with t known, not the [J⁻¹][0, 0] entry that
    treats t as a nuisance parameter.
    """
    return cost.cost(N) / float(fisher_info_betabin(qbar, t, N)[0, 0])


def wcrb_curve(qbar: float, t: float, cost: CostModel, n_max: int) -> pd.DataFrame:
    Ns = np.arange(1, n_max + 1)
    return pd.DataFrame({"N": Ns, "wcrb": [wcrb(qbar, t, int(N), cost) for N in Ns]})


def wcrb_argmin(qbar: float, t: float, cost: CostModel, n_max: int) -> int:
    curve = wcrb_curve(qbar, t, cost, n_max)
    return int(curve["N"].iloc[int(np.argmin(curve["wcrb"].to_numpy()))])


def second_moment_mse(qbar: float, mu2: float, N: int, I: int) -> float:
    """MSE of ΣQ_i²/(I·N²) as an estimator of μ2.

    The estimator has mean μ2 + (qbar - μ2)/N and variance
    (E[Q⁴] - E[Q²]²) / (I·N⁴).
    """
    if N < 1 or I < 1:
        raise DomainError("N and I must be at least 1")
    bias = (qbar - mu2) / N
    m2 = dists.beta_binomial_moment(2, N, qbar, mu2)
    m4 = dists.beta_binomial_moment(4, N, qbar, mu2)
    return bias**2 + (m4 - m2**2) / (I * N**4)


def _binomial_moments(N: int, mu: FArray, t: FArray) -> tuple[FArray, FArray]:
    """E[Q²], E[Q⁴] of BetaBinom(N) over arrays of (mu, t)."""
    raw = [dists.beta_raw_moment(j, mu, t) for j in range(1, 5)]

    def moment(order: int) -> FArray:
        total = np.zeros_like(mu)
        for j in range(1, min(order, N) + 1):
            total = total + dists.stirling2(order, j) * math.perm(N, j) * raw[j - 1]
        return total

    return moment(2), moment(4)


class PriorGrid(BaseModel):
    """Gauss-Legendre nodes over {(μ, μ2): l < μ < 1, μ² ≤ μ2 ≤ μ}.

    The region is mapped from the unit square by μ2 = μ² + (μ - μ²)v, and the
    weights carry the Jacobian μ - μ² normalized to a uniform density.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mu: np.ndarray
    mu2: np.ndarray
    weight: np.ndarray

    @classmethod
    def build(cls, lower: float = 0.0, nodes: int = QUADRATURE_NODES) -> "PriorGrid":
        if not 0 <= lower < 1:
            raise DomainError(f"lower bound {lower} must lie in [0, 1)")
        x, w = np.polynomial.legendre.leggauss(nodes)
        mu_1d = lower + (1 - lower) * (x + 1) / 2
        w_mu = w * (1 - lower) / 2
        v_1d = (x + 1) / 2
        w_v = w / 2
        mu, v = np.meshgrid(mu_1d, v_1d, indexing="ij")
        spread = mu - mu * mu
        weight = np.outer(w_mu, w_v) * spread
        return cls(
            mu=mu.ravel(),
            mu2=(mu * mu + spread * v).ravel(),
            weight=(weight / weight.sum()).ravel(),
        )

    @property
    def dispersion(self) -> FArray:
        return (self.mu2 - self.mu**2) / (self.mu - self.mu**2)

    def average(self, values: FArray) -> float:
        return float(np.dot(self.weight, values))


def prior_averaged_objective(N: int, budget: float, tau: float, grid: PriorGrid) -> float:
    """(τ + N)·(T/N)·MSE averaged over the prior; equals T·MSE when τ = 0."""
    I = budget / N
    m2, m4 = _binomial_moments(N, grid.mu, grid.dispersion)
    mse = ((grid.mu - grid.mu2) / N) ** 2 + (m4 - m2**2) / (I * N**4)
    return (tau + N) * I * grid.average(mse)


def asymptotic_n_opt_coefficient(lower: float = 0.0, grid: Optional[PriorGrid] = None) -> float:
    """(2a/c)^(1/3) with a = E[(μ - μ2)²] and c = E[μ4 - μ2²] under the prior.

    For large budgets T·MSE ≈ T·a/N² + c·N, minimized at N = (2a/c)^(1/3)·T^(1/3).
    """
    grid = grid or PriorGrid.build(lower)
    a = grid.average((grid.mu - grid.mu2) ** 2)
    mu4 = dists.beta_raw_moment(4, grid.mu, grid.dispersion)
    c = grid.average(mu4 - grid.mu2**2)
    return float((2 * a / c) ** (1 / 3))


class SecondMomentPlan(BaseModel):
    n_opt: int
    budget: float
    tau: float
    lower: float
    sequences: float
    coefficient: float
    asymptotic_coefficient: float
    exact_coefficient: Optional[float] = None
    curve: list[tuple[int, float]] = Field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.curve, columns=["N", "objective"])


def optimal_N_second_moment(
    T: float, tau: float = 0.0, lower: float = 0.0, n_max: Optional[int] = None
) -> SecondMomentPlan:
    """Shots per sequence minimizing the prior-averaged second-moment objective.

    Scans every integer N up to ⌈10·T^(1/3)⌉ (and at most T); the asymptotic
    coefficient is reported alongside as a cross-check only.
    """
    if T < MIN_BUDGET:
        raise DomainError(f"budget T={T} is too small; need at least {MIN_BUDGET} shots")
    if tau < 0:
        raise DomainError("tau must be nonnegative")
    grid = PriorGrid.build(lower)
    top = n_max or math.ceil(10 * T ** (1 / 3))
    top = max(1, min(top, int(T)))
    curve = [(N, prior_averaged_objective(N, T, tau, grid)) for N in range(1, top + 1)]
    n_opt = min(curve, key=lambda row: row[1])[0]
    asymptotic = asymptotic_n_opt_coefficient(lower, grid)
    plan = SecondMomentPlan(
        n_opt=n_opt,
        budget=T,
        tau=tau,
        lower=lower,
        sequences=T / n_opt,
        coefficient=n_opt / T ** (1 / 3),
        asymptotic_coefficient=asymptotic,
        exact_coefficient=EXACT_COEFFICIENT if lower == 0 else None,
        curve=curve,
    )
    if lower == 0 and abs(asymptotic - EXACT_COEFFICIENT) > 0.02:
        logger.warning(
            f"quadrature coefficient {asymptotic:.4f} differs from the closed form "
            f"{EXACT_COEFFICIENT:.4f}; both are reported"
        )
    logger.info(f"second-moment plan: N_opt={n_opt} for T={T:g} (I≈{plan.sequences:.0f})")
    return plan
