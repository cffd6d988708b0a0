"""Frequentist baselines: beta-binomial MLE, bootstrap intervals and WLSF.

The MLE maximizes the same beta-survival likelihood the Bayesian beta model
uses (priors and Jacobians dropped) over its unconstrained coordinates, so
both pipelines share one likelihood implementation.
"""

import logging
import math
from collections import defaultdict
from typing import Any, Mapping, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize, stats

from .errors import ConfigError, DomainError, FitError
from .model import cell_name
from .models.beta import BetaModel
from .protocol import Protocol
from .structs import BootstrapKind, DatasetRecord, FitResult
from .swarm import Swarm

logger = logging.getLogger(__name__)

FArray = NDArray[np.float64]

DEFAULT_STARTS = 8
START_SCALE = 2.0
GTOL = 1e-10
KEPT_START_GTOL = 1e-6
BOUNDARY_TOL = 1e-6
BOUNDARY_U = 12.0
DEFAULT_REPLICATES = 600
MIN_REPLICATES = 100


def group_by_cell(records: Sequence[DatasetRecord]) -> dict[tuple[int, str], list[DatasetRecord]]:
    cells: dict[tuple[int, str], list[DatasetRecord]] = defaultdict(list)
    for r in records:
        cells[r.cell].append(r)
    return dict(cells)


def _check_binomial(records: Sequence[DatasetRecord]) -> None:
    if not records:
        raise DomainError("dataset is empty")
    if any(r.is_nv for r in records):
        raise ConfigError("frequentist fits need binomial (N, Q) records")


# maximum likelihood


def _boundary_names(model: BetaModel, u: FArray, values: Mapping[str, float]) -> list[str]:
    flagged = []
    for name in model.param_names:
        x = values[name]
        if min(x, 1 - x) < BOUNDARY_TOL:
            flagged.append(name)
    for b in model.blocks:
        far = np.abs(u[b.start : b.stop]) > BOUNDARY_U
        flagged.extend(n for n, f in zip(b.names, far) if f and n not in flagged)
    return flagged


def _standard_errors(model: BetaModel, u: FArray) -> dict[str, float]:
    """Delta-method errors of every output from the observed information in u."""
    names = model.output_names
    try:
        hess = model.hessian_log_likelihood(u)
        cov_u = np.linalg.inv(-hess)
        jac = model.output_jacobian(u)
        var = np.einsum("ij,jk,ik->i", jac, cov_u, jac)
    except np.linalg.LinAlgError:
        logger.debug("observed information is singular; no standard errors")
        return {n: math.nan for n in names}
    return {n: float(math.sqrt(v)) if v >= 0 else math.nan for n, v in zip(names, var)}


def _maximize(model: BetaModel, starts: Sequence[FArray]) -> tuple[Any, float, list[str]]:
    def objective(u: FArray) -> float:
        value = model.log_likelihood(u)
        return -value if math.isfinite(value) else math.inf

    def gradient(u: FArray) -> FArray:
        g = model.grad_log_likelihood(u)
        return -g if np.all(np.isfinite(g)) else np.zeros_like(g)

    best = None
    best_init = -math.inf
    trace = []
    for k, u0 in enumerate(starts):
        init = model.log_likelihood(u0)
        if not math.isfinite(init):
            trace.append(f"start {k}: log-likelihood not finite at the start")
            continue
        try:
            res = optimize.minimize(
                objective, u0, jac=gradient, method="BFGS", options={"gtol": GTOL, "maxiter": 2000}
            )
        except (ValueError, FloatingPointError) as e:
            trace.append(f"start {k}: {e}")
            continue
        if not np.isfinite(res.fun):
            trace.append(f"start {k}: {res.message}")
            continue
        # BFGS can stop on precision loss at a perfectly good optimum
        if res.fun > -init:
            steepness = float(np.max(np.abs(gradient(u0)), initial=0.0))
            res = optimize.OptimizeResult(
                x=u0,
                fun=-init,
                success=steepness < KEPT_START_GTOL,
                message=f"kept start {k}, optimizer ended below it (max |grad| {steepness:.1e})",
            )
        trace.append(f"start {k}: loglik {-res.fun:.6f} ({res.message})")
        if best is None or res.fun < best.fun:
            best, best_init = res, init
    return best, best_init, trace


def mle_fit(
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    init: Optional[Mapping[str, float] | FArray] = None,
    n_starts: int = DEFAULT_STARTS,
    seed: int = 0,
) -> FitResult:
    """Multi-start quasi-Newton MLE of the beta-binomial survival model.

    The first start is `init` (tying values or a full coordinate vector) or
    the center of every coordinate; the others are drawn N(0, 2²) in the
    unconstrained coordinates. Estimates within 1e-6 of 0 or 1 are reported
    and flagged, never clamped.

    A best start that did not converge is still returned, with
    `converged=False` and the per-start trace logged. FitError is raised only
    when no start reaches a finite log-likelihood.
    """
    _check_binomial(records)
    model = BetaModel(protocol, records)
    if isinstance(init, np.ndarray):
        first = np.asarray(init, dtype=np.float64)
    else:
        first = model.unconstrain(init)
    rng = np.random.default_rng(seed)
    starts = [first] + [START_SCALE * rng.standard_normal(model.dim) for _ in range(n_starts - 1)]
    best, loglik_init, trace = _maximize(model, starts)
    if best is None:
        raise FitError(f"all {len(starts)} MLE starts failed", trace)
    if not best.success:
        logger.warning(f"best MLE start did not converge: {best.message}")
        for line in trace:
            logger.debug(line)

    values = model.constrain(best.x)
    boundary = _boundary_names(model, best.x, values)
    if boundary:
        logger.warning(f"MLE at the edge of the parameter space for {boundary[:5]}")
    se = _standard_errors(model, best.x) if not boundary else {}
    params = set(model.param_names)
    fit = FitResult(
        method="mle",
        params={k: v for k, v in values.items() if k in params},
        nuisances={k: v for k, v in values.items() if k not in params},
        standard_errors={k: v for k, v in se.items() if k in params},
        status=str(best.message),
        converged=bool(best.success),
        loglik=float(-best.fun),
        loglik_init=float(loglik_init),
        boundary=boundary,
        starts=len(starts),
        coordinates=[float(v) for v in best.x],
    )
    logger.debug(f"mle: loglik {fit.loglik:.4f} from {len(starts)} starts")
    return fit


def _fit_coordinates(fit: FitResult, model: BetaModel) -> FArray:
    if len(fit.coordinates) == model.dim:
        return np.asarray(fit.coordinates, dtype=np.float64)
    return model.unconstrain({**fit.params, **fit.nuisances})


def mle_loglik(protocol: Protocol, records: Sequence[DatasetRecord], params: Mapping[str, float]) -> float:
    """Profile log-likelihood at fixed tying parameters, maximized over the cell dispersions."""
    _check_binomial(records)
    model = BetaModel(protocol, records)
    k = model.tying_dim
    u_tying = model.unconstrain(params)[:k]

    def objective(rest: FArray) -> float:
        value = model.log_likelihood(np.concatenate([u_tying, rest]))
        return -value if math.isfinite(value) else math.inf

    def gradient(rest: FArray) -> FArray:
        g = model.grad_log_likelihood(np.concatenate([u_tying, rest]))[k:]
        return -g if np.all(np.isfinite(g)) else np.zeros_like(g)

    if model.dim == k:
        return model.log_likelihood(u_tying)
    res = optimize.minimize(objective, np.zeros(model.dim - k), jac=gradient, method="BFGS")
    return float(-res.fun)


# bootstrap


class BootstrapResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: BootstrapKind
    point: FitResult
    replicates: int
    failures: int = 0
    names: list[str]
    estimates: Any  # (successful replicates, len(names))
    intervals: dict[float, dict[str, tuple[float, float]]] = Field(default_factory=dict)
    lower_bounds: dict[float, dict[str, float]] = Field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.estimates, columns=self.names)


def _resample_nonparametric(
    records: Sequence[DatasetRecord], rng: np.random.Generator
) -> list[DatasetRecord]:
    out = []
    for cell, recs in group_by_cell(records).items():
        picks = rng.integers(len(recs), size=len(recs))
        for i, k in enumerate(picks):
            out.append(recs[int(k)].model_copy(update={"i": i}))
    return out


def _cell_beta(protocol: Protocol, fit: FitResult, cell: tuple[int, str]) -> tuple[float, float]:
    """Fitted (mean, t) of one cell's survival distribution."""
    M, e = cell
    if protocol.moment == 2:
        mu = fit.nuisances[cell_name("mu1", cell)]
    else:
        mu = float(protocol.tying(1, M, e, fit.params))
    return mu, fit.nuisances.get(cell_name("t", cell), 0.0)


def _resample_parametric(
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    fit: FitResult,
    rng: np.random.Generator,
) -> list[DatasetRecord]:
    out = []
    for cell, recs in group_by_cell(records).items():
        mu, t = _cell_beta(protocol, fit, cell)
        mu = min(max(mu, 1e-12), 1 - 1e-12)
        N = np.array([r.N for r in recs])
        if t <= 1e-12:
            Q = stats.binom.rvs(N, mu, random_state=rng)
        else:
            s = 1 / t - 1
            Q = stats.betabinom.rvs(N, mu * s, (1 - mu) * s, random_state=rng)
        for r, q in zip(recs, np.atleast_1d(Q)):
            out.append(r.model_copy(update={"Q": int(q)}))
    return out


def bootstrap(
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    kind: BootstrapKind = BootstrapKind.NONPARAMETRIC,
    B: int = DEFAULT_REPLICATES,
    seed: int = 0,
    alpha_levels: Sequence[float] = (0.95,),
    fit: Optional[FitResult] = None,
    workers: Optional[int] = None,
) -> BootstrapResult:
    """Bootstrap distribution of the MLE and intervals read off its quantiles.

    Nonparametric replicates resample sequences with replacement within each
    (M, e) cell; parametric replicates redraw every Q from the fitted
    beta-binomial. Each replicate is refit from the original optimum;
    replicates whose refit fails are dropped and counted.
    """
    if B < MIN_REPLICATES:
        raise ConfigError(f"need at least {MIN_REPLICATES} bootstrap replicates, got {B}")
    _check_binomial(records)
    fit = fit or mle_fit(protocol, records, seed=seed)
    model = BetaModel(protocol, records)
    u_hat = _fit_coordinates(fit, model)
    names = model.param_names

    def replicate(rng: np.random.Generator) -> FArray:
        if kind == BootstrapKind.NONPARAMETRIC:
            data = _resample_nonparametric(records, rng)
        else:
            data = _resample_parametric(protocol, records, fit, rng)
        refit = mle_fit(protocol, data, init=u_hat, n_starts=1)
        return np.array([refit.params[n] for n in names])

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(B)]
    jobs = [lambda rng=rng: replicate(rng) for rng in rngs]
    swarm: Swarm[FArray] = Swarm(jobs, workers, label="replicate")
    results = swarm.main(raise_errors=False)
    done = [r for r in results if r is not None]
    if swarm.failures:
        logger.warning(f"{swarm.failures} of {B} bootstrap refits failed and were dropped")
    if not done:
        raise FitError("every bootstrap refit failed")
    estimates = np.stack(done)

    out = BootstrapResult(
        kind=kind,
        point=fit,
        replicates=B,
        failures=swarm.failures,
        names=names,
        estimates=estimates,
    )
    for a in alpha_levels:
        lo, hi = np.quantile(estimates, [(1 - a) / 2, (1 + a) / 2], axis=0)
        bound = np.quantile(estimates, 1 - a, axis=0)
        out.intervals[a] = {n: (float(lo[k]), float(hi[k])) for k, n in enumerate(names)}
        out.lower_bounds[a] = {n: float(bound[k]) for k, n in enumerate(names)}
    logger.info(f"bootstrap ({kind.value}): {len(done)} of {B} replicates refit")
    return out


# weighted least squares


def cell_statistics(
    records: Sequence[DatasetRecord], moment: int = 1
) -> dict[tuple[int, str], tuple[float, float, int]]:
    """(mean, sample variance, I) of the per-sequence estimates in each cell.

    The per-sequence estimate is Q/N for the first moment and the unbiased
    Q(Q-1)/(N(N-1)) for the second.
    """
    out = {}
    for cell, recs in group_by_cell(records).items():
        Q = np.array([r.Q for r in recs], dtype=np.float64)
        N = np.array([r.N for r in recs], dtype=np.float64)
        if moment == 2:
            if np.any(N < 2):
                raise DomainError("second-moment estimates need N >= 2 shots per sequence")
            y = Q * (Q - 1) / (N * (N - 1))
        else:
            y = Q / N
        var = float(np.var(y, ddof=1)) if y.size > 1 else 0.0
        out[cell] = (float(np.mean(y)), var, int(y.size))
    return out


def wlsf_fit(protocol: Protocol, records: Sequence[DatasetRecord]) -> FitResult:
    """Weighted least squares of cell means against the tying curve.

    Weights are I/s², the inverse variance of each cell mean; cells with zero
    sample variance use the largest variance seen in the dataset. The fit runs
    in the same unconstrained coordinates as the models, so estimates stay in
    their boxes.
    """
    _check_binomial(records)
    stats_by_cell = cell_statistics(records, protocol.moment)
    if len({M for M, _ in stats_by_cell}) < 2:
        raise FitError("WLSF needs at least two distinct sequence lengths")
    variances = np.array([v for _, v, _ in stats_by_cell.values()])
    if np.all(variances <= 0):
        raise FitError("every cell has zero sample variance; use the MLE instead")
    fallback = float(np.max(variances))
    zero = [c for c, (_, v, _) in stats_by_cell.items() if v <= 0]
    if zero:
        logger.info(f"{len(zero)} zero-variance cell(s) weighted with variance {fallback:.3g}")

    model = BetaModel(protocol, records)
    k = model.tying_dim
    order = model.cells
    y = jnp.asarray([stats_by_cell[c][0] for c in order])
    sqrt_w = jnp.asarray(
        [
            math.sqrt(stats_by_cell[c][2] / (stats_by_cell[c][1] if stats_by_cell[c][1] > 0 else fallback))
            for c in order
        ]
    )

    def residual(u: jax.Array) -> jax.Array:
        _, T = model.tying_from_u(u)
        return sqrt_w * (y - T)

    res_fn = jax.jit(residual)
    jac_fn = jax.jit(jax.jacfwd(residual))
    res = optimize.least_squares(
        lambda u: np.asarray(res_fn(jnp.asarray(u))),
        np.zeros(k),
        jac=lambda u: np.asarray(jac_fn(jnp.asarray(u))),
        method="trf",
        xtol=1e-12,
        ftol=1e-12,
        gtol=GTOL,
    )
    u = jnp.asarray(res.x)
    params_vec, _ = model.tying_from_u(u)
    names = model.param_names
    params = {n: float(v) for n, v in zip(names, np.asarray(params_vec))}

    se: dict[str, float] = {}
    try:
        cov_u = np.linalg.inv(res.jac.T @ res.jac)
        jac_x = np.asarray(jax.jacfwd(lambda v: model.tying_from_u(v)[0])(u))
        var = np.einsum("ij,jk,ik->i", jac_x, cov_u, jac_x)
        se = {n: float(math.sqrt(v)) if v >= 0 else math.nan for n, v in zip(names, var)}
    except np.linalg.LinAlgError:
        logger.warning("WLSF Jacobian is rank deficient; standard errors unavailable")

    boundary = [n for n in names if min(params[n], 1 - params[n]) < BOUNDARY_TOL]
    for b in model.tying_blocks:
        far = np.abs(res.x[b.start : b.stop]) > BOUNDARY_U
        boundary += [n for n, f in zip(b.names, far) if f and n not in boundary]
    return FitResult(
        method="wlsf",
        params=params,
        nuisances={f"mean[{M},{e}]": stats_by_cell[(M, e)][0] for M, e in order},
        standard_errors=se,
        status=str(res.message),
        converged=bool(res.success),
        loglik=math.nan,
        boundary=boundary,
        starts=1,
    )
