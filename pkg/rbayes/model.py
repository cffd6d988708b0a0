"""Hierarchical log-posteriors over unconstrained coordinates.

Densities are written in jax.numpy, jitted once per model and differentiated
with `jax.grad`, so gradients are exact. Parameter layout (the order of the
unconstrained vector u):

    1. protocol sampling coordinates, in `Protocol.sampling_params` order
    2. per-cell survival nuisances, one block per quantity, cells sorted by
       (M, experiment order)
    3. mixture blocks (CDPBM) and latent survival probabilities, if any
    4. NV photon-count rates (alpha, beta), if present and not fixed
"""

from __future__ import annotations

import logging
import math
import threading
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import betaln, gammaln, xlog1py, xlogy
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict
from scipy import special

from . import dists
from .errors import ConfigError, ConstraintInfeasibleError, DomainError
from .protocol import ParamKind, Protocol
from .structs import DatasetRecord, FitResult, ModelFamily, PriorKind, PriorSpec, Support

jax.config.update("jax_enable_x64", True)

logger = logging.getLogger(__name__)

FArray = NDArray[np.float64]

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
MEAN_BISECTION_STEPS = 64
DEFAULT_CENTER_SCALE = 0.5


class Observation(str, Enum):
    BINOMIAL = "binomial"
    NV = "nv"


def cell_name(name: str, cell: tuple[int, str], *extra: int) -> str:
    parts = [str(cell[0]), cell[1], *(str(k) for k in extra)]
    return f"{name}[{','.join(parts)}]"


class Transform(ABC):
    """Bijection from unconstrained coordinates to a constrained block."""

    @abstractmethod
    def forward(self, u: jax.Array) -> tuple[jax.Array, jax.Array]:
        """Constrained values and the summed log |Jacobian|."""
        raise NotImplementedError

    @abstractmethod
    def inverse(self, x: FArray) -> FArray:
        raise NotImplementedError


class IdentityTransform(Transform):
    def forward(self, u: jax.Array) -> tuple[jax.Array, jax.Array]:
        return u, jnp.zeros(())

    def inverse(self, x: FArray) -> FArray:
        return np.asarray(x, dtype=np.float64)


class LogTransform(Transform):
    def forward(self, u: jax.Array) -> tuple[jax.Array, jax.Array]:
        return jnp.exp(u), jnp.sum(u)

    def inverse(self, x: FArray) -> FArray:
        return np.log(np.asarray(x, dtype=np.float64))


class LogitTransform(Transform):
    """x = expit(logit(center) + scale·u); u = 0 sits at `center`."""

    def __init__(self, center: float = 0.5, scale: float = 1.0) -> None:
        if not 0 < center < 1 or scale <= 0:
            raise DomainError("logit centering needs 0 < center < 1 and scale > 0")
        self.center = center
        self.scale = scale
        self._offset = math.log(center) - math.log1p(-center)

    def forward(self, u: jax.Array) -> tuple[jax.Array, jax.Array]:
        z = self._offset + self.scale * u
        log_jac = math.log(self.scale) + jax.nn.log_sigmoid(z) + jax.nn.log_sigmoid(-z)
        return jax.nn.sigmoid(z), jnp.sum(log_jac)

    def inverse(self, x: FArray) -> FArray:
        xa = np.clip(np.asarray(x, dtype=np.float64), 1e-15, 1 - 1e-15)
        return (np.log(xa) - np.log1p(-xa) - self._offset) / self.scale


class StickBreakingTransform(Transform):
    """K - 1 unconstrained coordinates onto the leading K - 1 entries of a K-simplex.

    u = 0 maps to the uniform point (1/K, ..., 1/K).
    """

    def __init__(self, k: int) -> None:
        if k < 2:
            raise DomainError("a simplex needs at least two entries")
        self.k = k

    def forward(self, u: jax.Array) -> tuple[jax.Array, jax.Array]:
        out = []
        log_jac = jnp.zeros(())
        remaining = jnp.ones(())
        for j in range(self.k - 1):
            z = u[j] - math.log(self.k - 1 - j)
            frac = jax.nn.sigmoid(z)
            log_jac = log_jac + jax.nn.log_sigmoid(z) + jax.nn.log_sigmoid(-z) + jnp.log(remaining)
            x = remaining * frac
            out.append(x)
            remaining = remaining - x
        return jnp.stack(out), log_jac

    def inverse(self, x: FArray) -> FArray:
        xa = np.asarray(x, dtype=np.float64)
        u = np.empty(self.k - 1)
        remaining = 1.0
        for j in range(self.k - 1):
            frac = min(max(xa[j] / remaining, 1e-15), 1 - 1e-15)
            u[j] = math.log(frac) - math.log1p(-frac) + math.log(self.k - 1 - j)
            remaining -= xa[j]
        return u


class OrderedPositiveTransform(Transform):
    """(u0, u1) ↦ (e^u0, e^u0 + e^u1), so 0 < first < second."""

    def forward(self, u: jax.Array) -> tuple[jax.Array, jax.Array]:
        a = jnp.exp(u[0])
        return jnp.stack([a, a + jnp.exp(u[1])]), u[0] + u[1]

    def inverse(self, x: FArray) -> FArray:
        a, b = float(x[0]), float(x[1])
        if not 0 < a < b:
            raise DomainError(f"ordered rates need 0 < {a} < {b}")
        return np.array([math.log(a), math.log(b - a)])


class Block(BaseModel):
    """A contiguous slice of u and the constrained values it maps to."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    names: list[str]
    start: int
    size: int
    transform: Transform
    prior: Optional[PriorSpec] = None
    support: Support = Support.UNIT

    @property
    def stop(self) -> int:
        return self.start + self.size


def pal_logpdf_jax(x: jax.Array, p0: float, z: float, smooth: bool) -> jax.Array:
    pal = dists.PALParams(p0=p0, z=z, smooth=smooth)
    m = pal.exponent
    ratio = jnp.clip(x / p0, 1e-300, None)
    below = m * jnp.log(ratio)
    if smooth:
        below = below + jnp.log1p(m * (1 - jnp.minimum(ratio, 1.0)))
    return math.log(pal.plateau) + jnp.where(x < p0, below, 0.0)


def prior_logpdf(spec: PriorSpec, x: jax.Array) -> jax.Array:
    """Summed log density of `spec` over the entries of x (full density for a simplex)."""
    p = spec.params
    match spec.kind:
        case PriorKind.UNIFORM01:
            return jnp.zeros(())
        case PriorKind.BETA:
            a, b = p
            return jnp.sum(xlogy(a - 1, x) + xlog1py(b - 1, -x) - betaln(a, b))
        case PriorKind.GAMMA:
            shape, rate = p
            return jnp.sum(
                shape * math.log(rate) - gammaln(shape) + xlogy(shape - 1, x) - rate * x
            )
        case PriorKind.NORMAL:
            mean, scale = p
            return jnp.sum(-0.5 * ((x - mean) / scale) ** 2 - math.log(scale) - LOG_SQRT_2PI)
        case PriorKind.PAL:
            return jnp.sum(pal_logpdf_jax(x, p[0], p[1], spec.smooth))
        case PriorKind.DIRICHLET:
            alphas = jnp.asarray(p)
            full = jnp.concatenate([x, 1 - jnp.sum(x, keepdims=True)])
            return jnp.sum(xlogy(alphas - 1, full)) + gammaln(jnp.sum(alphas)) - jnp.sum(
                gammaln(alphas)
            )
    raise ConfigError(f"unsupported prior {spec.kind}")


def prior_mean(spec: PriorSpec, size: int) -> FArray:
    """Prior mean of a block of `size` entries (the leading entries for a simplex)."""
    p = spec.params
    match spec.kind:
        case PriorKind.UNIFORM01:
            value = 0.5
        case PriorKind.BETA:
            value = p[0] / (p[0] + p[1])
        case PriorKind.GAMMA:
            value = p[0] / p[1]
        case PriorKind.NORMAL:
            value = p[0]
        case PriorKind.PAL:
            value = dists.pal_mean(dists.PALParams(p0=p[0], z=p[1], smooth=spec.smooth))
        case PriorKind.DIRICHLET:
            alphas = np.asarray(p, dtype=np.float64)
            return np.asarray(alphas[:size] / alphas.sum())
        case _:
            raise ConfigError(f"unsupported prior {spec.kind}")
    return np.full(size, value)


def stick_break_jax(v: jax.Array) -> jax.Array:
    remaining = jnp.cumprod(1 - v, axis=-1)
    lead = jnp.concatenate([jnp.ones_like(v[..., :1]), remaining[..., :-1]], axis=-1)
    return jnp.concatenate([v * lead, remaining[..., -1:]], axis=-1)


def constrain_mean_jax(nu_star: jax.Array, w: jax.Array, mu: jax.Array) -> jax.Array:
    """Differentiable twin of `dists.cdpbm_constrain_mean`.

    Five Newton steps, bisection where they leave a residual, then one Newton
    step from the stopped root so the gradient follows the implicit function.
    """
    target = jnp.log(mu) - jnp.log1p(-mu)

    def mean_of(h: jax.Array) -> jax.Array:
        return jnp.dot(w, jax.nn.sigmoid(nu_star + h))

    h = target - jnp.dot(w, nu_star)
    for _ in range(dists.NEWTON_STEPS):
        nu = jax.nn.sigmoid(nu_star + h)
        h = h - (jnp.dot(w, nu) - mu) / jnp.dot(w, nu * (1 - nu))

    def bisect(carry: tuple[jax.Array, jax.Array], _: Any) -> tuple[tuple[jax.Array, jax.Array], None]:
        lo, hi = carry
        mid = 0.5 * (lo + hi)
        below = mean_of(mid) < mu
        return (jnp.where(below, mid, lo), jnp.where(below, hi, mid)), None

    bracket = (target - jnp.max(nu_star), target - jnp.min(nu_star))
    (lo, hi), _ = jax.lax.scan(bisect, bracket, None, length=MEAN_BISECTION_STEPS)
    resid = jnp.abs(mean_of(h) - mu)
    ok = jnp.isfinite(resid) & (resid < dists.MEAN_RESIDUAL_TOL)
    h_star = jax.lax.stop_gradient(jnp.where(ok, h, 0.5 * (lo + hi)))
    nu = jax.nn.sigmoid(nu_star + h_star)
    h = h_star - (jnp.dot(w, nu) - mu) / jnp.dot(w, nu * (1 - nu))
    return jax.nn.sigmoid(nu_star + h)


def _two_moment_residual_jax(
    h: jax.Array, nu_star: jax.Array, r: jax.Array, w: jax.Array, mu1: jax.Array, mu2: jax.Array
) -> jax.Array:
    nu = jax.nn.sigmoid(h[0] * nu_star + h[1])
    second = nu * nu * (1 + r * (1 - nu) ** 2)
    return jnp.stack([jnp.dot(w, nu) - mu1, jnp.dot(w, second) - mu2])


def _solve_two_moment_host(
    nu_star: FArray, r: FArray, w: FArray, mu1: FArray, mu2: FArray
) -> FArray:
    try:
        h = dists.solve_two_moment_shift(nu_star, r, w, float(mu1), float(mu2))
    except (DomainError, ConstraintInfeasibleError):
        return np.full(2, np.nan)
    return np.asarray(h, dtype=np.float64)


def constrain_two_moments_jax(
    nu_star: jax.Array, r: jax.Array, w: jax.Array, mu1: jax.Array, mu2: jax.Array
) -> jax.Array:
    """Locations matching both moments: host solve, then one implicit Newton step."""
    args = tuple(jax.lax.stop_gradient(a) for a in (nu_star, r, w, mu1, mu2))
    h_star = jax.pure_callback(
        _solve_two_moment_host,
        jax.ShapeDtypeStruct((2,), jnp.float64),
        *args,
        vmap_method="sequential",
    )
    h_star = jax.lax.stop_gradient(h_star)
    jac = jax.jacfwd(_two_moment_residual_jax)(h_star, nu_star, r, w, mu1, mu2)
    f = _two_moment_residual_jax(h_star, nu_star, r, w, mu1, mu2)
    h = h_star - jnp.linalg.solve(jac, f)
    return jax.nn.sigmoid(h[0] * nu_star + h[1])


def betabinom_logpmf_ab(
    Q: jax.Array, N: jax.Array, a: jax.Array, b: jax.Array, log_choose: jax.Array
) -> jax.Array:
    return log_choose + betaln(Q + a, N - Q + b) - betaln(a, b)


def beta_logpdf_ab(q: jax.Array, a: jax.Array, b: jax.Array) -> jax.Array:
    return xlogy(a - 1, q) + xlog1py(b - 1, -q) - betaln(a, b)


def mean_r_to_ab(nu: jax.Array, r: jax.Array) -> tuple[jax.Array, jax.Array]:
    return 1 / (r * (1 - nu)) - nu, 1 / (r * nu) + nu - 1


def centering_from_estimates(
    protocol: Protocol,
    params: Mapping[str, float],
    standard_errors: Optional[Mapping[str, float]] = None,
) -> dict[str, tuple[float, float]]:
    """(x0, δ̃) per probability coordinate from a point fit.

    δ̃ = se / (x0 (1 - x0)) maps a standard error on x to a logit-scale step;
    coordinates without a usable error get δ̃ = 0.5.
    """
    se = dict(standard_errors or {})
    try:
        sampled = protocol.sampled_from_tying(params)
    except KeyError:
        return {}
    out = {}
    for name, value in sampled.items():
        x0 = min(max(float(value), 1e-6), 1 - 1e-6)
        err = se.get(name, float("nan"))
        scale = err / (x0 * (1 - x0)) if math.isfinite(err) and err > 0 else DEFAULT_CENTER_SCALE
        out[name] = (x0, min(max(scale, 1e-4), 10.0))
    return out


def centering_from_fit(protocol: Protocol, fit: FitResult) -> dict[str, tuple[float, float]]:
    return centering_from_estimates(protocol, fit.params, fit.standard_errors)


class HierarchicalModel(ABC):
    """Log posterior of an RB+ dataset under one survival-distribution family.

    Subclasses add their per-cell blocks and the hierarchy/likelihood terms;
    the base class owns the layout, the protocol's coordinates, the NV
    rates and the jitted value/gradient functions.
    """

    family: ModelFamily

    def __init__(
        self,
        protocol: Protocol,
        records: Sequence[DatasetRecord],
        priors: Optional[Mapping[str, PriorSpec]] = None,
        centering: Optional[Mapping[str, tuple[float, float]]] = None,
        observation: Observation = Observation.BINOMIAL,
        rates: Optional[tuple[float, float]] = None,
    ) -> None:
        self.protocol = protocol
        self.records = list(records)
        self.observation = observation
        self.priors = dict(priors or {})
        self.fixed_rates = rates
        self._check_records()
        order = {e: k for k, e in enumerate(protocol.experiments)}
        self.cells = sorted({r.cell for r in self.records}, key=lambda c: (c[0], order[c[1]]))
        self.cell_index = {c: k for k, c in enumerate(self.cells)}
        self.blocks: list[Block] = []
        self._load_data()
        self._add_tying_blocks(dict(centering or {}))
        self._add_cell_blocks()
        if observation == Observation.NV and rates is None:
            self._add_block("rates", ["alpha", "beta"], OrderedPositiveTransform(), Support.POSITIVE)
        unused = set(self.priors) - {b.name for b in self.blocks} - {"alpha", "beta"}
        if unused:
            logger.warning(f"priors given for unknown blocks {sorted(unused)} are ignored")

        self._nonfinite = 0
        self._lock = threading.Lock()
        self._logp = jax.jit(lambda u: self._log_density(u, with_prior=True))
        self._grad = jax.jit(jax.grad(lambda u: self._log_density(u, with_prior=True)))
        self._logl = jax.jit(lambda u: self._log_density(u, with_prior=False))
        self._gradl = jax.jit(jax.grad(lambda u: self._log_density(u, with_prior=False)))
        self._out = jax.jit(self._outputs)
        logger.debug(
            f"built {self.family.value} model for {protocol.name}: {self.dim} coordinates, "
            f"{len(self.cells)} cells, {len(self.records)} records"
        )

    # layout

    def _check_records(self) -> None:
        want_nv = self.observation == Observation.NV
        for r in self.records:
            self.protocol.check_experiment(r.e)
            if r.is_nv != want_nv:
                kind = "(X, Y, Z)" if want_nv else "(N, Q)"
                raise DomainError(f"record {r.cell} #{r.i} lacks the {kind} counts this model needs")

    def _load_data(self) -> None:
        recs = self.records
        self._cell_of = np.array([self.cell_index[r.cell] for r in recs], dtype=np.int64)
        if self.observation == Observation.BINOMIAL:
            Q = np.array([r.Q for r in recs], dtype=np.float64)
            N = np.array([r.N for r in recs], dtype=np.float64)
            self._Q, self._N = jnp.asarray(Q), jnp.asarray(N)
            self._log_choose = jnp.asarray(
                special.gammaln(N + 1) - special.gammaln(Q + 1) - special.gammaln(N - Q + 1)
            )
        else:
            X, Y, Z = (np.array([getattr(r, k) for r in recs], dtype=np.float64) for k in "XYZ")
            self._X, self._Y, self._Z = jnp.asarray(X), jnp.asarray(Y), jnp.asarray(Z)
            self._log_fact = float(
                np.sum(special.gammaln(X + 1) + special.gammaln(Y + 1) + special.gammaln(Z + 1))
            )

    def _add_block(
        self,
        name: str,
        names: list[str],
        transform: Transform,
        support: Support = Support.UNIT,
        prior: Optional[PriorSpec] = None,
        size: Optional[int] = None,
    ) -> Block:
        start = self.blocks[-1].stop if self.blocks else 0
        block = Block(
            name=name,
            names=names,
            start=start,
            size=len(names) if size is None else size,
            transform=transform,
            prior=prior,
            support=support,
        )
        self.blocks.append(block)
        return block

    def _add_tying_blocks(self, centering: dict[str, tuple[float, float]]) -> None:
        for sp in self.protocol.sampling_params:
            prior = self.priors.get(sp.name)
            if sp.kind == ParamKind.SIMPLEX:
                support = Support.SIMPLEX
                transform: Transform = StickBreakingTransform(sp.size + 1)
                if prior is not None and len(prior.params) != sp.size + 1:
                    raise ConfigError(f"prior on {sp.name} must have {sp.size + 1} concentrations")
            else:
                support = Support.UNIT
                x0, scale = centering.get(sp.name, (0.5, 1.0))
                transform = LogitTransform(x0, scale)
            if prior is not None and prior.support != support:
                raise ConfigError(
                    f"{prior.kind.value} prior has {prior.support.value} support but "
                    f"'{sp.name}' lives on {support.value}"
                )
            self._add_block(sp.name, sp.names, transform, support, prior)

    def cell_names(self, name: str) -> list[str]:
        return [cell_name(name, c) for c in self.cells]

    def mixture_names(self, name: str, k: int) -> list[str]:
        return [cell_name(name, c, j) for c in self.cells for j in range(k)]

    def record_names(self, name: str) -> list[str]:
        return [cell_name(name, r.cell, r.i) for r in self.records]

    @abstractmethod
    def _add_cell_blocks(self) -> None:
        raise NotImplementedError

    @property
    def tying_blocks(self) -> list[Block]:
        """The protocol coordinates; they always lead u."""
        names = {sp.name for sp in self.protocol.sampling_params}
        return [b for b in self.blocks if b.name in names]

    @property
    def tying_dim(self) -> int:
        blocks = self.tying_blocks
        return blocks[-1].stop if blocks else 0

    def tying_from_u(self, u_tying: jax.Array) -> tuple[jax.Array, jax.Array]:
        """(tying parameters in `param_names` order, tied value per cell) from the leading coordinates."""
        values = {b.name: b.transform.forward(u_tying[b.start : b.stop])[0] for b in self.tying_blocks}
        x, T = self._tying_values(values)
        params = jnp.stack([jnp.asarray(x[n], dtype=jnp.float64) for n in self.param_names])
        return params, T

    @property
    def dim(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    @property
    def block_map(self) -> dict[str, Block]:
        return {b.name: b for b in self.blocks}

    @property
    def param_names(self) -> list[str]:
        return self.protocol.param_names

    @property
    def nuisance_names(self) -> list[str]:
        return [n for names, _ in self._nuisance_layout() for n in names]

    @property
    def output_names(self) -> list[str]:
        rates = ["alpha", "beta"] if self.observation == Observation.NV else []
        return self.param_names + self.nuisance_names + rates

    # densities

    def _constrain(self, u: jax.Array) -> tuple[dict[str, jax.Array], jax.Array]:
        values = {}
        log_jac = jnp.zeros(())
        for b in self.blocks:
            x, lj = b.transform.forward(u[b.start : b.stop])
            values[b.name] = x
            log_jac = log_jac + lj
        return values, log_jac

    def _tying_values(self, values: Mapping[str, jax.Array]) -> tuple[dict[str, Any], jax.Array]:
        sampled: dict[str, Any] = {}
        for sp in self.protocol.sampling_params:
            block = values[sp.name]
            for k, n in enumerate(sp.names):
                sampled[n] = block[k]
        x = self.protocol.tying_params(sampled)
        if not self.cells:
            return x, jnp.zeros(0)
        T = jnp.stack(
            [jnp.asarray(self.protocol.tying(self.protocol.moment, M, e, x)) for M, e in self.cells]
        )
        return x, T

    def _tying_prior(self, values: Mapping[str, jax.Array]) -> jax.Array:
        total = jnp.zeros(())
        for b in self.blocks:
            if b.prior is not None and b.name != "rates":
                total = total + prior_logpdf(b.prior, values[b.name])
        return total

    def _rates(self, values: Mapping[str, jax.Array]) -> tuple[Any, Any]:
        if self.fixed_rates is not None:
            return self.fixed_rates
        rates = values["rates"]
        return rates[0], rates[1]

    def _rate_prior(self, values: Mapping[str, jax.Array]) -> jax.Array:
        if self.observation != Observation.NV or self.fixed_rates is not None:
            return jnp.zeros(())
        a, b = self._rates(values)
        pa = self.priors.get("alpha", PriorSpec.gamma(1.0, 0.01))
        pb = self.priors.get("beta", PriorSpec.gamma(1.0, 0.01))
        return prior_logpdf(pa, a) + prior_logpdf(pb, b)

    def _poisson_loglik(self, values: Mapping[str, jax.Array], q: jax.Array) -> jax.Array:
        """Z ~ Pois(β + (α - β) q), with X ~ Pois(α) and Y ~ Pois(β) referencing the rates."""
        a, b = self._rates(values)
        lam = b + (a - b) * q
        ll = jnp.sum(xlogy(self._Z, lam) - lam)
        if self.fixed_rates is None:
            n = len(self.records)
            ll = ll + jnp.sum(xlogy(self._X, a)) - n * a + jnp.sum(xlogy(self._Y, b)) - n * b
        return ll - self._log_fact

    @abstractmethod
    def _hierarchy(self, values: Mapping[str, jax.Array], T: jax.Array) -> jax.Array:
        """Survival layer plus observation log-likelihood, given tied values T per cell."""
        raise NotImplementedError

    def _hyperprior(self, values: Mapping[str, jax.Array]) -> jax.Array:
        return jnp.zeros(())

    def _log_density(self, u: jax.Array, with_prior: bool) -> jax.Array:
        values, log_jac = self._constrain(u)
        _, T = self._tying_values(values)
        valid = jnp.all((T > 0) & (T < 1))
        T_safe = jnp.where((T > 0) & (T < 1), T, 0.5)
        total = self._hierarchy(values, T_safe)
        if with_prior:
            total = total + self._tying_prior(values) + self._rate_prior(values)
            total = total + self._hyperprior(values) + log_jac
        total = jnp.where(valid, total, -jnp.inf)
        return jnp.where(jnp.isnan(total), -jnp.inf, total)

    @abstractmethod
    def _nuisance_layout(self) -> list[tuple[list[str], Callable[[Mapping[str, jax.Array], jax.Array], jax.Array]]]:
        """(names, extractor) pairs giving the reported nuisance columns."""
        raise NotImplementedError

    def _outputs(self, u: jax.Array) -> jax.Array:
        values, _ = self._constrain(u)
        x, T = self._tying_values(values)
        cols = [jnp.atleast_1d(jnp.asarray(x[n], dtype=jnp.float64)) for n in self.param_names]
        T_safe = jnp.where((T > 0) & (T < 1), T, 0.5)
        for _, extract in self._nuisance_layout():
            cols.append(jnp.ravel(extract(values, T_safe)))
        if self.observation == Observation.NV:
            a, b = self._rates(values)
            cols.append(jnp.stack([jnp.asarray(a, dtype=jnp.float64), jnp.asarray(b, dtype=jnp.float64)]))
        return jnp.concatenate(cols)

    # public evaluation

    def _count_nonfinite(self, what: str) -> None:
        with self._lock:
            self._nonfinite += 1
            count = self._nonfinite
        if count in (1, 10, 100, 1000):
            logger.debug(f"non-finite {what} ({count} so far)")

    @property
    def nonfinite_count(self) -> int:
        with self._lock:
            return self._nonfinite

    def _check_u(self, u: Any) -> jax.Array:
        arr = jnp.asarray(u, dtype=jnp.float64)
        if arr.shape != (self.dim,):
            raise DomainError(f"expected {self.dim} coordinates, got shape {arr.shape}")
        return arr

    def log_posterior(self, u: Any) -> float:
        value = float(self._logp(self._check_u(u)))
        if math.isnan(value) or value == math.inf:
            self._count_nonfinite("log density")
            return -math.inf
        return value

    def grad_log_posterior(self, u: Any) -> FArray:
        g = np.asarray(self._grad(self._check_u(u)))
        if not np.all(np.isfinite(g)):
            self._count_nonfinite("gradient")
        return g

    def log_likelihood(self, u: Any) -> float:
        value = float(self._logl(self._check_u(u)))
        return -math.inf if math.isnan(value) else value

    def grad_log_likelihood(self, u: Any) -> FArray:
        return np.asarray(self._gradl(self._check_u(u)))

    def hessian_log_likelihood(self, u: Any) -> FArray:
        hess = jax.hessian(lambda v: self._log_density(v, with_prior=False))
        return np.asarray(hess(self._check_u(u)))

    def output_jacobian(self, u: Any) -> FArray:
        """d(output columns)/du, shape (len(output_names), dim)."""
        return np.asarray(jax.jacfwd(self._outputs)(self._check_u(u)))

    def constrain(self, u: Any) -> dict[str, float]:
        out = np.asarray(self._out(self._check_u(u)))
        return dict(zip(self.output_names, (float(v) for v in out)))

    def constrain_draws(self, draws: FArray) -> FArray:
        """Constrained output columns for each row of unconstrained draws."""
        flat = np.asarray(draws, dtype=np.float64).reshape(-1, self.dim)
        out = np.stack([np.asarray(self._out(jnp.asarray(row))) for row in flat])
        return out.reshape(*np.shape(draws)[:-1], len(self.output_names))

    def prior_mean_point(self) -> FArray:
        """u at the prior means of the blocks that carry a prior.

        Blocks without one stay at u = 0, their centering point.
        """
        u = np.zeros(self.dim)
        for b in self.blocks:
            if b.prior is None:
                continue
            try:
                u[b.start : b.stop] = b.transform.inverse(prior_mean(b.prior, b.size))
            except DomainError as e:
                logger.debug(f"block {b.name} starts at its centering point: {e}")
        return u

    def unconstrain(self, values: Optional[Mapping[str, Any]] = None) -> FArray:
        """u for the given tying/block values; anything unspecified sits at 0."""
        values = dict(values or {})
        u = np.zeros(self.dim)
        try:
            sampled = self.protocol.sampled_from_tying(values)
        except KeyError:
            sampled = {}
        sampled.update({k: v for k, v in values.items() if k in self.protocol.sampled_names})
        for b in self.blocks:
            if b.name in values and b.name not in sampled:
                u[b.start : b.stop] = b.transform.inverse(np.ravel(values[b.name]))
            elif all(n in sampled for n in b.names):
                u[b.start : b.stop] = b.transform.inverse(np.array([sampled[n] for n in b.names]))
        return u


def log_posterior(model: HierarchicalModel, u: Any) -> float:
    return model.log_posterior(u)


def grad_log_posterior(model: HierarchicalModel, u: Any) -> FArray:
    return model.grad_log_posterior(u)


def log_likelihood(model: HierarchicalModel, u: Any) -> float:
    return model.log_likelihood(u)
