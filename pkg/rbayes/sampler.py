"""Posterior sampling: random-walk Metropolis-Hastings and multinomial NUTS.

Both samplers run one chain per Swarm job with an RNG stream spawned from
the master seed, so a config plus seed always reproduces the same draws.
NUTS follows the usual recipe: doubling trajectories with multinomial
selection, the generalized U-turn criterion, step size dual-averaged
towards the target acceptance during warmup and a diagonal inverse mass
matrix estimated from a window late in warmup.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .errors import InitializationError
from .model import HierarchicalModel
from .structs import SamplerConfig
from .swarm import Swarm

logger = logging.getLogger(__name__)

FArray = NDArray[np.float64]

INIT_TRIES = 100
DIVERGENCE_WARN_FRACTION = 0.2
MIN_MASS_WINDOW_WARMUP = 20
MASS_WINDOW = (0.5, 0.85)

# dual averaging constants
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75


class Target:
    """A log density over R^dim plus how to report its draws.

    `constrain` maps a (..., dim) array of unconstrained draws to the
    (..., len(names)) reported columns; the default reports u itself.
    """

    def __init__(
        self,
        log_density: Callable[[FArray], float],
        dim: int,
        grad: Optional[Callable[[FArray], FArray]] = None,
        names: Optional[Sequence[str]] = None,
        constrain: Optional[Callable[[FArray], FArray]] = None,
        init: Optional[FArray] = None,
    ) -> None:
        self.log_density = log_density
        self.dim = dim
        self._grad = grad
        self.names = list(names) if names is not None else [f"u[{k}]" for k in range(dim)]
        self._constrain = constrain
        self.init = np.zeros(dim) if init is None else np.asarray(init, dtype=np.float64)

    @classmethod
    def from_model(cls, model: HierarchicalModel) -> "Target":
        return cls(
            model.log_posterior,
            model.dim,
            grad=model.grad_log_posterior,
            names=model.output_names,
            constrain=model.constrain_draws,
            init=model.prior_mean_point(),
        )

    @property
    def has_gradient(self) -> bool:
        return self._grad is not None

    def grad(self, u: FArray) -> FArray:
        if self._grad is None:
            raise InitializationError("this target has no gradient; use metropolis_hastings")
        return self._grad(u)

    def value_and_grad(self, u: FArray) -> tuple[float, FArray]:
        value = self.log_density(u)
        if not math.isfinite(value):
            return -math.inf, np.zeros(self.dim)
        g = self.grad(u)
        if not np.all(np.isfinite(g)):
            return -math.inf, np.zeros(self.dim)
        return value, g

    def constrain(self, draws: FArray) -> FArray:
        return draws if self._constrain is None else self._constrain(draws)


class PosteriorChains(BaseModel):
    """Kept draws of every chain, constrained, plus per-iteration statistics."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: str
    names: list[str]
    draws: Any  # (chains, keep, P)
    accept_stat: Any  # (chains, keep)
    divergent: Any  # (chains, keep) bool
    tree_depth: Any  # (chains, keep) int
    step_size: list[float] = Field(default_factory=list)
    warmup: int = 0
    seed: int = 0
    warnings: list[str] = Field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return int(self.draws.shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.draws.shape[1])

    @property
    def divergences(self) -> int:
        return int(np.sum(self.divergent))

    @property
    def divergence_fraction(self) -> float:
        total = self.divergent.size
        return self.divergences / total if total else 0.0

    @property
    def mean_accept(self) -> float:
        return float(np.mean(self.accept_stat))

    def column(self, name: str) -> FArray:
        """(chains, keep) draws of one reported quantity."""
        try:
            k = self.names.index(name)
        except ValueError:
            raise KeyError(f"no column '{name}' in chains")
        return np.asarray(self.draws[:, :, k])

    @classmethod
    def from_columns(
        cls, names: list[str], draws: FArray, method: str = "external"
    ) -> "PosteriorChains":
        """Wrap draws read back from a chains file; per-iteration stats are unknown."""
        shape = draws.shape[:2]
        return cls(
            method=method,
            names=names,
            draws=draws,
            accept_stat=np.full(shape, np.nan),
            divergent=np.zeros(shape, dtype=bool),
            tree_depth=np.zeros(shape, dtype=np.int64),
        )


def initial_point(target: Target, rng: np.random.Generator, jitter: float) -> tuple[FArray, float]:
    """`target.init` (prior means for a model) jittered by N(0, jitter²); retried until the density is finite."""
    for attempt in range(INIT_TRIES):
        u = target.init + jitter * rng.standard_normal(target.dim)
        value = target.log_density(u)
        if math.isfinite(value):
            if attempt:
                logger.debug(f"initial point found after {attempt + 1} tries")
            return u, value
    raise InitializationError(
        f"no initial point with finite log density after {INIT_TRIES} tries"
    )


def _chain_rngs(seed: int, chains: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(chains)]


# Metropolis-Hastings


def _mh_chain(target: Target, config: SamplerConfig, rng: np.random.Generator) -> dict[str, Any]:
    u, logp = initial_point(target, rng, max(config.jitter, 1e-12))
    keep, thin = config.keep, config.thin
    draws = np.empty((keep, target.dim))
    accept = np.empty(keep)
    total = config.warmup + keep * thin
    accepted = 0
    for it in range(total):
        proposal = u + config.proposal_scale * rng.standard_normal(target.dim)
        logp_new = target.log_density(proposal)
        log_ratio = logp_new - logp if math.isfinite(logp_new) else -math.inf
        a = math.exp(min(0.0, log_ratio))
        if rng.uniform() < a:
            u, logp = proposal, logp_new
            accepted += 1
        kept = it - config.warmup
        if kept >= 0 and (kept + 1) % thin == 0:
            k = kept // thin
            draws[k] = u
            accept[k] = a
    logger.debug(f"mh chain done, acceptance {accepted / max(total, 1):.3f}")
    return {"draws": draws, "accept": accept, "step_size": config.proposal_scale}


def metropolis_hastings(
    target: Target | HierarchicalModel | Callable[[FArray], float],
    dim: Optional[int] = None,
    config: Optional[SamplerConfig] = None,
    workers: Optional[int] = None,
) -> PosteriorChains:
    """Gaussian random-walk Metropolis-Hastings.

    Proposals are u' = u + scale·N(0, I), accepted with probability min(1, g(u')/g(u)).
    After `warmup` iterations every `thin`-th state is kept until `keep`
    draws per chain are collected.
    """
    config = config or SamplerConfig()
    if isinstance(target, HierarchicalModel):
        target = Target.from_model(target)
    elif not isinstance(target, Target):
        if dim is None:
            raise InitializationError("dim is required for a bare log density")
        target = Target(target, dim)
    rngs = _chain_rngs(config.seed, config.chains)
    jobs = [lambda rng=rng: _mh_chain(target, config, rng) for rng in rngs]  # type: ignore[misc]
    results = Swarm(jobs, workers, label="chain").main()
    out = _collect("mh", target, config, results)
    logger.info(
        f"mh: {config.chains} chain(s) x {config.keep} draws, mean acceptance {out.mean_accept:.3f}"
    )
    return out


# NUTS


def kinetic_energy(r: FArray, inv_mass: FArray) -> float:
    return 0.5 * float(np.dot(r, inv_mass * r))


def leapfrog(
    target: Target,
    theta: FArray,
    r: FArray,
    grad: FArray,
    epsilon: float,
    inv_mass: FArray,
) -> tuple[FArray, FArray, float, FArray]:
    """One velocity-Verlet step: (theta', r', log density', gradient')."""
    r_new = r + 0.5 * epsilon * grad
    theta_new = theta + epsilon * inv_mass * r_new
    L_new, grad_new = target.value_and_grad(theta_new)
    r_new = r_new + 0.5 * epsilon * grad_new
    return theta_new, r_new, L_new, grad_new


class NutsState:
    """Both ends of a trajectory plus the point selected from it.

    `log_weight` is the log of the summed multinomial weights exp(-H) of the
    subtree, relative to the initial energy.
    """

    def __init__(
        self,
        theta: FArray,
        r: FArray,
        L: float,
        grad: FArray,
        log_weight: float,
        alive: bool,
        accept_sum: float,
        n_leapfrog: int,
        divergent: bool,
    ) -> None:
        self.theta_minus = self.theta_plus = self.theta = theta
        self.r_minus = self.r_plus = r
        self.r_sum = np.copy(r)
        self.grad_minus = self.grad_plus = self.grad = grad
        self.L = L
        self.log_weight = log_weight
        self.alive = alive
        self.accept_sum = accept_sum
        self.n_leapfrog = n_leapfrog
        self.divergent = divergent

    def merge(
        self,
        other: "NutsState",
        direction: int,
        root: bool,
        inv_mass: FArray,
        rng: np.random.Generator,
    ) -> None:
        """Extend this trajectory by `other`, built in `direction`.

        Root merges select with biased progressive sampling, inner merges
        with uniform progressive sampling.
        """
        old_minus, old_plus = self.r_minus, self.r_plus
        if direction == -1:
            self.theta_minus, self.r_minus, self.grad_minus = (
                other.theta_minus,
                other.r_minus,
                other.grad_minus,
            )
            r_inner_minus, r_inner_plus = other.r_plus, old_minus
            sum_minus, sum_plus = other.r_sum, self.r_sum
        else:
            self.theta_plus, self.r_plus, self.grad_plus = (
                other.theta_plus,
                other.r_plus,
                other.grad_plus,
            )
            r_inner_minus, r_inner_plus = old_plus, other.r_minus
            sum_minus, sum_plus = self.r_sum, other.r_sum

        self.accept_sum += other.accept_sum
        self.n_leapfrog += other.n_leapfrog
        self.divergent |= other.divergent
        self.alive &= other.alive
        if not self.alive:
            return

        if not root:
            self.log_weight = float(np.logaddexp(self.log_weight, other.log_weight))
        p = math.exp(min(0.0, other.log_weight - self.log_weight))
        if p > 0 and rng.uniform() < p:
            self.theta, self.L, self.grad = other.theta, other.L, other.grad
        if root:
            self.log_weight = float(np.logaddexp(self.log_weight, other.log_weight))

        self.r_sum = sum_minus + sum_plus
        sharp_minus = inv_mass * self.r_minus
        sharp_plus = inv_mass * self.r_plus
        turned = (
            np.dot(self.r_sum, sharp_minus) <= 0
            or np.dot(self.r_sum, sharp_plus) <= 0
            # across the two subtrees
            or np.dot(sum_minus + r_inner_plus, sharp_minus) <= 0
            or np.dot(sum_minus + r_inner_plus, inv_mass * r_inner_plus) <= 0
            or np.dot(sum_plus + r_inner_minus, inv_mass * r_inner_minus) <= 0
            or np.dot(sum_plus + r_inner_minus, sharp_plus) <= 0
        )
        self.alive = not turned


class _NutsChain:
    def __init__(self, target: Target, config: SamplerConfig, rng: np.random.Generator) -> None:
        self.target = target
        self.config = config
        self.rng = rng
        self.inv_mass = np.ones(target.dim)
        self.epsilon = config.step_size or 1.0

    def _momentum(self) -> FArray:
        return self.rng.standard_normal(self.target.dim) / np.sqrt(self.inv_mass)

    def reasonable_epsilon(self, theta: FArray, L: float, grad: FArray) -> float:
        """Double or halve ε until a single leapfrog's acceptance crosses 1/2."""
        epsilon = 1.0
        r = self._momentum()
        H0 = L - kinetic_energy(r, self.inv_mass)

        def log_accept(eps: float) -> float:
            _, r_new, L_new, _ = leapfrog(self.target, theta, r, grad, eps, self.inv_mass)
            H = L_new - kinetic_energy(r_new, self.inv_mass)
            return H - H0 if math.isfinite(H) else -math.inf

        comparison = log_accept(epsilon)
        direction = 1 if comparison > math.log(0.5) else -1
        for _ in range(100):
            if not comparison * direction > -direction * math.log(2):
                break
            epsilon *= 2.0**direction
            comparison = log_accept(epsilon)
        return epsilon

    def build_tree(self, state: NutsState, v: int, j: int, H0: float) -> NutsState:
        if j == 0:
            if v == -1:
                theta, r, grad = state.theta_minus, state.r_minus, state.grad_minus
            else:
                theta, r, grad = state.theta_plus, state.r_plus, state.grad_plus
            theta_new, r_new, L_new, grad_new = leapfrog(
                self.target, theta, r, grad, v * self.epsilon, self.inv_mass
            )
            H = L_new - kinetic_energy(r_new, self.inv_mass)
            comparison = H - H0 if math.isfinite(H) else -math.inf
            divergent = -comparison > self.config.divergence_threshold
            return NutsState(
                theta_new,
                r_new,
                L_new,
                grad_new,
                log_weight=comparison,
                alive=not divergent,
                accept_sum=math.exp(min(0.0, comparison)),
                n_leapfrog=1,
                divergent=divergent,
            )
        inner = self.build_tree(state, v, j - 1, H0)
        if inner.alive:
            outer = self.build_tree(inner, v, j - 1, H0)
            inner.merge(outer, v, root=False, inv_mass=self.inv_mass, rng=self.rng)
        return inner

    def transition(self, theta: FArray, L: float, grad: FArray) -> tuple[NutsState, int]:
        r0 = self._momentum()
        H0 = L - kinetic_energy(r0, self.inv_mass)
        state = NutsState(theta, r0, L, grad, 0.0, True, 0.0, 0, False)
        depth = 0
        while depth < self.config.max_tree_depth and state.alive:
            v = 1 if self.rng.integers(2) else -1
            subtree = self.build_tree(state, v, depth, H0)
            state.merge(subtree, v, root=True, inv_mass=self.inv_mass, rng=self.rng)
            depth += 1
        return state, depth

    def run(self) -> dict[str, Any]:
        cfg = self.config
        theta, _ = initial_point(self.target, self.rng, cfg.jitter)
        L, grad = self.target.value_and_grad(theta)
        if not np.all(np.isfinite(grad)):
            raise InitializationError("gradient is not finite at the initial point")

        adapt = cfg.step_size is None and cfg.warmup > 0
        if cfg.step_size is None:
            self.epsilon = self.reasonable_epsilon(theta, L, grad)
        da = DualAveraging(self.epsilon, cfg.target_accept)

        window: Optional[tuple[int, int]] = None
        if cfg.adapt_mass and cfg.warmup >= MIN_MASS_WINDOW_WARMUP:
            window = (int(MASS_WINDOW[0] * cfg.warmup), int(MASS_WINDOW[1] * cfg.warmup))
        window_draws: list[FArray] = []

        draws = np.empty((cfg.keep, self.target.dim))
        accept = np.empty(cfg.keep)
        divergent = np.zeros(cfg.keep, dtype=bool)
        depth = np.zeros(cfg.keep, dtype=np.int64)
        for it in range(cfg.warmup + cfg.keep):
            state, d = self.transition(theta, L, grad)
            theta, L, grad = state.theta, state.L, state.grad
            stat = state.accept_sum / max(state.n_leapfrog, 1)
            if it < cfg.warmup:
                if adapt:
                    self.epsilon = da.update(stat)
                if window is not None and window[0] <= it < window[1]:
                    window_draws.append(theta)
                    if it == window[1] - 1:
                        self.inv_mass = regularized_variance(np.array(window_draws))
                        if adapt:
                            self.epsilon = self.reasonable_epsilon(theta, L, grad)
                            da = DualAveraging(self.epsilon, cfg.target_accept)
                if it == cfg.warmup - 1 and adapt:
                    self.epsilon = da.final
                continue
            k = it - cfg.warmup
            draws[k], accept[k], divergent[k], depth[k] = theta, stat, state.divergent, d
        return {
            "draws": draws,
            "accept": accept,
            "divergent": divergent,
            "depth": depth,
            "step_size": self.epsilon,
        }


class DualAveraging:
    """Nesterov dual averaging of log ε towards a target acceptance statistic."""

    def __init__(self, epsilon: float, target: float) -> None:
        self.mu = math.log(10 * epsilon)
        self.target = target
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_stat: float) -> float:
        self.m += 1
        m = self.m
        eta = 1.0 / (m + DA_T0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(m) / DA_GAMMA * self.h_bar
        weight = m**-DA_KAPPA
        self.log_eps_bar = weight * log_eps + (1 - weight) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar) if self.m else math.exp(self.mu) / 10


def regularized_variance(samples: FArray) -> FArray:
    """Per-coordinate variance shrunk towards 1e-3, as used for the diagonal metric."""
    n = samples.shape[0]
    var = np.var(samples, axis=0, ddof=1) if n > 1 else np.ones(samples.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def hmc_nuts(
    target: Target | HierarchicalModel,
    config: Optional[SamplerConfig] = None,
    workers: Optional[int] = None,
) -> PosteriorChains:
    config = config or SamplerConfig()
    if isinstance(target, HierarchicalModel):
        target = Target.from_model(target)
    if not target.has_gradient:
        raise InitializationError("NUTS needs the gradient of the log density")
    rngs = _chain_rngs(config.seed, config.chains)
    jobs = [lambda rng=rng: _NutsChain(target, config, rng).run() for rng in rngs]  # type: ignore[misc]
    results = Swarm(jobs, workers, label="chain").main()
    out = _collect("nuts", target, config, results)
    if out.divergence_fraction > DIVERGENCE_WARN_FRACTION:
        message = (
            f"{out.divergences} of {out.divergent.size} post-warmup transitions diverged "
            f"({out.divergence_fraction:.1%})"
        )
        out.warnings.append(message)
        logger.warning(message)
    elif out.divergences:
        logger.info(f"{out.divergences} divergent transitions after warmup")
    logger.info(
        f"nuts: {config.chains} chain(s) x {config.keep} draws, "
        f"mean accept stat {out.mean_accept:.3f}, step sizes {[round(s, 4) for s in out.step_size]}"
    )
    return out


def _collect(
    method: str, target: Target, config: SamplerConfig, results: list[Optional[dict[str, Any]]]
) -> PosteriorChains:
    done = [r for r in results if r is not None]
    raw = np.stack([r["draws"] for r in done])
    shape = raw.shape[:2]
    draws = np.asarray(target.constrain(raw), dtype=np.float64)
    if not np.all(np.isfinite(draws)):
        logger.warning("some constrained draws are not finite")
    return PosteriorChains(
        method=method,
        names=target.names,
        draws=draws,
        accept_stat=np.stack([r["accept"] for r in done]),
        divergent=np.stack([r.get("divergent", np.zeros(shape[1], dtype=bool)) for r in done]),
        tree_depth=np.stack([r.get("depth", np.zeros(shape[1], dtype=np.int64)) for r in done]),
        step_size=[float(r["step_size"]) for r in done],
        warmup=config.warmup,
        seed=config.seed,
    )
