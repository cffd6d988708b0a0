from typing import Callable, Mapping, Optional, Sequence

import jax
import jax.numpy as jnp
from jax.scipy.special import logsumexp, xlog1py, xlogy

from ..errors import ConfigError
from ..model import (
    HierarchicalModel,
    IdentityTransform,
    LogitTransform,
    LogTransform,
    Observation,
    beta_logpdf_ab,
    betabinom_logpmf_ab,
    constrain_mean_jax,
    constrain_two_moments_jax,
    mean_r_to_ab,
    prior_logpdf,
    stick_break_jax,
)
from ..protocol import Protocol
from ..structs import DatasetRecord, ModelFamily, PriorSpec, Support

Extractor = Callable[[Mapping[str, jax.Array], jax.Array], jax.Array]

DEFAULT_COMPONENTS = 10
DEFAULT_BASE_SCALE = 1.9
LOG_FLOOR = 1e-300


class CDPBMModel(HierarchicalModel):
    """Constrained Dirichlet-process beta mixture per (M, e) cell.

    Every cell carries a K-truncated stick-breaking mixture of betas:

        conc[M,e]        ~ Gam(1, 1)
        v[M,e,k]         ~ Beta(1, conc[M,e])         k < K-1
        nustar[M,e,k]    ~ Normal(0, base_scale)      unshifted logit locations
        r[M,e,k]         ~ Unif(0, 1)                 relative spreads

    The component means nu are nustar shifted (and, for second-moment
    protocols, scaled) so the mixture moments equal the tying values
    exactly. By default sequences are integrated out of the likelihood
    component by component; `latent=True` keeps q[M,e,i] explicit.
    """

    family = ModelFamily.CDPBM

    def __init__(
        self,
        protocol: Protocol,
        records: Sequence[DatasetRecord],
        priors: Optional[Mapping[str, PriorSpec]] = None,
        centering: Optional[Mapping[str, tuple[float, float]]] = None,
        components: int = DEFAULT_COMPONENTS,
        latent: bool = False,
        base_scale: float = DEFAULT_BASE_SCALE,
        observation: Observation = Observation.BINOMIAL,
        rates: Optional[tuple[float, float]] = None,
    ) -> None:
        if components < 2:
            raise ConfigError(f"the mixture needs K >= 2 components, got {components}")
        if base_scale <= 0:
            raise ConfigError("base_scale must be positive")
        self.components = components
        self.base_scale = base_scale
        # Poisson counts do not marginalize against a beta component.
        self.latent = latent or observation == Observation.NV
        super().__init__(protocol, records, priors, centering, observation, rates)

    def _add_cell_blocks(self) -> None:
        K = self.components
        self._add_block("conc", self.cell_names("conc"), LogTransform(), Support.POSITIVE)
        self._add_block("v", self.mixture_names("v", K - 1), LogitTransform())
        self._add_block("nustar", self.mixture_names("nustar", K), IdentityTransform(), Support.REAL)
        self._add_block("r", self.mixture_names("r", K), LogitTransform())
        if self.protocol.moment == 2:
            self._add_block("frac", self.cell_names("frac"), LogitTransform())
        if self.latent:
            self._add_block("q", self.record_names("q"), LogitTransform())

    def _mixture(
        self, values: Mapping[str, jax.Array], T: jax.Array
    ) -> dict[str, jax.Array]:
        """Per-cell weights, constrained locations and beta shapes, each (C, K)."""
        C, K = len(self.cells), self.components
        if C == 0:
            empty = jnp.zeros((0, K))
            return {k: empty for k in ("w", "r", "nu", "a", "b")} | {"mu1": jnp.zeros(0)}
        v = values["v"].reshape(C, K - 1)
        nu_star = values["nustar"].reshape(C, K)
        r = values["r"].reshape(C, K)
        w = jax.vmap(stick_break_jax)(v)
        out = {"w": w, "r": r}
        if self.protocol.moment == 2:
            mu1 = T + (jnp.sqrt(T) - T) * values["frac"]
            nu = jax.vmap(constrain_two_moments_jax)(nu_star, r, w, mu1, T)
            out["mu1"] = mu1
        else:
            nu = jax.vmap(constrain_mean_jax)(nu_star, w, T)
        a, b = mean_r_to_ab(nu, r)
        out.update(nu=nu, a=a, b=b)
        return out

    def _hierarchy(self, values: Mapping[str, jax.Array], T: jax.Array) -> jax.Array:
        if not self.records:
            return jnp.zeros(())
        mix = self._mixture(values, T)
        idx = self._cell_of
        log_w = jnp.log(jnp.clip(mix["w"], LOG_FLOOR, None))[idx]
        a, b = mix["a"][idx], mix["b"][idx]
        if not self.latent:
            comp = betabinom_logpmf_ab(
                self._Q[:, None], self._N[:, None], a, b, self._log_choose[:, None]
            )
            return jnp.sum(logsumexp(log_w + comp, axis=1))
        q = values["q"]
        survival = jnp.sum(logsumexp(log_w + beta_logpdf_ab(q[:, None], a, b), axis=1))
        if self.observation == Observation.NV:
            return survival + self._poisson_loglik(values, q)
        binom = self._log_choose + xlogy(self._Q, q) + xlog1py(self._N - self._Q, -q)
        return survival + jnp.sum(binom)

    def _hyperprior(self, values: Mapping[str, jax.Array]) -> jax.Array:
        C, K = len(self.cells), self.components
        conc = values["conc"]
        conc_prior = self.priors.get("conc", PriorSpec.gamma(1.0, 1.0))
        total = prior_logpdf(conc_prior, conc)
        # Beta(1, conc) stick fractions
        v = values["v"].reshape(C, K - 1)
        total = total + jnp.sum(jnp.log(conc)[:, None] + xlog1py(conc[:, None] - 1, -v))
        base = self.priors.get("nustar", PriorSpec.normal(0.0, self.base_scale))
        return total + prior_logpdf(base, values["nustar"])

    def _nuisance_layout(self) -> list[tuple[list[str], Extractor]]:
        K = self.components

        def column(key: str) -> Extractor:
            return lambda v, T: self._mixture(v, T)[key]

        layout: list[tuple[list[str], Extractor]] = [
            (self.cell_names("conc"), lambda v, T: v["conc"]),
            (self.cell_names("neff"), lambda v, T: 1 / jnp.sum(self._mixture(v, T)["w"] ** 2, axis=1)),
            (self.mixture_names("w", K), column("w")),
            (self.mixture_names("nu", K), column("nu")),
            (self.mixture_names("r", K), column("r")),
        ]
        if self.protocol.moment == 2:
            layout.insert(0, (self.cell_names("mu1"), column("mu1")))
        if self.latent:
            layout.append((self.record_names("q"), lambda v, T: v["q"]))
        return layout


def build_cdpbm_model(
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    priors: Optional[Mapping[str, PriorSpec]] = None,
    centering: Optional[Mapping[str, tuple[float, float]]] = None,
    K: int = DEFAULT_COMPONENTS,
    latent: bool = False,
    base_scale: float = DEFAULT_BASE_SCALE,
) -> CDPBMModel:
    return CDPBMModel(
        protocol, records, priors, centering, components=K, latent=latent, base_scale=base_scale
    )
