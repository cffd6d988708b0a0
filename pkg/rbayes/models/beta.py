from typing import Any, Callable, Mapping, Optional, Sequence

import jax
import jax.numpy as jnp

from ..errors import ConfigError
from ..model import (
    HierarchicalModel,
    LogitTransform,
    Observation,
    beta_logpdf_ab,
    betabinom_logpmf_ab,
)
from ..protocol import Protocol
from ..structs import DatasetRecord, ModelFamily, PriorSpec

Extractor = Callable[[Mapping[str, jax.Array], jax.Array], jax.Array]


class BetaModel(HierarchicalModel):
    """Beta survival distribution per (M, e) cell.

    Each cell's survival distribution is Beta with mean tied to the protocol
    and a free dispersion t[M,e] ~ Unif(0, 1). For binomial data the
    survival probabilities are integrated out (beta-binomial likelihood); NV
    data keeps them as latent q[M,e,i]. With `overdispersed=False` every
    sequence of a cell shares the tied mean exactly (binomial likelihood).

    When the protocol ties the second moment μ2, the cell mean is sampled
    as μ1 = μ2 + (√μ2 - μ2)·frac[M,e] with frac ~ Unif(0, 1), which spans the
    means compatible with μ2.
    """

    family = ModelFamily.BETA

    def __init__(
        self,
        protocol: Protocol,
        records: Sequence[DatasetRecord],
        priors: Optional[Mapping[str, PriorSpec]] = None,
        centering: Optional[Mapping[str, tuple[float, float]]] = None,
        overdispersed: bool = True,
        observation: Observation = Observation.BINOMIAL,
        rates: Optional[tuple[float, float]] = None,
    ) -> None:
        if protocol.moment == 2 and not overdispersed:
            raise ConfigError("a second-moment protocol needs the overdispersed beta model")
        self.overdispersed = overdispersed
        super().__init__(protocol, records, priors, centering, observation, rates)

    @property
    def latent(self) -> bool:
        return self.observation == Observation.NV and self.overdispersed

    def _add_cell_blocks(self) -> None:
        if self.protocol.moment == 2:
            self._add_block("frac", self.cell_names("frac"), LogitTransform())
        if self.overdispersed and self.protocol.moment == 1:
            self._add_block("t", self.cell_names("t"), LogitTransform())
        if self.latent:
            self._add_block("q", self.record_names("q"), LogitTransform())

    def _cell_moments(
        self, values: Mapping[str, jax.Array], T: jax.Array
    ) -> tuple[jax.Array, Optional[jax.Array]]:
        """Per-cell survival mean and dispersion t (None without overdispersion)."""
        if self.protocol.moment == 2:
            root = jnp.sqrt(T)
            mu = T + (root - T) * values["frac"]
            return mu, (T - mu * mu) / (mu - mu * mu)
        return T, values["t"] if self.overdispersed else None

    def _hierarchy(self, values: Mapping[str, jax.Array], T: jax.Array) -> jax.Array:
        if not self.records:
            return jnp.zeros(())
        mu, t = self._cell_moments(values, T)
        mu_i = mu[self._cell_of]
        if self.observation == Observation.BINOMIAL:
            if t is None:
                return jnp.sum(
                    self._log_choose
                    + self._Q * jnp.log(mu_i)
                    + (self._N - self._Q) * jnp.log1p(-mu_i)
                )
            s = 1 / t[self._cell_of] - 1
            return jnp.sum(
                betabinom_logpmf_ab(self._Q, self._N, mu_i * s, (1 - mu_i) * s, self._log_choose)
            )
        if t is None:
            return self._poisson_loglik(values, mu_i)
        q = values["q"]
        s = 1 / t[self._cell_of] - 1
        survival = jnp.sum(beta_logpdf_ab(q, mu_i * s, (1 - mu_i) * s))
        return survival + self._poisson_loglik(values, q)

    def _nuisance_layout(self) -> list[tuple[list[str], Extractor]]:
        layout: list[tuple[list[str], Extractor]] = []
        if self.protocol.moment == 2:
            layout.append((self.cell_names("mu1"), lambda v, T: self._cell_moments(v, T)[0]))

        def dispersion(v: Mapping[str, jax.Array], T: jax.Array) -> Any:
            return self._cell_moments(v, T)[1]

        if self.overdispersed:
            layout.append((self.cell_names("t"), dispersion))
        if self.latent:
            layout.append((self.record_names("q"), lambda v, T: v["q"]))
        return layout


def build_beta_model(
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    priors: Optional[Mapping[str, PriorSpec]] = None,
    centering: Optional[Mapping[str, tuple[float, float]]] = None,
    overdispersed: bool = True,
) -> BetaModel:
    return BetaModel(protocol, records, priors, centering, overdispersed=overdispersed)
