import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from .errors import InvalidExperimentError, UnsupportedMomentError
from .qsim import GateSet, SpamConfig
from .structs import PriorSpec

logger = logging.getLogger(__name__)

SUPPORTED_MOMENTS = (1, 2)


class ParamKind(str, Enum):
    PROB = "prob"
    SIMPLEX = "simplex"


class SamplingParam(BaseModel):
    """A coordinate block the models sample over.

    A simplex block named "L" with components ["L1", "L2"] lives on the
    3-simplex (L1, L2, 1 - L1 - L2).
    """

    name: str
    kind: ParamKind = ParamKind.PROB
    components: list[str] = Field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.components) if self.kind == ParamKind.SIMPLEX else 1

    @property
    def names(self) -> list[str]:
        return self.components if self.kind == ParamKind.SIMPLEX else [self.name]


class SequenceTemplate(BaseModel):
    """Allowable sequences: `slots` (None draws uniformly from the gate set, an
    int fixes the gate) followed, if `terminal` is set, by the gate that
    brings the composite to a uniformly chosen element of `terminal`."""

    slots: list[Optional[int]]
    terminal: Optional[list[int]] = None

    @property
    def length(self) -> int:
        return len(self.slots) + (1 if self.terminal is not None else 0)

    @property
    def free_count(self) -> int:
        return sum(s is None for s in self.slots)


def check_moment(t: int, expected: int) -> None:
    if t not in SUPPORTED_MOMENTS or t != expected:
        raise UnsupportedMomentError(f"moment order t={t} is not tied by this protocol")


class Protocol(ABC):
    """Interface for an RB+ protocol: gate set, experiment types, allowable
    sequences and the tying function linking survival moments to parameters."""

    moment: int = 1
    decay_params: list[str] = []

    gateset: GateSet
    experiments: list[str]

    @property
    def name(self) -> str:
        return self.__class__.__name__.lower()

    @property
    @abstractmethod
    def sampling_params(self) -> list[SamplingParam]:
        raise NotImplementedError

    @abstractmethod
    def template(self, M: int, e: str) -> SequenceTemplate:
        raise NotImplementedError

    @abstractmethod
    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        """T(t, M, e, x) over tying parameters x (floats or jax values)."""
        raise NotImplementedError

    def tying_params(self, sampled: Mapping[str, Any]) -> dict[str, Any]:
        """Map sampling coordinates to tying parameters."""
        return dict(sampled)

    def sampled_from_tying(self, x: Mapping[str, Any]) -> dict[str, Any]:
        return dict(x)

    @property
    def sampled_names(self) -> list[str]:
        return [n for p in self.sampling_params for n in p.names]

    @property
    def param_names(self) -> list[str]:
        """Tying parameter names, in the order results are reported."""
        probe = {n: 0.5 for n in self.sampled_names}
        return list(self.tying_params(probe).keys())

    def check_experiment(self, e: str) -> None:
        if e not in self.experiments:
            raise InvalidExperimentError(
                f"experiment type '{e}' not valid for {self.name}; expected one of {self.experiments}"
            )

    def sequence_length(self, M: int, e: str) -> int:
        return self.template(M, e).length

    def sample_sequence(self, M: int, e: str, rng: np.random.Generator) -> list[int]:
        if M < 1:
            raise InvalidExperimentError(f"sequence length M={M} must be at least 1")
        tpl = self.template(M, e)
        gs = self.gateset
        seq = [int(rng.integers(gs.size)) if s is None else s for s in tpl.slots]
        if tpl.terminal is not None:
            k = int(rng.integers(len(tpl.terminal))) if len(tpl.terminal) > 1 else 0
            seq.append(gs.completion(seq, tpl.terminal[k]))
        return seq

    def default_spam(self, effect_scale: float = 1.0) -> dict[str, SpamConfig]:
        spam = SpamConfig.standard(d=self.gateset.dim, effect_scale=effect_scale)
        return {e: spam for e in self.experiments}

    def prior_preset(
        self, preset: str = "flat", pal: tuple[float, float] = (0.9, 0.05)
    ) -> dict[str, PriorSpec]:
        """Named prior blocks; parameters not listed get the default for their kind."""
        if preset == "flat":
            return {}
        if preset == "pal":
            return {n: PriorSpec.pal(pal[0], pal[1]) for n in self.decay_params}
        if preset == "tighter":
            logger.info(f"'tighter' preset has no blocks for {self.name}; using flat priors")
            return {}
        raise ValueError(f"unknown prior preset '{preset}'")
