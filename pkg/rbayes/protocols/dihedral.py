from typing import Any, Mapping

import numpy as np

from ..errors import InvalidExperimentError
from ..protocol import Protocol, SamplingParam, SequenceTemplate, check_moment
from ..qsim import PAULI_X, PAULI_Z, SpamConfig, dihedral_group


def tying_dihedral(t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
    """A + B_e p_e^M for e in {X, Z}."""
    check_moment(t, 1)
    if e not in ("X", "Z"):
        raise InvalidExperimentError(f"dihedral experiment type must be X or Z, got '{e}'")
    return x["A"] + x[f"B{e}"] * x[f"p{e}"] ** M


class Dihedral(Protocol):
    """Dihedral benchmarking on the group generated by exp(iπZ/j) and X.

    Sequences end on I or on the experiment's Pauli (chosen uniformly), the
    stabilizers of the prepared eigenstate. Sampled as (pX, pZ, A, SX, SZ)
    with S_e = A + B_e.
    """

    decay_params = ["pX", "pZ"]

    def __init__(self, j: int = 4) -> None:
        if j % 2:
            raise InvalidExperimentError("j must be even so that Z is in the group")
        self.gateset = dihedral_group(j)
        self.experiments = ["X", "Z"]
        self._pauli = {
            "X": self.gateset.index_of(PAULI_X),
            "Z": self.gateset.index_of(PAULI_Z),
        }

    @property
    def sampling_params(self) -> list[SamplingParam]:
        return [SamplingParam(name=n) for n in ("pX", "pZ", "A", "SX", "SZ")]

    def tying_params(self, sampled: Mapping[str, Any]) -> dict[str, Any]:
        A = sampled["A"]
        return {
            "pX": sampled["pX"],
            "pZ": sampled["pZ"],
            "A": A,
            "BX": sampled["SX"] - A,
            "BZ": sampled["SZ"] - A,
        }

    def sampled_from_tying(self, x: Mapping[str, Any]) -> dict[str, Any]:
        return {
            "pX": x["pX"],
            "pZ": x["pZ"],
            "A": x["A"],
            "SX": x["A"] + x["BX"],
            "SZ": x["A"] + x["BZ"],
        }

    def template(self, M: int, e: str) -> SequenceTemplate:
        self.check_experiment(e)
        return SequenceTemplate(
            slots=[None] * M, terminal=[self.gateset.identity, self._pauli[e]]
        )

    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        self.check_experiment(e)
        return tying_dihedral(t, M, e, x)

    def default_spam(self, effect_scale: float = 1.0) -> dict[str, SpamConfig]:
        plus = np.array([1, 1], dtype=np.complex128) / np.sqrt(2)
        zero = np.array([1, 0], dtype=np.complex128)
        return {
            "X": SpamConfig.pure(plus, effect_scale),
            "Z": SpamConfig.pure(zero, effect_scale),
        }
