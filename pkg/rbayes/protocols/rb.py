from typing import Any, Mapping, Optional

from ..protocol import Protocol, SamplingParam, SequenceTemplate, check_moment
from ..qsim import GateSet, clifford_subgroup


def tying_rb(t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
    """(A - B) p^M + B."""
    check_moment(t, 1)
    return (x["A"] - x["B"]) * x["p"] ** M + x["B"]


class RB(Protocol):
    """Standard randomized benchmarking: M uniform gates plus the inverse."""

    decay_params = ["p"]

    def __init__(self, gateset: Optional[GateSet] = None) -> None:
        self.gateset = gateset or clifford_subgroup()
        self.experiments = ["0"]

    @property
    def sampling_params(self) -> list[SamplingParam]:
        return [SamplingParam(name=n) for n in ("p", "A", "B")]

    def template(self, M: int, e: str) -> SequenceTemplate:
        self.check_experiment(e)
        return SequenceTemplate(slots=[None] * M, terminal=[self.gateset.identity])

    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        self.check_experiment(e)
        return tying_rb(t, M, e, x)
