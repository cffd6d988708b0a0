from typing import Any, Mapping, Optional

from ..errors import DomainError, InvalidExperimentError
from ..protocol import Protocol, SamplingParam, SequenceTemplate, check_moment
from ..qsim import GateSet, clifford_subgroup


def tying_irb(t: int, M: int, e: str, x: Mapping[str, Any], interleave: str = "1") -> Any:
    """(A - B) p_e^M + B with p_0 for the reference and p_r for the interleaved curve."""
    check_moment(t, 1)
    if e == "0":
        p = x["p0"]
    elif e == interleave:
        p = x["pr"]
    else:
        raise InvalidExperimentError(f"experiment type '{e}' not in {{0, {interleave}}}")
    return (x["A"] - x["B"]) * p**M + x["B"]


class IRB(Protocol):
    """Interleaved RB; experiment "0" is the reference, str(r) interleaves gate r."""

    decay_params = ["p0", "pr"]

    def __init__(self, gateset: Optional[GateSet] = None, interleave: int = 1) -> None:
        self.gateset = gateset or clifford_subgroup()
        if not 0 < interleave < self.gateset.size or interleave == self.gateset.identity:
            raise DomainError(f"interleaved gate {interleave} must be a non-identity gate index")
        self.interleave = interleave
        self.experiments = ["0", str(interleave)]

    @property
    def sampling_params(self) -> list[SamplingParam]:
        return [SamplingParam(name=n) for n in ("p0", "pr", "A", "B")]

    def template(self, M: int, e: str) -> SequenceTemplate:
        self.check_experiment(e)
        slots: list[int | None] = (
            [None] * M if e == "0" else [s for _ in range(M) for s in (None, self.interleave)]
        )
        return SequenceTemplate(slots=slots, terminal=[self.gateset.identity])

    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        return tying_irb(t, M, e, x, interleave=str(self.interleave))
