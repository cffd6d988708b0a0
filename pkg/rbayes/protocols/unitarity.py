from typing import Any, Mapping, Optional

from ..protocol import Protocol, SamplingParam, SequenceTemplate, check_moment
from ..qsim import GateSet, clifford_subgroup


def tying_unitarity(t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
    """Second moment A + B u^(M-1)."""
    check_moment(t, 2)
    return x["A"] + x["B"] * x["u"] ** (M - 1)


class Unitarity(Protocol):
    """Unitarity benchmarking: M uniform gates, no inversion, second moment tied.

    Sampled as (u, A, S) with S = A + B, so A and the M=1 value S are
    independent unit intervals and the tied moment stays in [0, 1].
    """

    moment = 2
    decay_params = ["u"]

    def __init__(self, gateset: Optional[GateSet] = None) -> None:
        self.gateset = gateset or clifford_subgroup()
        self.experiments = ["0"]

    @property
    def sampling_params(self) -> list[SamplingParam]:
        return [SamplingParam(name=n) for n in ("u", "A", "S")]

    def tying_params(self, sampled: Mapping[str, Any]) -> dict[str, Any]:
        return {"u": sampled["u"], "A": sampled["A"], "B": sampled["S"] - sampled["A"]}

    def sampled_from_tying(self, x: Mapping[str, Any]) -> dict[str, Any]:
        return {"u": x["u"], "A": x["A"], "S": x["A"] + x["B"]}

    def template(self, M: int, e: str) -> SequenceTemplate:
        self.check_experiment(e)
        return SequenceTemplate(slots=[None] * M)

    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        self.check_experiment(e)
        return tying_unitarity(t, M, e, x)
