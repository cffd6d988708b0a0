from typing import Any, Mapping, Optional

from ..protocol import Protocol, SamplingParam, SequenceTemplate, check_moment
from ..qsim import GateSet, clifford_subgroup


class Constant(Protocol):
    """A bag of coins with one mean bias mu shared by every length.

    Survival is tied to T = mu regardless of M; with N = 1 data (or a pure
    binomial observation) this is the conjugate beta-binomial problem.
    """

    decay_params = ["mu"]

    def __init__(self, gateset: Optional[GateSet] = None) -> None:
        self.gateset = gateset or clifford_subgroup()
        self.experiments = ["0"]

    @property
    def sampling_params(self) -> list[SamplingParam]:
        return [SamplingParam(name="mu")]

    def template(self, M: int, e: str) -> SequenceTemplate:
        self.check_experiment(e)
        return SequenceTemplate(slots=[None] * M, terminal=[self.gateset.identity])

    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        check_moment(t, 1)
        self.check_experiment(e)
        return x["mu"]
