from typing import Any, Literal, Mapping, Optional, Sequence

import jax.numpy as jnp
import numpy as np

from ..errors import DegenerateLeakageError, DomainError, InvalidExperimentError
from ..protocol import ParamKind, Protocol, SamplingParam, SequenceTemplate, check_moment
from ..qsim import Channel, CArray, GateSet, SpamConfig, average_gate_fidelity, clifford_subgroup
from ..structs import PriorSpec

LEAKAGE_EPS = 1e-12


def leakage_seepage(channel: Channel, d1: int, d2: int) -> tuple[float, float]:
    """L1 = 1 - Tr P1 E(P1/d1) and L2 = Tr P1 E(P2/d2)."""
    d = d1 + d2
    if channel.dim != d:
        raise DomainError(f"channel dim {channel.dim} does not match d1 + d2 = {d}")
    P1 = np.zeros((d, d))
    P1[:d1, :d1] = np.eye(d1)
    P2 = np.eye(d) - P1
    L1 = float(1 - np.trace(P1 @ channel.apply(P1 / d1)).real)
    L2 = float(np.trace(P1 @ channel.apply(P2 / d2)).real)
    if L1 + L2 > 1 + 1e-10:
        raise DomainError(f"L1 + L2 = {L1 + L2:.6g} exceeds 1")
    return L1, L2


def _is_concrete(v: Any) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer))


def tying_lrb(
    t: int,
    M: int,
    e: str,
    x: Mapping[str, Any],
    limit_form: bool = False,
) -> Any:
    """Leakage RB first moment for experiment e = "λ:i".

    (L2 A + L1 B)/(L1 + L2) + (L1/(L1 + L2) - p_i)(A - B) λ1^M
    + (1 - p_i)(C - A) λ2^M, with λ1 = 1 - L1 - L2 and λ2 = μ1 (1 - L1).
    For L1 + L2 below 1e-12 the ratio L1/(L1 + L2) takes its symmetric limit 1/2
    when `limit_form` is set.
    """
    check_moment(t, 1)
    try:
        lam, i = e.split(":")
    except ValueError:
        raise InvalidExperimentError(f"LRB experiment type must look like 'λ:i', got '{e}'")
    L1, L2, mu1 = x["L1"], x["L2"], x["mu1"]
    A, B, C, p = x[f"A{lam}"], x[f"B{lam}"], x[f"C{i}_{lam}"], x[f"p{i}"]
    total = L1 + L2
    if _is_concrete(total):
        if total <= LEAKAGE_EPS and not limit_form:
            raise DegenerateLeakageError(f"L1 + L2 = {total} is below {LEAKAGE_EPS}")
        frac = L1 / total if total > LEAKAGE_EPS else 0.5
    else:
        safe = jnp.where(total > LEAKAGE_EPS, total, 1.0)
        frac = jnp.where(total > LEAKAGE_EPS, L1 / safe, 0.5)
    lam1 = 1 - total
    lam2 = mu1 * (1 - L1)
    offset = (1 - frac) * A + frac * B
    return offset + (frac - p) * (A - B) * lam1**M + (1 - p) * (C - A) * lam2**M


def lrb_parameters(
    channel: Channel,
    d1: int,
    d2: int,
    effects: Mapping[int, CArray],
    states: Mapping[int, CArray],
) -> dict[str, float]:
    """LRB tying parameters implied by a gate-independent channel and SPAM."""
    L1, L2 = leakage_seepage(channel, d1, d2)
    d = d1 + d2
    F = average_gate_fidelity(channel, d1)
    lam2 = (d1 * F - (1 - L1)) / (d1 - 1)
    out: dict[str, float] = {"L1": L1, "L2": L2, "mu1": lam2 / (1 - L1)}
    I1 = np.zeros((d, d))
    I1[:d1, :d1] = np.eye(d1)
    I2 = np.eye(d) - I1
    for lam, E in effects.items():
        out[f"A{lam}"] = float(np.trace(E @ channel.apply(I1 / d1)).real)
        out[f"B{lam}"] = float(np.trace(E @ channel.apply(I2 / d2)).real)
        for i, rho in states.items():
            out[f"C{i}_{lam}"] = float(np.trace(E @ channel.apply(rho)).real)
    for i, rho in states.items():
        out[f"p{i}"] = float(np.trace(I1 @ rho).real)
    return out


class LRB(Protocol):
    """Leakage RB on the computational block of a d1 + d2 level system.

    Experiment "λ:i" prepares initial state i and measures level λ. The
    leakage pair is sampled on the simplex (L1, L2, 1 - L1 - L2). Initial-state
    populations p_i are free parameters or fixed from known SPAM.
    """

    decay_params = ["mu1"]

    def __init__(
        self,
        gateset: Optional[GateSet] = None,
        d1: int = 2,
        d2: int = 1,
        measurements: Sequence[int] = (0,),
        states: Sequence[int] = (0, 1),
        p_mode: Literal["free", "fixed"] = "free",
        p_values: Optional[Mapping[int, float]] = None,
    ) -> None:
        base = gateset or clifford_subgroup()
        if base.dim != d1:
            raise DomainError(f"gate set dim {base.dim} must equal d1 = {d1}")
        self.gateset = base.embed(d1 + d2)
        self.d1, self.d2 = d1, d2
        self.measurements = list(measurements)
        self.states = list(states)
        if p_mode == "fixed":
            if p_values is None or set(p_values) != set(self.states):
                raise DomainError("fixed p mode needs a value for every initial state")
        self.p_mode = p_mode
        self.p_values = dict(p_values or {})
        self.experiments = [f"{lam}:{i}" for lam in self.measurements for i in self.states]

    @property
    def sampling_params(self) -> list[SamplingParam]:
        params = [
            SamplingParam(name="L", kind=ParamKind.SIMPLEX, components=["L1", "L2"]),
            SamplingParam(name="mu1"),
        ]
        params += [SamplingParam(name=f"A{lam}") for lam in self.measurements]
        params += [SamplingParam(name=f"B{lam}") for lam in self.measurements]
        params += [
            SamplingParam(name=f"C{i}_{lam}") for i in self.states for lam in self.measurements
        ]
        if self.p_mode == "free":
            params += [SamplingParam(name=f"p{i}") for i in self.states]
        return params

    def tying_params(self, sampled: Mapping[str, Any]) -> dict[str, Any]:
        x = dict(sampled)
        if self.p_mode == "fixed":
            x.update({f"p{i}": v for i, v in self.p_values.items()})
        return x

    def sampled_from_tying(self, x: Mapping[str, Any]) -> dict[str, Any]:
        names = set(self.sampled_names)
        return {k: v for k, v in x.items() if k in names}

    def template(self, M: int, e: str) -> SequenceTemplate:
        self.check_experiment(e)
        return SequenceTemplate(slots=[None] * M, terminal=[self.gateset.identity])

    def tying(self, t: int, M: int, e: str, x: Mapping[str, Any]) -> Any:
        self.check_experiment(e)
        return tying_lrb(t, M, e, x, limit_form=True)

    def default_spam(self, effect_scale: float = 0.99999) -> dict[str, SpamConfig]:
        """Imperfect SPAM: leak 1e-4 (state 0) and 5e-4 (other states) into the
        leakage block."""
        d = self.d1 + self.d2
        out = {}
        for lam in self.measurements:
            for i in self.states:
                leak = 1e-4 if i == 0 else 5e-4
                out[f"{lam}:{i}"] = SpamConfig.standard(
                    d=d, state=i, measure=lam, effect_scale=effect_scale, leak=leak
                )
        return out

    def prior_preset(
        self, preset: str = "flat", pal: tuple[float, float] = (0.9, 0.05)
    ) -> dict[str, PriorSpec]:
        priors = {"L": PriorSpec.dirichlet(1, 1, 100)}
        if preset == "tighter":
            for lam in self.measurements:
                priors[f"A{lam}"] = PriorSpec.beta(100, 100)
                priors[f"B{lam}"] = PriorSpec.beta(1, 100)
        elif preset == "pal":
            priors.update(super().prior_preset("pal", pal))
        elif preset != "flat":
            raise ValueError(f"unknown prior preset '{preset}'")
        return priors
