"""Dense superoperator simulation of benchmarking sequences.

Conventions: density operators are column-stacked, so vec(A ρ B) = (Bᵀ ⊗ A) vec(ρ)
and a unitary U acts as conj(U) ⊗ U. Gates are stored phase-canonicalized (first
nonzero entry real positive) and a gate set carries its multiplication table,
so closure, inverses and sequence composites are integer lookups. Gate indices
and sequence positions are 0-based.
"""

from __future__ import annotations

import logging
import math
import os
from collections import deque
from enum import Enum
from functools import lru_cache
from typing import TYPE_CHECKING, Any, Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, PrivateAttr, field_validator, model_validator
from scipy.linalg import expm, schur

from .errors import (
    ConsistencyError,
    DomainError,
    EnumerationCapError,
    GroupStructureError,
    GroupTooLargeError,
)
from .structs import DatasetRecord, NoiseKind, NoiseOrder, NoiseSpec
from .swarm import Swarm

if TYPE_CHECKING:
    from .protocol import Protocol

logger = logging.getLogger(__name__)

CArray = NDArray[np.complex128]
FArray = NDArray[np.float64]

UNITARY_TOL = 1e-12
CPTP_TOL = 1e-10
SURVIVAL_TOL = 1e-9
ATOM_DECIMALS = 12
DEFAULT_ENUMERATION_CAP = 10**6

I2 = np.eye(2, dtype=np.complex128)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=np.complex128) / math.sqrt(2)
SQRT_Z = np.array([[1, 0], [0, 1j]], dtype=np.complex128)


def vec(rho: Any) -> CArray:
    return np.asarray(rho, dtype=np.complex128).reshape(-1, order="F")


def unvec(v: CArray, d: int) -> CArray:
    return np.asarray(v).reshape(d, d, order="F")


def canonical_phase(m: CArray, block: Optional[int] = None) -> CArray:
    """Multiply by the global phase that makes the first nonzero entry real positive."""
    ref = m if block is None else m[:block, :block]
    flat = ref.reshape(-1)
    nz = np.flatnonzero(np.abs(flat) > 1e-8)
    if nz.size == 0:
        return m
    x = flat[nz[0]]
    return m * (abs(x) / x)


def _group_key(m: CArray, block: Optional[int] = None) -> tuple[float, ...]:
    c = canonical_phase(m if block is None else m[:block, :block])
    r = np.round(np.concatenate([c.real.ravel(), c.imag.ravel()]), 8)
    return tuple(float(x) + 0.0 for x in r)


class Unitary(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: np.ndarray

    @field_validator("matrix", mode="before")
    @classmethod
    def _check_unitary(cls, v: Any) -> CArray:
        m = np.array(v, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ValueError(f"unitary must be a nonempty square matrix, got shape {m.shape}")
        err = float(np.max(np.abs(m.conj().T @ m - np.eye(m.shape[0]))))
        if err > UNITARY_TOL:
            raise ValueError(f"matrix is not unitary (max |U†U - I| = {err:.2e})")
        m.setflags(write=False)
        return m

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    def canonical(self) -> Unitary:
        return Unitary(matrix=canonical_phase(self.matrix))

    def dagger(self) -> Unitary:
        return Unitary(matrix=self.matrix.conj().T)

    def __matmul__(self, other: Unitary) -> Unitary:
        return Unitary(matrix=self.matrix @ other.matrix)

    def is_z_rotation(self) -> bool:
        off = self.matrix - np.diag(np.diag(self.matrix))
        return bool(np.max(np.abs(off)) < 1e-10)

    def power(self, eps: float) -> Unitary:
        """Principal fractional power via the (diagonal) Schur form."""
        T, V = schur(self.matrix, output="complex")
        phases = np.angle(np.diag(T))
        m = V @ np.diag(np.exp(1j * eps * phases)) @ V.conj().T
        return Unitary(matrix=m)

    def superop(self) -> CArray:
        return np.kron(self.matrix.conj(), self.matrix)


class Channel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    superop: np.ndarray

    @field_validator("superop", mode="before")
    @classmethod
    def _check_shape(cls, v: Any) -> CArray:
        s = np.array(v, dtype=np.complex128)
        d = int(round(math.sqrt(s.shape[0]))) if s.ndim == 2 else 0
        if s.ndim != 2 or s.shape[0] != s.shape[1] or d * d != s.shape[0] or d == 0:
            raise ValueError(f"superoperator must be d²×d², got shape {s.shape}")
        s.setflags(write=False)
        return s

    @model_validator(mode="after")
    def _check_cptp(self) -> Channel:
        tp = self.trace_preservation_error()
        if tp > CPTP_TOL:
            raise ValueError(f"channel is not trace preserving (error {tp:.2e})")
        lo = self.min_choi_eigenvalue()
        if lo < -CPTP_TOL:
            raise ValueError(f"channel is not completely positive (Choi eigenvalue {lo:.2e})")
        return self

    @property
    def dim(self) -> int:
        return int(round(math.sqrt(self.superop.shape[0])))

    def trace_preservation_error(self) -> float:
        tr = vec(np.eye(self.dim))
        return float(np.max(np.abs(tr @ self.superop - tr)))

    def choi(self) -> CArray:
        d = self.dim
        s4 = self.superop.reshape(d, d, d, d)
        return np.asarray(s4.transpose(3, 1, 2, 0).reshape(d * d, d * d))

    def min_choi_eigenvalue(self) -> float:
        j = self.choi()
        return float(np.min(np.linalg.eigvalsh((j + j.conj().T) / 2)))

    def apply(self, rho: Any) -> CArray:
        return unvec(self.superop @ vec(rho), self.dim)

    def compose(self, first: Channel) -> Channel:
        """self ∘ first: apply `first`, then self."""
        if first.dim != self.dim:
            raise DomainError(f"cannot compose channels of dims {self.dim} and {first.dim}")
        return Channel(superop=self.superop @ first.superop)

    @classmethod
    def identity(cls, d: int = 2) -> Channel:
        return cls(superop=np.eye(d * d, dtype=np.complex128))

    @classmethod
    def from_map(cls, fn: Callable[[CArray], CArray], d: int) -> Channel:
        cols = []
        for l in range(d):
            for k in range(d):
                basis = np.zeros((d, d), dtype=np.complex128)
                basis[k, l] = 1.0
                cols.append(vec(fn(basis)))
        return cls(superop=np.stack(cols, axis=1))


class ChannelKind(str, Enum):
    DEPOLARIZING = "depolarizing"
    DEPHASING = "dephasing"
    UNITARY = "unitary"
    OVERROTATION = "overrotation"
    RESET_MIXTURE = "reset_mixture"
    DLE = "dle"


def _check_unit(name: str, x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"{name}={x} must lie in [0, 1]")


def depolarizing(s: float, d: int = 2) -> Channel:
    _check_unit("s", s)
    tr = vec(np.eye(d))
    return Channel(superop=(1 - s) * np.eye(d * d) + s * np.outer(tr / d, tr))


def dephasing(s: float) -> Channel:
    _check_unit("s", s)
    z = Unitary(matrix=PAULI_Z).superop()
    return Channel(superop=(1 - s) * np.eye(4) + s * z)


def unitary_channel(u: Unitary | CArray) -> Channel:
    u = u if isinstance(u, Unitary) else Unitary(matrix=u)
    return Channel(superop=u.superop())


def overrotation(u: Unitary, eps: float, z_exempt: bool = True) -> Channel:
    """Conjugation by U^eps; identity when U is a z-rotation and z_exempt is set."""
    if z_exempt and u.is_z_rotation():
        return Channel.identity(u.dim)
    return unitary_channel(u.power(eps))


def reset_mixture(p1: float, p2: float, psi: Any) -> Channel:
    """ρ ↦ Tr ρ (p1 |ψ⟩⟨ψ| + p2 I/d) + (1 - p1 - p2) ρ."""
    _check_unit("p1", p1)
    _check_unit("p2", p2)
    _check_unit("p1+p2", p1 + p2)
    psi = np.asarray(psi, dtype=np.complex128).ravel()
    if abs(np.linalg.norm(psi) - 1) > 1e-12:
        raise DomainError("reset state must be normalized")
    d = psi.size
    tr = vec(np.eye(d))
    target = p1 * np.outer(psi, psi.conj()) + p2 * np.eye(d) / d
    return Channel(superop=np.outer(vec(target), tr) + (1 - p1 - p2) * np.eye(d * d))


def dle(base: Channel, L1: float, L2: float, d2: int = 1) -> Channel:
    """Depolarizing leakage extension of a channel on the computational block.

    Leaked population is spread uniformly over the leakage block and seeped
    population uniformly over the computational block; coherences between the
    blocks are removed.
    """
    _check_unit("L1", L1)
    _check_unit("L2", L2)
    if L1 + L2 > 1:
        raise DomainError(f"L1 + L2 = {L1 + L2} exceeds 1")
    d1 = base.dim
    d = d1 + d2

    def fn(rho: CArray) -> CArray:
        out = np.zeros((d, d), dtype=np.complex128)
        r11 = rho[:d1, :d1]
        r22 = rho[d1:, d1:]
        out[:d1, :d1] = (1 - L1) * base.apply(r11) + L2 * np.trace(r22) * np.eye(d1) / d1
        out[d1:, d1:] = (1 - L2) * r22 + L1 * np.trace(r11) * np.eye(d2) / d2
        return out

    return Channel.from_map(fn, d)


def rz(angle: float) -> Unitary:
    return Unitary(matrix=np.diag([np.exp(-0.5j * angle), np.exp(0.5j * angle)]))


def make_channel(kind: ChannelKind | str, **params: Any) -> Channel:
    builders: dict[ChannelKind, Callable[..., Channel]] = {
        ChannelKind.DEPOLARIZING: depolarizing,
        ChannelKind.DEPHASING: dephasing,
        ChannelKind.UNITARY: unitary_channel,
        ChannelKind.OVERROTATION: overrotation,
        ChannelKind.RESET_MIXTURE: reset_mixture,
        ChannelKind.DLE: dle,
    }
    try:
        return builders[ChannelKind(kind)](**params)
    except TypeError as e:
        raise DomainError(f"bad parameters for channel '{kind}': {e}")


def average_gate_fidelity(channel: Channel, d1: Optional[int] = None) -> float:
    """Average fidelity over pure states of the leading d1-dimensional block."""
    d = channel.dim
    d1 = d1 or d
    s = channel.superop
    ent = 0.0
    for i in range(d1):
        for j in range(d1):
            # ⟨i|Λ(|i⟩⟨j|)|j⟩
            ent += s[i + d * j, i + d * j].real
    ent /= d1 * d1
    kept = sum(s[k + d * k, i + d * i].real for i in range(d1) for k in range(d1)) / d1
    return float((d1 * ent + kept) / (d1 + 1))


class GateSet(BaseModel):
    """Finite group of gates modulo global phase, with its multiplication table.

    `block` restricts phase-matching to the leading block, used for gate sets
    embedded in a larger space (the extra block is left untouched by the gates).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    gates: list[Unitary]
    block: Optional[int] = None

    _table: np.ndarray = PrivateAttr()
    _inverse: np.ndarray = PrivateAttr()
    _identity: int = PrivateAttr()
    _keys: dict[tuple[float, ...], int] = PrivateAttr()

    @field_validator("gates")
    @classmethod
    def _check_dims(cls, v: list[Unitary]) -> list[Unitary]:
        if not v:
            raise ValueError("gate set must be nonempty")
        if len({g.dim for g in v}) != 1:
            raise ValueError("all gates must share one dimension")
        return v

    def model_post_init(self, __context: Any) -> None:
        keys: dict[tuple[float, ...], int] = {}
        for idx, g in enumerate(self.gates):
            keys.setdefault(_group_key(g.matrix, self.block), idx)
        ident = keys.get(_group_key(np.eye(self.dim, dtype=np.complex128), self.block))
        if ident is None:
            raise GroupStructureError("gate set does not contain the identity")
        R = len(self.gates)
        table = np.empty((R, R), dtype=np.int64)
        for a, ga in enumerate(self.gates):
            for b, gb in enumerate(self.gates):
                k = keys.get(_group_key(ga.matrix @ gb.matrix, self.block))
                if k is None:
                    raise GroupStructureError(f"product of gates {a} and {b} is not in the set")
                table[a, b] = k
        inverse = np.empty(R, dtype=np.int64)
        for a in range(R):
            hits = np.flatnonzero(table[a] == ident)
            if hits.size == 0:
                raise GroupStructureError(f"gate {a} has no inverse in the set")
            inverse[a] = hits[0]
        table.setflags(write=False)
        inverse.setflags(write=False)
        self._table = table
        self._inverse = inverse
        self._identity = int(ident)
        self._keys = keys

    @property
    def size(self) -> int:
        return len(self.gates)

    @property
    def dim(self) -> int:
        return self.gates[0].dim

    @property
    def table(self) -> NDArray[np.int64]:
        """table[a, b] is the index of gates[a] @ gates[b]."""
        return self._table

    @property
    def inverse(self) -> NDArray[np.int64]:
        return self._inverse

    @property
    def identity(self) -> int:
        return self._identity

    def index_of(self, u: Unitary | CArray) -> int:
        m = u.matrix if isinstance(u, Unitary) else np.asarray(u, dtype=np.complex128)
        k = self._keys.get(_group_key(m, self.block))
        if k is None:
            raise GroupStructureError("matrix is not an element of the gate set")
        return k

    def compose(self, seq: Sequence[int]) -> int:
        """Index of the composite of applying seq[0] first, then seq[1], ..."""
        c = self._identity
        for g in seq:
            c = int(self._table[g, c])
        return c

    def completion(self, seq: Sequence[int], target: Optional[int] = None) -> int:
        """Gate that brings the composite of seq to `target` (identity by default)."""
        target = self._identity if target is None else target
        return int(self._table[target, self._inverse[self.compose(seq)]])

    def superops(self) -> CArray:
        return np.stack([g.superop() for g in self.gates])

    def embed(self, total_dim: int) -> GateSet:
        d = self.dim
        if total_dim <= d:
            raise DomainError(f"cannot embed dimension {d} into {total_dim}")
        gates = []
        for g in self.gates:
            m = np.eye(total_dim, dtype=np.complex128)
            m[:d, :d] = g.matrix
            gates.append(Unitary(matrix=m))
        return GateSet(gates=gates, block=self.block or d)


def generate_group(generators: Sequence[Unitary], max_size: int = 1000) -> GateSet:
    """Closure of the generators modulo global phase, in breadth-first order."""
    if not generators:
        raise DomainError("need at least one generator")
    dims = {g.dim for g in generators}
    if len(dims) != 1:
        raise DomainError("generators must share one dimension")
    d = dims.pop()
    gens = [g.canonical() for g in generators]
    elements = [Unitary(matrix=np.eye(d, dtype=np.complex128))]
    seen = {_group_key(elements[0].matrix): 0}
    queue = deque([0])
    while queue:
        cur = elements[queue.popleft()]
        for g in gens:
            prod = (g @ cur).canonical()
            key = _group_key(prod.matrix)
            if key in seen:
                continue
            if len(elements) >= max_size:
                raise GroupTooLargeError(f"group too large: closure exceeds {max_size} elements")
            seen[key] = len(elements)
            elements.append(prod)
            queue.append(len(elements) - 1)
    logger.debug(f"generated group of order {len(elements)}")
    return GateSet(gates=elements)


@lru_cache(maxsize=None)
def clifford_subgroup() -> GateSet:
    """The order-12 group generated by Z and √Z·H."""
    return generate_group([Unitary(matrix=PAULI_Z), Unitary(matrix=SQRT_Z @ HADAMARD)])


@lru_cache(maxsize=None)
def dihedral_group(j: int = 4) -> GateSet:
    """Group generated by exp(iπZ/j) and X."""
    zj = np.diag([np.exp(1j * np.pi / j), np.exp(-1j * np.pi / j)])
    return generate_group([Unitary(matrix=zj), Unitary(matrix=PAULI_X)])


class NoiseCategory(str, Enum):
    GATE_INDEPENDENT = "gate-independent"
    GATE_DEPENDENT = "gate-dependent"
    POSITION_DEPENDENT = "position-dependent"


class NoiseModel(BaseModel):
    """Assigns a noise channel to gate r at sequence position k."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: NoiseCategory
    assign: Callable[[int, int], Channel]
    order: NoiseOrder = NoiseOrder.PRE

    def channel(self, r: int, k: int = 0) -> Channel:
        return self.assign(r, k)

    @classmethod
    def gate_independent(cls, channel: Channel, order: NoiseOrder = NoiseOrder.PRE) -> NoiseModel:
        return cls(kind=NoiseCategory.GATE_INDEPENDENT, assign=lambda r, k: channel, order=order)

    @classmethod
    def gate_dependent(
        cls, channels: Sequence[Channel], order: NoiseOrder = NoiseOrder.PRE
    ) -> NoiseModel:
        table = list(channels)
        return cls(kind=NoiseCategory.GATE_DEPENDENT, assign=lambda r, k: table[r], order=order)

    @classmethod
    def position_dependent(
        cls, assign: Callable[[int, int], Channel], order: NoiseOrder = NoiseOrder.PRE
    ) -> NoiseModel:
        return cls(kind=NoiseCategory.POSITION_DEPENDENT, assign=assign, order=order)


def pathological_reset_state() -> CArray:
    return expm(-0.05j * (PAULI_X + PAULI_Y)) @ np.array([1, 0], dtype=np.complex128)


def build_noise(spec: NoiseSpec, gateset: GateSet) -> NoiseModel:
    """Noise model for a CLI/config noise spec on the given gate set."""
    d = gateset.dim
    p = spec.params
    match spec.kind:
        case NoiseKind.NONE:
            return NoiseModel.gate_independent(Channel.identity(d), spec.order)
        case NoiseKind.DEPOLARIZING:
            return NoiseModel.gate_independent(depolarizing(p[0], d), spec.order)
        case NoiseKind.DEPHASING:
            return NoiseModel.gate_independent(dephasing(p[0]), spec.order)
        case NoiseKind.OVERROTATION:
            return NoiseModel.gate_dependent(
                [overrotation(g, p[0]) for g in gateset.gates], spec.order
            )
        case NoiseKind.DEPHASED_OVERROTATION:
            deph = dephasing(p[0])
            return NoiseModel.gate_dependent(
                [deph.compose(overrotation(g, p[1])) for g in gateset.gates], spec.order
            )
        case NoiseKind.PATHOLOGICAL:
            return NoiseModel.gate_independent(
                reset_mixture(p[0], p[1], pathological_reset_state()), spec.order
            )
        case NoiseKind.DLE:
            s, alpha_deg, L1, L2 = p
            base = dephasing(s).compose(unitary_channel(rz(math.radians(alpha_deg))))
            return NoiseModel.gate_independent(dle(base, L1, L2, d2=d - 2), spec.order)
    raise DomainError(f"unsupported noise kind {spec.kind}")


class SpamConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rho: np.ndarray
    effect: np.ndarray

    @field_validator("rho", "effect", mode="before")
    @classmethod
    def _as_matrix(cls, v: Any) -> CArray:
        m = np.array(v, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("SPAM operators must be square matrices")
        if np.max(np.abs(m - m.conj().T)) > 1e-12:
            raise ValueError("SPAM operators must be Hermitian")
        m.setflags(write=False)
        return m

    @model_validator(mode="after")
    def _check_physical(self) -> SpamConfig:
        if self.rho.shape != self.effect.shape:
            raise ValueError("rho and effect dimensions differ")
        if abs(np.trace(self.rho).real - 1) > 1e-12:
            raise ValueError("rho must have unit trace")
        if np.min(np.linalg.eigvalsh(self.rho)) < -1e-12:
            raise ValueError("rho must be positive semidefinite")
        ev = np.linalg.eigvalsh(self.effect)
        if ev.min() < -1e-12 or ev.max() > 1 + 1e-12:
            raise ValueError("effect eigenvalues must lie in [0, 1]")
        return self

    @property
    def dim(self) -> int:
        return int(self.rho.shape[0])

    @property
    def effect_row(self) -> CArray:
        # Tr[E ρ] = vec(Eᵀ) · vec(ρ)
        return vec(self.effect.T)

    @classmethod
    def standard(
        cls,
        d: int = 2,
        state: int = 0,
        measure: Optional[int] = None,
        effect_scale: float = 1.0,
        leak: float = 0.0,
    ) -> SpamConfig:
        """|state⟩ preparation (with `leak` population in the last level) and
        measurement of effect_scale·|measure⟩⟨measure|."""
        measure = state if measure is None else measure
        rho = np.zeros((d, d), dtype=np.complex128)
        rho[state, state] = 1 - leak
        rho[d - 1, d - 1] += leak
        effect = np.zeros((d, d), dtype=np.complex128)
        effect[measure, measure] = effect_scale
        return cls(rho=rho, effect=effect)

    @classmethod
    def pure(cls, psi: Any, effect_scale: float = 1.0) -> SpamConfig:
        psi = np.asarray(psi, dtype=np.complex128).ravel()
        proj = np.outer(psi, psi.conj()) / np.vdot(psi, psi).real
        return cls(rho=proj, effect=effect_scale * proj)

    def survival(self, state_vec: CArray) -> float:
        return check_survival(float((self.effect_row @ state_vec).real))


def check_survival(q: float) -> float:
    if q < -SURVIVAL_TOL or q > 1 + SURVIVAL_TOL:
        raise ConsistencyError(f"survival probability {q!r} outside [0, 1]")
    return min(max(q, 0.0), 1.0)


class Propagator:
    """Noisy gate superoperators for one (gate set, noise) pair, cached when
    the noise does not depend on the sequence position."""

    def __init__(self, gateset: GateSet, noise: NoiseModel) -> None:
        self.gateset = gateset
        self.noise = noise
        self._ideal = gateset.superops()
        self._static: Optional[CArray] = None
        if noise.kind != NoiseCategory.POSITION_DEPENDENT:
            self._static = self._build(0)

    def _build(self, k: int) -> CArray:
        out = np.empty_like(self._ideal)
        for r in range(self.gateset.size):
            e = self.noise.channel(r, k)
            if e.dim != self.gateset.dim:
                raise DomainError(f"noise dim {e.dim} does not match gate dim {self.gateset.dim}")
            if self.noise.order == NoiseOrder.PRE:
                out[r] = self._ideal[r] @ e.superop
            else:
                out[r] = e.superop @ self._ideal[r]
        return out

    def at(self, k: int) -> CArray:
        return self._static if self._static is not None else self._build(k)

    def run(self, seqs: NDArray[np.int64], states: CArray) -> CArray:
        """Propagate a batch of state vectors (n, d²) through equal-length sequences (n, L)."""
        for k in range(seqs.shape[1]):
            ops = self.at(k)[seqs[:, k]]
            states = np.einsum("nab,nb->na", ops, states)
        return states


def survival_probability(
    seq: Sequence[int], gateset: GateSet, noise: NoiseModel, spam: SpamConfig
) -> float:
    if spam.dim != gateset.dim:
        raise DomainError(f"SPAM dim {spam.dim} does not match gate dim {gateset.dim}")
    arr = np.asarray(seq, dtype=np.int64).reshape(1, -1)
    if arr.size and (arr.min() < 0 or arr.max() >= gateset.size):
        raise DomainError(f"gate indices must lie in [0, {gateset.size})")
    out = Propagator(gateset, noise).run(arr, vec(spam.rho)[None, :])
    return spam.survival(out[0])


def sample_sequence(protocol: Protocol, M: int, e: str, rng: np.random.Generator) -> list[int]:
    return protocol.sample_sequence(M, e, rng)


class SurvivalDistribution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    atoms: np.ndarray
    weights: np.ndarray

    @model_validator(mode="after")
    def _check_weights(self) -> SurvivalDistribution:
        if abs(float(np.sum(self.weights)) - 1) > 1e-12:
            raise ValueError("survival weights must sum to 1")
        return self

    @classmethod
    def from_samples(cls, values: FArray, probs: Optional[FArray] = None) -> SurvivalDistribution:
        values = np.asarray(values, dtype=np.float64)
        probs = np.full(values.size, 1.0 / values.size) if probs is None else probs
        atoms, inv = np.unique(np.round(values, ATOM_DECIMALS), return_inverse=True)
        weights = np.bincount(inv, weights=probs, minlength=atoms.size)
        return cls(atoms=atoms, weights=weights / weights.sum())

    @property
    def size(self) -> int:
        return int(self.atoms.size)

    def moment(self, t: int = 1) -> float:
        return float(np.sum(self.weights * self.atoms**t))

    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def variance(self) -> float:
        return float(np.sum(self.weights * (self.atoms - self.mean) ** 2))


def enumeration_cap() -> int:
    return int(os.environ.get("RBAYES_ENUMERATION_CAP", DEFAULT_ENUMERATION_CAP))


def enumerate_survival_distribution(
    protocol: Protocol,
    noise: NoiseModel,
    spam: SpamConfig,
    M: int,
    e: str,
    cap: Optional[int] = None,
) -> SurvivalDistribution:
    """Exact atoms and weights of the survival distribution over all allowable sequences."""
    gs = protocol.gateset
    tpl = protocol.template(M, e)
    terminal = tpl.terminal or []
    count = gs.size ** tpl.free_count * max(1, len(terminal))
    cap = enumeration_cap() if cap is None else cap
    if count > cap:
        raise EnumerationCapError(
            f"{count} allowable sequences exceed the enumeration cap {cap}; "
            "use estimate_survival_distribution (Monte Carlo) instead"
        )
    prop = Propagator(gs, noise)
    states = vec(spam.rho)[None, :]
    composite = np.array([gs.identity], dtype=np.int64)
    for k, slot in enumerate(tpl.slots):
        ops = prop.at(k)
        if slot is None:
            states = np.einsum("gab,nb->gna", ops, states).reshape(-1, states.shape[1])
            composite = gs.table[:, composite].reshape(-1)
        else:
            states = states @ ops[slot].T
            composite = gs.table[slot, composite]
    if tpl.terminal is not None:
        ops = prop.at(len(tpl.slots))
        finals = []
        for target in tpl.terminal:
            last = gs.table[target, gs.inverse[composite]]
            finals.append(np.einsum("nab,nb->na", ops[last], states))
        states = np.concatenate(finals)
    q = (states @ spam.effect_row).real
    for v in (q.min(), q.max()):
        check_survival(float(v))
    return SurvivalDistribution.from_samples(np.clip(q, 0.0, 1.0))


def estimate_survival_distribution(
    protocol: Protocol,
    noise: NoiseModel,
    spam: SpamConfig,
    M: int,
    e: str,
    n_samples: int,
    seed: int = 0,
) -> SurvivalDistribution:
    """Monte Carlo survival distribution from n_samples random allowable sequences."""
    rng = np.random.default_rng(seed)
    seqs = np.array([protocol.sample_sequence(M, e, rng) for _ in range(n_samples)], dtype=np.int64)
    states = np.repeat(vec(spam.rho)[None, :], n_samples, axis=0)
    out = Propagator(protocol.gateset, noise).run(seqs, states)
    q = np.array([spam.survival(v) for v in out])
    return SurvivalDistribution.from_samples(q)


def average_survival(
    protocol: Protocol, noise: NoiseModel, spam: SpamConfig, M: int, e: str
) -> float:
    """Exact first moment of the survival distribution, for any M.

    Tracks the average state vector conditioned on the ideal composite gate,
    so the cost is linear in the sequence length.
    """
    gs = protocol.gateset
    tpl = protocol.template(M, e)
    prop = Propagator(gs, noise)
    R, n = gs.size, spam.dim**2
    v = np.zeros((R, n), dtype=np.complex128)
    v[gs.identity] = vec(spam.rho)
    for k, slot in enumerate(tpl.slots):
        ops = prop.at(k)
        new = np.zeros_like(v)
        if slot is None:
            moved = np.einsum("gab,cb->gca", ops, v) / R
            np.add.at(new, gs.table.reshape(-1), moved.reshape(-1, n))
        else:
            np.add.at(new, gs.table[slot], v @ ops[slot].T)
        v = new
    if tpl.terminal is None:
        final = v.sum(axis=0)
    else:
        ops = prop.at(len(tpl.slots))
        final = np.zeros(n, dtype=np.complex128)
        for target in tpl.terminal:
            last = gs.table[target, gs.inverse]
            final += np.einsum("cab,cb->a", ops[last], v)
        final /= len(tpl.terminal)
    return spam.survival(final)


def rb_parameters(
    channel: Channel, spam: SpamConfig, order: NoiseOrder = NoiseOrder.PRE
) -> tuple[float, float, float]:
    """(p, A, B) of standard RB under gate-independent noise `channel`."""
    d = channel.dim
    p = float((np.trace(channel.superop).real - 1) / (d * d - 1))
    A = float(np.trace(spam.effect @ channel.apply(spam.rho)).real)
    mixed = np.eye(d) / d
    B_state = mixed if order == NoiseOrder.PRE else channel.apply(mixed)
    B = float(np.trace(spam.effect @ B_state).real)
    return p, A, B


def _burn_in_spam(
    spam: SpamConfig, prefix: list[int], gateset: GateSet, prop: Propagator
) -> SpamConfig:
    state = prop.run(np.asarray(prefix, dtype=np.int64)[None, :], vec(spam.rho)[None, :])[0]
    c = gateset.gates[gateset.compose(prefix)].matrix
    rho = unvec(state, spam.dim)
    rho = (rho + rho.conj().T) / 2
    return SpamConfig(rho=rho, effect=c @ spam.effect @ c.conj().T)


def simulate_dataset(
    protocol: Protocol,
    noise: NoiseModel,
    spam_per_e: SpamConfig | dict[str, SpamConfig],
    M_list: Sequence[int],
    I: int,
    N: int,
    seed: int,
    shuffle: bool = False,
    burn_in_gates: int = 0,
    nv_rates: Optional[tuple[float, float]] = None,
    workers: Optional[int] = None,
) -> list[DatasetRecord]:
    """Simulated dataset with one record per (M, e, i).

    Record (m, e, i) draws from its own generator seeded with
    [seed, m, e, i], so the output does not depend on the worker count.
    With `burn_in_gates`, a fixed noisy random prefix prepares the state and the
    measurement is rotated by the prefix's ideal composite.
    """
    if I < 1 or N < 1 or not M_list:
        raise DomainError("need I >= 1, N >= 1 and a nonempty list of lengths")
    if seed < 0:
        raise DomainError("seed must be nonnegative")
    experiments = protocol.experiments
    spams = (
        {e: spam_per_e for e in experiments}
        if isinstance(spam_per_e, SpamConfig)
        else dict(spam_per_e)
    )
    missing = [e for e in experiments if e not in spams]
    if missing:
        raise DomainError(f"no SPAM configuration for experiment types {missing}")
    gs = protocol.gateset
    prop = Propagator(gs, noise)
    if burn_in_gates:
        prefix_rng = np.random.default_rng([seed, 0x5EED, 0x5EED, 0x5EED, 0x5EED])
        prefix = [int(x) for x in prefix_rng.integers(gs.size, size=burn_in_gates)]
        spams = {e: _burn_in_spam(s, prefix, gs, prop) for e, s in spams.items()}

    def cell_job(m_idx: int, M: int, e_idx: int, e: str) -> Callable[[], list[DatasetRecord]]:
        def job() -> list[DatasetRecord]:
            spam = spams[e]
            rngs = [np.random.default_rng([seed, m_idx, e_idx, i]) for i in range(I)]
            seqs = np.array(
                [protocol.sample_sequence(M, e, rng) for rng in rngs], dtype=np.int64
            )
            states = np.repeat(vec(spam.rho)[None, :], I, axis=0)
            out = prop.run(seqs, states)
            records = []
            for i, (rng, v) in enumerate(zip(rngs, out)):
                q = spam.survival(v)
                if nv_rates is None:
                    records.append(DatasetRecord(M=M, e=e, i=i, N=N, Q=int(rng.binomial(N, q))))
                else:
                    a, b = nv_rates
                    records.append(
                        DatasetRecord(
                            M=M,
                            e=e,
                            i=i,
                            X=int(rng.poisson(a)),
                            Y=int(rng.poisson(b)),
                            Z=int(rng.poisson(b + (a - b) * q)),
                        )
                    )
            return records

        return job

    jobs = [
        cell_job(m_idx, M, e_idx, e)
        for m_idx, M in enumerate(M_list)
        for e_idx, e in enumerate(experiments)
    ]
    cells = Swarm(jobs, workers=workers, label="simulation cell").main()
    records = [r for cell in cells if cell is not None for r in cell]
    if shuffle:
        order = np.random.default_rng([seed, 0x5A, 0x5A, 0x5A, 0x5A]).permutation(len(records))
        records = [records[k] for k in order]
    logger.info(
        f"simulated {len(records)} records over {len(M_list)} lengths and "
        f"{len(experiments)} experiment type(s)"
    )
    return records
