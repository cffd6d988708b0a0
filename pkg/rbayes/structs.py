import json
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

DEFAULT_LENGTHS = [1, 100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000]


class Command(str, Enum):
    SIMULATE = "simulate"
    FIT = "fit"
    PLAN = "plan"
    DIAGNOSE = "diagnose"


class ModelFamily(str, Enum):
    BETA = "beta"
    CDPBM = "cdpbm"
    NV = "nv"


class FitMethod(str, Enum):
    NUTS = "nuts"
    MH = "mh"
    MLE = "mle"
    BOOTSTRAP = "bootstrap"
    WLSF = "wlsf"

    @property
    def is_bayesian(self) -> bool:
        return self in (FitMethod.NUTS, FitMethod.MH)


class BootstrapKind(str, Enum):
    PARAMETRIC = "parametric"
    NONPARAMETRIC = "nonparametric"


class NoiseOrder(str, Enum):
    # PRE: noisy gate is G∘E (noise acts first); POST: E∘G
    PRE = "pre"
    POST = "post"


class NoiseKind(str, Enum):
    NONE = "none"
    DEPOLARIZING = "depolarizing"
    DEPHASING = "dephasing"
    OVERROTATION = "overrotation"
    DEPHASED_OVERROTATION = "dephased-overrotation"
    PATHOLOGICAL = "pathological"
    DLE = "dle"


NOISE_ARITY: dict[NoiseKind, int] = {
    NoiseKind.NONE: 0,
    NoiseKind.DEPOLARIZING: 1,
    NoiseKind.DEPHASING: 1,
    NoiseKind.OVERROTATION: 1,
    NoiseKind.DEPHASED_OVERROTATION: 2,
    NoiseKind.PATHOLOGICAL: 2,
    NoiseKind.DLE: 4,
}


class DatasetRecord(BaseModel):
    """
    One observation Q out of N shots for sequence i of length M and
    experiment type e. NV-mode records carry the (X, Y, Z) photon counts
    instead of (N, Q).
    """

    model_config = ConfigDict(frozen=True)

    M: int = Field(ge=1)
    e: str = "0"
    i: int = Field(default=0, ge=0)
    N: Optional[int] = Field(default=None, ge=1)
    Q: Optional[int] = Field(default=None, ge=0)
    X: Optional[int] = Field(default=None, ge=0)
    Y: Optional[int] = Field(default=None, ge=0)
    Z: Optional[int] = Field(default=None, ge=0)

    @field_validator("e", mode="before")
    @classmethod
    def _coerce_label(cls, v: Any) -> str:
        return str(v)

    @model_validator(mode="after")
    def _check_observation(self) -> "DatasetRecord":
        binomial = self.N is not None or self.Q is not None
        nv = self.X is not None or self.Y is not None or self.Z is not None
        if binomial == nv:
            raise ValueError("exactly one of (Q, N) or (X, Y, Z) must be populated")
        if binomial:
            if self.N is None or self.Q is None:
                raise ValueError("binomial records need both N and Q")
            if self.Q > self.N:
                raise ValueError(f"Q={self.Q} exceeds N={self.N}")
        elif self.X is None or self.Y is None or self.Z is None:
            raise ValueError("nv records need all of X, Y, Z")
        return self

    @property
    def is_nv(self) -> bool:
        return self.X is not None

    @property
    def cell(self) -> tuple[int, str]:
        return (self.M, self.e)

    def to_json_line(self) -> str:
        return json.dumps(self.model_dump(exclude_none=True), separators=(",", ":"))


class SamplerConfig(BaseModel):
    chains: int = Field(default=4, ge=1)
    warmup: int = Field(default=1000, ge=0)
    keep: int = Field(default=1000, ge=1)
    seed: int = 0
    # Metropolis-Hastings
    proposal_scale: float = Field(default=0.1, gt=0)
    thin: int = Field(default=1, ge=1)
    # NUTS
    step_size: Optional[float] = Field(default=None, gt=0)
    max_tree_depth: int = Field(default=10, ge=1, le=20)
    target_accept: float = Field(default=0.8, gt=0, lt=1)
    divergence_threshold: float = Field(default=1000.0, gt=0)
    adapt_mass: bool = True
    jitter: float = Field(default=0.1, ge=0)


class CostModel(BaseModel):
    t_pick: float = Field(ge=0)
    t_flip: float = Field(ge=0)

    @model_validator(mode="after")
    def _not_both_zero(self) -> "CostModel":
        if self.t_pick == 0 and self.t_flip == 0:
            raise ValueError("t_pick and t_flip cannot both be zero")
        return self

    @computed_field(return_type=float)
    def tau(self) -> float:
        return self.t_pick / self.t_flip if self.t_flip > 0 else float("inf")

    def cost(self, N: int) -> float:
        return self.t_pick + N * self.t_flip


class BagParams(BaseModel):
    """A bag of coins: mean bias qbar plus one spread descriptor."""

    qbar: float = Field(gt=0, lt=1)
    sigma2: Optional[float] = Field(default=None, ge=0)
    t: Optional[float] = Field(default=None, ge=0, lt=1)
    mu2: Optional[float] = None

    @model_validator(mode="after")
    def _one_descriptor(self) -> "BagParams":
        given = [v for v in (self.sigma2, self.t, self.mu2) if v is not None]
        if len(given) != 1:
            raise ValueError("give exactly one of sigma2, t, mu2")
        if not 0 <= self.variance <= self.qbar * (1 - self.qbar):
            raise ValueError(
                f"variance {self.variance} outside [0, qbar(1-qbar)] for qbar={self.qbar}"
            )
        return self

    @property
    def variance(self) -> float:
        if self.sigma2 is not None:
            return self.sigma2
        if self.t is not None:
            return self.t * self.qbar * (1 - self.qbar)
        assert self.mu2 is not None
        return self.mu2 - self.qbar**2

    @property
    def dispersion(self) -> float:
        return self.variance / (self.qbar * (1 - self.qbar))

    @property
    def second_moment(self) -> float:
        return self.variance + self.qbar**2


class NoiseSpec(BaseModel):
    kind: NoiseKind = NoiseKind.NONE
    params: list[float] = Field(default_factory=list)
    order: NoiseOrder = NoiseOrder.PRE

    @model_validator(mode="after")
    def _check_arity(self) -> "NoiseSpec":
        expected = NOISE_ARITY[self.kind]
        if len(self.params) != expected:
            raise ValueError(
                f"noise '{self.kind.value}' takes {expected} parameter(s), got {len(self.params)}"
            )
        return self

    @classmethod
    def parse(cls, text: str, order: NoiseOrder = NoiseOrder.PRE) -> "NoiseSpec":
        """Parse 'kind:a,b,...', e.g. 'depolarizing:0.0002'."""
        kind, _, rest = text.partition(":")
        try:
            noise_kind = NoiseKind(kind.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in NoiseKind)
            raise ValueError(f"unknown noise '{kind}', choose from: {choices}")
        params = [float(p) for p in rest.split(",") if p.strip()] if rest else []
        return cls(kind=noise_kind, params=params, order=order)


class FitResult(BaseModel):
    method: str
    params: dict[str, float] = Field(default_factory=dict)
    nuisances: dict[str, float] = Field(default_factory=dict)
    standard_errors: dict[str, float] = Field(default_factory=dict)
    status: str = "converged"
    converged: bool = True
    loglik: float = float("nan")
    loglik_init: float = float("nan")
    boundary: list[str] = Field(default_factory=list)
    starts: int = 1
    # unconstrained optimum, used to warm-start refits
    coordinates: list[float] = Field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.boundary)


class RunConfig(BaseModel):
    """Everything a CLI run needs; a run is reproducible from this plus its seed."""

    command: Command
    protocol: str = "rb"
    seed: int = 0
    out_dir: str = "out"
    input: Optional[str] = None
    workers: Optional[int] = Field(default=None, ge=1)

    # simulate
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    lengths: list[int] = Field(default_factory=lambda: list(DEFAULT_LENGTHS))
    sequences: int = Field(default=20, ge=1)
    shots: int = Field(default=30, ge=1)
    spam_effect: float = Field(default=0.99, gt=0, le=1)
    interleave: int = Field(default=1, ge=0)
    shuffle: bool = False
    burn_in_gates: int = Field(default=0, ge=0)
    nv_rates: Optional[tuple[float, float]] = None
    auto_mmax: bool = False

    # fit
    model: ModelFamily = ModelFamily.BETA
    method: FitMethod = FitMethod.NUTS
    prior_preset: str = "flat"
    pal: tuple[float, float] = (0.9, 0.05)
    components: int = Field(default=10, ge=2)
    latent: bool = False
    nv_family: ModelFamily = ModelFamily.BETA
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    alpha_levels: list[float] = Field(default_factory=lambda: [0.95, 0.5])
    bootstrap_kind: BootstrapKind = BootstrapKind.NONPARAMETRIC
    replicates: int = Field(default=600, ge=100)
    center: bool = False

    # plan
    moment: int = Field(default=1, ge=1, le=2)
    qbar: float = Field(default=0.5, gt=0, lt=1)
    t: float = Field(default=0.5, ge=0, lt=1)
    t_pick: float = Field(default=5e-3, ge=0)
    t_flip: float = Field(default=1e-4, ge=0)
    n_max: int = Field(default=200, ge=1)
    budget: float = Field(default=8000.0, ge=1)
    tau: float = Field(default=0.0, ge=0)
    lower: float = Field(default=0.0, ge=0, lt=1)

    @field_validator("alpha_levels")
    @classmethod
    def _check_alpha(cls, v: list[float]) -> list[float]:
        for a in v:
            if not 0 < a < 1:
                raise ValueError(f"alpha level {a} must be in (0, 1)")
        return v

    @field_validator("lengths")
    @classmethod
    def _check_lengths(cls, v: list[int]) -> list[int]:
        if not v or any(m < 1 for m in v):
            raise ValueError("lengths must be a nonempty list of positive integers")
        return v


class PriorKind(str, Enum):
    UNIFORM01 = "uniform01"
    BETA = "beta"
    GAMMA = "gamma"
    DIRICHLET = "dirichlet"
    PAL = "pal"
    NORMAL = "normal"


class Support(str, Enum):
    UNIT = "unit"
    POSITIVE = "positive"
    REAL = "real"
    SIMPLEX = "simplex"


PRIOR_SUPPORT: dict[PriorKind, Support] = {
    PriorKind.UNIFORM01: Support.UNIT,
    PriorKind.BETA: Support.UNIT,
    PriorKind.PAL: Support.UNIT,
    PriorKind.GAMMA: Support.POSITIVE,
    PriorKind.NORMAL: Support.REAL,
    PriorKind.DIRICHLET: Support.SIMPLEX,
}


class PriorSpec(BaseModel):
    """A prior tag with its parameters; gamma(a, b) uses shape a and rate b."""

    model_config = ConfigDict(frozen=True)

    kind: PriorKind = PriorKind.UNIFORM01
    params: tuple[float, ...] = ()
    smooth: bool = True

    @model_validator(mode="after")
    def _check_params(self) -> "PriorSpec":
        arity = {
            PriorKind.UNIFORM01: 0,
            PriorKind.BETA: 2,
            PriorKind.GAMMA: 2,
            PriorKind.PAL: 2,
            PriorKind.NORMAL: 2,
        }
        if self.kind == PriorKind.DIRICHLET:
            if len(self.params) < 2 or any(a <= 0 for a in self.params):
                raise ValueError("dirichlet needs at least two positive concentrations")
        elif len(self.params) != arity[self.kind]:
            raise ValueError(f"{self.kind.value} prior takes {arity[self.kind]} parameters")
        if self.kind in (PriorKind.BETA, PriorKind.GAMMA) and min(self.params) <= 0:
            raise ValueError(f"{self.kind.value} parameters must be positive")
        if self.kind == PriorKind.NORMAL and self.params[1] <= 0:
            raise ValueError("normal scale must be positive")
        if self.kind == PriorKind.PAL:
            p0, z = self.params
            if not 0 < z <= p0 < 1:
                raise ValueError("PAL needs 0 < z <= p0 < 1")
        return self

    @property
    def support(self) -> Support:
        return PRIOR_SUPPORT[self.kind]

    @classmethod
    def uniform(cls) -> "PriorSpec":
        return cls()

    @classmethod
    def beta(cls, a: float, b: float) -> "PriorSpec":
        return cls(kind=PriorKind.BETA, params=(a, b))

    @classmethod
    def gamma(cls, shape: float, rate: float) -> "PriorSpec":
        return cls(kind=PriorKind.GAMMA, params=(shape, rate))

    @classmethod
    def dirichlet(cls, *alphas: float) -> "PriorSpec":
        return cls(kind=PriorKind.DIRICHLET, params=tuple(alphas))

    @classmethod
    def pal(cls, p0: float, z: float, smooth: bool = True) -> "PriorSpec":
        return cls(kind=PriorKind.PAL, params=(p0, z), smooth=smooth)

    @classmethod
    def normal(cls, mean: float, scale: float) -> "PriorSpec":
        return cls(kind=PriorKind.NORMAL, params=(mean, scale))
