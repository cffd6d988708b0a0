from typing import Any, Mapping, Optional, Sequence, Type, cast

from ..errors import ConfigError
from ..model import HierarchicalModel, Observation
from ..protocol import Protocol
from ..structs import DatasetRecord, ModelFamily, PriorSpec
from .beta import BetaModel, build_beta_model
from .cdpbm import CDPBMModel, build_cdpbm_model

AVAILABLE_MODELS: dict[str, Type[HierarchicalModel]] = {
    cast(Type[HierarchicalModel], cls).family.value: cast(Type[HierarchicalModel], cls)
    for cls in HierarchicalModel.__subclasses__()
}


def build_nv_model(
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    priors: Optional[Mapping[str, PriorSpec]] = None,
    family: ModelFamily = ModelFamily.BETA,
    rates: Optional[tuple[float, float]] = None,
    centering: Optional[Mapping[str, tuple[float, float]]] = None,
    **options: Any,
) -> HierarchicalModel:
    """Survival layer of `family` observed through NV photon-count triplets.

    `rates=(alpha, beta)` fixes the bright and dark reference rates instead
    of sampling them.
    """
    if family == ModelFamily.NV:
        raise ConfigError("the NV observation needs a beta or cdpbm survival family")
    cls = AVAILABLE_MODELS[family.value]
    return cls(
        protocol, records, priors, centering, observation=Observation.NV, rates=rates, **options
    )


def build_model(
    family: ModelFamily,
    protocol: Protocol,
    records: Sequence[DatasetRecord],
    priors: Optional[Mapping[str, PriorSpec]] = None,
    centering: Optional[Mapping[str, tuple[float, float]]] = None,
    nv_family: ModelFamily = ModelFamily.BETA,
    **options: Any,
) -> HierarchicalModel:
    if family == ModelFamily.NV:
        return build_nv_model(protocol, records, priors, nv_family, centering=centering, **options)
    try:
        cls = AVAILABLE_MODELS[family.value]
    except KeyError:
        choices = ", ".join(sorted(AVAILABLE_MODELS))
        raise ConfigError(f"unknown model family '{family.value}', choose from: {choices}")
    return cls(protocol, records, priors, centering, **options)


__all__ = [
    "AVAILABLE_MODELS",
    "BetaModel",
    "CDPBMModel",
    "build_beta_model",
    "build_cdpbm_model",
    "build_model",
    "build_nv_model",
]
