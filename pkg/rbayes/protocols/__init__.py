from typing import Any, Type, cast

from ..errors import ConfigError
from ..protocol import Protocol
from .constant import Constant
from .dihedral import Dihedral, tying_dihedral
from .irb import IRB, tying_irb
from .lrb import LRB, leakage_seepage, lrb_parameters, tying_lrb
from .rb import RB, tying_rb
from .unitarity import Unitarity, tying_unitarity

AVAILABLE_PROTOCOLS: dict[str, Type[Protocol]] = {
    cls.__name__.lower(): cast(Type[Protocol], cls) for cls in Protocol.__subclasses__()
}


def make_protocol(name: str, **options: Any) -> Protocol:
    try:
        cls = AVAILABLE_PROTOCOLS[name.lower()]
    except KeyError:
        choices = ", ".join(sorted(AVAILABLE_PROTOCOLS))
        raise ConfigError(f"unknown protocol '{name}', choose from: {choices}")
    return cls(**options)


__all__ = [
    "AVAILABLE_PROTOCOLS",
    "Constant",
    "Dihedral",
    "IRB",
    "LRB",
    "RB",
    "Unitarity",
    "leakage_seepage",
    "lrb_parameters",
    "make_protocol",
    "tying_dihedral",
    "tying_irb",
    "tying_lrb",
    "tying_rb",
    "tying_unitarity",
]
