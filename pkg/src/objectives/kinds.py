from enum import Enum


class ObjectiveKind(Enum):
    TRUE = "true"
    SDS = "sds"
    ISM = "ism"
    PCDS = "pcds"


class InversionMode(Enum):
    """How a render is carried to x_t: random forward noising or DDIM inversion."""
    DDPM = "ddpm"
    DDIM = "ddim"


class Stage(Enum):
    COARSE = "coarse"
    FINE = "fine"
