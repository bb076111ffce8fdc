"""Mean-field simulator for near-resonant light on infinite square atom arrays."""

from .core import (
    GAMMA,
    LAMBDA,
    WAVENUMBER,
    ArrayConfig,
    ConfigError,
    Drive,
    Polarization,
    ScatterResult,
    SingleState,
    TwoArrayState,
    validate,
)
from .lattice import (
    SumCache,
    bessel_j0,
    bessel_j2,
    build_cache,
    calc_G,
    calc_Gbar,
    calc_qm,
    gamma_reference,
    gbar_asymptotic,
    green_fn,
    load_or_build_cache,
    spherical_hankel,
)

__all__ = [
    "GAMMA",
    "LAMBDA",
    "WAVENUMBER",
    "ArrayConfig",
    "ConfigError",
    "Drive",
    "Polarization",
    "ScatterResult",
    "SingleState",
    "TwoArrayState",
    "validate",
    "SumCache",
    "bessel_j0",
    "bessel_j2",
    "build_cache",
    "calc_G",
    "calc_Gbar",
    "calc_qm",
    "gamma_reference",
    "gbar_asymptotic",
    "green_fn",
    "load_or_build_cache",
    "spherical_hankel",
]

__version__ = "0.1.0"
