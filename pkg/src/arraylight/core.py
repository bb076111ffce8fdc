"""Shared domain types and unit conventions.

All quantities are expressed in natural units: rates in units of the
single-atom decay rate (GAMMA = 1) and lengths in units of the transition
wavelength (LAMBDA = 1), so the wave number is k = 2*pi.  The only
intensity convention in the package is I/I_sat = 2*omega**2.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

GAMMA = 1.0
LAMBDA = 1.0
WAVENUMBER = 2.0 * math.pi

POSITIVITY_SLACK = 1e-10


class Polarization(enum.Enum):
    """Transition channel driven by the normally incident plane wave.

    DELTA_M0:    linearly polarized light, dipole axis in the array plane.
    DELTA_M_PM1: circularly polarized light, quantization axis along the beam.
    """

    DELTA_M0 = "delta_m0"
    DELTA_M_PM1 = "delta_m_pm1"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("-", "_")
        aliases = {
            "delta_m0": cls.DELTA_M0,
            "dm0": cls.DELTA_M0,
            "linear": cls.DELTA_M0,
            "delta_m_pm1": cls.DELTA_M_PM1,
            "delta_mpm1": cls.DELTA_M_PM1,
            "dm1": cls.DELTA_M_PM1,
            "circular": cls.DELTA_M_PM1,
        }
        if key not in aliases:
            raise ConfigError([f"unknown polarization {text!r}"])
        return aliases[key]


class ConfigError(ValueError):
    """A configuration violates one or more hard validity constraints."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ArrayConfig:
    """Geometry of the square array(s); fixes everything but the drive.

    a_over_lambda: lattice spacing in wavelength units, must satisfy
        0 < a < lambda so the only propagating order is the specular one.
    L_over_lambda: separation of the two arrays (two-array runs only).
    """

    a_over_lambda: float
    polarization: Polarization = Polarization.DELTA_M_PM1
    num_arrays: int = 1
    L_over_lambda: float | None = None

    @property
    def ka(self) -> float:
        return WAVENUMBER * self.a_over_lambda

    @property
    def kL(self) -> float:
        if self.L_over_lambda is None:
            raise ConfigError(["array separation requested for a single-array configuration"])
        return WAVENUMBER * self.L_over_lambda

    @property
    def phase_L(self) -> complex:
        """exp(i k L), the plane-wave phase accumulated between the arrays."""
        return complex(math.cos(self.kL), math.sin(self.kL))


@dataclass(frozen=True)
class Drive:
    """Plane-wave drive: Rabi frequency (real, >= 0) and detuning, in GAMMA units."""

    omega: float
    delta: float

    @property
    def intensity(self) -> float:
        """I/I_sat = 2*omega**2, the only intensity conversion in the package."""
        return 2.0 * self.omega**2

    @classmethod
    def from_intensity(cls, intensity: float, delta: float) -> "Drive":
        if intensity < 0:
            raise ConfigError([f"intensity must be non-negative, got {intensity}"])
        return cls(omega=math.sqrt(0.5 * intensity), delta=delta)


@dataclass(frozen=True)
class SingleState:
    """One-atom expectation values, identical for every site of an array."""

    sigma_minus: complex
    e_pop: float

    @property
    def sigma_plus(self) -> complex:
        return self.sigma_minus.conjugate()

    def positivity_defect(self) -> float:
        """|<sigma->|^2 - <e>(1-<e>); positive values violate single-site positivity."""
        return abs(self.sigma_minus) ** 2 - self.e_pop * (1.0 - self.e_pop)

    def is_physical(self, slack: float = POSITIVITY_SLACK) -> bool:
        return (
            -slack <= self.e_pop <= 1.0 + slack
            and self.positivity_defect() <= slack
        )

    @classmethod
    def ground(cls) -> "SingleState":
        return cls(sigma_minus=0j, e_pop=0.0)


@dataclass(frozen=True)
class TwoArrayState:
    alpha: SingleState
    beta: SingleState

    def is_physical(self, slack: float = POSITIVITY_SLACK) -> bool:
        return self.alpha.is_physical(slack) and self.beta.is_physical(slack)

    @classmethod
    def ground(cls) -> "TwoArrayState":
        return cls(alpha=SingleState.ground(), beta=SingleState.ground())


@dataclass(frozen=True)
class ScatterResult:
    """Per-incident-photon probabilities and their ingredients.

    refl_amp is the coherent reflection amplitude; for two arrays it is the
    (alpha, beta) pair of per-array amplitudes.
    """

    refl: float
    trans: float
    scat: float
    q1: float
    q2: float
    refl_amp: complex | tuple[complex, complex]

    def flux_defect(self) -> float:
        return self.refl + self.trans + self.scat - 1.0


def validate(config: ArrayConfig, drive: Drive):
    """Check every hard invariant; return the normalized pair or raise ConfigError.

    Collects all violations rather than stopping at the first one.
    """
    violations = []
    a = config.a_over_lambda
    if not (a > 0.0):
        violations.append(f"lattice spacing must be positive, got a/lambda = {a}")
    elif a >= 1.0:
        violations.append(
            f"lattice spacing a/lambda = {a} admits diffraction orders; require a < lambda"
        )
    if config.num_arrays not in (1, 2):
        violations.append(f"num_arrays must be 1 or 2, got {config.num_arrays}")
    if config.num_arrays == 2:
        if config.L_over_lambda is None:
            violations.append("two-array configuration requires L_over_lambda")
        elif not (config.L_over_lambda > 1.0):
            violations.append(
                f"array separation L/lambda = {config.L_over_lambda} too small; "
                "require L > lambda (asymptotic inter-array coupling regime)"
            )
    if not isinstance(config.polarization, Polarization):
        violations.append(f"polarization must be a Polarization, got {config.polarization!r}")
    if drive.omega < 0:
        violations.append(f"Rabi frequency must be non-negative, got omega = {drive.omega}")
    if not math.isfinite(drive.omega) or not math.isfinite(drive.delta):
        violations.append("drive parameters must be finite")
    if violations:
        raise ConfigError(violations)
    if config.num_arrays == 1 and config.L_over_lambda is not None:
        config = replace(config, L_over_lambda=None)
    return config, drive
