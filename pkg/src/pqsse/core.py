"""Shared value types, parameter validation and error classes.

Units are natural throughout: hbar = 1, so a position variance times a
momentum variance is dimensionless and a minimum-uncertainty state has
``var_q * var_p - covar**2 == 1/4``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, astuple


class PqsseError(Exception):
    """Base class for all errors raised by this package."""


class ParamError(PqsseError, ValueError):
    """Invalid physical parameters."""


class NonPositiveMass(ParamError):
    pass


class NonPositiveGamma(ParamError):
    pass


class NegativeGammaPrime(ParamError):
    pass


class NonFiniteInput(ParamError):
    pass


class StepError(PqsseError):
    """An integrator step failed.

    ``step_index`` is the zero-based index of the failing step, and
    ``trajectory_index`` is filled in by the ensemble runner.
    """

    def __init__(self, message, step_index=None, trajectory_index=None):
        super().__init__(message)
        self.step_index = step_index
        self.trajectory_index = trajectory_index

    def __str__(self):
        msg = super().__str__()
        where = []
        if self.trajectory_index is not None:
            where.append(f"trajectory {self.trajectory_index}")
        if self.step_index is not None:
            where.append(f"step {self.step_index}")
        return f"{msg} ({', '.join(where)})" if where else msg


class StepTooLarge(StepError):
    pass


class StepUnstable(StepError):
    pass


class PacketEscaped(StepError):
    pass


class GridError(PqsseError, ValueError):
    pass


class GridTooNarrow(GridError):
    pass


class NotNormalized(GridError):
    pass


class OffLattice(GridError):
    pass


class WindowTooShort(PqsseError):
    pass


@dataclass(frozen=True)
class PhysParams:
    """Particle mass and the position/momentum measurement strengths."""

    mass: float
    gamma: float
    gamma_prime: float

    def __post_init__(self):
        for name in ("mass", "gamma", "gamma_prime"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise NonFiniteInput(f"{name} must be a real number, got {val!r}")
            if not math.isfinite(val):
                raise NonFiniteInput(f"{name} must be finite, got {val!r}")
            object.__setattr__(self, name, float(val))
        if self.mass <= 0:
            raise NonPositiveMass(f"mass must be > 0, got {self.mass}")
        if self.gamma <= 0:
            raise NonPositiveGamma(
                f"gamma must be > 0 (no stationary state at gamma = 0), got {self.gamma}"
            )
        if self.gamma_prime < 0:
            raise NegativeGammaPrime(f"gamma_prime must be >= 0, got {self.gamma_prime}")


def validate_params(mass, gamma, gamma_prime) -> PhysParams:
    """Build a :class:`PhysParams`, raising a :class:`ParamError` subclass
    if any constraint is violated."""
    try:
        vals = [float(v) for v in (mass, gamma, gamma_prime)]
    except (TypeError, ValueError) as exc:
        raise NonFiniteInput(f"parameters must be real numbers: {exc}") from None
    return PhysParams(*vals)


@dataclass(frozen=True)
class MomentState:
    """Gaussian phase-space summary: centroid and covariance of the state.

    ``covar`` is the symmetrized covariance 1/2 <{q - <q>, p - <p>}>.
    """

    q_mean: float
    p_mean: float
    var_q: float
    var_p: float
    covar: float

    def as_tuple(self):
        return astuple(self)

    def purity_defect(self) -> float:
        """``4 var_q var_p - 4 covar**2 - 1``; zero for a pure Gaussian."""
        return 4.0 * self.var_q * self.var_p - 4.0 * self.covar**2 - 1.0

    def is_admissible(self, tol=1e-9) -> bool:
        return self.var_q > 0 and self.var_p > 0 and self.purity_defect() >= -tol


@dataclass(frozen=True)
class NoiseIncrement:
    """One pre-scaled increment pair (d_xi, d_xi_prime)."""

    d_xi: float
    d_xi_prime: float


@dataclass(frozen=True)
class TrajectoryRecord:
    time: float
    moments: MomentState
    norm_drift: float = 0.0
