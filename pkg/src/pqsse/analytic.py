"""Closed-form stationary state and its linear stability.

The localized solution is a Gaussian of fixed shape whose centre wanders
in phase space. Its shape is fixed by three numbers, the position
variance ``var_q_inf``, the momentum variance ``var_p_inf`` and the
symmetrized covariance ``covar_inf``, all functions of (m, gamma,
gamma_prime) only.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import PhysParams, PqsseError


class ClosedFormMismatch(PqsseError):
    """Numerical eigenvalues of the stability matrix disagree with the
    closed form, which indicates a transcription error in the matrix."""


@dataclass(frozen=True)
class FixedPoint:
    var_q_inf: float
    var_p_inf: float
    covar_inf: float
    e_prime: float
    e: float

    @property
    def sigma_q(self) -> float:
        return math.sqrt(self.var_q_inf)

    @property
    def sigma_p(self) -> float:
        return math.sqrt(self.var_p_inf)

    def constraint_residual(self) -> float:
        """``1 + 4 R^2 - 4 var_q var_p``, zero for a minimum-uncertainty state."""
        return 1.0 + 4.0 * self.covar_inf**2 - 4.0 * self.var_q_inf * self.var_p_inf


def _squeeze_factor(params: PhysParams) -> tuple[float, float]:
    """Return (sqrt(m^2 g'^2 + 1), sqrt(m^2 g'^2 + 1) - m g')."""
    mg = params.mass * params.gamma_prime
    root = math.hypot(mg, 1.0)
    # root - mg written without cancellation for large m*gamma'
    return root, 1.0 / (root + mg)


def fixed_point(params: PhysParams) -> FixedPoint:
    m, g, gp = params.mass, params.gamma, params.gamma_prime
    root, diff = _squeeze_factor(params)
    var_q = math.sqrt(1.0 / (2.0 * m * g)) * root * math.sqrt(diff)
    var_p = math.sqrt(g * m / 2.0) * math.sqrt(diff)
    covar = 0.5 * diff
    e_prime, e = _phase_constants(params, var_q, var_p, covar)
    return FixedPoint(var_q, var_p, covar, e_prime, e)


def _phase_constants(params, var_q, var_p, covar):
    m, g, gp = params.mass, params.gamma, params.gamma_prime
    e_prime = (0.5 / var_q) * (0.5 / m - gp * covar)
    e = e_prime - g * var_q * covar - gp * var_p * covar
    return e_prime, e


def phase_constants(params: PhysParams, fp: FixedPoint) -> tuple[float, float]:
    """Return ``(E, E')`` for the stationary packet.

    ``E'`` is the eigenvalue of the stationary shape equation and ``E``
    the rate of the deterministic part of the global phase; they differ
    by ``gamma var_q R + gamma' var_p R``.
    """
    e_prime, e = _phase_constants(params, fp.var_q_inf, fp.var_p_inf, fp.covar_inf)
    return e, e_prime


def stationary_packet(params: PhysParams, fp: FixedPoint, q_mean: float, p_mean: float, grid):
    """Sample the stationary wave packet centred at ``(q_mean, p_mean)``.

    Amplitudes are ``exp(i p_mean q) exp(-(1 - 2iR)(q - q_mean)^2 / (4 var_q))``,
    normalized on the grid. The stochastic global phase is omitted since
    no phase-invariant observable depends on it.

    Raises
    ------
    GridTooNarrow
        If more than 1e-10 of the probability lies outside the box in
        position or momentum.
    """
    from .grid import gaussian_packet

    return gaussian_packet(grid, q_mean, p_mean, fp.var_q_inf, fp.covar_inf)


@dataclass(frozen=True)
class StabilityReport:
    """Linearization of the covariance drift at the fixed point.

    The state vector is ordered ``(d var_q, d var_p, d covar)``.
    ``eigenvalues`` are the numerical eigenvalues, ordered to match
    ``closed_form`` = (real, +imag, -imag).
    """

    matrix_a: np.ndarray
    eigenvalues: np.ndarray
    closed_form: np.ndarray
    max_rel_discrepancy: float

    @property
    def stable(self) -> bool:
        return bool(np.all(self.eigenvalues.real < 0))


def closed_form_eigenvalues(params: PhysParams, fp: FixedPoint) -> np.ndarray:
    g, gp = params.gamma, params.gamma_prime
    vq, vp, r = fp.var_q_inf, fp.var_p_inf, fp.covar_inf
    real = -(2.0 * g * vq + 2.0 * gp * vp)
    imag = 2.0 * math.sqrt((g * vq - gp * vp) ** 2 + 4.0 * g * gp * r * r)
    return np.array([complex(real, 0.0), complex(real, imag), complex(real, -imag)])


def linearization_matrix(params: PhysParams, fp: FixedPoint) -> np.ndarray:
    m, g, gp = params.mass, params.gamma, params.gamma_prime
    vq, vp, r = fp.var_q_inf, fp.var_p_inf, fp.covar_inf
    return np.array(
        [
            [-4.0 * g * vq, 0.0, 2.0 / m - 4.0 * gp * r],
            [0.0, -4.0 * gp * vp, -4.0 * g * r],
            [-2.0 * g * r, 1.0 / m - 2.0 * gp * r, -2.0 * g * vq - 2.0 * gp * vp],
        ]
    ) + 0.0


def _match(numeric, reference):
    """Permute ``numeric`` to best match ``reference`` element-wise."""
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(len(numeric))):
        cand = numeric[list(perm)]
        cost = float(np.max(np.abs(cand - reference)))
        if cost < best_cost:
            best, best_cost = cand, cost
    return best


def stability_matrix(params: PhysParams, fp: FixedPoint, rtol=1e-9) -> StabilityReport:
    a = linearization_matrix(params, fp)
    closed = closed_form_eigenvalues(params, fp)
    numeric = _match(np.linalg.eigvals(a).astype(complex), closed)
    scale = float(np.max(np.abs(closed)))
    disc = float(np.max(np.abs(numeric - closed))) / scale
    if disc > rtol:
        raise ClosedFormMismatch(
            f"numerical eigenvalues differ from closed form by {disc:.3e} (relative)"
        )
    return StabilityReport(a, numeric, closed, disc)


def eigen_perturbation(params: PhysParams, fp: FixedPoint, mode="real", size=0.05):
    """Deviation ``(d var_q, d var_p, d covar)`` along an eigen-direction.

    ``mode="real"`` uses the eigenvector of the real eigenvalue, ``"complex"``
    the real part of the ``+imag`` eigenvector. The vector is scaled so its
    largest component, relative to the corresponding fixed-point value, is
    ``size``.
    """
    if mode not in ("real", "complex"):
        raise ValueError(f"mode must be 'real' or 'complex', got {mode!r}")
    report = stability_matrix(params, fp)
    vals, vecs = np.linalg.eig(report.matrix_a)
    target = report.closed_form[0 if mode == "real" else 1]
    k = int(np.argmin(np.abs(vals - target)))
    v = vecs[:, k]
    # fix the arbitrary complex phase so the largest component is real
    v = v * np.exp(-1j * np.angle(v[np.argmax(np.abs(v))]))
    x = v.real
    scale = np.array([fp.var_q_inf, fp.var_p_inf, fp.covar_inf])
    return x * (size / np.max(np.abs(x) / scale))
