"""Gaussian moment-closure dynamics.

For a Gaussian state the centroid follows an SDE driven by the two
measurement noises, while the covariance obeys a deterministic Riccati
equation: the martingale parts of the second central moments are
proportional to third central moments, which vanish. The centroid is
stepped with Euler-Maruyama and the covariance with explicit Euler.

Step-size guideline (see :func:`dt_guideline`)::

    dt <= 0.01 / max(gamma var_q, gamma' var_p, var_p / (m var_q))

evaluated at the fixed point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytic import FixedPoint
from .core import MomentState, NoiseIncrement, PhysParams, StepTooLarge, TrajectoryRecord
from .noise import NoisePath


def _drift(var_q, var_p, covar, m, g, gp):
    # works elementwise on floats or numpy arrays
    d_var_q = 2.0 * covar / m + 0.5 * gp - 2.0 * g * var_q * var_q - 2.0 * gp * covar * covar
    d_var_p = 0.5 * g - 2.0 * g * covar * covar - 2.0 * gp * var_p * var_p
    d_covar = var_p / m - 2.0 * g * var_q * covar - 2.0 * gp * var_p * covar
    return d_var_q, d_var_p, d_covar


def covariance_drift(state: MomentState, params: PhysParams) -> tuple[float, float, float]:
    """Time derivatives ``(d var_q, d var_p, d covar)/dt``."""
    return _drift(state.var_q, state.var_p, state.covar, params.mass, params.gamma, params.gamma_prime)


def centroid_increment(state: MomentState, params: PhysParams, noise: NoiseIncrement, dt: float):
    dq = state.p_mean / params.mass * dt + 2.0 * state.var_q * noise.d_xi + 2.0 * state.covar * noise.d_xi_prime
    dp = 2.0 * state.covar * noise.d_xi + 2.0 * state.var_p * noise.d_xi_prime
    return dq, dp


def _advance(q, p, vq, vp, r, dxi, dxip, dt, m, g, gp):
    dvq, dvp, dr = _drift(vq, vp, r, m, g, gp)
    return (
        q + p / m * dt + 2.0 * vq * dxi + 2.0 * r * dxip,
        p + 2.0 * r * dxi + 2.0 * vp * dxip,
        vq + dvq * dt,
        vp + dvp * dt,
        r + dr * dt,
    )


def step(state: MomentState, params: PhysParams, noise: NoiseIncrement, dt: float) -> MomentState:
    """One Euler-Maruyama step of centroid and covariance.

    Raises :class:`StepTooLarge` if either variance would become non-positive.
    """
    out = _advance(*state.as_tuple(), noise.d_xi, noise.d_xi_prime, dt,
                   params.mass, params.gamma, params.gamma_prime)
    if not (out[2] > 0 and out[3] > 0):
        raise StepTooLarge(f"dt = {dt} drives a variance non-positive (var_q={out[2]:.3g}, var_p={out[3]:.3g})")
    return MomentState(*out)


def dt_guideline(params: PhysParams, fp: FixedPoint) -> float:
    rate = max(
        params.gamma * fp.var_q_inf,
        params.gamma_prime * fp.var_p_inf,
        fp.var_p_inf / (params.mass * fp.var_q_inf),
    )
    return 0.01 / rate


def jacobian_fd(params: PhysParams, fp: FixedPoint, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the covariance drift at ``fp``.

    Rows and columns follow the ordering (var_q, var_p, covar).
    """
    x0 = np.array([fp.var_q_inf, fp.var_p_inf, fp.covar_inf])
    jac = np.empty((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fplus = np.array(_drift(*(x0 + e), params.mass, params.gamma, params.gamma_prime))
        fminus = np.array(_drift(*(x0 - e), params.mass, params.gamma, params.gamma_prime))
        jac[:, j] = (fplus - fminus) / (2.0 * h)
    return jac


@dataclass
class MomentTrajectory:
    params: PhysParams
    dt: float
    records: list = field(default_factory=list)

    def array(self) -> np.ndarray:
        """Records as an ``(n, 6)`` array: t, q_mean, p_mean, var_q, var_p, covar."""
        return np.array([(r.time, *r.moments.as_tuple()) for r in self.records])


def simulate(initial: MomentState, params: PhysParams, path: NoisePath, dt: float | None = None) -> MomentTrajectory:
    """Integrate the moment equations along ``path``.

    Raises
    ------
    StepTooLarge
        With ``step_index`` set, if a variance goes non-positive. Records
        up to the failure are attached as ``exc.trajectory``.
    """
    if dt is not None and not np.isclose(dt, path.dt, rtol=1e-12, atol=0.0):
        raise ValueError(f"dt {dt} does not match the noise path dt {path.dt}")
    dt = path.dt
    m, g, gp = params.mass, params.gamma, params.gamma_prime
    traj = MomentTrajectory(params, dt, [TrajectoryRecord(0.0, initial, 0.0)])
    x = initial.as_tuple()
    for k, (dxi, dxip) in enumerate(path.increments.tolist()):
        x = _advance(*x, dxi, dxip, dt, m, g, gp)
        if not (x[2] > 0 and x[3] > 0):
            exc = StepTooLarge(f"dt = {dt} drives a variance non-positive", step_index=k)
            exc.trajectory = traj
            raise exc
        traj.records.append(TrajectoryRecord((k + 1) * dt, MomentState(*x), 0.0))
    return traj


def simulate_batch(initial: np.ndarray, params: PhysParams, increments: np.ndarray, dt: float,
                   record_every: int = 1):
    """Vectorized integration of many independent trajectories.

    Parameters
    ----------
    initial : array, shape (B, 5)
        Starting moments per trajectory.
    increments : array, shape (B, n_steps, 2)
        Pre-scaled noise.

    Returns
    -------
    records : array, shape (n_records, B, 5)
        Moments at steps ``0, record_every, 2*record_every, ...``; rows of
        failed trajectories are NaN after their failure.
    failures : dict
        Trajectory row -> failing step index.
    """
    m, g, gp = params.mass, params.gamma, params.gamma_prime
    x = [np.array(initial[:, i], dtype=float) for i in range(5)]
    n_steps = increments.shape[1]
    n_rec = n_steps // record_every + 1
    records = np.empty((n_rec, initial.shape[0], 5))
    records[0] = initial
    failures = {}
    alive = np.ones(initial.shape[0], dtype=bool)
    for k in range(n_steps):
        x = list(_advance(*x, increments[:, k, 0], increments[:, k, 1], dt, m, g, gp))
        bad = alive & ~((x[2] > 0) & (x[3] > 0))
        if bad.any():
            for row in np.flatnonzero(bad):
                failures[int(row)] = k
            alive &= ~bad
            for arr in x:
                arr[~alive] = np.nan
        if (k + 1) % record_every == 0:
            records[(k + 1) // record_every] = np.stack(x, axis=1)
    return records, failures
