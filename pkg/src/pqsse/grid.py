"""Direct integration of the nonlinear SSE on a periodic grid.

Positions live on ``q_j = -L/2 + j dq`` and momenta on the FFT lattice
``p_k = 2 pi k / L``. Operators diagonal in q act by multiplication in
real space, operators diagonal in p by multiplication after an FFT.

Two Ito schemes are provided for one step of length dt, both with
``<q>`` and ``<p>`` frozen at the start of the step and a renormalization
at the end:

``"exponential"`` (default)
    Each channel's linear part is integrated exactly, and the position
    factor is split symmetrically around the momentum factor::

        Q = exp((dq dxi - gamma dq^2 dt/2) / 2)
        psi <- Q F^-1 exp(-i p^2 dt/2m + dp dxi' - gamma' dp^2 dt/2) F Q psi

    with ``dq = q - <q>`` and ``dp = p - <p>``. The extra ``-gamma dq^2 dt/4``
    (and likewise in p) relative to the equation's drift is the Ito
    correction of the exponential. The shape update does not depend on
    the noise, so the Gaussian's covariance follows the same Riccati flow
    on every path, and the scheme has no stiffness limit on dt.

``"euler"``
    Plain Euler-Maruyama on the full generator. It is conditionally stable
    (``dt <= 0.05 / max(p_max^2/2m, gamma q_max^2, gamma' p_max^2)``) and,
    with the noise switched off, does not keep the stationary packet
    stationary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .core import (
    GridError,
    GridTooNarrow,
    MomentState,
    NoiseIncrement,
    NotNormalized,
    OffLattice,
    PacketEscaped,
    PhysParams,
    StepUnstable,
    TrajectoryRecord,
)
from .noise import NoisePath

SCHEMES = ("exponential", "euler")
NORM_DRIFT_LIMIT = 0.1
EDGE_RATIO_LIMIT = 1e-8


@dataclass(frozen=True)
class GridSpec:
    n_points: int
    box_length: float

    def __post_init__(self):
        n = self.n_points
        if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 128 or n & (n - 1):
            raise GridError(f"n_points must be a power of two >= 128, got {n!r}")
        if not (self.box_length > 0 and math.isfinite(self.box_length)):
            raise GridError(f"box_length must be positive, got {self.box_length!r}")
        object.__setattr__(self, "n_points", int(n))
        object.__setattr__(self, "box_length", float(self.box_length))

    @classmethod
    def for_fixed_point(cls, fp, n_points=1024, width=40.0) -> "GridSpec":
        """Box of ``width`` stationary position widths."""
        return cls(n_points, width * fp.sigma_q)

    @property
    def dq(self) -> float:
        return self.box_length / self.n_points

    @property
    def dp(self) -> float:
        return 2.0 * math.pi / self.box_length

    @property
    def p_max(self) -> float:
        return math.pi * self.n_points / self.box_length

    @property
    def q(self) -> np.ndarray:
        return -0.5 * self.box_length + self.dq * np.arange(self.n_points)

    @property
    def p(self) -> np.ndarray:
        return 2.0 * math.pi * np.fft.fftfreq(self.n_points, d=self.dq)


@dataclass(eq=False)
class WaveFunction:
    grid: GridSpec
    amplitudes: np.ndarray

    def norm(self) -> float:
        return float(math.sqrt(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.dq))

    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def copy(self) -> "WaveFunction":
        return WaveFunction(self.grid, self.amplitudes.copy())

    def save_snapshot(self, path, time=0.0):
        write_snapshot(path, self, time)


def gaussian_packet(grid: GridSpec, q_mean, p_mean, var_q, covar=0.0) -> WaveFunction:
    """Pure Gaussian ``exp(i p_mean q) exp(-(1 - 2i covar)(q - q_mean)^2 / (4 var_q))``.

    Its momentum variance is ``(1 + 4 covar^2) / (4 var_q)``.
    """
    var_p = (1.0 + 4.0 * covar**2) / (4.0 * var_q)
    half = 0.5 * grid.box_length
    sq, sp = math.sqrt(2.0 * var_q), math.sqrt(2.0 * var_p)
    outside_q = 0.5 * (erfc((half - q_mean) / sq) + erfc((half + q_mean) / sq))
    outside_p = 0.5 * (erfc((grid.p_max - p_mean) / sp) + erfc((grid.p_max + p_mean) / sp))
    if outside_q > 1e-10 or outside_p > 1e-10:
        raise GridTooNarrow(
            f"packet mass outside the box: {outside_q:.2e} in q, {outside_p:.2e} in p (limit 1e-10)"
        )
    q = grid.q
    psi = np.exp(1j * p_mean * q - (1.0 - 2.0j * covar) * (q - q_mean) ** 2 / (4.0 * var_q))
    psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dq)
    return WaveFunction(grid, psi)


def squeezed_packet(grid, fp, factor, q_mean=0.0, p_mean=0.0) -> WaveFunction:
    """Stationary shape with the position variance scaled by ``factor``."""
    return gaussian_packet(grid, q_mean, p_mean, factor * fp.var_q_inf, fp.covar_inf)


# ---------------------------------------------------------------------------
# moments

def _moments(psi, grid, with_shape=True):
    """Moments of (a batch of) states along the last axis.

    Returns ``(q_mean, p_mean, var_q, var_p, covar, norm_sq)``; the
    second-moment entries are None if ``with_shape`` is False.
    """
    q, p, dq = grid.q, grid.p, grid.dq
    dens = np.abs(psi) ** 2
    norm_sq = dens.sum(axis=-1) * dq
    w = dens * (dq / norm_sq)[..., None]
    q_mean = w @ q
    phi = np.fft.fft(psi, axis=-1)
    pw = np.abs(phi) ** 2
    pw /= pw.sum(axis=-1, keepdims=True)
    p_mean = pw @ p
    if not with_shape:
        return q_mean, p_mean, None, None, None, norm_sq
    dqv = q - q_mean[..., None]
    dpv = p - p_mean[..., None]
    var_q = (w * dqv**2).sum(axis=-1)
    var_p = (pw * dpv**2).sum(axis=-1)
    dp_psi = np.fft.ifft(dpv * phi, axis=-1)
    covar = np.real(np.sum(np.conj(psi) * dqv * dp_psi, axis=-1)) * dq / norm_sq
    return q_mean, p_mean, var_q, var_p, covar, norm_sq


def expectations(wf: WaveFunction) -> MomentState:
    """Centroid and covariance of a normalized wavefunction.

    Position moments use real-space quadrature, momentum moments use the
    discrete Fourier transform, and the covariance is
    ``Re <psi|(q - <q>)(p - <p>)|psi>`` with ``p`` applied spectrally.
    """
    q_mean, p_mean, var_q, var_p, covar, norm_sq = _moments(wf.amplitudes, wf.grid)
    if abs(math.sqrt(norm_sq) - 1.0) > 1e-8:
        raise NotNormalized(f"wavefunction norm is {math.sqrt(norm_sq):.12f}")
    return MomentState(float(q_mean), float(p_mean), float(var_q), float(var_p), float(covar))


# ---------------------------------------------------------------------------
# stepping

def _step_arrays(psi, grid, params, q_mean, p_mean, dxi, dxip, dt, scheme):
    """Unnormalized step for a batch; q_mean, p_mean, dxi, dxip have shape psi.shape[:-1]."""
    m, g, gp = params.mass, params.gamma, params.gamma_prime
    q, p = grid.q, grid.p
    dqv = q - q_mean[..., None]
    dpv = p - p_mean[..., None]
    dxi = dxi[..., None]
    dxip = dxip[..., None]
    if scheme == "exponential":
        # symmetric split: half position factor, momentum factor, half position factor
        half_q = np.exp(0.5 * (dqv * dxi - 0.5 * g * dt * dqv**2))
        phi = np.fft.fft(psi * half_q, axis=-1)
        phi *= np.exp(-0.5j * dt / m * p**2 + dpv * dxip - 0.5 * gp * dt * dpv**2)
        out = np.fft.ifft(phi, axis=-1)
        out *= half_q
        return out
    if scheme == "euler":
        phi = np.fft.fft(psi, axis=-1)
        mult = -0.5j * dt / m * p**2 - 0.25 * gp * dt * dpv**2 + dpv * dxip
        out = psi + np.fft.ifft(mult * phi, axis=-1)
        out += (-0.25 * g * dt * dqv**2 + dqv * dxi) * psi
        return out
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _renormalize(psi, dq):
    norm = np.sqrt(np.sum(np.abs(psi) ** 2, axis=-1) * dq)
    return psi / norm[..., None], np.abs(norm - 1.0)


def sse_step(wf: WaveFunction, params: PhysParams, noise: NoiseIncrement, dt: float,
             scheme: str = "exponential"):
    """Advance ``wf`` by one Ito step.

    Returns
    -------
    (WaveFunction, float)
        The renormalized state and ``| ||psi|| - 1 |`` before renormalizing.

    Raises
    ------
    StepUnstable
        If the norm deviates by more than 0.1 in the step.
    """
    grid = wf.grid
    q_mean, p_mean, *_ = _moments(wf.amplitudes, grid, with_shape=False)
    out = _step_arrays(wf.amplitudes, grid, params, np.asarray(q_mean), np.asarray(p_mean),
                       np.asarray(noise.d_xi), np.asarray(noise.d_xi_prime), dt, scheme)
    out, drift = _renormalize(out, grid.dq)
    drift = float(drift)
    if not drift <= NORM_DRIFT_LIMIT:
        raise StepUnstable(f"norm drift {drift:.3g} exceeds {NORM_DRIFT_LIMIT}; reduce dt or refine the grid")
    return WaveFunction(grid, out), drift


# ---------------------------------------------------------------------------
# phase-space translation

def _lattice_index(shift, spacing, what):
    k = round(shift / spacing)
    if abs(shift - k * spacing) > 1e-9 * max(1.0, abs(shift)):
        raise OffLattice(f"{what} shift {shift} is not a multiple of the lattice spacing {spacing}")
    return int(k)


def _recenter_rows(psi, grid, kq, kp):
    """Translate by ``kq`` grid cells in q and ``kp`` lattice steps in p (per row).

    The phase convention is that of the symmetric displacement operator,
    so opposite shifts are exact inverses.
    """
    q = grid.q
    sq = np.asarray(kq) * grid.dq
    sp = np.asarray(kp) * grid.dp
    out = psi
    if np.any(kp):
        out = out * np.exp(-1j * sp[..., None] * q + 0.5j * (sq * sp)[..., None])
    if np.ndim(kq) == 0:
        if kq:
            out = np.roll(out, -int(kq), axis=-1)
        return out
    out = np.array(out, copy=True)
    for row in np.flatnonzero(kq):
        out[row] = np.roll(out[row], -int(kq[row]))
    return out


def recenter(wf: WaveFunction, shift_q: float, shift_p: float) -> WaveFunction:
    """Translate the state by ``(-shift_q, -shift_p)`` in phase space.

    Both shifts must be lattice-aligned (``shift_q`` a multiple of ``dq``,
    ``shift_p`` a multiple of ``2 pi / L``); otherwise :class:`OffLattice`.
    """
    grid = wf.grid
    kq = _lattice_index(shift_q, grid.dq, "position")
    kp = _lattice_index(shift_p, grid.dp, "momentum")
    return WaveFunction(grid, _recenter_rows(wf.amplitudes, grid, kq, kp))


# ---------------------------------------------------------------------------
# resolution diagnostics

@dataclass
class ResolutionReport:
    diagnostics: list = field(default_factory=list)  # (code, message) pairs

    @property
    def passed(self) -> bool:
        return not self.diagnostics

    def codes(self):
        return [c for c, _ in self.diagnostics]

    def __str__(self):
        if self.passed:
            return "resolution check passed"
        return "; ".join(f"{c}: {msg}" for c, msg in self.diagnostics)


def dt_guideline(grid: GridSpec, params: PhysParams, fp=None, scheme="exponential") -> float:
    """Largest recommended step.

    For the exponential scheme the bound comes from the physical rates
    at the fixed point; for Euler-Maruyama from the largest generator
    eigenvalue on the lattice.
    """
    if scheme == "euler":
        q_max, p_max = 0.5 * grid.box_length, grid.p_max
        stiff = max(p_max**2 / (2.0 * params.mass), params.gamma * q_max**2, params.gamma_prime * p_max**2)
        return 0.05 / stiff
    if fp is None:
        from .analytic import fixed_point

        fp = fixed_point(params)
    from .moments import dt_guideline as moment_guideline

    return moment_guideline(params, fp)


def edge_ratio(psi) -> np.ndarray:
    """Largest amplitude in the two boundary cells relative to the peak."""
    mag = np.abs(psi)
    edge = np.maximum(mag[..., :2].max(axis=-1), mag[..., -2:].max(axis=-1))
    return edge / mag.max(axis=-1)


def resolution_check(target, fp=None, params=None, dt=None, excursion=(0.0, 0.0),
                     scheme="exponential") -> ResolutionReport:
    """Check a grid (or a wavefunction on one) for adequacy.

    ``target`` is either a :class:`WaveFunction`, whose boundary amplitude
    is inspected directly, or a :class:`GridSpec`, checked against the
    fixed point ``fp`` and the expected centroid ``excursion = (q, p)``.
    The step ``dt`` is checked when ``params`` and ``dt`` are given.
    """
    report = ResolutionReport()
    if isinstance(target, WaveFunction):
        grid = target.grid
        ratio = float(edge_ratio(target.amplitudes))
        if ratio >= EDGE_RATIO_LIMIT:
            report.diagnostics.append(
                ("BoundaryMass", f"boundary amplitude is {ratio:.2e} of peak (limit {EDGE_RATIO_LIMIT:g}); widen the box")
            )
        phi = np.abs(np.fft.fft(target.amplitudes))
        pratio = float(np.max(phi[grid.n_points // 2 - 1: grid.n_points // 2 + 2]) / phi.max())
        if pratio >= EDGE_RATIO_LIMIT:
            report.diagnostics.append(
                ("MomentumCoverage", f"amplitude at +-p_max is {pratio:.2e} of peak; add grid points")
            )
    else:
        grid = target
        if fp is None:
            raise ValueError("a FixedPoint is required to check a bare GridSpec")
        q_exc, p_exc = excursion
        need_l = 20.0 * fp.sigma_q + 2.0 * abs(q_exc)
        if grid.box_length < need_l:
            report.diagnostics.append(
                ("BoundaryMass", f"box length {grid.box_length:.4g} < {need_l:.4g} (20 sigma_inf + 2|q excursion|)")
            )
        need_p = 10.0 * fp.sigma_p + abs(p_exc)
        if grid.p_max < need_p:
            report.diagnostics.append(
                ("MomentumCoverage", f"p_max {grid.p_max:.4g} < {need_p:.4g} (10 sigma'_inf + |p excursion|); add grid points")
            )
    if params is not None and dt is not None:
        limit = dt_guideline(grid, params, fp, scheme)
        if dt > limit:
            report.diagnostics.append(("StepSize", f"dt = {dt:g} exceeds the {scheme} guideline {limit:.3g}"))
    return report


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class GridTrajectory:
    params: PhysParams
    dt: float
    records: list = field(default_factory=list)
    final: WaveFunction | None = None
    offset: tuple = (0.0, 0.0)

    def array(self) -> np.ndarray:
        """Records as ``(n, 7)``: t, q_mean, p_mean, var_q, var_p, covar, norm_drift."""
        return np.array([(r.time, *r.moments.as_tuple(), r.norm_drift) for r in self.records])


def simulate_batch(psi0, grid: GridSpec, params: PhysParams, increments, dt, record_every=1,
                   scheme="exponential", recenter_enabled=True):
    """Integrate a batch of wavefunctions, each with its own noise.

    Parameters
    ----------
    psi0 : complex array, shape (B, n_points)
    increments : array, shape (B, n_steps, 2)

    Returns
    -------
    records : array (n_records, B, 5)
        Moments in the lab frame (recentering offsets added back).
    norm_drift : array (n_records, B)
        Norm drift of the step ending at each record (0 at t = 0).
    psi : complex array (B, n_points)
        Final states in the grid frame.
    offsets : array (B, 2)
        Accumulated (q, p) recentering offsets.
    failures : dict
        Row -> StepError for trajectories that failed; their records are NaN
        from the failure on.
    """
    psi = np.array(psi0, dtype=complex, copy=True)
    if psi.ndim == 1:
        psi = psi[None, :]
    n_batch = psi.shape[0]
    n_steps = increments.shape[1]
    n_rec = n_steps // record_every + 1
    records = np.full((n_rec, n_batch, 5), np.nan)
    drifts = np.full((n_rec, n_batch), np.nan)
    offsets = np.zeros((n_batch, 2))
    failures = {}
    alive = np.ones(n_batch, dtype=bool)
    q_lim, p_lim = grid.box_length / 8.0, grid.p_max / 4.0

    mom = _moments(psi, grid)
    records[0] = np.stack(mom[:5], axis=1)
    drifts[0] = 0.0
    q_mean, p_mean = mom[0], mom[1]
    for k in range(n_steps):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        sub = psi[rows]
        out = _step_arrays(sub, grid, params, q_mean[rows], p_mean[rows],
                           increments[rows, k, 0], increments[rows, k, 1], dt, scheme)
        out, nd = _renormalize(out, grid.dq)
        bad = ~(nd <= NORM_DRIFT_LIMIT)
        if bad.any():
            for i in np.flatnonzero(bad):
                failures[int(rows[i])] = StepUnstable(
                    f"norm drift {nd[i]:.3g} exceeds {NORM_DRIFT_LIMIT}; reduce dt or refine the grid",
                    step_index=k)
            alive[rows[bad]] = False
        psi[rows] = out
        # a removed momentum P keeps carrying the lab frame at velocity P/m
        offsets[rows, 0] += offsets[rows, 1] * (dt / params.mass)
        record_now = (k + 1) % record_every == 0
        if record_now:
            ratio = edge_ratio(out)
            escaped = (ratio >= EDGE_RATIO_LIMIT) & ~bad
            for i in np.flatnonzero(escaped):
                failures[int(rows[i])] = PacketEscaped(
                    f"boundary amplitude reached {ratio[i]:.2e} of peak", step_index=k)
            alive[rows[escaped]] = False
        mom = _moments(psi[rows], grid, with_shape=record_now)
        qm, pm = mom[0], mom[1]
        if recenter_enabled:
            far = (np.abs(qm) > q_lim) | (np.abs(pm) > p_lim)
            if far.any():
                kq = np.where(far, np.rint(qm / grid.dq), 0).astype(int)
                kp = np.where(far, np.rint(pm / grid.dp), 0).astype(int)
                psi[rows] = _recenter_rows(psi[rows], grid, kq, kp)
                offsets[rows, 0] += kq * grid.dq
                offsets[rows, 1] += kp * grid.dp
                qm = qm - kq * grid.dq
                pm = pm - kp * grid.dp
        q_mean = np.zeros(n_batch)
        p_mean = np.zeros(n_batch)
        q_mean[rows], p_mean[rows] = qm, pm
        if record_now:
            j = (k + 1) // record_every
            live = alive[rows]
            rec = np.stack([qm + offsets[rows, 0], pm + offsets[rows, 1], mom[2], mom[3], mom[4]], axis=1)
            records[j, rows[live]] = rec[live]
            drifts[j, rows[live]] = nd[live]
    return records, drifts, psi, offsets, failures


def simulate(wf0: WaveFunction, params: PhysParams, path: NoisePath, record_every: int = 1,
             scheme: str = "exponential", recenter_enabled: bool = True) -> GridTrajectory:
    """Integrate one trajectory along ``path``, recording every ``record_every`` steps.

    The state is re-centred on the lattice whenever ``|<q>| > L/8`` or
    ``|<p>| > p_max/4``; reported centroids include the accumulated shift.
    Removing a momentum ``P`` is a Galilean boost, so the position offset
    also grows by ``P dt / m`` every step.

    Raises
    ------
    StepUnstable, PacketEscaped
        With ``step_index`` set.
    """
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    grid, dt = wf0.grid, path.dt
    records, drifts, psi, offsets, failures = simulate_batch(
        wf0.amplitudes[None, :], grid, params, path.increments[None, :, :], dt,
        record_every, scheme, recenter_enabled)
    if failures:
        raise failures[0]
    traj = GridTrajectory(params, dt, final=WaveFunction(grid, psi[0]), offset=tuple(offsets[0]))
    for j in range(records.shape[0]):
        traj.records.append(
            TrajectoryRecord(j * record_every * dt, MomentState(*map(float, records[j, 0])), float(drifts[j, 0]))
        )
    return traj


# ---------------------------------------------------------------------------
# snapshots

_SNAP_HEADER = np.dtype([("n_points", "<i8"), ("box_length", "<f8"), ("time", "<f8")])


def snapshot_bytes(wf: WaveFunction, time=0.0) -> bytes:
    """Header (int64 n_points, float64 box_length, float64 time) then
    interleaved little-endian float64 real/imaginary parts."""
    head = np.array([(wf.grid.n_points, wf.grid.box_length, time)], dtype=_SNAP_HEADER)
    body = np.empty(2 * wf.grid.n_points, dtype="<f8")
    body[0::2] = wf.amplitudes.real
    body[1::2] = wf.amplitudes.imag
    return head.tobytes() + body.tobytes()


def write_snapshot(path, wf: WaveFunction, time=0.0):
    with open(path, "wb") as fh:
        fh.write(snapshot_bytes(wf, time))


def read_snapshot(path):
    with open(path, "rb") as fh:
        data = fh.read()
    head = np.frombuffer(data[:_SNAP_HEADER.itemsize], dtype=_SNAP_HEADER)[0]
    body = np.frombuffer(data[_SNAP_HEADER.itemsize:], dtype="<f8")
    grid = GridSpec(int(head["n_points"]), float(head["box_length"]))
    if body.size != 2 * grid.n_points:
        raise ValueError("snapshot body length does not match its header")
    return WaveFunction(grid, body[0::2] + 1j * body[1::2]), float(head["time"])
