"""Monte Carlo ensembles of trajectories and their statistics.

Trajectory ``i`` always draws noise from substream ``(seed, i)``, and
trajectories are processed in fixed-size chunks whose results are put
back in index order, so the statistics do not depend on the worker
count or on completion order.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import least_squares

from . import grid as gridmod
from . import moments as momentmod
from .analytic import FixedPoint, fixed_point
from . import core
from .core import PhysParams, PqsseError, StepError, WindowTooShort
from .noise import make_paths

MOMENT_NAMES = ("q_mean", "p_mean", "var_q", "var_p", "covar")
CHUNK = 256


class ConfigError(PqsseError, ValueError):
    pass


@dataclass(frozen=True)
class InitialState:
    """Starting state descriptor.

    kind
        ``fixed_point``: the stationary shape.
        ``squeezed``: stationary covariance with var_q scaled by ``factor``
        (var_p follows from purity).
        ``displaced``: stationary shape centred at ``(q_mean, p_mean)``.
        ``perturbed``: fixed point plus ``deviation`` =
        (d var_q, d var_p, d covar); only pure (constraint-preserving)
        deviations can be run on the grid.
    """

    kind: str = "fixed_point"
    factor: float = 1.0
    q_mean: float = 0.0
    p_mean: float = 0.0
    deviation: tuple = (0.0, 0.0, 0.0)

    KINDS = ("fixed_point", "squeezed", "displaced", "perturbed")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"initial kind must be one of {self.KINDS}, got {self.kind!r}")
        if not self.factor > 0:
            raise ConfigError(f"squeeze factor must be > 0, got {self.factor}")
        object.__setattr__(self, "deviation", tuple(float(x) for x in self.deviation))

    def moments(self, fp: FixedPoint) -> np.ndarray:
        vq, vp, r = fp.var_q_inf, fp.var_p_inf, fp.covar_inf
        if self.kind == "squeezed":
            vq = self.factor * vq
            vp = (1.0 + 4.0 * r * r) / (4.0 * vq)
        elif self.kind == "perturbed":
            vq, vp, r = vq + self.deviation[0], vp + self.deviation[1], r + self.deviation[2]
        if vq <= 0 or vp <= 0:
            raise ConfigError("initial variances must be positive")
        return np.array([self.q_mean, self.p_mean, vq, vp, r])

    def wavefunction(self, grid, fp: FixedPoint):
        q, p, vq, vp, r = self.moments(fp)
        if abs(4.0 * vq * vp - 4.0 * r * r - 1.0) > 1e-9:
            raise ConfigError("initial moments are not those of a pure Gaussian; use the moments integrator")
        return gridmod.gaussian_packet(grid, q, p, vq, r)


@dataclass(frozen=True)
class EnsembleConfig:
    params: PhysParams
    integrator: str = "moments"
    n_trajectories: int = 100
    dt: float = 1e-3
    t_final: float = 1.0
    seed: int = 0
    initial: InitialState = field(default_factory=InitialState)
    record_every: int = 1
    n_points: int = 1024
    box_length: float | None = None
    scheme: str = "exponential"
    workers: int = 1
    permissive: bool = False

    def __post_init__(self):
        if self.integrator not in ("moments", "grid"):
            raise ConfigError(f"integrator must be 'moments' or 'grid', got {self.integrator!r}")
        if self.n_trajectories < 2:
            raise ConfigError("n_trajectories must be >= 2")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if not self.t_final >= self.dt * (1 - 1e-12):
            raise ConfigError("t_final must be >= dt")
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.scheme not in gridmod.SCHEMES:
            raise ConfigError(f"scheme must be one of {gridmod.SCHEMES}")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_final / self.dt)))

    def grid_spec(self, fp=None) -> gridmod.GridSpec:
        fp = fp or fixed_point(self.params)
        length = self.box_length if self.box_length is not None else 40.0 * fp.sigma_q
        return gridmod.GridSpec(self.n_points, length)


@dataclass(eq=False)
class EnsembleStats:
    """Per-record ensemble statistics.

    ``mean``, ``var`` and ``sem`` have shape ``(n_records, 5)`` with columns
    ordered as :data:`MOMENT_NAMES`; variances are unbiased. ``count`` is the
    number of trajectories contributing at each record.
    """

    times: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    sem: np.ndarray
    defect_mean: np.ndarray
    defect_std: np.ndarray
    rates: dict
    n_failed: int = 0
    failed: list = field(default_factory=list)

    def final_summary(self) -> dict:
        out = {"time": float(self.times[-1]), "count": int(self.count[-1])}
        for i, name in enumerate(MOMENT_NAMES):
            out[name] = {"mean": float(self.mean[-1, i]), "var": float(self.var[-1, i]),
                         "sem": float(self.sem[-1, i])}
        return out


def _sample_variance_sem(x):
    """Unbiased variance of ``x`` and its standard error (fourth-moment form)."""
    n = x.size
    s2 = float(np.var(x, ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    se = math.sqrt(max(m4 - (n - 3) / (n - 1) * s2 * s2, 0.0) / n)
    return s2, se


def _rates(data, t_final):
    """Diffusion rates of the centroid and the heating rate of <p^2>.

    ``data`` has shape (n_records, 5, n) for completed trajectories.
    """
    n = data.shape[2]
    if n < 2:
        return {}
    out = {}
    for i, name in ((0, "q_mean"), (1, "p_mean")):
        inc = data[-1, i] - data[0, i]
        s2, se = _sample_variance_sem(inc)
        out[f"diffusion_{name}"] = {"rate": s2 / t_final, "sem": se / t_final, "n": n}
    p2_end = data[-1, 3] + data[-1, 1] ** 2
    p2_start = data[0, 3] + data[0, 1] ** 2
    heat = p2_end - p2_start
    out["heating_p2"] = {"rate": float(heat.mean()) / t_final,
                         "sem": float(heat.std(ddof=1)) / math.sqrt(n) / t_final, "n": n}
    return out


def _run_chunk(cfg: EnsembleConfig, indices):
    """Run trajectories ``indices``; returns (records (R, k, 5), failures dict)."""
    params = cfg.params
    fp = fixed_point(params)
    inc = make_paths(cfg.seed, indices, params, cfg.dt, cfg.n_steps)
    if cfg.integrator == "moments":
        init = np.tile(cfg.initial.moments(fp), (len(indices), 1))
        records, fails = momentmod.simulate_batch(init, params, inc, cfg.dt, cfg.record_every)
        return records, {r: ("StepTooLarge", k) for r, k in fails.items()}
    grid = cfg.grid_spec(fp)
    psi0 = np.tile(cfg.initial.wavefunction(grid, fp).amplitudes, (len(indices), 1))
    records, _, _, _, fails = gridmod.simulate_batch(psi0, grid, params, inc, cfg.dt,
                                                     cfg.record_every, cfg.scheme)
    return records, {r: (type(e).__name__, e.step_index) for r, e in fails.items()}


def _check_grid(cfg: EnsembleConfig):
    fp = fixed_point(cfg.params)
    grid = cfg.grid_spec(fp)
    init = cfg.initial
    report = gridmod.resolution_check(grid, fp=fp, params=cfg.params, dt=cfg.dt,
                                      excursion=(init.q_mean, init.p_mean), scheme=cfg.scheme)
    if report.passed:
        report = gridmod.resolution_check(init.wavefunction(grid, fp))
    if not report.passed:
        raise ConfigError(f"grid resolution check failed: {report}")


def run_ensemble(cfg: EnsembleConfig) -> EnsembleStats:
    """Run ``cfg.n_trajectories`` independent trajectories and aggregate.

    Raises the first trajectory's :class:`StepError` (with its index)
    unless ``cfg.permissive``, in which case failed trajectories are
    dropped and counted.
    """
    if cfg.integrator == "grid":
        _check_grid(cfg)
    chunks = [list(range(i, min(i + CHUNK, cfg.n_trajectories)))
              for i in range(0, cfg.n_trajectories, CHUNK)]
    if cfg.workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_chunk, [cfg] * len(chunks), chunks))
    else:
        results = [_run_chunk(cfg, c) for c in chunks]

    failed, first = [], None
    for chunk, (_, fails) in zip(chunks, results):
        for row, (kind, step) in sorted(fails.items()):
            failed.append((chunk[row], f"{kind} at step {step}"))
            first = first or (chunk[row], kind, step)
    if failed and not cfg.permissive:
        idx, kind, step = first
        raise getattr(core, kind)("trajectory failed", step_index=step, trajectory_index=idx)

    # (n_records, 5, n_traj) with the trajectory axis contiguous for pairwise sums
    data = np.ascontiguousarray(np.concatenate([r for r, _ in results], axis=1).transpose(0, 2, 1))
    ok = np.ones(data.shape[2], dtype=bool)
    ok[[i for i, _ in failed]] = False
    data = np.ascontiguousarray(data[:, :, ok])
    n = data.shape[2]
    if n < 2:
        raise StepError(f"only {n} trajectories completed")

    times = np.arange(data.shape[0]) * cfg.record_every * cfg.dt
    mean = data.mean(axis=2)
    var = data.var(axis=2, ddof=1)
    sem = np.sqrt(var / n)
    defect = 4.0 * data[:, 2] * data[:, 3] - 4.0 * data[:, 4] ** 2 - 1.0
    t_final = cfg.n_steps * cfg.dt
    return EnsembleStats(
        times=times,
        count=np.full(data.shape[0], n),
        mean=mean,
        var=var,
        sem=sem,
        defect_mean=defect.mean(axis=1),
        defect_std=defect.std(axis=1, ddof=1),
        rates=_rates(data, t_final),
        n_failed=len(failed),
        failed=failed,
    )


# ---------------------------------------------------------------------------
# relaxation

@dataclass(frozen=True)
class RelaxationFit:
    moment: str
    rate: float
    frequency: float
    amplitude: float
    residual: float
    n_points: int
    window: tuple


def _fit_damped(segments, alpha0, omega_max):
    """Fit ``exp(-a t)(c_i cos w t + s_i sin w t)`` to each ``(t, y)`` segment.

    The decay rate ``a`` and frequency ``w`` are shared; the amplitudes are
    eliminated by linear least squares (variable projection). Returns
    ``(a, w, amplitudes, rms)``.
    """

    def resid(theta, want_coef=False):
        alpha, omega = theta
        out, coefs = [], []
        for t, y in segments:
            env = np.exp(-alpha * t)
            basis = np.stack([env * np.cos(omega * t), env * np.sin(omega * t)], axis=1)
            coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
            out.append(basis @ coef - y)
            coefs.append(coef)
        return (np.concatenate(out), coefs) if want_coef else np.concatenate(out)

    span = max(t[-1] - t[0] for t, _ in segments)
    best = None
    for omega0 in np.linspace(0.0, min(4.0 * math.pi / max(span, 1e-12), 0.5 * omega_max), 17):
        res = least_squares(resid, x0=[alpha0, omega0], bounds=([-np.inf, 0.0], [np.inf, omega_max]),
                            x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12)
        if best is None or res.cost < best.cost:
            best = res
    r, coefs = resid(best.x, want_coef=True)
    rms = math.sqrt(float(np.mean(r**2)))
    return float(best.x[0]), float(best.x[1]), [float(np.hypot(*c)) for c in coefs], rms


def relaxation_fit(stats: EnsembleStats, fp: FixedPoint, window=(0.01, 0.05), min_points=10):
    """Fit decay rate and oscillation frequency of the mean covariance moments.

    For each of var_q, var_p and covar, the deviation ``d(t)`` of the
    ensemble mean from its fixed-point value, in units of that value, is
    taken over the span from the first to the last record where ``|d|``
    lies in ``window``. A damped oscillation ``exp(-a t)(c cos w t + s sin w t)``
    is fitted over the span; a non-oscillating mode comes out with w ~ 0.
    The ``"joint"`` entry fits all qualifying moments with one shared
    (a, w), which averages out second-order distortions of single moments.

    Returns a dict mapping ``var_q``, ``var_p``, ``covar`` and ``joint`` to a
    :class:`RelaxationFit`, or None for a moment with fewer than
    ``min_points`` qualifying records.

    Raises
    ------
    WindowTooShort
        If no moment has enough qualifying records.
    """
    lo, hi = window
    targets = {"var_q": fp.var_q_inf, "var_p": fp.var_p_inf, "covar": fp.covar_inf}
    spacing = float(np.min(np.diff(stats.times))) if stats.times.size > 1 else 1.0
    omega_max = 0.5 * math.pi / spacing
    fits, segments, alphas, spans, total = {}, [], [], [], 0
    for name, ref in targets.items():
        dev = (stats.mean[:, MOMENT_NAMES.index(name)] - ref) / abs(ref)
        rel = np.abs(dev)
        inside = np.flatnonzero((rel >= lo) & (rel <= hi))
        if inside.size < min_points:
            fits[name] = None
            continue
        i0, i1 = inside[0], inside[-1]
        t = stats.times[i0:i1 + 1]
        slope = np.polyfit(stats.times[inside], np.log(rel[inside]), 1)[0]
        alpha0 = max(-slope, 1e-6)
        alpha, omega, (amp,), rms = _fit_damped([(t, dev[i0:i1 + 1])], alpha0, omega_max)
        fits[name] = RelaxationFit(name, alpha, omega, amp, rms, int(inside.size), (float(t[0]), float(t[-1])))
        segments.append((t, dev[i0:i1 + 1]))
        alphas.append(alpha0)
        spans.append((float(t[0]), float(t[-1])))
        total += int(inside.size)
    if not segments:
        raise WindowTooShort(f"no moment has {min_points} records with deviation in {window} of scale")
    alpha, omega, amps, rms = _fit_damped(segments, float(np.median(alphas)), omega_max)
    fits["joint"] = RelaxationFit("joint", alpha, omega, max(amps), rms, total,
                                  (min(s[0] for s in spans), max(s[1] for s in spans)))
    return fits


@dataclass(frozen=True)
class ConstraintSeries:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    def max_abs_mean(self) -> float:
        return float(np.max(np.abs(self.mean)))


def constraint_monitor(stats: EnsembleStats) -> ConstraintSeries:
    """Ensemble mean and spread of ``4 var_q var_p - 4 covar^2 - 1`` per record.

    Negative values flag moment sets that no quantum state can have; they
    are reported, never corrected.
    """
    return ConstraintSeries(stats.times, stats.defect_mean, stats.defect_std, stats.count)


def stats_to_dict(stats: EnsembleStats, cfg: EnsembleConfig | None = None) -> dict:
    out = {}
    if cfg is not None:
        c = asdict(cfg)
        c["initial"]["deviation"] = list(c["initial"]["deviation"])
        out["config"] = c
    out["final"] = stats.final_summary()
    out["rates"] = stats.rates
    out["n_failed"] = stats.n_failed
    out["failed"] = [{"trajectory": i, "reason": msg} for i, msg in stats.failed]
    out["constraint_defect_final"] = {"mean": float(stats.defect_mean[-1]),
                                      "std": float(stats.defect_std[-1])}
    return out
