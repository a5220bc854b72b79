import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from pqsse import MomentState, NoiseIncrement, fixed_point, make_path, validate_params
from pqsse import grid as gridmod
from pqsse.analytic import closed_form_eigenvalues, stationary_packet
from pqsse.core import GridError, NotNormalized, OffLattice, PacketEscaped, StepUnstable
from pqsse.grid import (
    GridSpec,
    WaveFunction,
    expectations,
    gaussian_packet,
    recenter,
    resolution_check,
    sse_step,
    simulate,
    squeezed_packet,
)
from pqsse.moments import covariance_drift
from pqsse.noise import NoisePath, make_paths


def fixed_packet(params, n_points=1024, q_mean=0.0, p_mean=0.0):
    fp = fixed_point(params)
    return stationary_packet(params, fp, q_mean, p_mean, GridSpec.for_fixed_point(fp, n_points))


# ---------------------------------------------------------------------------
# lattice

@pytest.mark.parametrize("n", [100, 64, 1000, 0, 2.0, True])
def test_grid_rejects_bad_point_count(n):
    with pytest.raises(GridError):
        GridSpec(n, 10.0)


@pytest.mark.parametrize("length", [0.0, -1.0, math.inf, math.nan])
def test_grid_rejects_bad_length(length):
    with pytest.raises(GridError):
        GridSpec(128, length)


def test_lattice_geometry():
    g = GridSpec(256, 20.0)
    assert g.dq == pytest.approx(20.0 / 256)
    assert g.dp == pytest.approx(2 * math.pi / 20.0)
    assert g.p_max == pytest.approx(math.pi * 256 / 20.0)
    assert g.q[0] == -10.0 and g.q[128] == pytest.approx(0.0)
    assert np.max(np.abs(g.p)) == pytest.approx(g.p_max)


# ---------------------------------------------------------------------------
# expectations

def test_boosted_packet(qmupl):
    p, fp = qmupl
    grid = GridSpec.for_fixed_point(fp, 1024)
    rest = expectations(stationary_packet(p, fp, 0.0, 0.0, grid))
    boosted = expectations(stationary_packet(p, fp, 0.0, 2.0, grid))
    assert boosted.p_mean == pytest.approx(2.0, abs=1e-6)
    assert (boosted.var_q, boosted.var_p, boosted.covar) == pytest.approx(
        (rest.var_q, rest.var_p, rest.covar), abs=1e-6)


def test_real_gaussian_has_zero_covariance():
    grid = GridSpec(512, 30.0)
    s = expectations(gaussian_packet(grid, 0.0, 0.0, 1.3, 0.0))
    assert abs(s.covar) < 1e-8
    assert s.var_q == pytest.approx(1.3, abs=1e-10)
    assert s.var_p == pytest.approx(1 / (4 * 1.3), abs=1e-10)


def test_spectral_exactness_at_256_points():
    grid = GridSpec(256, 24.0)
    k0 = 5 * grid.dp  # lattice-aligned momentum
    var_q, covar = 0.9, 0.3
    s = expectations(gaussian_packet(grid, 0.5, k0, var_q, covar))
    want = (0.5, k0, var_q, (1 + 4 * covar**2) / (4 * var_q), covar)
    assert s.as_tuple() == pytest.approx(want, abs=1e-6)


def test_unnormalized_state_is_rejected():
    grid = GridSpec(256, 24.0)
    wf = gaussian_packet(grid, 0.0, 0.0, 1.0)
    with pytest.raises(NotNormalized):
        expectations(WaveFunction(grid, 1.001 * wf.amplitudes))


# ---------------------------------------------------------------------------
# stepping

@pytest.mark.parametrize("gp", [0.0, 0.5])
def test_zero_noise_step_keeps_stationary_packet(gp):
    params = validate_params(1.0, 1.0, gp)
    fp = fixed_point(params)
    wf = fixed_packet(params)
    dt = 1e-3
    out, drift = sse_step(wf, params, NoiseIncrement(0.0, 0.0), dt)
    before, after = expectations(wf).as_tuple(), expectations(out).as_tuple()
    scale = np.array([fp.sigma_q, fp.sigma_p, fp.var_q_inf, fp.var_p_inf, fp.covar_inf])
    assert np.all(np.abs(np.subtract(after, before)) < 1e-3 * dt * scale)
    assert out.norm() == pytest.approx(1.0, abs=1e-12)


def free_gaussian(q, var0, t, m):
    """Analytic free evolution of exp(-q^2 / 4 var0), normalized."""
    a = 1.0 / (4 * var0 * (1 + 1j * t / (2 * m * var0)))
    psi = np.exp(-a * q**2)
    return psi


def phase_aligned_error(psi, ref, dq):
    ref = ref / math.sqrt(np.sum(np.abs(ref) ** 2) * dq)
    overlap = np.vdot(ref, psi)
    return float(np.max(np.abs(psi - ref * overlap / abs(overlap))))


@pytest.mark.parametrize("scheme", ["exponential", "euler"])
def test_free_packet_one_step(scheme):
    params = validate_params(1.0, 1e-12, 0.0)
    grid = GridSpec(256, 24.0)
    var0 = 1.0
    wf = gaussian_packet(grid, 0.0, 0.0, var0)
    errors = []
    for dt in (4e-3, 2e-3, 1e-3):
        out, _ = sse_step(wf, params, NoiseIncrement(0.0, 0.0), dt, scheme=scheme)
        errors.append(phase_aligned_error(out.amplitudes, free_gaussian(grid.q, var0, dt, 1.0), grid.dq))
    if scheme == "exponential":
        # kinetic factor applied exactly in momentum space
        assert max(errors) < 1e-10
    else:
        # local error of one Euler step is O(dt^2)
        assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.1)
        assert errors[1] / errors[2] == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("scheme, dt", [("exponential", 1e-3), ("euler", 1e-4)])
def test_norm_drift_is_first_order(default_params, scheme, dt):
    params, fp = default_params
    wf0 = fixed_packet(params, 256)
    medians = []
    for h in (dt, dt / 2):
        # same standard normals at both step sizes, rescaled
        path = make_path(77, 0, params, h, 100)
        wf, drifts = wf0, []
        for inc in path:
            wf, d = sse_step(wf, params, inc, h, scheme=scheme)
            drifts.append(d)
        medians.append(np.median(drifts))
    assert 1.7 <= medians[0] / medians[1] <= 2.3


def test_norm_is_a_martingale(default_params):
    """The mean norm change per step vanishes to within sampling error."""
    params, fp = default_params
    wf = fixed_packet(params, 256)
    grid = wf.grid
    n = 4000
    inc = make_path(3, 0, params, 1e-3, n).increments
    psi = np.tile(wf.amplitudes, (n, 1))
    out = gridmod._step_arrays(psi, grid, params, np.zeros(n), np.zeros(n),
                               inc[:, 0], inc[:, 1], 1e-3, "exponential")
    change = np.sum(np.abs(out) ** 2, axis=1) * grid.dq - 1.0
    assert abs(change.mean()) < 4 * change.std(ddof=1) / math.sqrt(n)


def test_euler_zero_noise_is_not_stationary(default_params):
    # documents why the exponential scheme is the default
    params, fp = default_params
    wf = fixed_packet(params, 256)
    for _ in range(200):
        wf, _ = sse_step(wf, params, NoiseIncrement(0.0, 0.0), 1e-4, scheme="euler")
    rel = abs(expectations(wf).var_q / fp.var_q_inf - 1)
    assert rel > 1e-3


def test_step_unstable_for_large_euler_step(default_params):
    # dt far above the Euler stiffness bound: lattice-scale modes grow until the norm jumps
    params, _ = default_params
    wf = fixed_packet(params, 1024)
    with pytest.raises(StepUnstable):
        for _ in range(500):
            wf, _ = sse_step(wf, params, NoiseIncrement(0.0, 0.0), 1e-3, scheme="euler")


def test_euler_blowup_is_caught_in_simulate(default_params):
    params, _ = default_params
    wf = fixed_packet(params, 1024)
    with pytest.raises((StepUnstable, PacketEscaped)) as info:
        simulate(wf, params, NoisePath.zeros(1e-3, 3000), scheme="euler")
    assert info.value.step_index < 3000


def test_unknown_scheme(default_params):
    params, _ = default_params
    with pytest.raises(ValueError):
        sse_step(fixed_packet(params, 256), params, NoiseIncrement(0.0, 0.0), 1e-3, scheme="rk4")


# ---------------------------------------------------------------------------
# covariance flow

def test_zero_noise_covariance_follows_riccati(default_params):
    params, fp = default_params
    grid = GridSpec.for_fixed_point(fp, 512)
    wf = squeezed_packet(grid, fp, 4.0)
    s0 = expectations(wf)
    dt, n = 1e-3, 1000
    traj = simulate(wf, params, NoisePath.zeros(dt, n), record_every=100)
    t = np.array([r.time for r in traj.records])
    sol = solve_ivp(lambda _, y: covariance_drift(MomentState(0, 0, *y), params), (0, t[-1]),
                    [s0.var_q, s0.var_p, s0.covar], t_eval=t, rtol=1e-12, atol=1e-14, method="DOP853")
    got = np.array([r.moments.as_tuple()[2:] for r in traj.records])
    assert np.max(np.abs(got - sol.y.T)) < 5e-3


def test_covariance_is_noise_independent(default_params):
    """Gaussian shape evolves identically on every noise path."""
    params, fp = default_params
    grid = GridSpec.for_fixed_point(fp, 512)
    wf = squeezed_packet(grid, fp, 2.0)
    a = simulate(wf, params, make_path(1, 0, params, 1e-3, 300), record_every=50).array()
    b = simulate(wf, params, make_path(2, 0, params, 1e-3, 300), record_every=50).array()
    assert not np.allclose(a[:, 1], b[:, 1])
    assert np.max(np.abs(a[:, 3:6] - b[:, 3:6])) < 1e-9


# ---------------------------------------------------------------------------
# recentering

def test_recenter_identity(default_params):
    params, _ = default_params
    wf = fixed_packet(params, 256)
    assert np.array_equal(recenter(wf, 0.0, 0.0).amplitudes, wf.amplitudes)


def test_recenter_to_origin(default_params):
    params, fp = default_params
    grid = GridSpec.for_fixed_point(fp, 512)
    q0, p0 = 37 * grid.dq, 3 * grid.dp
    wf = stationary_packet(params, fp, q0, p0, grid)
    before = expectations(wf)
    moved = expectations(recenter(wf, q0, p0))
    assert (moved.q_mean, moved.p_mean) == pytest.approx((0.0, 0.0), abs=1e-10)
    assert (moved.var_q, moved.var_p, moved.covar) == pytest.approx(
        (before.var_q, before.var_p, before.covar), abs=1e-10)


def test_recenter_round_trip(default_params):
    params, _ = default_params
    wf = fixed_packet(params, 256, q_mean=0.3)
    g = wf.grid
    back = recenter(recenter(wf, 11 * g.dq, -4 * g.dp), -11 * g.dq, 4 * g.dp)
    assert np.max(np.abs(back.amplitudes - wf.amplitudes)) < 1e-12


def test_recenter_off_lattice(default_params):
    params, _ = default_params
    wf = fixed_packet(params, 256)
    with pytest.raises(OffLattice):
        recenter(wf, 0.3 * wf.grid.dq, 0.0)
    with pytest.raises(OffLattice):
        recenter(wf, 0.0, 0.5 * wf.grid.dp)


def test_long_drift_recenters_and_reports_lab_frame(default_params):
    params, fp = default_params
    grid = GridSpec.for_fixed_point(fp, 512)
    p0 = 12.0
    errors = []
    for dt in (2e-3, 1e-3):
        wf = stationary_packet(params, fp, 0.0, p0, grid)
        traj = simulate(wf, params, NoisePath.zeros(dt, int(round(2 / dt))), record_every=int(round(0.1 / dt)))
        arr = traj.array()
        # the packet travels ~24, beyond the box half-width of ~16
        assert abs(traj.offset[0]) > 0
        # smooth lab-frame centroid through the recentering events
        assert np.max(np.abs(np.diff(arr[:, 1], 2))) < 1e-3
        errors.append(np.max(np.abs(arr[:, 1] - p0 * arr[:, 0])))
        assert np.max(np.abs(arr[:, 1] - p0 * arr[:, 0])) < 1e-3 * p0 * 2
    # ballistic motion is reproduced at first order in dt
    assert errors[0] / errors[1] == pytest.approx(2.0, rel=0.1)


def test_packet_escape_without_recentering(default_params):
    params, fp = default_params
    grid = GridSpec.for_fixed_point(fp, 512)
    wf = stationary_packet(params, fp, 0.0, 12.0, grid)
    with pytest.raises(PacketEscaped) as info:
        simulate(wf, params, NoisePath.zeros(1e-3, 2000), record_every=10, recenter_enabled=False)
    assert info.value.step_index is not None and info.value.step_index < 2000


# ---------------------------------------------------------------------------
# resolution

def test_resolution_default_passes(default_params):
    params, fp = default_params
    grid = GridSpec.for_fixed_point(fp, 1024)
    assert resolution_check(grid, fp=fp, params=params, dt=1e-3).passed
    assert resolution_check(fixed_packet(params)).passed


def test_resolution_narrow_box(default_params):
    params, fp = default_params
    rep = resolution_check(GridSpec(1024, 5 * fp.sigma_q), fp=fp)
    assert "BoundaryMass" in rep.codes()
    assert "widen" in str(rep) or "box length" in str(rep)


def test_resolution_few_points(default_params):
    params, fp = default_params
    rep = resolution_check(GridSpec(128, 200 * fp.sigma_q), fp=fp)
    assert "MomentumCoverage" in rep.codes()


def test_resolution_large_dt(default_params):
    params, fp = default_params
    rep = resolution_check(GridSpec.for_fixed_point(fp, 1024), fp=fp, params=params, dt=0.5)
    assert rep.codes() == ["StepSize"]
    rep = resolution_check(GridSpec.for_fixed_point(fp, 1024), fp=fp, params=params, dt=1e-3, scheme="euler")
    assert rep.codes() == ["StepSize"]


def test_resolution_flags_edge_mass():
    grid = GridSpec(256, 16.0)
    psi = np.exp(-((grid.q - 6.0) ** 2) / 4.0).astype(complex)
    psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dq)
    assert "BoundaryMass" in resolution_check(WaveFunction(grid, psi)).codes()


def test_resolution_flags_momentum_aliasing():
    grid = GridSpec(128, 40.0)
    psi = np.exp(-(grid.q**2) / (4 * 0.01)).astype(complex)
    psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dq)
    assert "MomentumCoverage" in resolution_check(WaveFunction(grid, psi)).codes()


# ---------------------------------------------------------------------------
# statistics of short runs

def test_centroid_increment_statistics(qmupl):
    """Var of the centroid increments over short grid runs matches the Ito rates."""
    params, fp = qmupl
    grid = GridSpec.for_fixed_point(fp, 256)
    wf = stationary_packet(params, fp, 0.0, 0.0, grid)
    n, dt, steps = 10_000, 1e-3, 10
    horizon = dt * steps
    chunks = []
    for start in range(0, n, 2500):
        inc = make_paths(21, range(start, start + 2500), params, dt, steps)
        rec, *_rest, fails = gridmod.simulate_batch(np.tile(wf.amplitudes, (2500, 1)), grid, params,
                                                     inc, dt, record_every=steps)
        assert not fails
        chunks.append(rec[-1] - rec[0])
    delta = np.concatenate(chunks)
    dq, dp = delta[:, 0], delta[:, 1]
    want_q = 2 * fp.var_q_inf**2 * horizon  # gamma = 1, gamma' = 0
    want_p = 2 * fp.covar_inf**2 * horizon
    for x, want in ((dq, want_q), (dp, want_p)):
        v = x.var(ddof=1)
        se = math.sqrt(np.mean((x - x.mean()) ** 4) - v**2) / math.sqrt(x.size)
        assert abs(v - want) < 3 * se
        assert abs(x.mean()) < 3 * x.std(ddof=1) / math.sqrt(x.size)
    assert want_q / horizon == pytest.approx(1.0) and want_p / horizon == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# snapshots

def test_snapshot_round_trip(tmp_path, default_params):
    params, _ = default_params
    wf = fixed_packet(params, 128 * 2, q_mean=0.2)
    f = tmp_path / "snap.bin"
    wf.save_snapshot(f, time=1.5)
    raw = f.read_bytes()
    assert len(raw) == 24 + 16 * 256
    assert np.frombuffer(raw[:8], "<i8")[0] == 256
    back, t = gridmod.read_snapshot(f)
    assert t == 1.5
    assert back.grid == wf.grid
    assert np.array_equal(back.amplitudes, wf.amplitudes)


def test_snapshot_rejects_truncated(tmp_path, default_params):
    params, _ = default_params
    f = tmp_path / "snap.bin"
    f.write_bytes(gridmod.snapshot_bytes(fixed_packet(params, 256))[:-16])
    with pytest.raises(ValueError):
        gridmod.read_snapshot(f)
