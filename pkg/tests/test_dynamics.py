import numpy as np
import pytest

from deskvar.dynamics import (
    DynParams,
    default_initial_state,
    generate_nature_run,
    step_rk4,
    step_rk4_jvp,
    step_rk4_vjp,
    tendency,
    tendency_arr,
    tendency_jvp_arr,
    tendency_vjp_arr,
)
from deskvar.errors import NonFiniteBlowupError
from deskvar.grid import GridSpec, StateField


def _tendency_loop_oracle(a, p):
    """Direct pointwise evaluation of the stencil formula."""
    V, H, W = a.shape
    out = np.zeros_like(a)
    for v in range(V):
        for i in range(H):
            for j in range(W):
                adv = (a[v, i, (j + 1) % W] - a[v, i, (j - 2) % W]) * a[v, i, (j - 1) % W]
                val = adv - a[v, i, j] + p.forcing[v]
                iu, idn = min(i + 1, H - 1), max(i - 1, 0)
                val += p.c_merid * (a[v, iu, j] - 2 * a[v, i, j] + a[v, idn, j])
                vu, vdn = min(v + 1, V - 1), max(v - 1, 0)
                val += p.c_vert * (a[vu, i, j] - 2 * a[v, i, j] + a[vdn, i, j])
                out[v, i, j] = val
    return out


def test_tendency_zero_everything():
    spec = GridSpec(2, 4, 8)
    p = DynParams(np.zeros(2), 0.0, 0.0)
    t = tendency(StateField(spec, 0, np.zeros(spec.shape)), p)
    np.testing.assert_array_equal(t.data, 0.0)


def test_tendency_lorenz96_fixed_point():
    spec = GridSpec(2, 4, 8)
    p = DynParams(np.full(2, 8.0), 0.0, 0.0)
    x = StateField(spec, 0, np.full(spec.shape, 8.0))
    np.testing.assert_allclose(tendency(x, p).data, 0.0, atol=1e-12)


def test_tendency_matches_loop_oracle():
    rng = np.random.default_rng(5)
    p = DynParams(rng.standard_normal(3), c_merid=0.4, c_vert=0.7)
    a = rng.standard_normal((3, 5, 9))
    np.testing.assert_allclose(tendency_arr(a, p), _tendency_loop_oracle(a, p), atol=1e-13)


def test_tendency_stencil_footprint():
    spec = GridSpec(3, 6, 12)
    p = DynParams(np.zeros(3), c_merid=0.3, c_vert=0.3)
    base = np.zeros(spec.shape)
    bumped = base.copy()
    v0, i0, j0 = 1, 3, 5
    bumped[v0, i0, j0] = 1.0
    diff = tendency_arr(bumped, p) - tendency_arr(base, p)
    nz = np.argwhere(diff != 0)
    for v, i, j in nz:
        dj = (j - j0) % spec.W
        dj = dj - spec.W if dj > spec.W // 2 else dj
        assert abs(v - v0) <= 1 and abs(i - i0) <= 1 and -2 <= dj <= 2


def test_rk4_fixed_point_invariance():
    spec = GridSpec(2, 4, 8)
    p = DynParams(np.full(2, 8.0), 0.0, 0.0)
    x = StateField(spec, 0, np.full(spec.shape, 8.0))
    y = step_rk4(x, p, 24)
    assert y.time == 24
    np.testing.assert_allclose(y.data, x.data, atol=1e-10)


def test_rk4_fourth_order_convergence():
    # same 24-hour span integrated with coarse/half/quarter substeps; the
    # one-setting error against the finest reference shrinks ~16x per halving
    spec = GridSpec(1, 2, 8)
    x = default_initial_state(spec, DynParams.standard(1), seed=1)
    errs = []
    for dt in (1.0, 0.5, 0.25):
        p = DynParams(np.full(1, 8.0), 0.0, 0.0, dt_int=dt)
        ref = DynParams(np.full(1, 8.0), 0.0, 0.0, dt_int=dt / 8)
        coarse = step_rk4(x, p, 24).data
        fine = step_rk4(x, ref, 24).data
        errs.append(np.max(np.abs(coarse - fine)))
    r1 = errs[0] / errs[1]
    r2 = errs[1] / errs[2]
    assert 10 < r1 < 24
    assert 10 < r2 < 24


def test_chaos_separation_growth():
    spec = GridSpec(1, 2, 8)
    p = DynParams.standard(1, c_merid=0.0, c_vert=0.0)
    x = default_initial_state(spec, p, seed=2)
    y = x.copy()
    y.data[0, 0, 0] += 1e-8
    xs, ys = x, y
    sep0 = 1e-8
    for _ in range(10):
        xs = step_rk4(xs, p, 24)
        ys = step_rk4(ys, p, 24)
    sep = np.max(np.abs(xs.data - ys.data))
    assert sep > 100 * sep0


def test_rk4_blowup_detection():
    spec = GridSpec(1, 2, 8)
    p = DynParams(np.full(1, 8.0))
    rng = np.random.default_rng(0)
    # large non-uniform field: the quadratic advection term explodes
    x = StateField(spec, 0, 9e5 * rng.standard_normal(spec.shape))
    with pytest.raises(NonFiniteBlowupError):
        step_rk4(x, p, 200)


def test_nature_run_counts_and_determinism():
    spec = GridSpec(2, 3, 8)
    p = DynParams.standard(2)
    x0 = default_initial_state(spec, p, seed=4)
    run = generate_nature_run(x0, p, length_hours=12, cadence_hours=3)
    assert run.times == [0, 3, 6, 9, 12]
    short = generate_nature_run(x0, p, length_hours=0, cadence_hours=3)
    assert short.times == [0]
    np.testing.assert_array_equal(short.states[0].data, x0.data)
    again = generate_nature_run(x0, p, length_hours=12, cadence_hours=3)
    for a, b in zip(run.states, again.states):
        np.testing.assert_array_equal(a.data, b.data)


def test_nature_run_spinup_resets_clock():
    spec = GridSpec(1, 2, 8)
    p = DynParams.standard(1)
    x0 = default_initial_state(spec, p, seed=9)
    run = generate_nature_run(x0, p, length_hours=6, cadence_hours=3, spinup_hours=48)
    assert run.times[0] == 0
    np.testing.assert_array_equal(run.states[0].data, step_rk4(x0, p, 48).data)


def test_tendency_jvp_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = DynParams(rng.standard_normal(2), c_merid=0.5, c_vert=0.3)
    a = rng.standard_normal((2, 4, 8))
    da = rng.standard_normal(a.shape)
    h = 1e-7
    fd = (tendency_arr(a + h * da, p) - tendency_arr(a - h * da, p)) / (2 * h)
    np.testing.assert_allclose(tendency_jvp_arr(a, da, p), fd, rtol=1e-6, atol=1e-8)


def test_tendency_vjp_adjoint_identity():
    rng = np.random.default_rng(8)
    p = DynParams(rng.standard_normal(2), c_merid=0.5, c_vert=0.3)
    a = rng.standard_normal((2, 4, 8))
    for _ in range(20):
        dx = rng.standard_normal(a.shape)
        u = rng.standard_normal(a.shape)
        lhs = np.sum(tendency_jvp_arr(a, dx, p) * u)
        rhs = np.sum(dx * tendency_vjp_arr(a, u, p))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_rk4_adjoint_identity_and_fd():
    rng = np.random.default_rng(9)
    spec = GridSpec(2, 3, 8)
    p = DynParams.standard(2, c_merid=0.4, c_vert=0.4)
    x = default_initial_state(spec, p, seed=10)
    dx = rng.standard_normal(spec.shape)
    u = rng.standard_normal(spec.shape)
    lhs = np.sum(step_rk4_jvp(x, p, 6, dx) * u)
    rhs = np.sum(dx * step_rk4_vjp(x, p, 6, u))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))
    h = 1e-6
    xp = StateField(spec, 0, x.data + h * dx)
    xm = StateField(spec, 0, x.data - h * dx)
    fd = np.sum((step_rk4(xp, p, 6).data - step_rk4(xm, p, 6).data) / (2 * h) * u)
    assert abs(lhs - fd) < 1e-5 * max(1.0, abs(lhs))
