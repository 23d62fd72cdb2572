"""Randomized gradient, adjoint, and QC-invariance checks.

Each case builds a small random world (truth run, untrained surrogate,
untrained radiance emulator, conventional and radiance observations) and
verifies:

* every component of the window-cost gradient at the background against
  central finite differences of the cost;
* the tangent/adjoint dot-product identity for the surrogate step, the
  radiance emulator, the true-dynamics RK4 step, and the composed
  window map;
* that quality-control rejections make the cost and gradient exactly
  insensitive to the rejected record values, with accept/reject counts
  matching an independent record-by-record oracle.

The suite runs from fixed seeds and is the release gate behind the
`gradcheck` command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynParams, default_initial_state, generate_nature_run
from .forecast import Normalization, PerfectModel, build_forecast_model
from .fourdvar import (
    QC_SIGMA_FACTOR,
    DawPlan,
    apply_qc,
    compute_clim_stats,
    cost,
    grad_at_background,
)
from .grid import GridSpec, StateField
from .obsops import (
    RADIANCE_HIGH,
    RADIANCE_LOW,
    RadianceTruthSpec,
    build_emulator,
    radiance_truth,
    sample_conventional,
)
from .fourdvar import StreamObs


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


class CorruptedAdjointModel:
    """Negative-control wrapper: the adjoint is deliberately scaled wrong."""

    def __init__(self, inner, factor: float = 1.001):
        self.inner = inner
        self.factor = factor
        self.leads = inner.leads

    def step(self, state, lead):
        return self.inner.step(state, lead)

    def step_jvp(self, state, lead, dx):
        return self.inner.step_jvp(state, lead, dx)

    def step_vjp(self, state, lead, upstream):
        return self.factor * self.inner.step_vjp(state, lead, upstream)


def random_case(seed: int, offsets=(0, 3, 6, 9)):
    """A small random assimilation problem with both observation kinds."""
    rng = np.random.default_rng(seed)
    V = int(rng.integers(1, 4))
    H = int(rng.choice([4, 6, 8]))
    W = int(rng.choice([8, 12, 16]))
    spec = GridSpec(V, H, W)
    params = DynParams.standard(V, c_merid=0.4, c_vert=0.4)
    x0 = default_initial_state(spec, params, seed=seed)
    nature = generate_nature_run(x0, params, offsets[-1] + 3, 1, spinup_hours=120)

    norm = Normalization.from_states(nature.states)
    surrogate = build_forecast_model(V, norm, hidden=(12,), seed=seed + 1)
    mask_deg = float(rng.choice([60.0, 90.0]))
    n_chan = int(rng.integers(2, 5))
    weights = rng.random((n_chan, V)) + 0.2
    weights /= weights.sum(axis=1, keepdims=True)
    rt = RadianceTruthSpec("sat", weights, noise_sigma=0.5, lat_mask_deg=mask_deg)
    emulator = build_emulator(V, n_chan, norm.mean, norm.std, W, "sat", hidden=(10,),
                              seed=seed + 2)
    emulator.resid_sigma = 0.5 + rng.random(n_chan)

    clim = compute_clim_stats(nature.states, {"sat": rt})
    sigma = 0.05 * clim.state_std
    conv_by, rad_by = {}, {}
    for o in offsets:
        truth = nature.at_time(o)
        conv_by[o] = sample_conventional(truth, 0.4, sigma, seed=seed + 10 + o)
        rad_by[o] = radiance_truth(truth, rt, 0.5, seed=seed + 50 + o)
    streams = [
        StreamObs("conv", "conv", conv_by),
        StreamObs("sat", "rad", rad_by, emulator, lat_mask_deg=mask_deg),
    ]
    plan = DawPlan(0, offsets, offsets[-1] + 3)
    return {
        "spec": spec, "params": params, "nature": nature, "surrogate": surrogate,
        "emulator": emulator, "streams": streams, "plan": plan, "clim": clim,
        "x_b": nature.at_time(0), "seed": seed,
    }


def check_fd_gradient(case, model=None, h: float = 1e-6, rel_tol: float = 1e-5):
    """Every gradient component against central finite differences of cost()."""
    model = model or case["surrogate"]
    x_b, plan, clim = case["x_b"], case["plan"], case["clim"]
    gf, _, filtered = grad_at_background(x_b, plan, case["streams"], model, clim)
    spec = case["spec"]
    worst = 0.0
    for v in range(spec.V):
        for i in range(spec.H):
            for j in range(spec.W):
                xp, xm = x_b.data.copy(), x_b.data.copy()
                xp[v, i, j] += h
                xm[v, i, j] -= h
                jp = cost(StateField(spec, 0, xp), x_b, plan, filtered, model)
                jm = cost(StateField(spec, 0, xm), x_b, plan, filtered, model)
                fd = (jp - jm) / (2 * h)
                g = gf.data[v, i, j]
                denom = max(abs(fd), abs(g), 1e-10)
                worst = max(worst, abs(g - fd) / denom)
    return worst <= rel_tol, worst


def _dot_identity(step_jvp, step_vjp, shape, rng, n_pairs, tol):
    worst = 0.0
    for _ in range(n_pairs):
        dx = rng.standard_normal(shape)
        u = rng.standard_normal(shape)
        lhs = float(np.sum(step_jvp(dx) * u))
        rhs = float(np.sum(dx * step_vjp(u)))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
    return worst <= tol, worst


def check_adjoint_identities(case, n_pairs: int = 100, tol: float = 1e-10,
                             model=None):
    """Dot-product identities for every linearized operator in the engine."""
    rng = np.random.default_rng(case["seed"] + 99)
    x_b = case["x_b"]
    spec = case["spec"]
    surrogate = model or case["surrogate"]
    perfect = PerfectModel(case["params"])
    results = {}

    results["surrogate_step"] = _dot_identity(
        lambda dx: surrogate.step_jvp(x_b, 3, dx),
        lambda u: surrogate.step_vjp(x_b, 3, u),
        spec.shape, rng, n_pairs, tol)
    results["rk4_step"] = _dot_identity(
        lambda dx: perfect.step_jvp(x_b, 3, dx),
        lambda u: perfect.step_vjp(x_b, 3, u),
        spec.shape, rng, n_pairs, tol)

    em = case["emulator"]
    cols = x_b.data[:, spec.H // 2, :].T[:1]  # one column
    scan, zen = [spec.W // 3], [0.9]
    C = em.n_channels

    def em_jvp(dx):
        return em.jvp_cols(cols, scan, zen, dx[None])[0]

    def em_vjp(u):
        _, g = em.adjoint_cols(cols, scan, zen, u[None])
        return g[0]

    worst = 0.0
    for _ in range(n_pairs):
        dx = rng.standard_normal(spec.V)
        u = rng.standard_normal(C)
        lhs = float(em_jvp(dx) @ u)
        rhs = float(dx @ em_vjp(u))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
    results["emulator"] = (worst <= tol, worst)

    # composed window map: propagate three legs, read one column through the
    # emulator; tangent forward vs adjoint pullback of the same functional
    def composed_tangent(m, dx):
        cur, d = x_b, dx
        for lead in (3, 3, 3):
            d = m.step_jvp(cur, lead, d)
            cur = m.step(cur, lead)
        return em.jvp_cols(cur.data[:, spec.H // 2, 0][None], scan, zen,
                           d[:, spec.H // 2, 0][None])[0]

    def composed_adjoint(m, u):
        chain = []
        cur = x_b
        for lead in (3, 3, 3):
            chain.append((cur, lead))
            cur = m.step(cur, lead)
        _, gcol = em.adjoint_cols(cur.data[:, spec.H // 2, 0][None], scan, zen,
                                  u[None])
        adj = np.zeros(spec.shape)
        adj[:, spec.H // 2, 0] = gcol[0]
        for state_before, lead in reversed(chain):
            adj = m.step_vjp(state_before, lead, adj)
        return adj

    for name, m in (("composed_surrogate", surrogate), ("composed_rk4", perfect)):
        worst = 0.0
        for _ in range(min(n_pairs, 25)):
            dx = rng.standard_normal(spec.shape)
            u = rng.standard_normal(C)
            lhs = float(composed_tangent(m, dx) @ u)
            rhs = float(np.sum(dx * composed_adjoint(m, u)))
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
        results[name] = (worst <= tol, worst)
    return results


def check_qc_invariance(case, model=None):
    """Rejected records must leave J and its gradient exactly unchanged."""
    model = model or case["surrogate"]
    x_b, plan, clim = case["x_b"], case["plan"], case["clim"]
    streams = case["streams"]
    conv = streams[0]
    # plant a wild record far outside the innovation gate
    batch = conv.by_offset[plan.offsets[0]]
    if batch.n == 0:
        return True, "no records"
    batch.value[0] = (x_b.data[batch.v[0], batch.i[0], batch.j[0]]
                      + 8.0 * clim.state_std[batch.v[0]])
    g1, rep1, f1 = grad_at_background(x_b, plan, streams, model, clim)
    j1 = cost(x_b, x_b, plan, f1, model)
    if rep1.rejected("conv") < 1:
        return False, "planted record was not rejected"
    batch.value[0] += 10.0 * batch.sigma[0]
    g2, rep2, f2 = grad_at_background(x_b, plan, streams, model, clim)
    j2 = cost(x_b, x_b, plan, f2, model)
    same = (j1 == j2) and np.array_equal(g1.data, g2.data)
    batch.value[0] -= 20.0 * batch.sigma[0]
    g3, rep3, f3 = grad_at_background(x_b, plan, streams, model, clim)
    j3 = cost(x_b, x_b, plan, f3, model)
    same = same and (j1 == j3) and np.array_equal(g1.data, g3.data)

    # accept/reject counts against an independent record-by-record oracle
    from .fourdvar import window_states

    states = window_states(x_b, plan, model)
    for stream in streams:
        acc = rej = 0
        for o in plan.offsets:
            b = stream.by_offset.get(o)
            if b is None:
                continue
            for r in range(b.n):
                if stream.kind == "conv":
                    pred = states[o].data[b.v[r], b.i[r], b.j[r]]
                    std = clim.state_std[b.v[r]]
                    bad = abs(b.value[r] - pred) > QC_SIGMA_FACTOR * std
                else:
                    col = states[o].data[:, b.i[r], b.j[r]]
                    pred = stream.operator.apply_cols(col[None], [b.scan[r]],
                                                      [b.zen[r]])[0, b.c[r]]
                    std = clim.channel_std[stream.name][b.c[r]]
                    lat = x_b.spec.lats[b.i[r]]
                    bad = (b.value[r] < RADIANCE_LOW or b.value[r] > RADIANCE_HIGH
                           or abs(lat) > stream.lat_mask_deg
                           or abs(b.value[r] - pred) > QC_SIGMA_FACTOR * std)
                if bad:
                    rej += 1
                else:
                    acc += 1
        got = rep3.streams.get(stream.name, {"accepted": 0})
        if got["accepted"] != acc or rep3.rejected(stream.name) != rej:
            return False, f"count mismatch for {stream.name}"
    return same, "exact" if same else "J or gradient changed"


def run_suite(seed: int = 0, n_cases: int = 20, fd_cases: int | None = None,
              n_pairs: int = 100) -> list[CheckResult]:
    """The full randomized check suite; every row must pass on a healthy build."""
    rows = []
    fd_cases = n_cases if fd_cases is None else fd_cases
    worst_fd = 0.0
    for k in range(fd_cases):
        case = random_case(seed + 1000 * k)
        ok, err = check_fd_gradient(case)
        worst_fd = max(worst_fd, err)
        if not ok:
            rows.append(CheckResult(f"fd_gradient[case {k}]", False, f"rel err {err:.2e}"))
    rows.append(CheckResult(f"fd_gradient[{fd_cases} cases]", worst_fd <= 1e-5,
                            f"max rel err {worst_fd:.2e}"))

    case = random_case(seed + 7)
    for name, (ok, err) in check_adjoint_identities(case, n_pairs=n_pairs).items():
        rows.append(CheckResult(f"adjoint[{name}]", ok, f"max rel err {err:.2e}"))

    qc_ok_all = True
    for k in range(min(n_cases, 5)):
        case = random_case(seed + 333 * k + 11)
        ok, detail = check_qc_invariance(case)
        qc_ok_all = qc_ok_all and ok
        if not ok:
            rows.append(CheckResult(f"qc_invariance[case {k}]", False, detail))
    rows.append(CheckResult("qc_invariance", qc_ok_all, "exact insensitivity"))
    return rows
