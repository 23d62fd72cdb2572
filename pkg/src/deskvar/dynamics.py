"""Synthetic truth dynamics: multi-level Lorenz-96 rows with diffusion coupling.

Each latitude row is a Lorenz-96 ring in longitude; rows are coupled by a
meridional diffusion term and levels by a vertical diffusion term, both with
clamped (one-sided) boundaries. Longitude is periodic.

Time bookkeeping: the state clock runs in integer model-hours. One model-hour
advances the nondimensional Lorenz-96 time by ``hour_scale`` units (default
0.05), which stretches the classic F=8 error-doubling time of ~0.4 units to
~8 model-hours and therefore gives multi-day predictability. The integrator
substep ``dt_int`` is expressed in model-hours.

Exact tangent-linear (jvp) and adjoint (vjp) companions of the tendency and
of the RK4 step are provided; they power the perfect-model gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteBlowupError
from .grid import GridSpec, StateField

BLOWUP_LIMIT = 1.0e6


@dataclass(frozen=True)
class DynParams:
    """Forcing and coupling coefficients of the truth system."""

    forcing: np.ndarray = field(repr=False)  # (V,)
    c_merid: float = 0.0
    c_vert: float = 0.0
    dt_int: float = 0.05  # integrator substep, model-hours
    hour_scale: float = 0.05  # nondimensional time units per model-hour

    def __post_init__(self):
        f = np.atleast_1d(np.asarray(self.forcing, dtype=np.float64))
        object.__setattr__(self, "forcing", f)
        if self.dt_int <= 0 or self.hour_scale <= 0:
            raise ValueError("dt_int and hour_scale must be positive")
        if self.c_merid < 0 or self.c_vert < 0 or not np.all(np.isfinite(f)):
            raise ValueError("coefficients must be finite and couplings non-negative")

    @classmethod
    def standard(cls, V: int, forcing: float = 8.0, c_merid: float = 0.5,
                 c_vert: float = 0.5, dt_int: float = 0.05,
                 hour_scale: float = 0.05) -> "DynParams":
        return cls(np.full(V, float(forcing)), c_merid, c_vert, dt_int, hour_scale)

    def substeps(self, hours: int) -> int:
        n = int(round(hours / self.dt_int))
        if n <= 0 or abs(n * self.dt_int - hours) > 1e-9:
            raise ValueError(f"{hours} model-hours is not a multiple of dt_int={self.dt_int}")
        return n


def _shift_up(a: np.ndarray, axis: int) -> np.ndarray:
    """result[k] = a[min(k+1, n-1)] along axis (clamped)."""
    idx = np.arange(1, a.shape[axis] + 1)
    idx[-1] = a.shape[axis] - 1
    return np.take(a, idx, axis=axis)


def _shift_dn(a: np.ndarray, axis: int) -> np.ndarray:
    """result[k] = a[max(k-1, 0)] along axis (clamped)."""
    idx = np.arange(-1, a.shape[axis] - 1)
    idx[0] = 0
    return np.take(a, idx, axis=axis)


def _shift_up_adj(u: np.ndarray, axis: int) -> np.ndarray:
    g = np.zeros_like(u)
    src = np.moveaxis(u, axis, 0)
    dst = np.moveaxis(g, axis, 0)
    dst[1:] += src[:-1]
    dst[-1] += src[-1]
    return g


def _shift_dn_adj(u: np.ndarray, axis: int) -> np.ndarray:
    g = np.zeros_like(u)
    src = np.moveaxis(u, axis, 0)
    dst = np.moveaxis(g, axis, 0)
    dst[:-1] += src[1:]
    dst[0] += src[0]
    return g


def _lap(a: np.ndarray, axis: int) -> np.ndarray:
    return _shift_up(a, axis) - 2.0 * a + _shift_dn(a, axis)


def _lap_adj(u: np.ndarray, axis: int) -> np.ndarray:
    return _shift_up_adj(u, axis) - 2.0 * u + _shift_dn_adj(u, axis)


def tendency_arr(a: np.ndarray, p: DynParams) -> np.ndarray:
    """dX/dt in nondimensional time units for the raw (V, H, W) array."""
    xp1 = np.roll(a, -1, axis=2)  # X_{j+1}
    xm2 = np.roll(a, 2, axis=2)   # X_{j-2}
    xm1 = np.roll(a, 1, axis=2)   # X_{j-1}
    out = (xp1 - xm2) * xm1 - a + p.forcing[:, None, None]
    if p.c_merid:
        out += p.c_merid * _lap(a, axis=1)
    if p.c_vert:
        out += p.c_vert * _lap(a, axis=0)
    return out


def tendency_jvp_arr(a: np.ndarray, da: np.ndarray, p: DynParams) -> np.ndarray:
    """Directional derivative of tendency_arr at a in direction da."""
    xp1 = np.roll(a, -1, axis=2)
    xm2 = np.roll(a, 2, axis=2)
    xm1 = np.roll(a, 1, axis=2)
    dp1 = np.roll(da, -1, axis=2)
    dm2 = np.roll(da, 2, axis=2)
    dm1 = np.roll(da, 1, axis=2)
    out = (dp1 - dm2) * xm1 + (xp1 - xm2) * dm1 - da
    if p.c_merid:
        out += p.c_merid * _lap(da, axis=1)
    if p.c_vert:
        out += p.c_vert * _lap(da, axis=0)
    return out


def tendency_vjp_arr(a: np.ndarray, u: np.ndarray, p: DynParams) -> np.ndarray:
    """Adjoint of the linearized tendency: gradient of <u, tendency(a)> wrt a."""
    xp1 = np.roll(a, -1, axis=2)
    xm2 = np.roll(a, 2, axis=2)
    xm1 = np.roll(a, 1, axis=2)
    g = np.roll(u * xm1, 1, axis=2)            # through X_{j+1}
    g -= np.roll(u * xm1, -2, axis=2)          # through X_{j-2}
    g += np.roll(u * (xp1 - xm2), -1, axis=2)  # through X_{j-1}
    g -= u
    if p.c_merid:
        g += p.c_merid * _lap_adj(u, axis=1)
    if p.c_vert:
        g += p.c_vert * _lap_adj(u, axis=0)
    return g


def tendency(x: StateField, p: DynParams) -> StateField:
    if x.spec.V != p.forcing.shape[0]:
        raise ValueError("forcing levels do not match grid levels")
    return x.with_data(tendency_arr(x.data, p))


def _rk4_substep(a: np.ndarray, h: float, p: DynParams) -> np.ndarray:
    k1 = tendency_arr(a, p)
    k2 = tendency_arr(a + 0.5 * h * k1, p)
    k3 = tendency_arr(a + 0.5 * h * k2, p)
    k4 = tendency_arr(a + h * k3, p)
    return a + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_substep_jvp(a: np.ndarray, da: np.ndarray, h: float, p: DynParams) -> np.ndarray:
    k1 = tendency_arr(a, p)
    dk1 = tendency_jvp_arr(a, da, p)
    a2 = a + 0.5 * h * k1
    dk2 = tendency_jvp_arr(a2, da + 0.5 * h * dk1, p)
    k2 = tendency_arr(a2, p)
    a3 = a + 0.5 * h * k2
    dk3 = tendency_jvp_arr(a3, da + 0.5 * h * dk2, p)
    k3 = tendency_arr(a3, p)
    a4 = a + h * k3
    dk4 = tendency_jvp_arr(a4, da + h * dk3, p)
    return da + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)


def _rk4_substep_vjp(a: np.ndarray, u: np.ndarray, h: float, p: DynParams) -> np.ndarray:
    # recompute the stage points, then sweep the stages in reverse
    k1 = tendency_arr(a, p)
    a2 = a + 0.5 * h * k1
    k2 = tendency_arr(a2, p)
    a3 = a + 0.5 * h * k2
    k3 = tendency_arr(a3, p)
    a4 = a + h * k3

    abar = u.copy()
    k4bar = (h / 6.0) * u
    k3bar = (h / 3.0) * u
    k2bar = (h / 3.0) * u
    k1bar = (h / 6.0) * u

    g = tendency_vjp_arr(a4, k4bar, p)
    abar += g
    k3bar = k3bar + h * g
    g = tendency_vjp_arr(a3, k3bar, p)
    abar += g
    k2bar = k2bar + 0.5 * h * g
    g = tendency_vjp_arr(a2, k2bar, p)
    abar += g
    k1bar = k1bar + 0.5 * h * g
    abar += tendency_vjp_arr(a, k1bar, p)
    return abar


def step_rk4(x: StateField, p: DynParams, hours: int) -> StateField:
    """Advance `hours` model-hours with classical RK4 substeps of dt_int."""
    if hours == 0:
        return x.copy()
    n = p.substeps(hours)
    h = p.dt_int * p.hour_scale
    a = x.data
    for _ in range(n):
        a = _rk4_substep(a, h, p)
        if not np.all(np.abs(a) <= BLOWUP_LIMIT):
            raise NonFiniteBlowupError(
                f"integration blew up past |x|={BLOWUP_LIMIT:g} at t={x.time}+{hours}h"
            )
    return StateField(x.spec, x.time + hours, a)


def step_rk4_jvp(x: StateField, p: DynParams, hours: int, dx: np.ndarray) -> np.ndarray:
    """Tangent-linear of step_rk4 around x applied to perturbation dx."""
    n = p.substeps(hours)
    h = p.dt_int * p.hour_scale
    a = x.data
    da = np.asarray(dx, dtype=np.float64)
    for _ in range(n):
        da = _rk4_substep_jvp(a, da, h, p)
        a = _rk4_substep(a, h, p)
    return da


def step_rk4_vjp(x: StateField, p: DynParams, hours: int, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of step_rk4: gradient of <upstream, step(x)> wrt x."""
    n = p.substeps(hours)
    h = p.dt_int * p.hour_scale
    traj = np.empty((n,) + x.data.shape)
    a = x.data
    for k in range(n):
        traj[k] = a
        a = _rk4_substep(a, h, p)
    u = np.asarray(upstream, dtype=np.float64)
    for k in reversed(range(n)):
        u = _rk4_substep_vjp(traj[k], u, h, p)
    return u


@dataclass
class NatureRun:
    """Truth trajectory at fixed cadence, the reference for OSSE experiments."""

    states: list
    params: DynParams
    cadence_hours: int
    seed: int | None = None

    def __post_init__(self):
        self._by_time = {s.time: s for s in self.states}

    @property
    def times(self) -> list[int]:
        return [s.time for s in self.states]

    @property
    def spec(self) -> GridSpec:
        return self.states[0].spec

    def at_time(self, t: int) -> StateField:
        return self._by_time[t]

    def has_time(self, t: int) -> bool:
        return t in self._by_time


def generate_nature_run(x0: StateField, p: DynParams, length_hours: int,
                        cadence_hours: int = 1, spinup_hours: int = 0,
                        seed: int | None = None) -> NatureRun:
    """Deterministic truth trajectory; the clock restarts at 0 after spin-up."""
    if length_hours % cadence_hours != 0:
        raise ValueError("length must be a multiple of the cadence")
    start = x0
    if spinup_hours:
        start = step_rk4(x0, p, spinup_hours)
    start = StateField(start.spec, 0, start.data)
    states = [start]
    cur = start
    for _ in range(length_hours // cadence_hours):
        cur = step_rk4(cur, p, cadence_hours)
        states.append(cur)
    return NatureRun(states, p, cadence_hours, seed)


def default_initial_state(spec: GridSpec, p: DynParams, seed: int = 0) -> StateField:
    """Forcing plus a small seeded perturbation, the usual Lorenz-96 start."""
    rng = np.random.default_rng(seed)
    data = np.broadcast_to(p.forcing[:, None, None], spec.shape).copy()
    data += 0.1 * rng.standard_normal(spec.shape)
    return StateField(spec, 0, data)
