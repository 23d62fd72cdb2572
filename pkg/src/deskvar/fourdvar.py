"""Variational machinery: window cost, gradient at the background, QC, oracle.

The cost over an assimilation window [t0, t0+window) with offsets t_k is

    J(x) = 1/2 sum_k || y(t_k) - H(M_{t0->t_k}(x)) ||^2_{R^-1}

with diagonal R built from per-record sigmas (conventional) or per-channel
residual spreads (radiance). The background term of the full variational
cost is identically zero at the only evaluation point this engine uses
(x = x_b), so no background covariance is ever represented; the iterative
reference minimizer below adds a simple Tikhonov proxy lam*||x - x_b||^2
instead to stay well posed.

Gradients are exact reverse-mode: the window trajectory is propagated with
the forecast model (learned surrogate or the true-dynamics PerfectModel),
observation adjoints are injected at each offset, and the state adjoint is
pulled back to t0 through the model's step_vjp.

Quality control is decided once, against the background trajectory: a record
is rejected iff |y - H(M(x_b))| exceeds 5 climatological standard deviations
of its variable or channel (strict inequality; the boundary is accepted).
Radiance records are additionally re-checked against the physical bounds and
the latitude mask. Rejected records contribute nothing to J or its gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    LineSearchFailedError,
    NonFiniteBlowupError,
    NonFiniteCostError,
    NonFiniteGradientError,
    NonFiniteValueError,
)
from .forecast import ALLOWED_LEADS, aggregate_plan
from .grid import StateField
from .obsops import (
    RADIANCE_HIGH,
    RADIANCE_LOW,
    ConvObsBatch,
    RadianceBatch,
    RadianceTruthSpec,
)

QC_SIGMA_FACTOR = 5.0


@dataclass(frozen=True)
class DawPlan:
    """Assimilation window: analysis time plus offsets, left-closed right-open."""

    t0: int
    offsets: tuple = (0, 3, 6, 9)
    window_hours: int = 12

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        if not self.offsets or self.offsets[0] != 0:
            raise ValueError("window offsets must start at 0")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ValueError("window offsets must be strictly increasing")
        if self.offsets[-1] >= self.window_hours:
            raise ValueError("window offsets must stay inside the window")

    def times(self) -> list[int]:
        return [self.t0 + o for o in self.offsets]


@dataclass
class ObsErrorSpec:
    """Diagonal observation error variances per stream."""

    conv_sigma: np.ndarray  # (V,)
    rad_sigma: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (C,)

    def __post_init__(self):
        self.conv_sigma = np.asarray(self.conv_sigma, dtype=np.float64)
        self.rad_sigma = {k: np.asarray(v, dtype=np.float64) for k, v in self.rad_sigma.items()}
        if np.any(self.conv_sigma <= 0) or any(np.any(v <= 0) for v in self.rad_sigma.values()):
            raise ValueError("observation error sigmas must be strictly positive")


@dataclass
class ClimStats:
    """Climatological spreads used by quality control and the oracle proxy."""

    state_std: np.ndarray  # (V,)
    channel_std: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.state_std = np.asarray(self.state_std, dtype=np.float64)
        self.channel_std = {k: np.asarray(v, dtype=np.float64) for k, v in self.channel_std.items()}


def compute_clim_stats(states, instruments: dict[str, RadianceTruthSpec] | None = None,
                       ) -> ClimStats:
    """Per-level state spread and per-channel spread over a training run."""
    data = np.stack([s.data for s in states])
    state_std = np.maximum(data.std(axis=(0, 2, 3)), 1e-12)
    channel_std = {}
    for name, rt in (instruments or {}).items():
        spec = states[0].spec
        rows = np.abs(spec.lats) <= rt.lat_mask_deg
        width = rt.swath_width(spec.W)
        vals = []
        for s in states:
            cols = s.data[:, rows, :].reshape(spec.V, -1).T
            scan = np.tile(np.arange(spec.W) % width, int(rows.sum()))
            zen = rt.zenith_for_scan(scan, spec.W)
            vals.append(rt.apply_cols(cols, zen))
        channel_std[name] = np.maximum(np.concatenate(vals).std(axis=0), 1e-12)
    return ClimStats(state_std, channel_std)


@dataclass
class QcReport:
    """Accepted/rejected record counts per stream and rejection reason."""

    streams: dict[str, dict[str, int]] = field(default_factory=dict)

    def _slot(self, name: str) -> dict[str, int]:
        return self.streams.setdefault(
            name, {"accepted": 0, "rejected_innovation": 0, "rejected_bounds": 0,
                   "rejected_mask": 0}
        )

    def add(self, name: str, key: str, count: int = 1) -> None:
        self._slot(name)[key] += count

    def accepted(self, name: str | None = None) -> int:
        pool = [self.streams[name]] if name else self.streams.values()
        return sum(s["accepted"] for s in pool)

    def rejected(self, name: str | None = None) -> int:
        pool = [self.streams[name]] if name else self.streams.values()
        return sum(s["rejected_innovation"] + s["rejected_bounds"] + s["rejected_mask"]
                   for s in pool)

    def merge(self, other: "QcReport") -> None:
        for name, counts in other.streams.items():
            slot = self._slot(name)
            for k, v in counts.items():
                slot[k] += v


@dataclass
class StreamObs:
    """One observation stream inside a window: batches keyed by offset."""

    name: str
    kind: str  # "conv" or "rad"
    by_offset: dict[int, ConvObsBatch | RadianceBatch]
    operator: object | None = None  # RadianceEmulator for rad streams
    channel_sigma: np.ndarray | None = None  # (C,) overrides operator.resid_sigma
    lat_mask_deg: float = 60.0

    def __post_init__(self):
        if self.kind not in ("conv", "rad"):
            raise ValueError(f"unknown stream kind {self.kind!r}")
        if self.kind == "rad" and self.operator is None:
            raise ValueError("radiance streams need an operator")

    def sigma_per_channel(self) -> np.ndarray:
        if self.channel_sigma is not None:
            return self.channel_sigma
        return self.operator.resid_sigma

    def records_in(self, plan: DawPlan) -> int:
        return sum(self.by_offset[o].n for o in plan.offsets if o in self.by_offset)


@dataclass
class GradientField:
    """Window-cost gradient evaluated at the background, shaped like a state."""

    field: StateField
    per_stream: dict[str, np.ndarray] = None

    @property
    def data(self) -> np.ndarray:
        return self.field.data


# ---- window trajectory ----

def _window_chain(x: StateField, plan: DawPlan, model):
    """States at each offset plus the micro-step chain between offsets."""
    allowed = getattr(model, "leads", ALLOWED_LEADS)
    states = {0: x}
    segments = []  # per consecutive offset pair: list of (state_before, lead)
    cur = x
    for prev, nxt in zip(plan.offsets, plan.offsets[1:]):
        seg = []
        for lead in aggregate_plan(nxt - prev, allowed):
            seg.append((cur, lead))
            cur = model.step(cur, lead)
        segments.append(seg)
        states[nxt] = cur
    return states, segments


def window_states(x: StateField, plan: DawPlan, model) -> dict[int, StateField]:
    states, _ = _window_chain(x, plan, model)
    return states


def _rad_sites(batch: RadianceBatch):
    """Group per-channel records by site; returns site arrays and record->site map."""
    key = np.stack([batch.i, batch.j, batch.scan])
    sites, rec_site = np.unique(key, axis=1, return_inverse=True)
    zen = np.zeros(sites.shape[1])
    zen[rec_site] = batch.zen
    return sites[0], sites[1], sites[2], zen, rec_site


def _stream_residuals(stream: StreamObs, batch, state: StateField):
    """Predicted-minus-observed and 1/sigma^2 weights for one batch."""
    if stream.kind == "conv":
        pred = state.data[batch.v, batch.i, batch.j]
        w = 1.0 / batch.sigma**2
        return pred - batch.value, w, None
    si, sj, sscan, szen, rec_site = _rad_sites(batch)
    cols = state.data[:, si, sj].T
    vals = stream.operator.apply_cols(cols, sscan, szen)
    pred = vals[rec_site, batch.c]
    sigma = stream.sigma_per_channel()[batch.c]
    return pred - batch.value, 1.0 / sigma**2, (si, sj, sscan, szen, rec_site, cols)


# ---- quality control ----

def qc_mask(pred: np.ndarray, batch, stds: np.ndarray, lats: np.ndarray | None = None,
            lat_mask_deg: float = 60.0):
    """Record-level QC for one batch given background-trajectory predictions.

    stds carries the climatological spread per record. Radiance batches are
    also re-checked against the physical bounds and the latitude mask.
    Returns (keep boolean array, counts dict).
    """
    counts = {"accepted": 0, "rejected_innovation": 0, "rejected_bounds": 0,
              "rejected_mask": 0}
    keep = np.ones(batch.n, dtype=bool)
    if isinstance(batch, RadianceBatch):
        bad_bounds = (batch.value < RADIANCE_LOW) | (batch.value > RADIANCE_HIGH)
        counts["rejected_bounds"] = int(bad_bounds.sum())
        keep &= ~bad_bounds
        if lats is not None:
            bad_lat = np.abs(lats[batch.i]) > lat_mask_deg
            counts["rejected_mask"] = int((bad_lat & keep).sum())
            keep &= ~bad_lat
    # strict inequality: an innovation of exactly 5 sigma is accepted
    bad_innov = np.abs(batch.value - pred) > QC_SIGMA_FACTOR * stds
    counts["rejected_innovation"] = int((bad_innov & keep).sum())
    keep &= ~bad_innov
    counts["accepted"] = int(keep.sum())
    return keep, counts


def apply_qc(x_b: StateField, plan: DawPlan, streams: list[StreamObs], model,
             clim: ClimStats) -> tuple[list[StreamObs], QcReport]:
    """QC every stream against the background trajectory; returns filtered streams."""
    states, _ = _window_chain(x_b, plan, model)
    report = QcReport()
    filtered = []
    lats = x_b.spec.lats
    for stream in streams:
        new_offsets = {}
        for offset in plan.offsets:
            batch = stream.by_offset.get(offset)
            if batch is None:
                continue
            if batch.n == 0:
                new_offsets[offset] = batch
                continue
            if stream.kind == "conv":
                pred = states[offset].data[batch.v, batch.i, batch.j]
                stds = clim.state_std[batch.v]
                keep, counts = qc_mask(pred, batch, stds)
            else:
                resid, _, extra = _stream_residuals(stream, batch, states[offset])
                pred = resid + batch.value
                stds = clim.channel_std[stream.name][batch.c]
                keep, counts = qc_mask(pred, batch, stds, lats, stream.lat_mask_deg)
            for k, v in counts.items():
                report.add(stream.name, k, v)
            new_offsets[offset] = batch.select(keep)
        filtered.append(StreamObs(stream.name, stream.kind, new_offsets,
                                  stream.operator, stream.channel_sigma,
                                  stream.lat_mask_deg))
    return filtered, report


# ---- cost and gradient ----

def _obs_adjoint_for_offset(stream: StreamObs, batch, state: StateField,
                            shape) -> tuple[float, np.ndarray]:
    """Cost contribution and d(cost)/d(state at this offset) for one batch."""
    resid, w, extra = _stream_residuals(stream, batch, state)
    cost = 0.5 * float(np.sum(w * resid**2))
    adj = np.zeros(shape)
    if stream.kind == "conv":
        np.add.at(adj, (batch.v, batch.i, batch.j), w * resid)
        return cost, adj
    si, sj, sscan, szen, rec_site, cols = extra
    upstream = np.zeros((len(si), stream.operator.n_channels))
    upstream[rec_site, batch.c] = w * resid
    _, col_grads = stream.operator.adjoint_cols(cols, sscan, szen, upstream)
    np.add.at(adj, (slice(None), si, sj), col_grads.T)
    return cost, adj


def _obs_cost_grad(x: StateField, plan: DawPlan, streams: list[StreamObs], model,
                   want_grad: bool):
    states, segments = _window_chain(x, plan, model)
    shape = x.spec.shape
    total = 0.0
    adjoints = {}
    for stream in streams:
        for offset in plan.offsets:
            batch = stream.by_offset.get(offset)
            if batch is None or batch.n == 0:
                continue
            if want_grad:
                cost, adj = _obs_adjoint_for_offset(stream, batch, states[offset], shape)
                adjoints[offset] = adjoints.get(offset, 0.0) + adj
            else:
                resid, w, _ = _stream_residuals(stream, batch, states[offset])
                cost = 0.5 * float(np.sum(w * resid**2))
            total += cost
    if not np.isfinite(total):
        raise NonFiniteCostError(f"window cost is {total}")
    if not want_grad:
        return total, None
    adj = np.zeros(shape)
    for s in reversed(range(len(plan.offsets))):
        offset = plan.offsets[s]
        if offset in adjoints:
            adj = adj + adjoints[offset]
        if s > 0:
            for state_before, lead in reversed(segments[s - 1]):
                adj = model.step_vjp(state_before, lead, adj)
    if not np.all(np.isfinite(adj)):
        raise NonFiniteGradientError("window gradient is not finite")
    return total, adj


def cost(x: StateField, x_b: StateField, plan: DawPlan, streams: list[StreamObs],
         model) -> float:
    """Observation terms of the window cost; QC must already be applied.

    The background term vanishes identically at x = x_b, the only point the
    engine evaluates in production, and is therefore not represented at all;
    perturbation probes of this function see pure observation terms.
    """
    total, _ = _obs_cost_grad(x, plan, streams, model, want_grad=False)
    return total


def grad_at_background(x_b: StateField, plan: DawPlan, streams: list[StreamObs],
                       model, clim: ClimStats, qc: bool = True,
                       per_stream: bool = False):
    """Exact gradient of the observation terms at the background.

    Returns (GradientField, QcReport, filtered streams).
    """
    if qc:
        filtered, report = apply_qc(x_b, plan, streams, model, clim)
    else:
        filtered, report = streams, QcReport()
    _, adj = _obs_cost_grad(x_b, plan, filtered, model, want_grad=True)
    per = None
    if per_stream:
        per = {}
        for stream in filtered:
            _, g = _obs_cost_grad(x_b, plan, [stream], model, want_grad=True)
            per[stream.name] = g
    gf = GradientField(StateField(x_b.spec, x_b.time, adj), per)
    return gf, report, filtered


# ---- iterative reference minimizer ----

def solve_iterative(x_b: StateField, plan: DawPlan, streams: list[StreamObs], model,
                    clim: ClimStats, lam=None, iters: int = 60,
                    grad_tol: float = 1e-8, max_backtracks: int = 40,
                    qc: bool = True):
    """Gradient descent with backtracking on obs cost + lam*||x - x_b||^2.

    The Tikhonov proxy keeps the problem well posed without estimating a
    background covariance; lam defaults to 0.1 * climatological variance per
    level. Returns (analysis StateField, dict with the J trace).
    """
    if lam is None:
        lam_v = 0.1 * clim.state_std**2
    else:
        lam_v = np.broadcast_to(np.asarray(lam, dtype=np.float64), (x_b.spec.V,))
    lam3 = lam_v[:, None, None]
    if qc:
        streams, report = apply_qc(x_b, plan, streams, model, clim)
    else:
        report = QcReport()

    def f_and_g(arr):
        state = StateField(x_b.spec, x_b.time, arr)
        j_obs, g = _obs_cost_grad(state, plan, streams, model, want_grad=True)
        dx = arr - x_b.data
        return j_obs + float(np.sum(lam3 * dx * dx)), g + 2.0 * lam3 * dx

    def f_and_g_safe(arr):
        # an overshooting trial step can blow up the window propagation;
        # treat that as an infinitely bad candidate and keep backtracking
        try:
            return f_and_g(arr)
        except (NonFiniteBlowupError, NonFiniteCostError, NonFiniteGradientError,
                NonFiniteValueError):
            return np.inf, None

    x = x_b.data.copy()
    j, g = f_and_g(x)
    trace = [j]
    step = 1.0
    for _ in range(iters):
        gnorm2 = float(np.sum(g * g))
        if np.sqrt(gnorm2 / g.size) < grad_tol:
            break
        accepted = False
        s = step
        for _ in range(max_backtracks):
            cand = x - s * g
            j_new, g_new = f_and_g_safe(cand)
            if j_new <= j - 1e-4 * s * gnorm2:
                x, j, g = cand, j_new, g_new
                trace.append(j)
                step = s * 2.0
                accepted = True
                break
            s *= 0.5
        if not accepted:
            if np.sqrt(gnorm2 / g.size) > 1e3 * grad_tol:
                raise LineSearchFailedError(
                    f"no descent after {max_backtracks} backtracks at J={j:.6g}"
                )
            break
    return StateField(x_b.spec, x_b.time, x), {"trace": trace, "qc": report}
