"""Gradient-conditioned assimilation models, cascade, and dual-window cycling.

Each observation stream owns a small DA model: a bias-free column network
with multiplicative conditioning that maps the local stencil of the window
cost gradient to a state increment, conditioned on the background column.
Inputs and outputs pass through scale-only normalizations, so a zero
gradient yields a bit-exact zero increment (the model cannot move the state
without observational evidence).

The cascade applies the stream models sequentially; each stage computes its
own gradient at the current state and hands its analysis to the next stage.
Streams with no observations in the window are skipped entirely.

Cycling alternates analysis and a 12-hour surrogate forecast. Every cycle
also runs a zero-offset short-window cascade whose product initializes
medium-range forecasts without waiting for the rest of the window's
observations; it is a function of offset-0 observations only.

DA training data is bootstrapped: backgrounds for the conventional model
come from cycling with the iterative reference minimizer, the second-stream
model trains on backgrounds already corrected by the learned conventional
model, and the third stream sees both instrument orders (fair coin). Window
offsets are subsampled per tuple so a single model set stays usable across
window-length ablations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .columns import columns_to_field, field_to_columns, gather_columns, stencil_width
from .errors import (
    MissingModelError,
    NonFiniteLossError,
    NonFiniteStateError,
    NonFiniteValueError,
)
from .forecast import RolloutConfig, forecast_to, weighted_l1
from .fourdvar import ClimStats, DawPlan, GradientField, QcReport, StreamObs, grad_at_background, solve_iterative
from .grid import LatWeights, StateField, VariableWeights
from .netcore import CondNet, LayerSpec, TrainConfig, apply_sgd_update, schedule_scale


class DaModel:
    """Stream-specific analysis-increment model: x_a = x_b + N(grad | x_b)."""

    def __init__(self, net: CondNet, stream: str, grad_scale, bg_mean, bg_std,
                 out_scale, row_halo: int = 1, col_halo: int = 2):
        self.net = net
        self.stream = stream
        self.grad_scale = np.asarray(grad_scale, dtype=np.float64)
        self.bg_mean = np.asarray(bg_mean, dtype=np.float64)
        self.bg_std = np.asarray(bg_std, dtype=np.float64)
        self.out_scale = np.asarray(out_scale, dtype=np.float64)
        self.row_halo = row_halo
        self.col_halo = col_halo
        if any(l.bias for l in net.layers) or any(l.mode == "concat" for l in net.layers):
            raise ValueError("assimilation nets must be bias-free with film/none layers")

    def increment(self, bg: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cols = gather_columns(grad / self.grad_scale[:, None, None],
                              self.row_halo, self.col_halo)
        cond = field_to_columns((bg - self.bg_mean[:, None, None])
                                / self.bg_std[:, None, None])
        out = self.net.forward(cols, cond)
        return columns_to_field(out, bg.shape) * self.out_scale[:, None, None]

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.net.save(prefix.with_suffix(".xcnn"))
        meta = {
            "kind": "da_model",
            "stream": self.stream,
            "grad_scale": self.grad_scale.tolist(),
            "bg_mean": self.bg_mean.tolist(),
            "bg_std": self.bg_std.tolist(),
            "out_scale": self.out_scale.tolist(),
            "row_halo": self.row_halo,
            "col_halo": self.col_halo,
        }
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, prefix) -> "DaModel":
        prefix = Path(prefix)
        net = CondNet.load(prefix.with_suffix(".xcnn"))
        m = json.loads(prefix.with_suffix(".json").read_text())
        return cls(net, m["stream"], m["grad_scale"], m["bg_mean"], m["bg_std"],
                   m["out_scale"], m["row_halo"], m["col_halo"])


def build_da_model(V: int, stream: str, grad_scale, bg_mean, bg_std, out_scale,
                   hidden=(64, 64), seed: int = 0, row_halo: int = 1,
                   col_halo: int = 2) -> DaModel:
    widths = [stencil_width(V, row_halo, col_halo), *hidden, V]
    layers = [
        LayerSpec(widths[k], widths[k + 1],
                  "film" if k < len(widths) - 2 else "none", bias=False)
        for k in range(len(widths) - 1)
    ]
    net = CondNet(layers, cond_dim=V, seed=seed)
    return DaModel(net, stream, grad_scale, bg_mean, bg_std, out_scale,
                   row_halo, col_halo)


def da_apply(model: DaModel, x_b: StateField, grad) -> StateField:
    """Add the model increment; a zero gradient returns the background bit-exactly."""
    g = grad.data if isinstance(grad, GradientField) else np.asarray(grad)
    if g.shape != x_b.data.shape:
        raise ValueError(f"gradient shape {g.shape} != state shape {x_b.data.shape}")
    if not np.any(g):
        return x_b.copy()
    return x_b.with_data(x_b.data + model.increment(x_b.data, g))


@dataclass
class DaTuple:
    """One supervised sample: background, window-cost gradient, truth."""

    background: np.ndarray
    grad: np.ndarray
    truth: np.ndarray


def fit_da_scales(tuples: list[DaTuple]):
    """Scale-only input/output calibrations from the training tuples."""
    bgs = np.stack([t.background for t in tuples])
    grads = np.stack([t.grad for t in tuples])
    incs = np.stack([t.truth - t.background for t in tuples])
    grad_scale = np.maximum(grads.std(axis=(0, 2, 3)), 1e-9)
    out_scale = np.maximum(incs.std(axis=(0, 2, 3)), 1e-9)
    bg_mean = bgs.mean(axis=(0, 2, 3))
    bg_std = np.maximum(bgs.std(axis=(0, 2, 3)), 1e-9)
    return grad_scale, bg_mean, bg_std, out_scale


def train_da(model: DaModel, tuples: list[DaTuple], vw: VariableWeights,
             lw: LatWeights, cfg: TrainConfig) -> list[float]:
    """Minimize the weighted L1 analysis error over the tuples."""
    if not tuples:
        raise ValueError("no training tuples")
    rng = np.random.default_rng(cfg.seed)
    gs = model.grad_scale[:, None, None]
    om = model.out_scale[:, None, None]
    losses = []
    velocity = None
    n = len(tuples)
    total = cfg.epochs * (n // cfg.batch_size)
    w3 = vw.values[:, None, None] * lw.values[None, :, None]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            batch = [tuples[k] for k in order[lo : lo + cfg.batch_size]]
            bg = np.stack([t.background for t in batch])
            gr = np.stack([t.grad for t in batch])
            tr = np.stack([t.truth for t in batch])
            B = len(batch)
            cols = gather_columns(gr / gs, model.row_halo, model.col_halo)
            cond = field_to_columns((bg - model.bg_mean[:, None, None])
                                    / model.bg_std[:, None, None])
            out, ctx = model.net.forward_cached(cols, cond)
            xa = bg + columns_to_field(out, bg.shape) * om
            diff = xa - tr
            loss = weighted_l1(diff, vw, lw)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"assimilation training loss is {loss}")
            d_xa = np.sign(diff) * w3[None] / (diff[0].size * B)
            d_out = field_to_columns(d_xa * om)
            grads, _ = model.net.backward_cached(ctx, d_out)
            velocity = apply_sgd_update(model.net, grads, cfg, velocity,
                                        schedule_scale(len(losses), total))
            losses.append(loss)
    return losses


@dataclass(frozen=True)
class CascadeSpec:
    """Ordered streams with enable flags; conventional goes first when enabled."""

    streams: tuple = (("conv", True), ("instrA", True), ("instrB", True))

    def __post_init__(self):
        names = [n for n, _ in self.streams]
        if len(set(names)) != len(names):
            raise ValueError("duplicate stream names")
        enabled = self.enabled_order()
        if "conv" in enabled and enabled[0] != "conv":
            raise ValueError("the conventional stream must come first when enabled")

    def enabled_order(self) -> list[str]:
        return [n for n, on in self.streams if on]

    @classmethod
    def only(cls, *names: str) -> "CascadeSpec":
        base = ["conv", "instrA", "instrB"]
        order = [n for n in base if n in names] + [n for n in names if n not in base]
        return cls(tuple((n, True) for n in order))

    @classmethod
    def ordered(cls, *names: str) -> "CascadeSpec":
        return cls(tuple((n, True) for n in names))


@dataclass
class AnalysisProduct:
    """Analysis plus provenance of how it was produced."""

    x_a: StateField
    streams: list[str]
    qc: dict[str, QcReport]
    grad_norms: dict[str, float]


@dataclass(frozen=True)
class CyclePlan:
    """Cycling experiment layout."""

    interval_hours: int = 12
    long_offsets: tuple = (0, 3, 6, 9)
    short_offsets: tuple = (0,)
    short_window_hours: int = 3
    n_cycles: int = 1
    spinup_cycles: int = 10

    def __post_init__(self):
        if self.interval_hours <= 0 or self.n_cycles < 0:
            raise ValueError("invalid cycling plan")
        if not set(self.short_offsets) <= set(self.long_offsets):
            raise ValueError("short offsets must be a subset of the long offsets")


@dataclass
class ObsStore:
    """All observation batches of an experiment, keyed by slot time."""

    conv: dict[int, object] = field(default_factory=dict)
    rad: dict[str, dict[int, object]] = field(default_factory=dict)
    operators: dict[str, object] = field(default_factory=dict)
    lat_masks: dict[str, float] = field(default_factory=dict)

    def stream_for_window(self, name: str, plan: DawPlan) -> StreamObs:
        if name == "conv":
            by_offset = {o: self.conv[plan.t0 + o] for o in plan.offsets
                         if plan.t0 + o in self.conv}
            return StreamObs("conv", "conv", by_offset)
        batches = self.rad.get(name, {})
        by_offset = {o: batches[plan.t0 + o] for o in plan.offsets
                     if plan.t0 + o in batches}
        return StreamObs(name, "rad", by_offset, self.operators.get(name),
                         lat_mask_deg=self.lat_masks.get(name, 60.0))


@dataclass
class DaDeps:
    """Shared pieces every assimilation step needs."""

    fc_short: object
    fc_medium: object | None
    rc: RolloutConfig
    clim: ClimStats
    lw: LatWeights
    vw: VariableWeights


def cascade(x_b: StateField, plan: DawPlan, store: ObsStore, cspec: CascadeSpec,
            models: dict[str, DaModel], deps: DaDeps) -> AnalysisProduct:
    """Sequential per-stream assimilation; absent streams are skipped entirely."""
    cur = x_b
    applied, qc_by, norms = [], {}, {}
    for name in cspec.enabled_order():
        stream = store.stream_for_window(name, plan)
        if stream.records_in(plan) == 0:
            continue
        if name not in models:
            raise MissingModelError(f"stream {name!r} is enabled but has no model")
        gf, report, _ = grad_at_background(cur, plan, [stream], deps.fc_short, deps.clim)
        cur = da_apply(models[name], cur, gf)
        applied.append(name)
        qc_by[name] = report
        norms[name] = float(np.sqrt(np.mean(gf.data**2)))
    return AnalysisProduct(cur, applied, qc_by, norms)


def _score_rmse(state: StateField, truth: StateField, lw: LatWeights) -> np.ndarray:
    err2 = (state.data - truth.data) ** 2
    w = lw.values[None, :, None]
    return np.sqrt((w * err2).sum(axis=(1, 2)) / (state.spec.H * state.spec.W))


@dataclass
class CycleRecord:
    index: int
    t0: int
    product: AnalysisProduct
    product_short: AnalysisProduct
    rmse_background: np.ndarray | None
    rmse_analysis: np.ndarray | None
    rmse_short: np.ndarray | None


def run_cycles(x_b0: StateField, nature, store: ObsStore, cp: CyclePlan,
               models: dict[str, DaModel], cspec: CascadeSpec,
               deps: DaDeps) -> list[CycleRecord]:
    """Dual-window cycling: long-window analysis drives the next background,
    the short-window analysis is emitted for forecast initialization."""
    records = []
    x_b = x_b0
    for k in range(cp.n_cycles):
        t0 = x_b.time
        long_plan = DawPlan(t0, cp.long_offsets, cp.interval_hours)
        short_plan = DawPlan(t0, cp.short_offsets, cp.short_window_hours)
        try:
            product = cascade(x_b, long_plan, store, cspec, models, deps)
            product_short = cascade(x_b, short_plan, store, cspec, models, deps)
            truth = nature.at_time(t0) if nature is not None else None
            rec = CycleRecord(
                k, t0, product, product_short,
                None if truth is None else _score_rmse(x_b, truth, deps.lw),
                None if truth is None else _score_rmse(product.x_a, truth, deps.lw),
                None if truth is None else _score_rmse(product_short.x_a, truth, deps.lw),
            )
            records.append(rec)
            x_b = forecast_to(deps.fc_short, deps.fc_medium, product.x_a,
                              cp.interval_hours, deps.rc)
        except NonFiniteValueError as e:
            raise NonFiniteStateError(f"cycle {k} (t0={t0}) went non-finite") from e
    return records


def spinup_background(nature, t_start: int, deps: DaDeps,
                      free_forecast_hours: int = 120) -> StateField:
    """Initial background: free surrogate forecast from an old truth snapshot."""
    snap = nature.at_time(t_start - free_forecast_hours)
    return forecast_to(deps.fc_short, deps.fc_medium, snap, free_forecast_hours, deps.rc)


# ---- bootstrap training-data generation ----

WINDOW_CHOICES = ((0,), (0, 3), (0, 3, 6), (0, 3, 6, 9))
WINDOW_PROBS = (0.25, 0.25, 0.25, 0.25)


def _sampled_plan(rng, t0: int, cp: CyclePlan) -> DawPlan:
    k = rng.choice(len(WINDOW_CHOICES), p=WINDOW_PROBS)
    return DawPlan(t0, WINDOW_CHOICES[k], cp.interval_hours)


def _grad_tuple(x: StateField, plan: DawPlan, stream: StreamObs, deps: DaDeps,
                truth: StateField) -> DaTuple | None:
    if stream.records_in(plan) == 0:
        return None
    gf, _, _ = grad_at_background(x, plan, [stream], deps.fc_short, deps.clim)
    return DaTuple(x.data.copy(), gf.data, truth.data.copy())


def collect_conv_tuples(nature, store: ObsStore, cp: CyclePlan, start_hour: int,
                        deps: DaDeps, seed: int, oracle_lam=None,
                        oracle_iters: int = 15) -> list[DaTuple]:
    """Phase 1: cycle with the iterative oracle, record conventional tuples."""
    rng = np.random.default_rng(seed)
    x_b = spinup_background(nature, start_hour, deps)
    tuples = []
    for _ in range(cp.n_cycles):
        t0 = x_b.time
        truth = nature.at_time(t0)
        plan = DawPlan(t0, cp.long_offsets, cp.interval_hours)
        conv = store.stream_for_window("conv", plan)
        tup = _grad_tuple(x_b, _sampled_plan(rng, t0, cp), conv, deps, truth)
        if tup is not None:
            tuples.append(tup)
        streams = [conv] + [store.stream_for_window(n, plan) for n in store.rad]
        streams = [s for s in streams if s.records_in(plan) > 0]
        x_a, _ = solve_iterative(x_b, plan, streams, deps.fc_short, deps.clim,
                                 lam=oracle_lam, iters=oracle_iters)
        x_b = forecast_to(deps.fc_short, deps.fc_medium, x_a, cp.interval_hours, deps.rc)
    return tuples


def collect_radiance_tuples(nature, store: ObsStore, cp: CyclePlan, start_hour: int,
                            deps: DaDeps, conv_model: DaModel, seed: int,
                            instr_first: str, instr_second: str,
                            first_model: DaModel | None = None):
    """Phases 2/3: cycle with learned models, record radiance-stream tuples.

    With first_model unset this produces tuples for instr_first on
    conventional-corrected backgrounds. With first_model set it produces
    tuples for instr_second, flipping a fair coin per cycle between
    "first model already applied" and "second stream goes first".
    """
    rng = np.random.default_rng(seed)
    x_b = spinup_background(nature, start_hour, deps)
    tuples = []
    for _ in range(cp.n_cycles):
        t0 = x_b.time
        truth = nature.at_time(t0)
        plan = DawPlan(t0, cp.long_offsets, cp.interval_hours)
        conv = store.stream_for_window("conv", plan)
        x_c = x_b
        if conv.records_in(plan) > 0:
            gf, _, _ = grad_at_background(x_b, plan, [conv], deps.fc_short, deps.clim)
            x_c = da_apply(conv_model, x_b, gf)
        if first_model is None:
            target_stream = store.stream_for_window(instr_first, plan)
            bg = x_c
        else:
            target_stream = store.stream_for_window(instr_second, plan)
            first_stream = store.stream_for_window(instr_first, plan)
            if rng.random() < 0.5 and first_stream.records_in(plan) > 0:
                gf, _, _ = grad_at_background(x_c, plan, [first_stream],
                                              deps.fc_short, deps.clim)
                bg = da_apply(first_model, x_c, gf)
            else:
                bg = x_c
        tup = _grad_tuple(bg, _sampled_plan(rng, t0, cp), target_stream, deps, truth)
        if tup is not None:
            tuples.append(tup)
        # advance the cycle from the best state built so far
        advance_from = bg if first_model is not None else x_c
        x_b = forecast_to(deps.fc_short, deps.fc_medium, advance_from,
                          cp.interval_hours, deps.rc)
    return tuples


def mean_scores(records: list[CycleRecord], spinup: int):
    """Post-spin-up mean background/analysis/short RMSE (averaged over levels)."""
    body = records[spinup:]
    bg = np.mean([r.rmse_background.mean() for r in body])
    an = np.mean([r.rmse_analysis.mean() for r in body])
    sh = np.mean([r.rmse_short.mean() for r in body])
    return bg, an, sh
