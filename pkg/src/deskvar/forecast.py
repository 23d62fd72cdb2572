"""Lead-time-conditioned forecast surrogate and its training stages.

The surrogate is a per-column residual network: for every grid column it
maps the normalized stencil neighborhood to a normalized increment of that
column, conditioned on a one-hot encoding of the lead time. Weights are
shared across columns. A "short" variant handles the early part of a
forecast, a "medium" variant the rest; both are trained on the nature run,
first single-step (pretraining), then on composed rollouts.

Arbitrary leads are reached by greedy largest-first aggregation over the
allowed lead set. PerfectModel swaps the learned step for the true dynamics
(with its exact tangent/adjoint), which is used both as a plumbing identity
in tests and as an independent adjoint cross-check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .columns import columns_to_field, field_to_columns, gather_columns, scatter_columns_adj, stencil_width
from .errors import NonFiniteLossError, ShapeMismatchError
from .grid import LatWeights, StateField, VariableWeights
from .netcore import CondNet, LayerSpec, TrainConfig, apply_sgd_update, schedule_scale

ALLOWED_LEADS = (1, 3, 6, 12, 24)


@dataclass(frozen=True)
class LeadTime:
    hours: int
    allowed: tuple = ALLOWED_LEADS

    def __post_init__(self):
        if self.hours not in self.allowed:
            raise ValueError(f"lead {self.hours} not in allowed set {self.allowed}")


@dataclass(frozen=True)
class RolloutConfig:
    """Rollout stage setup: step-count range and the short/medium handoff."""

    t_min: int = 1
    t_max: int = 1
    stage: str = "short"
    handoff_step: int = 3

    def __post_init__(self):
        if self.t_min < 1 or self.t_max < self.t_min or self.handoff_step < 1:
            raise ValueError("invalid rollout configuration")

    @classmethod
    def short(cls, handoff_step: int = 3) -> "RolloutConfig":
        return cls(2, 4, "short", handoff_step)

    @classmethod
    def medium(cls, handoff_step: int = 3) -> "RolloutConfig":
        return cls(5, 10, "medium", handoff_step)


@dataclass
class Normalization:
    """Per-level affine normalization fitted on training states."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_states(cls, states) -> "Normalization":
        data = np.stack([s.data for s in states])
        mean = data.mean(axis=(0, 2, 3))
        std = np.maximum(data.std(axis=(0, 2, 3)), 1e-9)
        return cls(mean, std)


def aggregate_plan(lead: int, allowed=ALLOWED_LEADS) -> list[int]:
    """Greedy largest-first decomposition of a lead into allowed steps."""
    if lead < 1:
        raise ValueError("lead must be >= 1")
    steps = sorted(set(int(a) for a in allowed), reverse=True)
    if steps[-1] != 1:
        raise ValueError("allowed lead set must contain 1")
    plan = []
    remaining = int(lead)
    while remaining:
        take = next(s for s in steps if s <= remaining)
        plan.append(take)
        remaining -= take
    return plan


class ForecastModel:
    """Column-shared residual surrogate conditioned on the lead time."""

    def __init__(self, net: CondNet, norm: Normalization, leads=ALLOWED_LEADS,
                 variant: str = "short", row_halo: int = 1, col_halo: int = 2):
        self.net = net
        self.norm = norm
        self.leads = tuple(leads)
        self.variant = variant
        self.row_halo = row_halo
        self.col_halo = col_halo
        V = net.n_out
        if net.n_in != stencil_width(V, row_halo, col_halo):
            raise ShapeMismatchError("net input width does not match the stencil")
        if net.cond_dim != len(self.leads):
            raise ShapeMismatchError("net condition width does not match the lead set")

    # condition encoding: one-hot over the allowed lead set
    def lead_onehot(self, lead: int) -> np.ndarray:
        enc = np.zeros(len(self.leads))
        enc[self.leads.index(lead)] = 1.0
        return enc

    def _mu_sig(self):
        return self.norm.mean[:, None, None], self.norm.std[:, None, None]

    def step_arr(self, a: np.ndarray, lead: int) -> np.ndarray:
        mu, sig = self._mu_sig()
        cols = gather_columns((a - mu) / sig, self.row_halo, self.col_halo)
        out = self.net.forward(cols, self.lead_onehot(lead))
        return a + columns_to_field(out, a.shape) * sig

    def step(self, state: StateField, lead: int) -> StateField:
        return StateField(state.spec, state.time + lead, self.step_arr(state.data, lead))

    def step_cached(self, a: np.ndarray, lead: int):
        mu, sig = self._mu_sig()
        shape = a.shape
        cols = gather_columns((a - mu) / sig, self.row_halo, self.col_halo)
        out, ctx = self.net.forward_cached(cols, self.lead_onehot(lead))
        return a + columns_to_field(out, shape) * sig, (ctx, shape)

    def step_vjp_cached(self, cache, upstream: np.ndarray):
        """Exact gradients of <upstream, step(a)> wrt params and a."""
        ctx, shape = cache
        mu, sig = self._mu_sig()
        d_out = field_to_columns(upstream * sig)
        param_grads, d_cols = self.net.backward_cached(ctx, d_out)
        d_a = scatter_columns_adj(d_cols, shape, self.row_halo, self.col_halo) / sig
        return param_grads, d_a + upstream

    def step_vjp(self, state: StateField, lead: int, upstream: np.ndarray) -> np.ndarray:
        _, cache = self.step_cached(state.data, lead)
        _, d_a = self.step_vjp_cached(cache, upstream)
        return d_a

    def step_jvp(self, state: StateField, lead: int, dx: np.ndarray) -> np.ndarray:
        mu, sig = self._mu_sig()
        a = state.data
        cols = gather_columns((a - mu) / sig, self.row_halo, self.col_halo)
        d_cols = gather_columns(dx / sig, self.row_halo, self.col_halo)
        d_out = self.net.jvp(cols, self.lead_onehot(lead), d_cols)
        return dx + columns_to_field(d_out, a.shape) * sig

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.net.save(prefix.with_suffix(".xcnn"))
        meta = {
            "kind": "forecast",
            "variant": self.variant,
            "leads": list(self.leads),
            "mean": self.norm.mean.tolist(),
            "std": self.norm.std.tolist(),
            "row_halo": self.row_halo,
            "col_halo": self.col_halo,
        }
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, prefix) -> "ForecastModel":
        prefix = Path(prefix)
        net = CondNet.load(prefix.with_suffix(".xcnn"))
        meta = json.loads(prefix.with_suffix(".json").read_text())
        norm = Normalization(np.array(meta["mean"]), np.array(meta["std"]))
        return cls(net, norm, tuple(meta["leads"]), meta["variant"],
                   meta["row_halo"], meta["col_halo"])


def build_forecast_model(V: int, norm: Normalization, hidden=(96, 96),
                         leads=ALLOWED_LEADS, variant: str = "short",
                         seed: int = 0, row_halo: int = 1, col_halo: int = 2) -> ForecastModel:
    widths = [stencil_width(V, row_halo, col_halo), *hidden, V]
    layers = [
        LayerSpec(widths[k], widths[k + 1], "film" if k < len(widths) - 2 else "none", True)
        for k in range(len(widths) - 1)
    ]
    net = CondNet(layers, cond_dim=len(leads), seed=seed)
    return ForecastModel(net, norm, leads, variant, row_halo, col_halo)


class PerfectModel:
    """Drop-in surrogate replacement that steps the true dynamics."""

    def __init__(self, params: dyn.DynParams, leads=ALLOWED_LEADS):
        self.params = params
        self.leads = tuple(leads)
        self.variant = "perfect"

    def step(self, state: StateField, lead: int) -> StateField:
        return dyn.step_rk4(state, self.params, lead)

    def step_vjp(self, state: StateField, lead: int, upstream: np.ndarray) -> np.ndarray:
        return dyn.step_rk4_vjp(state, self.params, lead, upstream)

    def step_jvp(self, state: StateField, lead: int, dx: np.ndarray) -> np.ndarray:
        return dyn.step_rk4_jvp(state, self.params, lead, dx)


def forecast_to(model_short, model_medium, x0: StateField, lead: int,
                rc: RolloutConfig | None = None) -> StateField:
    """Walk the aggregation plan, switching variants at the handoff step."""
    if lead == 0:
        return x0.copy()
    rc = rc or RolloutConfig()
    allowed = getattr(model_short, "leads", ALLOWED_LEADS)
    state = x0
    for k, step_lead in enumerate(aggregate_plan(lead, allowed)):
        model = model_short if (k < rc.handoff_step or model_medium is None) else model_medium
        state = model.step(state, step_lead)
    return state


# ---- training ----

def weighted_l1(diff: np.ndarray, vw: VariableWeights, lw: LatWeights) -> float:
    """Mean over samples of (1/VHW) sum_vij omega(v) L(i) |diff|."""
    d4 = diff if diff.ndim == 4 else diff[None]
    w = vw.values[:, None, None] * lw.values[None, :, None]
    per_sample = (np.abs(d4) * w[None]).sum(axis=(1, 2, 3)) / d4[0].size
    return float(per_sample.mean())


def _weighted_l1_grad(diff: np.ndarray, vw: VariableWeights, lw: LatWeights,
                      scale: float) -> np.ndarray:
    d4 = diff if diff.ndim == 4 else diff[None]
    w = vw.values[:, None, None] * lw.values[None, :, None]
    return np.sign(d4) * w[None] * scale


def _valid_starts(nature: dyn.NatureRun, horizon: int) -> list[int]:
    last = nature.times[-1]
    return [t for t in nature.times if t + horizon <= last]


def pretrain_loss(model: ForecastModel, nature: dyn.NatureRun, starts, lead: int,
                  vw: VariableWeights, lw: LatWeights) -> float:
    inputs = np.stack([nature.at_time(t).data for t in starts])
    targets = np.stack([nature.at_time(t + lead).data for t in starts])
    pred = np.stack([model.step_arr(inputs[b], lead) for b in range(len(starts))])
    return weighted_l1(pred - targets, vw, lw)


def pretrain(model: ForecastModel, nature: dyn.NatureRun, vw: VariableWeights,
             lw: LatWeights, cfg: TrainConfig) -> list[float]:
    """Single-step training over uniformly sampled leads; returns the loss trace."""
    cadence = nature.cadence_hours
    if any(l % cadence for l in model.leads):
        raise ValueError("nature cadence must divide every allowed lead")
    rng = np.random.default_rng(cfg.seed)
    mu, sig = model.norm.mean[:, None, None], model.norm.std[:, None, None]
    starts_all = _valid_starts(nature, max(model.leads))
    losses = []
    velocity = None
    total = cfg.epochs * (len(starts_all) // cfg.batch_size)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(starts_all))
        for lo in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            batch_starts = [starts_all[k] for k in order[lo : lo + cfg.batch_size]]
            lead = int(rng.choice(model.leads))
            inputs = np.stack([nature.at_time(t).data for t in batch_starts])
            targets = np.stack([nature.at_time(t + lead).data for t in batch_starts])
            B = inputs.shape[0]
            cols = gather_columns((inputs - mu) / sig, model.row_halo, model.col_halo)
            out, ctx = model.net.forward_cached(cols, model.lead_onehot(lead))
            pred = inputs + columns_to_field(out, inputs.shape) * sig
            diff = pred - targets
            loss = weighted_l1(diff, vw, lw)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"pretraining loss is {loss}")
            d_pred = _weighted_l1_grad(diff, vw, lw, 1.0 / (diff[0].size * B))
            d_out = field_to_columns(d_pred * sig)
            grads, _ = model.net.backward_cached(ctx, d_out)
            velocity = apply_sgd_update(model.net, grads, cfg, velocity,
                                        schedule_scale(len(losses), total))
            losses.append(loss)
    return losses


def rollout_loss(model: ForecastModel, nature: dyn.NatureRun, starts, lead: int,
                 T: int, vw: VariableWeights, lw: LatWeights) -> float:
    """Mean over rollout steps of the single-step weighted L1 terms."""
    total = 0.0
    cur = np.stack([nature.at_time(t).data for t in starts])
    for tau in range(1, T + 1):
        cur = np.stack([model.step_arr(cur[b], lead) for b in range(len(starts))])
        targets = np.stack([nature.at_time(t + tau * lead).data for t in starts])
        total += weighted_l1(cur - targets, vw, lw)
    return total / T


def rollout_finetune(model: ForecastModel, nature: dyn.NatureRun, rc: RolloutConfig,
                     vw: VariableWeights, lw: LatWeights, cfg: TrainConfig,
                     start_stride: int = 1) -> list[float]:
    """Multi-step fine-tuning: same sampled lead for all T composed steps.

    start_stride thins the candidate start times, trading coverage for speed.
    """
    rng = np.random.default_rng(cfg.seed)
    mu, sig = model.norm.mean[:, None, None], model.norm.std[:, None, None]
    losses = []
    velocity = None
    starts_all = _valid_starts(nature, rc.t_max * max(model.leads))[::start_stride]
    if not starts_all:
        raise ValueError("nature run too short for the rollout horizon")
    total = cfg.epochs * (len(starts_all) // cfg.batch_size)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(starts_all))
        for lo in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            batch_starts = [starts_all[k] for k in order[lo : lo + cfg.batch_size]]
            lead = int(rng.choice(model.leads))
            T = int(rng.integers(rc.t_min, rc.t_max + 1))
            B = len(batch_starts)
            cur = np.stack([nature.at_time(t).data for t in batch_starts])
            onehot = model.lead_onehot(lead)
            caches, diffs = [], []
            loss = 0.0
            for tau in range(1, T + 1):
                cols = gather_columns((cur - mu) / sig, model.row_halo, model.col_halo)
                out, ctx = model.net.forward_cached(cols, onehot)
                cur = cur + columns_to_field(out, cur.shape) * sig
                caches.append((ctx, cur.shape))
                targets = np.stack(
                    [nature.at_time(t + tau * lead).data for t in batch_starts]
                )
                diffs.append(cur - targets)
                loss += weighted_l1(diffs[-1], vw, lw) / T
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"rollout loss is {loss}")
            # reverse sweep: per-step loss terms feed the running state adjoint
            scale = 1.0 / (T * diffs[0][0].size * B)
            grand = None
            adj = _weighted_l1_grad(diffs[-1], vw, lw, scale)
            for tau in reversed(range(T)):
                ctx, shape = caches[tau]
                d_out = field_to_columns(adj * sig)
                param_grads, d_cols = model.net.backward_cached(ctx, d_out)
                if grand is None:
                    grand = param_grads
                else:
                    for acc, g in zip(grand, param_grads):
                        for key in acc:
                            acc[key] += g[key]
                adj = scatter_columns_adj(d_cols, shape, model.row_halo,
                                          model.col_halo) / sig + adj
                if tau > 0:
                    adj = adj + _weighted_l1_grad(diffs[tau - 1], vw, lw, scale)
            velocity = apply_sgd_update(model.net, grand, cfg, velocity,
                                        schedule_scale(len(losses), total))
            losses.append(loss)
    return losses
