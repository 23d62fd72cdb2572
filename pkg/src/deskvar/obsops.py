"""Observation generation and operators.

Two observation kinds exist:

* conventional point observations: direct (noisy) samples of state values at
  a random subset of (v, i, j) sites, with NaN semantics (unobserved points
  simply have no record);
* synthetic "satellite" radiances: per-channel vertical integrals of the
  state column pushed through a bounded squashing nonlinearity,
  y = 250 + 100*tanh(a_eff * sum_v w(c,v) x_v), which lands strictly inside
  (150, 350). The effective slope a_eff depends weakly on the viewing
  geometry, so the auxiliary record data (scan position, zenith proxy) is
  genuinely informative for the learned emulator.

Generation-time quality control drops radiance records outside [150, 350]
(possible only through added noise) and records poleward of the latitude
mask. Observations made off the 3-hourly slots are attributed to the
nearest slot (the +-1.5 h coincidence rule).

The learned radiance emulator is a per-column conditional net with an exact
adjoint; it is the differentiable stand-in for the truth operator inside the
variational cost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteLossError, ShapeMismatchError
from .grid import GridSpec, StateField
from .netcore import CondNet, LayerSpec, TrainConfig, schedule_scale, train_step

OBS_SLOT_HOURS = 3
RADIANCE_LOW = 150.0
RADIANCE_HIGH = 350.0


def bin_to_slot(t: float, slot_hours: int = OBS_SLOT_HOURS) -> int:
    """Nearest observation slot; the +-half-slot coincidence window."""
    return int(np.floor((t + slot_hours / 2.0) / slot_hours)) * slot_hours


@dataclass
class ConvObsBatch:
    """Sparse point observations at one slot: records (v, i, j, value, sigma)."""

    time: int
    v: np.ndarray
    i: np.ndarray
    j: np.ndarray
    value: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.int64)
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if not (len(self.v) == len(self.i) == len(self.j) == len(self.value) == len(self.sigma)):
            raise ShapeMismatchError("conventional record columns differ in length")
        if self.n and np.any(self.sigma <= 0):
            raise ValueError("observation sigma must be positive")
        if self.n:
            keys = set(zip(self.v.tolist(), self.i.tolist(), self.j.tolist()))
            if len(keys) != self.n:
                raise ValueError("duplicate (v,i,j) records in one batch")

    @property
    def n(self) -> int:
        return len(self.value)

    def select(self, keep: np.ndarray) -> "ConvObsBatch":
        return ConvObsBatch(self.time, self.v[keep], self.i[keep], self.j[keep],
                            self.value[keep], self.sigma[keep])


SIGMA_FLOOR = 1e-12


def sample_conventional(truth: StateField, density: float, sigma, seed: int,
                        slot_hours: int = OBS_SLOT_HOURS) -> ConvObsBatch:
    """Bernoulli site selection over (v,i,j) with per-variable Gaussian noise.

    A zero sigma yields exact truth values; the stored record sigma is then
    floored at a tiny positive value so the batch stays assimilable.
    """
    if not 0 <= density <= 1:
        raise ValueError("density must be within [0, 1]")
    spec = truth.spec
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (spec.V,))
    rng = np.random.default_rng(seed)
    mask = rng.random(spec.shape) < density
    noise = rng.standard_normal(spec.shape) * sigma[:, None, None]
    v, i, j = np.nonzero(mask)
    values = truth.data[v, i, j] + noise[v, i, j]
    return ConvObsBatch(bin_to_slot(truth.time, slot_hours), v, i, j,
                        values, np.maximum(sigma, SIGMA_FLOOR)[v])


@dataclass(frozen=True)
class AuxInfo:
    """Viewing geometry attached to each radiance site."""

    scan_position: int
    zenith_proxy: float

    def __post_init__(self):
        if not 0.0 < self.zenith_proxy <= 1.0:
            raise ValueError("zenith proxy must lie in (0, 1]")
        if self.scan_position < 0:
            raise ValueError("scan position must be non-negative")


@dataclass(frozen=True)
class RadianceTruthSpec:
    """Synthetic instrument: channel weights, squash slope, swath, masking.

    The instrument behaves like a polar orbiter: at slot time t it sees a
    longitude swath of width swath_frac*W whose center advances by a full
    circle every orbit_hours, so consecutive window offsets sample different
    sectors. The scan position is the cross-track index inside the swath and
    drives the zenith proxy (nadir at swath center).
    """

    name: str
    weights: np.ndarray = field(repr=False)  # (C, V), rows sum to 1
    slope: float = 0.15
    aux_gain: float = 0.3
    zen_ref: float = 0.85
    noise_sigma: float = 1.0
    lat_mask_deg: float = 60.0
    max_view_deg: float = 45.0
    swath_frac: float = 0.25
    orbit_hours: float = 12.0
    orbit_phase: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ShapeMismatchError("instrument needs at least two channels")
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("channel weights must be non-negative and sum to 1")
        if not 0 < self.swath_frac <= 1 or self.orbit_hours <= 0:
            raise ValueError("invalid swath geometry")

    @property
    def n_channels(self) -> int:
        return self.weights.shape[0]

    def swath_width(self, W: int) -> int:
        return max(1, int(round(W * self.swath_frac)))

    def swath_columns(self, t: float, W: int):
        """(grid columns, scan positions) seen at time t, cross-track order."""
        width = self.swath_width(W)
        if width >= W:
            cols = np.arange(W)
            return cols, cols.copy()
        center = int(round(W * ((t / self.orbit_hours + self.orbit_phase) % 1.0)))
        cols = (center + np.arange(width) - width // 2) % W
        return cols, np.arange(width)

    def zenith_for_scan(self, scan, W: int):
        width = self.swath_width(W)
        frac = np.abs(2.0 * np.asarray(scan, dtype=np.float64) / max(width - 1, 1) - 1.0)
        return np.cos(np.deg2rad(self.max_view_deg) * frac)

    def effective_slope(self, zenith):
        return self.slope * (1.0 + self.aux_gain * (np.asarray(zenith) - self.zen_ref))

    def apply_cols(self, cols: np.ndarray, zenith) -> np.ndarray:
        """Noiseless channel values for state columns (N, V) -> (N, C)."""
        a_eff = self.effective_slope(zenith)
        proj = cols @ self.weights.T  # (N, C)
        return 250.0 + 100.0 * np.tanh(a_eff[:, None] * proj)

    @classmethod
    def _profile(cls, V: int, peaks, width: float) -> np.ndarray:
        v = np.arange(V, dtype=np.float64)
        w = np.exp(-0.5 * ((v[None, :] - np.asarray(peaks)[:, None]) / width) ** 2)
        return w / w.sum(axis=1, keepdims=True)

    @classmethod
    def instrument_a(cls, V: int, **kw) -> "RadianceTruthSpec":
        """Temperature-analog sounder: 4 channels peaking at mid/upper levels."""
        peaks = np.linspace(V - 1, (V - 1) / 2.0, 4)
        return cls("instrA", cls._profile(V, peaks, max(0.6, V / 6.0)), **kw)

    @classmethod
    def instrument_b(cls, V: int, **kw) -> "RadianceTruthSpec":
        """Humidity-analog sounder: 3 channels weighted toward low levels."""
        peaks = np.linspace(0.0, (V - 1) / 3.0, 3)
        return cls("instrB", cls._profile(V, peaks, max(0.6, V / 6.0)), **kw)


@dataclass
class RadianceBatch:
    """Per-channel radiance records with viewing geometry, one slot."""

    time: int
    c: np.ndarray
    i: np.ndarray
    j: np.ndarray
    value: np.ndarray
    scan: np.ndarray
    zen: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.int64)
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.scan = np.asarray(self.scan, dtype=np.int64)
        self.zen = np.asarray(self.zen, dtype=np.float64)
        n = len(self.value)
        if not all(len(x) == n for x in (self.c, self.i, self.j, self.scan, self.zen)):
            raise ShapeMismatchError("radiance record columns differ in length")

    @property
    def n(self) -> int:
        return len(self.value)

    def select(self, keep: np.ndarray) -> "RadianceBatch":
        return RadianceBatch(self.time, self.c[keep], self.i[keep], self.j[keep],
                             self.value[keep], self.scan[keep], self.zen[keep])


def radiance_truth(x: StateField, spec_rt: RadianceTruthSpec, density: float,
                   seed: int, slot_hours: int = OBS_SLOT_HOURS) -> RadianceBatch:
    """Simulate one overpass: swath sites, squash, channel noise, generation QC."""
    spec = x.spec
    rng = np.random.default_rng(seed)
    cols_j, scans = spec_rt.swath_columns(x.time, spec.W)
    width = len(cols_j)
    site_mask = rng.random((spec.H, width)) < density
    ii, ss = np.nonzero(site_mask)  # row index, cross-track index
    jj = cols_j[ss]
    scan_sites = scans[ss]
    C = spec_rt.n_channels
    noise = rng.standard_normal((len(ii), C)) * spec_rt.noise_sigma
    cols = x.data[:, ii, jj].T  # (N, V)
    zen = spec_rt.zenith_for_scan(scan_sites, spec.W)
    vals = spec_rt.apply_cols(cols, zen) + noise

    c_idx = np.tile(np.arange(C), len(ii))
    i_idx = np.repeat(ii, C)
    j_idx = np.repeat(jj, C)
    scan = np.repeat(scan_sites, C)
    zen_r = np.repeat(zen, C)
    flat = vals.reshape(-1)

    keep = (flat >= RADIANCE_LOW) & (flat <= RADIANCE_HIGH)
    keep &= np.abs(spec.lats[i_idx]) <= spec_rt.lat_mask_deg
    return RadianceBatch(bin_to_slot(x.time, slot_hours), c_idx[keep], i_idx[keep],
                         j_idx[keep], flat[keep], scan[keep], zen_r[keep])


def aux_condition(scan, zen, W: int) -> np.ndarray:
    """Condition encoding for the emulator: [scan fraction, zenith proxy]."""
    scan = np.atleast_1d(np.asarray(scan, dtype=np.float64))
    zen = np.atleast_1d(np.asarray(zen, dtype=np.float64))
    return np.stack([scan / W, zen], axis=1)


class RadianceEmulator:
    """Learned differentiable stand-in for one instrument's truth operator."""

    def __init__(self, net: CondNet, mean: np.ndarray, std: np.ndarray, W: int,
                 name: str = "", resid_sigma: np.ndarray | None = None):
        self.net = net
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.W = int(W)
        self.name = name
        self.resid_sigma = resid_sigma

    @property
    def n_channels(self) -> int:
        return self.net.n_out

    def _cond(self, scan, zen):
        return aux_condition(scan, zen, self.W)

    def apply_cols(self, cols: np.ndarray, scan, zen) -> np.ndarray:
        z = (np.atleast_2d(cols) - self.mean) / self.std
        return 250.0 + 100.0 * self.net.forward(z, self._cond(scan, zen))

    def adjoint_cols(self, cols: np.ndarray, scan, zen, upstream: np.ndarray):
        """Values plus exact gradient of <upstream, output> wrt the columns."""
        z = (np.atleast_2d(cols) - self.mean) / self.std
        cond = self._cond(scan, zen)
        out, ctx = self.net.forward_cached(z, cond)
        up = np.atleast_2d(upstream) * 100.0
        _, dz = self.net.backward_cached(ctx, up)
        return 250.0 + 100.0 * out, dz / self.std

    def jvp_cols(self, cols: np.ndarray, scan, zen, d_cols: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(cols) - self.mean) / self.std
        return 100.0 * self.net.jvp(z, self._cond(scan, zen), np.atleast_2d(d_cols) / self.std)

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.net.save(prefix.with_suffix(".xcnn"))
        meta = {
            "kind": "radiance_emulator",
            "name": self.name,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "W": self.W,
            "resid_sigma": None if self.resid_sigma is None else self.resid_sigma.tolist(),
        }
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, prefix) -> "RadianceEmulator":
        prefix = Path(prefix)
        net = CondNet.load(prefix.with_suffix(".xcnn"))
        meta = json.loads(prefix.with_suffix(".json").read_text())
        rs = meta["resid_sigma"]
        return cls(net, np.array(meta["mean"]), np.array(meta["std"]), meta["W"],
                   meta["name"], None if rs is None else np.array(rs))


def emulator_apply_and_adjoint(em: RadianceEmulator, column: np.ndarray, aux: AuxInfo,
                               upstream: np.ndarray):
    """Channel values and exact column gradient of <upstream, channels>."""
    vals, grad = em.adjoint_cols(column[None, :], [aux.scan_position],
                                 [aux.zenith_proxy], upstream[None, :])
    return vals[0], grad[0]


def build_emulator(V: int, n_channels: int, mean, std, W: int, name: str = "",
                   hidden=(48, 48), seed: int = 0) -> RadianceEmulator:
    widths = [V, *hidden, n_channels]
    layers = [
        LayerSpec(widths[k], widths[k + 1], "film" if k < len(widths) - 2 else "none", True)
        for k in range(len(widths) - 1)
    ]
    return RadianceEmulator(CondNet(layers, cond_dim=2, seed=seed), mean, std, W, name)


def emulator_loss(em: RadianceEmulator, cols, scan, zen, targets) -> float:
    """Per-channel L1 averaged over channels and records."""
    pred = em.apply_cols(cols, scan, zen)
    return float(np.mean(np.abs(pred - np.atleast_2d(targets))))


def fit_residual_sigma(em: RadianceEmulator, cols, scan, zen, targets) -> np.ndarray:
    """Per-channel residual spread, floored at 1e-8, stored on the emulator."""
    resid = em.apply_cols(np.asarray(cols), np.asarray(scan),
                          np.asarray(zen)) - np.atleast_2d(targets)
    em.resid_sigma = np.maximum(resid.std(axis=0), 1e-8)
    if not np.all(np.isfinite(em.resid_sigma)):
        raise NonFiniteLossError("residual spread is not finite")
    return em.resid_sigma


def train_emulator(em: RadianceEmulator, cols, scan, zen, targets, cfg: TrainConfig,
                   holdout_frac: float = 0.2) -> list[float]:
    """Minimize mean per-channel L1; fit residual spreads on a held-out split."""
    cols = np.asarray(cols, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = cols.shape[0]
    if n < 1:
        raise ValueError("need at least one training pair")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_hold = min(max(int(n * holdout_frac), 1), n - 1) if n > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]

    z = (cols - em.mean) / em.std
    cond = aux_condition(scan, zen, em.W)
    t_norm = (targets - 250.0) / 100.0
    losses = []
    velocity = None
    total = cfg.epochs * (len(train) // cfg.batch_size)
    for _ in range(cfg.epochs):
        order = train[rng.permutation(len(train))]
        for lo in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]

            def loss_grad(y):
                d = y - t_norm[idx]
                # loss reported in observation units
                return 100.0 * float(np.mean(np.abs(d))), np.sign(d) / d.size

            loss, velocity = train_step(em.net, (z[idx], cond[idx]), loss_grad, cfg,
                                        velocity, schedule_scale(len(losses), total))
            losses.append(loss)
    eval_idx = hold if n_hold else train
    fit_residual_sigma(em, cols[eval_idx], np.asarray(scan)[eval_idx],
                       np.asarray(zen)[eval_idx], targets[eval_idx])
    return losses


def emulator_training_pairs(nature_states, spec_rt: RadianceTruthSpec, density: float,
                            seed: int):
    """Collect (column, aux, channel) triples by synthetic overpasses of the truth."""
    cols, scans, zens, targets = [], [], [], []
    for k, s in enumerate(nature_states):
        batch = radiance_truth(s, spec_rt, density, seed + k)
        if batch.n == 0:
            continue
        # keep only sites where every channel survived generation QC
        per_site = {}
        for r in range(batch.n):
            key = (int(batch.i[r]), int(batch.j[r]), int(batch.scan[r]),
                   float(batch.zen[r]))
            per_site.setdefault(key, {})[batch.c[r]] = batch.value[r]
        for (i, j, scan, zen), chans in sorted(per_site.items()):
            if len(chans) != spec_rt.n_channels:
                continue
            cols.append(s.data[:, i, j])
            scans.append(scan)
            zens.append(zen)
            targets.append([chans[c] for c in range(spec_rt.n_channels)])
    if not cols:
        raise ValueError("no training pairs survived generation QC")
    return (np.asarray(cols), np.asarray(scans), np.asarray(zens), np.asarray(targets))


# ---- CSV io ----

CONV_HEADER = "t,v,i,j,value,sigma"
RAD_HEADER = "t,c,i,j,value,scan,zen"


def write_conv_csv(path, batches) -> None:
    lines = [CONV_HEADER]
    for b in sorted(batches, key=lambda b: b.time):
        for k in range(b.n):
            lines.append(
                f"{b.time},{b.v[k]},{b.i[k]},{b.j[k]},"
                f"{float(b.value[k])!r},{float(b.sigma[k])!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_conv_csv(path) -> dict[int, ConvObsBatch]:
    rows = Path(path).read_text().strip().splitlines()
    if rows[0] != CONV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]!r}")
    by_time: dict[int, list] = {}
    for line in rows[1:]:
        t, v, i, j, val, sig = line.split(",")
        by_time.setdefault(int(t), []).append((int(v), int(i), int(j), float(val), float(sig)))
    out = {}
    for t, recs in by_time.items():
        v, i, j, val, sig = (np.array(x) for x in zip(*recs))
        out[t] = ConvObsBatch(t, v, i, j, val, sig)
    return out


def write_rad_csv(path, batches) -> None:
    lines = [RAD_HEADER]
    for b in sorted(batches, key=lambda b: b.time):
        for k in range(b.n):
            lines.append(
                f"{b.time},{b.c[k]},{b.i[k]},{b.j[k]},"
                f"{float(b.value[k])!r},{b.scan[k]},{float(b.zen[k])!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_rad_csv(path) -> dict[int, RadianceBatch]:
    rows = Path(path).read_text().strip().splitlines()
    if rows[0] != RAD_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]!r}")
    by_time: dict[int, list] = {}
    for line in rows[1:]:
        t, c, i, j, val, scan, zen = line.split(",")
        by_time.setdefault(int(t), []).append(
            (int(c), int(i), int(j), float(val), int(scan), float(zen))
        )
    out = {}
    for t, recs in by_time.items():
        c, i, j, val, scan, zen = (np.array(x) for x in zip(*recs))
        out[t] = RadianceBatch(t, c, i, j, val, scan, zen)
    return out
