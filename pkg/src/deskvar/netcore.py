"""Minimal dense conditional networks with exact reverse-mode gradients.

A CondNet is a stack of dense layers with tanh hidden activations and a
linear output layer. Each layer can ingest a condition vector in one of
three ways:

  none    plain dense layer
  film    multiplicative gate: z = (W a [+ b]) * (1 + U c)
  concat  the condition is appended to the layer input

Gate matrices start at zero so conditioning is neutral at init. A net whose
layers are all bias-free and use only none/film conditioning maps the zero
vector to the zero vector exactly, for any condition; the gradient-driven
assimilation models rely on that property.

backward() returns exact gradients of <upstream, output>; jvp() is the
matching tangent-linear map. Both operate on single vectors or on batches
(leading axis). train_step() applies one SGD-with-momentum update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, NonFiniteLossError, ShapeMismatchError

NET_MAGIC = b"XCNN"
NET_VERSION = 1

_MODES = ("none", "film", "concat")


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    mode: str = "none"
    bias: bool = True

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer widths must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    batch_size: int
    epochs: int
    seed: int
    grad_clip: float = 10.0
    momentum: float = 0.9

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs, self.grad_clip) <= 0:
            raise ValueError("training config values must be positive")


class CondNet:
    """Dense conditional network; float64 parameters throughout."""

    def __init__(self, layers: list[LayerSpec], cond_dim: int, seed: int = 0):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeMismatchError(
                    f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}"
                )
        if cond_dim < 1 and any(l.mode != "none" for l in layers):
            raise ValueError("conditioned layers need cond_dim >= 1")
        self.layers = list(layers)
        self.cond_dim = int(cond_dim)
        rng = np.random.default_rng(seed)
        self.params: list[dict] = []
        for l in self.layers:
            w_in = l.n_in + (self.cond_dim if l.mode == "concat" else 0)
            p = {"W": rng.standard_normal((l.n_out, w_in)) / np.sqrt(w_in)}
            if l.mode == "film":
                p["U"] = np.zeros((l.n_out, self.cond_dim))
            if l.bias:
                p["b"] = np.zeros(l.n_out)
            self.params.append(p)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def clone(self) -> "CondNet":
        other = CondNet.__new__(CondNet)
        other.layers = list(self.layers)
        other.cond_dim = self.cond_dim
        other.params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return other

    # ---- forward / backward / tangent ----

    def _prep(self, x, c):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ShapeMismatchError(f"input width {x.shape[1]} != {self.n_in}")
        c = np.asarray(c, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (x.shape[0], c.shape[0]))
        if c.shape != (x.shape[0], self.cond_dim):
            raise ShapeMismatchError(
                f"condition shape {c.shape} incompatible with {(x.shape[0], self.cond_dim)}"
            )
        return x, c, single

    def forward_cached(self, x, c):
        x, c, single = self._prep(x, c)
        a = x
        cache = []
        last = len(self.layers) - 1
        for idx, (l, p) in enumerate(zip(self.layers, self.params)):
            a_eff = np.concatenate([a, c], axis=1) if l.mode == "concat" else a
            s = a_eff @ p["W"].T
            if l.bias:
                s = s + p["b"]
            if l.mode == "film":
                g = 1.0 + c @ p["U"].T
                z = s * g
            else:
                g = None
                z = s
            h = z if idx == last else np.tanh(z)
            cache.append((a_eff, s, g, h))
            a = h
        return a, (cache, c, single)

    def forward(self, x, c) -> np.ndarray:
        y, (_, _, single) = self.forward_cached(x, c)
        return y[0] if single else y

    def backward_cached(self, ctx, upstream):
        cache, c, single = ctx
        up = np.asarray(upstream, dtype=np.float64)
        if up.ndim == 1:
            up = up[None, :]
        if up.shape != cache[-1][3].shape:
            raise ShapeMismatchError(
                f"upstream shape {up.shape} != output shape {cache[-1][3].shape}"
            )
        grads: list[dict] = [None] * len(self.layers)
        delta = up
        last = len(self.layers) - 1
        for idx in reversed(range(len(self.layers))):
            l, p = self.layers[idx], self.params[idx]
            a_eff, s, g, h = cache[idx]
            dz = delta if idx == last else delta * (1.0 - h * h)
            layer_grads = {}
            if l.mode == "film":
                ds = dz * g
                layer_grads["U"] = (dz * s).T @ c
            else:
                ds = dz
            if l.bias:
                layer_grads["b"] = ds.sum(axis=0)
            layer_grads["W"] = ds.T @ a_eff
            da_eff = ds @ p["W"]
            delta = da_eff[:, : l.n_in] if l.mode == "concat" else da_eff
            grads[idx] = layer_grads
        return grads, (delta[0] if single else delta)

    def backward(self, x, c, upstream):
        """Exact gradients of <upstream, forward(x, c)> wrt params and input."""
        _, ctx = self.forward_cached(x, c)
        return self.backward_cached(ctx, upstream)

    def jvp(self, x, c, dx) -> np.ndarray:
        """Tangent-linear map: directional derivative of the output wrt x."""
        x, c, single = self._prep(x, c)
        dx = np.asarray(dx, dtype=np.float64)
        if dx.ndim == 1:
            dx = dx[None, :]
        if dx.shape != x.shape:
            raise ShapeMismatchError(f"tangent shape {dx.shape} != input shape {x.shape}")
        a, da = x, dx
        last = len(self.layers) - 1
        for idx, (l, p) in enumerate(zip(self.layers, self.params)):
            if l.mode == "concat":
                a_eff = np.concatenate([a, c], axis=1)
                da_eff = np.concatenate([da, np.zeros_like(c)], axis=1)
            else:
                a_eff, da_eff = a, da
            s = a_eff @ p["W"].T
            if l.bias:
                s = s + p["b"]
            ds = da_eff @ p["W"].T
            if l.mode == "film":
                g = 1.0 + c @ p["U"].T
                z, dz = s * g, ds * g
            else:
                z, dz = s, ds
            if idx == last:
                a, da = z, dz
            else:
                h = np.tanh(z)
                a, da = h, (1.0 - h * h) * dz
        return da[0] if single else da

    # ---- checkpoint io ----

    def save(self, path) -> None:
        mode_code = {m: i for i, m in enumerate(_MODES)}
        with open(path, "wb") as f:
            f.write(NET_MAGIC)
            f.write(struct.pack("<III", NET_VERSION, len(self.layers), self.cond_dim))
            for l in self.layers:
                f.write(struct.pack("<IIBBH", l.n_in, l.n_out, mode_code[l.mode],
                                    1 if l.bias else 0, 0))
            for l, p in zip(self.layers, self.params):
                f.write(np.ascontiguousarray(p["W"], dtype="<f8").tobytes())
                if l.mode == "film":
                    f.write(np.ascontiguousarray(p["U"], dtype="<f8").tobytes())
                if l.bias:
                    f.write(np.ascontiguousarray(p["b"], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CondNet":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != NET_MAGIC:
            raise BadMagicError(f"{path}: expected magic {NET_MAGIC!r}, got {raw[:4]!r}")
        version, n_layers, cond_dim = struct.unpack("<III", raw[4:16])
        if version != NET_VERSION:
            raise BadMagicError(f"{path}: unsupported version {version}")
        off = 16
        layers = []
        for _ in range(n_layers):
            n_in, n_out, mode, bias, _ = struct.unpack("<IIBBH", raw[off : off + 12])
            layers.append(LayerSpec(n_in, n_out, _MODES[mode], bool(bias)))
            off += 12
        net = cls(layers, cond_dim, seed=0)
        for l, p in zip(net.layers, net.params):
            for key in ("W", "U", "b"):
                if key not in p:
                    continue
                n = p[key].size
                vals = np.frombuffer(raw[off : off + 8 * n], dtype="<f8")
                if vals.size != n:
                    raise ShapeMismatchError(f"{path}: truncated parameter block")
                p[key] = vals.reshape(p[key].shape).copy()
                off += 8 * n
        if off != len(raw):
            raise ShapeMismatchError(f"{path}: {len(raw) - off} trailing bytes")
        return net


def grad_global_norm(grads: list[dict]) -> float:
    total = 0.0
    for g in grads:
        for v in g.values():
            total += float(np.sum(v * v))
    return float(np.sqrt(total))


def schedule_scale(step: int, total: int) -> float:
    """Step-decayed learning-rate multiplier (1 -> 0.3 -> 0.09 over a run)."""
    if total <= 0:
        return 1.0
    frac = step / total
    if frac < 0.5:
        return 1.0
    if frac < 0.85:
        return 0.3
    return 0.09


def apply_sgd_update(net: CondNet, grads: list[dict], cfg: TrainConfig,
                     velocity: list[dict] | None, lr_scale: float = 1.0) -> list[dict]:
    """Momentum SGD update in place; returns the updated velocity state."""
    if velocity is None:
        velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
    norm = grad_global_norm(grads)
    scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
    for p, g, v in zip(net.params, grads, velocity):
        for key in p:
            v[key] = cfg.momentum * v[key] + scale * g[key]
            p[key] -= cfg.lr * lr_scale * v[key]
    return velocity


def train_step(net: CondNet, batch, loss_grad_fn, cfg: TrainConfig,
               velocity: list[dict] | None = None, lr_scale: float = 1.0):
    """One optimizer step on (inputs, conditions); returns (loss, velocity).

    loss_grad_fn maps the batched network outputs to (scalar loss,
    d loss / d outputs). The step aborts without touching parameters if the
    loss is not finite.
    """
    x, c = batch
    if np.asarray(x).size == 0:
        raise ValueError("empty batch")
    y, ctx = net.forward_cached(x, c)
    loss, dy = loss_grad_fn(y)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss}")
    grads, _ = net.backward_cached(ctx, dy)
    velocity = apply_sgd_update(net, grads, cfg, velocity, lr_scale)
    return float(loss), velocity
