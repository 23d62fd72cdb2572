"""Column-stencil gather/scatter between full fields and per-column samples.

The column networks see, for every grid column (i, j), the flattened values
of a local neighborhood: row offsets -row_halo..+row_halo (clamped at the
poles) and column offsets -col_halo..+col_halo (periodic in longitude), all
levels. Sample layout is neighbor-major with the level index fastest, i.e.
feature index = (neighbor * V + v) with neighbors enumerated row-offset
major, column-offset minor.

scatter_columns_adj is the exact adjoint of gather_columns; the pair carries
field-level gradients through the per-column networks.
"""

from __future__ import annotations

import numpy as np


def stencil_width(V: int, row_halo: int = 1, col_halo: int = 2) -> int:
    return (2 * row_halo + 1) * (2 * col_halo + 1) * V


def gather_columns(a: np.ndarray, row_halo: int = 1, col_halo: int = 2) -> np.ndarray:
    """(V,H,W) -> (H*W, S) or (B,V,H,W) -> (B*H*W, S), S = stencil_width."""
    batched = a.ndim == 4
    a4 = a if batched else a[None]
    B, V, H, W = a4.shape
    rows = np.arange(H)
    views = []
    for d_i in range(-row_halo, row_halo + 1):
        idx = np.clip(rows + d_i, 0, H - 1)
        shifted_rows = a4[:, :, idx, :]
        for d_j in range(-col_halo, col_halo + 1):
            views.append(np.roll(shifted_rows, -d_j, axis=3))
    stk = np.stack(views)  # (NB, B, V, H, W)
    return stk.transpose(1, 3, 4, 0, 2).reshape(B * H * W, -1)


def scatter_columns_adj(g: np.ndarray, shape: tuple, row_halo: int = 1,
                        col_halo: int = 2) -> np.ndarray:
    """Adjoint of gather_columns: maps per-column input gradients to a field."""
    batched = len(shape) == 4
    B = shape[0] if batched else 1
    V, H, W = shape[-3:]
    nb = (2 * row_halo + 1) * (2 * col_halo + 1)
    g5 = g.reshape(B, H, W, nb, V).transpose(3, 0, 4, 1, 2)  # (NB, B, V, H, W)
    out = np.zeros((B, V, H, W))
    out_rows_first = out.transpose(2, 0, 1, 3)  # (H, B, V, W) view into out
    rows = np.arange(H)
    k = 0
    for d_i in range(-row_halo, row_halo + 1):
        idx = np.clip(rows + d_i, 0, H - 1)
        for d_j in range(-col_halo, col_halo + 1):
            u = np.roll(g5[k], d_j, axis=3)
            np.add.at(out_rows_first, idx, u.transpose(2, 0, 1, 3))
            k += 1
    return out if batched else out[0]


def field_to_columns(a: np.ndarray) -> np.ndarray:
    """(V,H,W) -> (H*W, V) or (B,V,H,W) -> (B*H*W, V), j fastest within a field."""
    batched = a.ndim == 4
    a4 = a if batched else a[None]
    B, V, H, W = a4.shape
    return a4.transpose(0, 2, 3, 1).reshape(B * H * W, V)


def columns_to_field(cols: np.ndarray, shape: tuple) -> np.ndarray:
    """Inverse of field_to_columns."""
    batched = len(shape) == 4
    B = shape[0] if batched else 1
    V, H, W = shape[-3:]
    out = cols.reshape(B, H, W, V).transpose(0, 3, 1, 2)
    return out if batched else out[0]
