"""Centroid-aligned move and resize of attention features onto the canvas."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import DegenerateObjectError, ParameterError, as_grid


@dataclass(frozen=True)
class GeometricOp:
    kind: str
    obj: int
    dh: int = 0
    dw: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("move", "resize"):
            raise ParameterError(f"unknown geometric op {self.kind!r}")
        if self.kind == "resize" and not self.scale > 0:
            raise ParameterError(f"resize scale must be positive, got {self.scale}")

    def check(self, h: int, w: int) -> None:
        if abs(self.dh) > h - 1 or abs(self.dw) > w - 1:
            raise ParameterError(f"displacement {(self.dh, self.dw)} exceeds grid {(h, w)}")


def centroid(tau) -> tuple:
    """Transparency-weighted mean ``(row, col)`` coordinate."""
    tau = np.asarray(tau, dtype=np.float64)
    mass = tau.sum()
    if not mass > 0:
        raise DegenerateObjectError("object transparency has no mass")
    rows, cols = np.indices(tau.shape)
    return float((rows * tau).sum() / mass), float((cols * tau).sum() / mass)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def shift(x, dh: int, dw: int) -> np.ndarray:
    """``out[h, w] = x[h - dh, w - dw]`` with zero fill outside the source."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    h, w = x.shape[:2]
    if abs(dh) >= h or abs(dw) >= w:
        return out
    dst_r = slice(max(dh, 0), h + min(dh, 0))
    src_r = slice(max(-dh, 0), h + min(-dh, 0))
    dst_c = slice(max(dw, 0), w + min(dw, 0))
    src_c = slice(max(-dw, 0), w + min(-dw, 0))
    out[dst_r, dst_c] = x[src_r, src_c]
    return out


def move_map(canvas, tau_i, dh: int, dw: int) -> np.ndarray:
    """Carry canvas features under the object's transparency by ``(dh, dw)``."""
    canvas = as_grid(canvas, "canvas")
    h, w = canvas.shape[:2]
    GeometricOp("move", 0, dh, dw).check(h, w)
    if dh == 0 and dw == 0:
        return canvas.copy()
    moved_tau = shift(tau_i, dh, dw)[:, :, None]
    return canvas * (1.0 - moved_tau) + shift(canvas, dh, dw) * moved_tau


@dataclass(frozen=True)
class ResizePlacement:
    """Where a resized object lands: resized arrays plus destination offset."""

    tau: np.ndarray
    feats: np.ndarray
    offset: tuple
    window: tuple


def scale_weights(n_in: int, s: float) -> np.ndarray:
    """``(n_out, n_in)`` bilinear resampling matrix for an exact scale ``s``.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) / s - 0.5``
    (half-pixel alignment) and takes a tent-weighted average of the source.
    The tent has radius 1 when enlarging, which is ordinary bilinear
    interpolation, and radius ``1 / s`` when shrinking so that every source
    cell contributes (the usual antialiased variant).  Rows are normalised.
    Using ``s`` itself rather than a rounded output size keeps the mass of a
    resized support close to ``s**2`` times the original.
    """
    n_out = max(1, math.ceil(n_in * s - 1e-9))
    radius = max(1.0, 1.0 / s)
    centres = (np.arange(n_out) + 0.5) / s - 0.5
    dist = np.abs(np.arange(n_in)[None, :] - centres[:, None])
    wts = np.maximum(0.0, 1.0 - dist / radius)
    total = wts.sum(axis=1, keepdims=True)
    # an output centre beyond the last source cell copies the nearest edge cell
    edge = total[:, 0] == 0
    if np.any(edge):
        wts[edge, np.clip(np.round(centres[edge]).astype(int), 0, n_in - 1)] = 1.0
        total = wts.sum(axis=1, keepdims=True)
    return wts / total


def scale_grid(x, s: float) -> np.ndarray:
    """Resample a mask or feature grid by ``s`` along both spatial axes."""
    x = np.asarray(x, dtype=np.float64)
    rows = scale_weights(x.shape[0], s)
    cols = scale_weights(x.shape[1], s)
    if x.ndim == 2:
        return rows @ x @ cols.T
    return np.einsum("ih,hwc,jw->ijc", rows, x, cols)


def resize_placement(layer_feats, tau_i, s: float) -> ResizePlacement:
    layer_feats = as_grid(layer_feats, "layer_feats")
    tau_i = np.asarray(tau_i, dtype=np.float64)
    if not s > 0:
        raise ParameterError(f"resize scale must be positive, got {s}")
    h, w = tau_i.shape
    ch, cw = centroid(tau_i)
    if s == 1.0:
        r_tau, r_feats = tau_i.copy(), layer_feats * tau_i[:, :, None]
    else:
        r_tau = scale_grid(tau_i, s)
        r_feats = scale_grid(layer_feats * tau_i[:, :, None], s)
    out_h, out_w = r_tau.shape
    rh, rw = centroid(r_tau)
    offset = (round_half_up(ch - rh), round_half_up(cw - rw))
    wh, ww = min(h, out_h), min(w, out_w)
    top = round_half_up(ch - wh / 2.0)
    left = round_half_up(cw - ww / 2.0)
    window = (max(top, 0), min(top + wh, h), max(left, 0), min(left + ww, w))
    return ResizePlacement(r_tau, r_feats, offset, window)


def place(placement: ResizePlacement, shape) -> tuple:
    """Paste the resized arrays into grid coordinates, clipped to the window.

    Returns ``(tau, feats, region)`` on the full grid, where ``region`` marks
    the cells that were written.
    """
    h, w, c = shape
    tau = np.zeros((h, w))
    feats = np.zeros((h, w, c))
    region = np.zeros((h, w), dtype=bool)
    oh, ow = placement.offset
    rh, rw = placement.tau.shape
    t, b, l, r = placement.window
    t, b = max(t, oh), min(b, oh + rh)
    l, r = max(l, ow), min(r, ow + rw)
    if t < b and l < r:
        tau[t:b, l:r] = placement.tau[t - oh:b - oh, l - ow:r - ow]
        feats[t:b, l:r] = placement.feats[t - oh:b - oh, l - ow:r - ow]
        region[t:b, l:r] = True
    return tau, feats, region


def resize_map(layer_feats, canvas, tau_i, s: float) -> np.ndarray:
    """Write the object, rescaled by ``s`` about its centroid, onto the canvas.

    Inside the centroid-anchored window each cell becomes
    ``resized(phi * tau) + canvas * (1 - resized(tau))``; cells outside it
    are left alone.
    """
    canvas = as_grid(canvas, "canvas")
    layer_feats = as_grid(layer_feats, "layer_feats")
    if layer_feats.shape != canvas.shape:
        raise ParameterError(f"resize_map: shapes {layer_feats.shape} vs {canvas.shape}")
    placement = resize_placement(layer_feats, tau_i, s)
    tau, feats, region = place(placement, canvas.shape)
    out = canvas.copy()
    blended = feats + canvas * (1.0 - tau[:, :, None])
    out[region] = blended[region]
    return out


def destination_support(op: GeometricOp, mask) -> np.ndarray:
    """Where an object mask ends up under a geometric op (for seeding)."""
    mask = np.asarray(mask, dtype=np.float64)
    if op.kind == "move":
        return shift(mask, op.dh, op.dw)
    placement = resize_placement(np.zeros(mask.shape + (1,)), mask, op.scale)
    tau, _, _ = place(placement, mask.shape + (1,))
    return (tau > 0).astype(np.float64)
