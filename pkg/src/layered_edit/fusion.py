"""Transparency-guided fusion of object layers into the canvas layer.

Transparencies are stored as an ``(N, H, W)`` array, one weight grid per
object layer; features as ``(N, H, W, C)``.  The loss is summed over pixels
and channels, which makes the gradient's structural term a channel sum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import ParameterError, dilate

TAU_CLAMP = (-0.5, 1.5)


def _tau(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 3:
        raise ParameterError(f"transparency must be (N, H, W), got shape {tau.shape}")
    return tau


def overlap_mask(tau) -> np.ndarray:
    """Cells where at least two layers have positive transparency."""
    tau = _tau(tau)
    return (np.sum(tau > 0, axis=0) >= 2).astype(np.float64)


def fuse(tau, layer_feats, canvas) -> np.ndarray:
    """``sum_i tau_i * phi_i + (1 - sum_i tau_i) * canvas`` per pixel."""
    tau = _tau(tau)
    feats = np.asarray(layer_feats, dtype=np.float64)
    canvas = np.asarray(canvas, dtype=np.float64)
    if feats.shape[:3] != tau.shape or feats.shape[1:] != canvas.shape:
        raise ParameterError(f"fuse: shapes {tau.shape}, {feats.shape}, {canvas.shape} disagree")
    weight = tau[..., None]
    total = weight.sum(axis=0)
    return np.sum(weight * feats, axis=0) + (1.0 - total) * canvas


def transparency_loss(tau, layer_feats, canvas, source, overlap=None) -> float:
    """Structure, non-negativity and sum-to-one penalties on the overlap.

    ``overlap`` defaults to :func:`overlap_mask` of ``tau``; pass it
    explicitly to hold it fixed (e.g. for finite differences).
    """
    tau = _tau(tau)
    m = overlap_mask(tau) if overlap is None else np.asarray(overlap, dtype=np.float64)
    resid = (fuse(tau, layer_feats, canvas) - source) * m[..., None]
    hinge = np.maximum(0.0, -tau)
    total = (1.0 - tau.sum(axis=0)) * m
    return float(np.sum(resid**2) + np.sum(hinge**2) + np.sum(total**2))


def transparency_grads(tau, layer_feats, canvas, source, overlap=None) -> np.ndarray:
    """Analytic gradient of :func:`transparency_loss` for every layer, ``(N, H, W)``."""
    tau = _tau(tau)
    feats = np.asarray(layer_feats, dtype=np.float64)
    canvas = np.asarray(canvas, dtype=np.float64)
    m = overlap_mask(tau) if overlap is None else np.asarray(overlap, dtype=np.float64)
    resid = (fuse(tau, feats, canvas) - source) * m[..., None]
    structure = 2.0 * np.sum(resid[None] * (feats - canvas[None]), axis=-1)
    hinge = 2.0 * np.maximum(0.0, -tau)
    total = 2.0 * (1.0 - tau.sum(axis=0)) * m
    return structure - hinge - total[None]


def transparency_grad(tau, n: int, layer_feats, canvas, source, overlap=None) -> np.ndarray:
    """Gradient with respect to layer ``n``'s transparency, ``(H, W)``."""
    return transparency_grads(tau, layer_feats, canvas, source, overlap)[n]


@dataclass
class TransparencyField:
    tau: np.ndarray = field(repr=False)
    iterations: int = 0
    step_size: float = 1e-2

    @property
    def overlap(self) -> np.ndarray:
        return overlap_mask(self.tau)

    def report(self) -> np.ndarray:
        """Transparencies clamped to ``[0, 1]`` for output."""
        return np.clip(self.tau, 0.0, 1.0)


def init_transparency(object_masks, extra_supports=None, seed_value: float = 0.05,
                      band: int = 2) -> TransparencyField:
    """Object masks plus a small positive band around each support.

    The band lets overlaps form where edited objects grow.  ``extra_supports``
    (one entry per object, or ``None``) adds further regions to seed, such as
    a geometric destination.
    """
    masks = np.asarray(object_masks, dtype=np.float64)
    if masks.ndim != 3:
        raise ParameterError(f"object masks must be (N, H, W), got shape {masks.shape}")
    tau = masks.copy()
    if seed_value > 0:
        for i in range(masks.shape[0]):
            support = masks[i] > 0
            if extra_supports is not None and extra_supports[i] is not None:
                support = support | (np.asarray(extra_supports[i]) > 0)
            seeded = dilate(support, band) > 0
            tau[i] = np.where((tau[i] == 0) & seeded, seed_value, tau[i])
    return TransparencyField(tau)


def _descend(tau, feats, canvas, source, step_size, iterations):
    start = transparency_loss(tau, feats, canvas, source)
    for _ in range(iterations):
        g = transparency_grads(tau, feats, canvas, source)
        tau = np.clip(tau - step_size * g, *TAU_CLAMP)
    return tau, start, transparency_loss(tau, feats, canvas, source)


def optimize_transparency(tf: TransparencyField, layer_feats, canvas, source,
                          step_size: float | None = None, iterations: int = 10,
                          max_halvings: int = 3) -> TransparencyField:
    """Plain gradient descent on the transparencies.

    The overlap mask is recomputed every iteration.  If the loss ends higher
    than it started, the run is retried from the same start with half the
    step size (at most ``max_halvings`` times).  The returned field keeps the
    step size that was finally used, so later calls continue from it.
    """
    step_size = tf.step_size if step_size is None else step_size
    if step_size <= 0:
        raise ParameterError(f"step size must be positive, got {step_size}")
    if iterations <= 0:
        return TransparencyField(tf.tau.copy(), tf.iterations, step_size)
    feats = np.asarray(layer_feats, dtype=np.float64)
    for attempt in range(max_halvings + 1):
        tau, start, end = _descend(tf.tau, feats, canvas, source, step_size, iterations)
        # relative slack so round-off on a loss that is already ~0 is not divergence
        if end <= start * (1 + 1e-9) + 1e-12 or attempt == max_halvings:
            break
        warnings.warn(f"transparency loss rose from {start:.3e} to {end:.3e}; "
                      f"retrying with step size {step_size / 2:g}", RuntimeWarning, stacklevel=2)
        step_size /= 2
    return TransparencyField(tau, tf.iterations + iterations, step_size)
