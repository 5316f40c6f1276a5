"""Conflict-aware decomposition: attention aggregation, soft IoU, conflict
masks and the SNR-driven removal-rate schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import ParameterError, SeededRng, as_grid, as_mask, bernoulli_mask, check_same_shape
from .schedule import NoiseSchedule, snr

ETA_RANGE = (0.25, 0.35)
K_RANGE = (3.0, 8.0)
TQ_RANGE = (15, 25)
TK_RANGE = (35, 45)
REFERENCE_STEPS = 50
# default thresholds as fractions of the step count: 20 and 40 of 50
TQ_FRACTION = 0.4
TK_FRACTION = 0.8


def aggregate_attention(maps, token_cols=None) -> np.ndarray:
    """Average attention maps over steps (and tokens), then max-normalise.

    ``maps`` is a non-empty sequence of ``(H, W)`` soft maps, or of
    ``(H, W, T)`` stacks when ``token_cols`` selects the object's token
    columns.  The result lies in ``[0, 1]`` with maximum 1 unless it is
    identically zero.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ParameterError("aggregate_attention needs at least one map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ParameterError(f"map shapes differ: {m.shape} vs {shape}")
    stack = np.stack(maps)
    if token_cols is not None:
        if stack.ndim != 4:
            raise ParameterError("token_cols needs (H, W, T) maps")
        stack = stack[..., list(token_cols)].mean(axis=-1)
    mean = stack.mean(axis=0)
    peak = mean.max()
    if peak <= 0:
        return np.zeros_like(mean)
    return mean / peak


def a_iou(agg, m_pan, with_flag: bool = False):
    """Soft IoU ``sum(min(A, M)) / sum(max(A, M))``.

    On binary inputs this is the ordinary IoU.  Two all-zero operands give 0
    (``with_flag`` reports the degenerate case).
    """
    agg = np.asarray(agg, dtype=np.float64)
    m_pan = np.asarray(m_pan, dtype=np.float64)
    check_same_shape(agg, m_pan, "a_iou")
    union = float(np.maximum(agg, m_pan).sum())
    if union == 0.0:
        return (0.0, True) if with_flag else 0.0
    value = float(np.minimum(agg, m_pan).sum()) / union
    return (value, False) if with_flag else value


def validate_panoptic(panoptic) -> list:
    masks = [as_mask(m, f"panoptic[{j}]", binary=True) for j, m in enumerate(panoptic)]
    if masks:
        shape = masks[0].shape
        for j, m in enumerate(masks):
            if m.shape != shape:
                raise ParameterError(f"panoptic[{j}]: shape {m.shape} differs from {shape}")
        if np.any(np.sum(masks, axis=0) > 1):
            raise ParameterError("panoptic masks overlap")
    return masks


def iou_matrix(aggregated, panoptic) -> np.ndarray:
    """``N x K`` matrix of soft IoUs between object maps and panoptic regions."""
    out = np.zeros((len(aggregated), len(panoptic)))
    for i, agg in enumerate(aggregated):
        for j, pan in enumerate(panoptic):
            out[i, j] = a_iou(agg, pan)
    return out


def conflict_mask(iou_row, eta: float, panoptic, m_o) -> np.ndarray:
    """Union of panoptic regions scoring above ``eta``, minus the object mask."""
    if not 0.0 < eta < 1.0:
        raise ParameterError(f"eta must lie in (0, 1), got {eta}")
    panoptic = validate_panoptic(panoptic)
    iou_row = np.asarray(iou_row, dtype=np.float64)
    if iou_row.shape != (len(panoptic),):
        raise ParameterError(f"iou row has {iou_row.shape} entries for {len(panoptic)} regions")
    m_o = as_mask(m_o, "m_o", binary=True)
    union = np.zeros_like(m_o)
    for score, pan in zip(iou_row, panoptic):
        if score > eta:
            check_same_shape(pan, m_o, "conflict_mask")
            union = np.maximum(union, pan)
    return np.clip(union - m_o, 0.0, 1.0)


@dataclass
class ConflictReport:
    iou: np.ndarray
    masks: list
    eta: float
    aggregated: list = field(default_factory=list)


def decompose(aggregated, panoptic, object_masks, eta: float) -> ConflictReport:
    panoptic = validate_panoptic(panoptic)
    iou = iou_matrix(aggregated, panoptic)
    masks = [conflict_mask(iou[i], eta, panoptic, m_o) for i, m_o in enumerate(object_masks)]
    return ConflictReport(iou, masks, eta, list(aggregated))


@dataclass(frozen=True)
class RemovalSchedule:
    """Sigmoid removal rate ``r(t)`` with steepness ``k`` and inflection step.

    ``t_thres`` is a denoising step index (1 = first step from the noisy end).
    """

    k: float = 5.0
    t_thres: int = 20

    def rates(self, sched: NoiseSchedule) -> np.ndarray:
        """``r`` for every denoising step index ``1..S`` (entry 0 is step 1)."""
        return np.array([removal_rate(j, sched, self) for j in range(1, sched.steps + 1)])


def removal_rate(step_index: int, sched: NoiseSchedule, rs: RemovalSchedule) -> float:
    """``sigmoid(k * (SNR(t_thres) / SNR(t) - 1))`` at a denoising step index."""
    ref = snr(sched.position(rs.t_thres), sched)
    cur = snr(sched.position(step_index), sched)
    x = rs.k * (ref / cur - 1.0)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def region_remove(f, m_con, r: float, rng: SeededRng) -> np.ndarray:
    """``f * (1 - m_con * Bernoulli(r))`` with per-pixel draws."""
    f = as_grid(f, "f")
    m_con = as_mask(m_con, "m_con", binary=True, shape=f.shape[:2])
    gate = 1.0 - m_con * bernoulli_mask(m_con.shape, r, rng)
    return f * gate[:, :, None]


def range_warnings(eta: float, k: float, t_query: int, t_key: int, steps: int = REFERENCE_STEPS) -> list:
    """Messages for hyperparameters outside their validated robust ranges.

    The threshold ranges are stated for a 50-step sampler and scale with ``steps``.
    """
    f = steps / REFERENCE_STEPS
    tq = (TQ_RANGE[0] * f, TQ_RANGE[1] * f)
    tk = (TK_RANGE[0] * f, TK_RANGE[1] * f)
    msgs = []
    for name, value, (lo, hi) in (("eta", eta, ETA_RANGE), ("k", k, K_RANGE),
                                  ("t_query", t_query, tq), ("t_key", t_key, tk)):
        if not lo <= value <= hi:
            msgs.append(f"{name}={value} outside validated range [{lo}, {hi}]")
    return msgs


def warn_ranges(eta: float, k: float, t_query: int, t_key: int, steps: int = REFERENCE_STEPS) -> list:
    msgs = range_warnings(eta, k, t_query, t_key, steps)
    for msg in msgs:
        warnings.warn(msg, stacklevel=2)
    return msgs
