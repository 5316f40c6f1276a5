"""Grid containers, seeded random streams and small elementwise numerics.

Feature grids are plain ``float64`` arrays of shape ``(H, W, C)`` laid out
row-major; masks are ``(H, W)`` arrays with values in ``[0, 1]``.  The helpers
here validate and coerce instead of wrapping arrays in container classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# feature roles used as the last component of a stream key
ROLE_QUERY = 0
ROLE_KEY = 1
ROLE_NOISE = 2
ROLE_WEIGHTS = 3
ROLE_TOKEN = 4


class ParameterError(ValueError):
    """Raised when an argument is outside the domain of an operation."""


class StateError(RuntimeError):
    """Raised when pipeline state is inconsistent (e.g. layers out of step)."""


class DegenerateObjectError(ValueError):
    """Raised when an object transparency has no mass."""


def as_grid(values, name: str = "grid") -> np.ndarray:
    """Return ``values`` as a finite ``(H, W, C)`` float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ParameterError(f"{name}: expected a non-empty (H, W, C) grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name}: contains non-finite values")
    return arr


def as_mask(values, name: str = "mask", binary: bool = False, shape=None) -> np.ndarray:
    """Return ``values`` as an ``(H, W)`` float64 mask in ``[0, 1]``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ParameterError(f"{name}: expected a non-empty (H, W) mask, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ParameterError(f"{name}: shape {arr.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(f"{name}: values must lie in [0, 1]")
    if binary and not np.all((arr == 0.0) | (arr == 1.0)):
        raise ParameterError(f"{name}: expected a binary mask")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ParameterError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class SeededRng:
    """A counter-based random stream keyed by ``(seed, *stream)``.

    The stream key is typically ``(layer_id, step, role)``.  Draws depend only
    on the key, never on the order in which streams are consumed, so layers can
    be evaluated in any order or concurrently.
    """

    seed: int
    stream: tuple = ()

    def child(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, tuple(self.stream) + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=tuple(self.stream))
        return np.random.Generator(np.random.Philox(ss))


def bernoulli_mask(shape, r: float, rng: SeededRng) -> np.ndarray:
    """Binary mask whose cells are independently 1 with probability ``r``."""
    if not 0.0 <= r <= 1.0:
        raise ParameterError(f"bernoulli probability must lie in [0, 1], got {r}")
    draws = rng.generator().random(tuple(shape))
    return (draws < r).astype(np.float64)


def _interp_axis(n_in: int, n_out: int, align_corners: bool):
    if align_corners:
        if n_out == 1:
            src = np.array([(n_in - 1) / 2.0])
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(grid, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """Bilinearly resample a grid (or mask) to ``(out_h, out_w)``.

    With ``align_corners`` the corner samples of source and output coincide
    (a 1x3 ramp ``[0, 1, 2]`` becomes ``[0, .5, 1, 1.5, 2]`` at width 5).
    Without it, sample centres are half-pixel aligned, which conserves the
    mass of a box scaled by an integer factor; geometry relies on that mode.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {(out_h, out_w)}")
    arr = np.asarray(grid, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        out = arr.copy()
    else:
        r0, r1, fr = _interp_axis(h, out_h, align_corners)
        c0, c1, fc = _interp_axis(w, out_w, align_corners)
        fr = fr[:, None, None]
        fc = fc[None, :, None]
        top = arr[r0][:, c0] * (1.0 - fc) + arr[r0][:, c1] * fc
        bot = arr[r1][:, c0] * (1.0 - fc) + arr[r1][:, c1] * fc
        out = top * (1.0 - fr) + bot * fr
    return out[:, :, 0] if squeeze else out


class Reduction(NamedTuple):
    value: float
    empty: bool


def masked_reduce(values, mask, reduction: str = "sum") -> Reduction:
    """Mask-weighted sum or mean over cells where ``mask > 0``.

    Grids are reduced over channels as well; the mean divides by the total
    mask weight times the channel count.  An empty support yields 0 with the
    ``empty`` flag set.
    """
    vals = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if vals.shape[:2] != m.shape:
        raise ParameterError(f"masked_reduce: shape mismatch {vals.shape} vs {m.shape}")
    if reduction not in ("sum", "mean"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    w = np.where(m > 0, m, 0.0)
    empty = not np.any(w > 0)
    if vals.ndim == 3:
        total = float(np.sum(vals * w[:, :, None]))
        weight = float(w.sum()) * vals.shape[2]
    else:
        total = float(np.sum(vals * w))
        weight = float(w.sum())
    if reduction == "sum":
        return Reduction(total, empty)
    if empty:
        return Reduction(0.0, True)
    return Reduction(total / weight, False)


def dilate(mask, radius: int) -> np.ndarray:
    """Binary dilation with a square (Chebyshev) structuring element."""
    m = np.asarray(mask) > 0
    if radius <= 0:
        return m.astype(np.float64)
    h, w = m.shape
    padded = np.pad(m, radius)
    out = np.zeros_like(m)
    for dh in range(-radius, radius + 1):
        for dw in range(-radius, radius + 1):
            out |= padded[radius + dh:radius + dh + h, radius + dw:radius + dw + w]
    return out.astype(np.float64)
