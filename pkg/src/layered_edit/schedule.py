"""Noise schedule, forward noising and deterministic DDIM stepping.

Schedule positions run from 0 (clean, ``alpha_bar = 1``) to ``S`` (noisiest).
Denoising step indices count from the noisy end: index 1 moves the latent
from position ``S`` to ``S - 1`` and index ``S`` lands on the clean position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import ParameterError, StateError, as_grid, check_same_shape

SNR_CLAMP = 1.0 - 1e-9


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar`` at ``S + 1`` positions."""

    steps: int
    alpha_bar: np.ndarray = field(repr=False)
    beta_start: float = 0.00085
    beta_end: float = 0.012
    train_steps: int = 1000

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.steps + 1,):
            raise ParameterError(f"alpha_bar must have {self.steps + 1} entries, got {ab.shape}")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ParameterError("alpha_bar must be strictly decreasing within (0, 1]")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def scaled_linear(cls, steps: int = 50, beta_start: float = 0.00085, beta_end: float = 0.012,
                      train_steps: int = 1000) -> "NoiseSchedule":
        """Scaled-linear beta schedule subsampled to ``steps`` sampler positions."""
        if steps < 1 or steps > train_steps:
            raise ParameterError(f"steps must lie in [1, {train_steps}], got {steps}")
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), train_steps) ** 2
        cumulative = np.cumprod(1.0 - betas)
        idx = np.round(np.arange(1, steps + 1) * (train_steps / steps)).astype(int) - 1
        alpha_bar = np.concatenate([[1.0], cumulative[idx]])
        return cls(steps, alpha_bar, beta_start, beta_end, train_steps)

    def position(self, step_index: int) -> int:
        """Schedule position a denoising step index starts from."""
        if not 1 <= step_index <= self.steps:
            raise ParameterError(f"denoising step index must lie in [1, {self.steps}], got {step_index}")
        return self.steps - step_index + 1

    def check_position(self, pos: int) -> None:
        if not 0 <= pos <= self.steps:
            raise ParameterError(f"position {pos} outside [0, {self.steps}]")


@dataclass(frozen=True)
class LatentState:
    step: int
    latent: np.ndarray = field(repr=False)


def forward_noise(z0, step: int, eps, sched: NoiseSchedule) -> np.ndarray:
    z0 = as_grid(z0, "z0")
    eps = as_grid(eps, "eps")
    check_same_shape(z0, eps, "forward_noise")
    sched.check_position(step)
    a = sched.alpha_bar[step]
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def snr(step: int, sched: NoiseSchedule, with_flag: bool = False):
    """``sqrt(alpha_bar / (1 - alpha_bar))`` at a schedule position.

    ``alpha_bar == 1`` is clamped to ``1 - 1e-9``; ``with_flag`` also returns
    whether the clamp fired.
    """
    sched.check_position(step)
    a = float(sched.alpha_bar[step])
    clamped = a >= 1.0
    if clamped:
        a = SNR_CLAMP
    value = math.sqrt(a / (1.0 - a))
    return (value, clamped) if with_flag else value


def _predict_clean(latent, noise_pred, a):
    return (latent - math.sqrt(1.0 - a) * noise_pred) / math.sqrt(a)


def ddim_step(state: LatentState, noise_pred, sched: NoiseSchedule) -> LatentState:
    """Deterministic (eta = 0) update from position ``p`` to ``p - 1``."""
    if state.step < 1:
        raise StateError("latent is already at the clean position")
    sched.check_position(state.step)
    check_same_shape(state.latent, np.asarray(noise_pred), "ddim_step")
    a_t = sched.alpha_bar[state.step]
    a_prev = sched.alpha_bar[state.step - 1]
    z0_hat = _predict_clean(state.latent, noise_pred, a_t)
    latent = math.sqrt(a_prev) * z0_hat + math.sqrt(1.0 - a_prev) * noise_pred
    return LatentState(state.step - 1, latent)


def ddim_invert_step(state: LatentState, noise_pred, sched: NoiseSchedule) -> LatentState:
    """Inverse of :func:`ddim_step`: position ``p`` to ``p + 1``."""
    if state.step >= sched.steps:
        raise StateError("latent is already at the noisiest position")
    check_same_shape(state.latent, np.asarray(noise_pred), "ddim_invert_step")
    a_t = sched.alpha_bar[state.step]
    a_next = sched.alpha_bar[state.step + 1]
    z0_hat = _predict_clean(state.latent, noise_pred, a_t)
    latent = math.sqrt(a_next) * z0_hat + math.sqrt(1.0 - a_next) * noise_pred
    return LatentState(state.step + 1, latent)


Denoiser = Callable[[np.ndarray, int], tuple]


def ddim_invert(z0, denoiser: Denoiser, sched: NoiseSchedule, refine: int = 0):
    """Run the deterministic sampler backwards from the clean latent.

    ``denoiser(latent, position)`` returns ``(noise_pred, maps)`` where ``maps``
    is a list of cross-attention maps (one per attention site).  The noise is
    predicted for the *destination* position, evaluated on the current latent;
    ``refine`` extra fixed-point passes re-evaluate it on the destination
    latent, which tightens the invert/denoise round trip.

    Returns the final state and the list of per-step map lists.
    """
    state = LatentState(0, as_grid(z0, "z0"))
    collected = []
    for _ in range(sched.steps):
        nxt = state.step + 1
        eps, maps = denoiser(state.latent, nxt)
        for _ in range(refine):
            guess = ddim_invert_step(state, eps, sched)
            eps, maps = denoiser(guess.latent, nxt)
        collected.append(list(maps))
        state = ddim_invert_step(state, eps, sched)
    return state, collected


def cfg_combine(eps_uncond, eps_cond, scale: float) -> np.ndarray:
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + scale * (eps_cond - eps_uncond)
