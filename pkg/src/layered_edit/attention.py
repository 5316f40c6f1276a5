"""A small, fixed-weight attention denoiser.

The substrate stands in for a diffusion backbone: one self-attention site
(with conflict-region removal on queries and keys), one cross-attention site
against synthetic token embeddings, an output projection and a sinusoidal
step bias.  Every weight is generated from a seed so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    ROLE_KEY,
    ROLE_QUERY,
    ROLE_TOKEN,
    ROLE_WEIGHTS,
    ParameterError,
    SeededRng,
    as_grid,
    as_mask,
    bernoulli_mask,
)


@dataclass(frozen=True)
class TokenSet:
    """Ordered, duplicate-free token ids with one embedding row per token."""

    tokens: tuple
    embeddings: np.ndarray = field(repr=False)

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        if len(set(toks)) != len(toks):
            raise ParameterError(f"duplicate token ids in {toks}")
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(toks):
            raise ParameterError(f"expected {len(toks)} embedding rows, got shape {emb.shape}")
        emb.setflags(write=False)
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "embeddings", emb)

    @classmethod
    def from_ids(cls, ids, seed: int, channels: int) -> "TokenSet":
        ids = tuple(int(t) for t in ids)
        rows = [token_embedding(t, seed, channels) for t in ids]
        emb = np.array(rows).reshape(len(ids), channels)
        return cls(ids, emb)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token_id) -> bool:
        return int(token_id) in self.tokens

    def index(self, token_id) -> int:
        try:
            return self.tokens.index(int(token_id))
        except ValueError:
            raise LookupError(f"token {token_id} not in prompt {self.tokens}") from None

    def without(self, ids) -> "TokenSet":
        drop = {int(t) for t in ids}
        keep = [k for k, t in enumerate(self.tokens) if t not in drop]
        return TokenSet(tuple(self.tokens[k] for k in keep), self.embeddings[keep])


def token_embedding(token_id: int, seed: int, channels: int) -> np.ndarray:
    """Unit-variance embedding that depends only on ``(seed, token_id)``."""
    rng = SeededRng(seed, (ROLE_TOKEN, int(token_id))).generator()
    return rng.standard_normal(channels)


@dataclass(frozen=True)
class AttentionWeights:
    """Query/key/value/output projections shared by every layer."""

    wq: np.ndarray = field(repr=False)
    wk: np.ndarray = field(repr=False)
    wv: np.ndarray = field(repr=False)
    wo: np.ndarray = field(repr=False)

    @classmethod
    def from_seed(cls, seed: int, channels: int, tied_qk: bool = True) -> "AttentionWeights":
        # tied query/key projections make the logits a positive semidefinite
        # similarity, so tokens attend to pixels that resemble them
        gen = SeededRng(seed, (ROLE_WEIGHTS,)).generator()
        scale = 1.0 / math.sqrt(channels)
        wq, wk, wv, wo = (gen.standard_normal((channels, channels)) * scale for _ in range(4))
        if tied_qk:
            wk = wq.copy()
        return cls(wq, wk, wv, wo)

    @property
    def channels(self) -> int:
        return self.wq.shape[0]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = logits - logits.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _flatten(values, weights: AttentionWeights, what: str):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        flat = arr.reshape(-1, arr.shape[2])
    elif arr.ndim == 2:
        flat = arr
    else:
        raise ParameterError(f"{what}: expected a grid or a row matrix, got shape {arr.shape}")
    if flat.shape[1] != weights.channels:
        raise ParameterError(f"{what}: {flat.shape[1]} channels, weights expect {weights.channels}")
    return arr, flat


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """``softmax(q k^T / sqrt(d)) v`` on row matrices; returns output and map."""
    a = _softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return a @ v, a


def attention_update(queries, context, weights: AttentionWeights):
    """Project queries and context, attend, and return ``(features, map)``.

    ``context`` is a feature grid (self-attention) or a :class:`TokenSet`
    (cross-attention).  The output keeps the spatial shape of ``queries``; the
    map has one row per query and one column per context element.
    """
    qarr, qflat = _flatten(queries, weights, "queries")
    ctx = context.embeddings if isinstance(context, TokenSet) else context
    _, cflat = _flatten(ctx, weights, "context")
    if cflat.shape[0] == 0:
        raise ParameterError("context is empty")
    out, a = attend(qflat @ weights.wq, cflat @ weights.wk, cflat @ weights.wv)
    return out.reshape(qarr.shape[:-1] + (out.shape[1],)), a


def cross_attention_map(latent, prompt: TokenSet, token_id, weights: AttentionWeights) -> np.ndarray:
    """Spatial map of one token's attention column, shape ``(H, W)``."""
    latent = as_grid(latent, "latent")
    col = prompt.index(token_id)
    _, a = attention_update(latent, prompt, weights)
    return a[:, col].reshape(latent.shape[:2])


def removal_gates(shape, m_con, r_q: float, r_k: float, rng: SeededRng):
    """Per-pixel multipliers ``1 - m_con * Bernoulli(r)`` for queries and keys.

    The two draws come from independent streams.
    """
    gq = 1.0 - m_con * bernoulli_mask(shape, r_q, rng.child(ROLE_QUERY))
    gk = 1.0 - m_con * bernoulli_mask(shape, r_k, rng.child(ROLE_KEY))
    return gq, gk


def _removed_self_attention(latent, m_con, r_q, r_k, rng, weights):
    latent = as_grid(latent, "latent")
    h, w, d = latent.shape
    if d != weights.channels:
        raise ParameterError(f"latent has {d} channels, weights expect {weights.channels}")
    m_con = as_mask(m_con, "m_con", binary=True, shape=(h, w))
    x = latent.reshape(-1, d)
    q = x @ weights.wq
    k = x @ weights.wk
    v = x @ weights.wv
    if np.any(m_con > 0) and (r_q > 0 or r_k > 0):
        gq, gk = removal_gates((h, w), m_con, r_q, r_k, rng)
        q = q * gq.reshape(-1, 1)
        k = k * gk.reshape(-1, 1)
    out, a = attend(q, k, v)
    return out.reshape(h, w, d), a


def removed_self_attention(latent, m_con, r_q: float, r_k: float, rng: SeededRng,
                           weights: AttentionWeights) -> np.ndarray:
    """Self-attention with stochastic removal of conflict-region queries/keys.

    Values are never gated, so removal only redistributes attention.
    """
    if not (0.0 <= r_q <= 1.0 and 0.0 <= r_k <= 1.0):
        raise ParameterError(f"removal rates must lie in [0, 1], got {(r_q, r_k)}")
    return _removed_self_attention(latent, m_con, r_q, r_k, rng, weights)[0]


@dataclass(frozen=True)
class Substrate:
    """The toy denoiser: shared weights plus a few fixed gains.

    Cross-attention inside the denoiser appends a null slot (fixed logit
    ``null_logit``, zero value) to every prompt, the way text encoders pad
    with start/end tokens.  Pixels unlike every token park their attention
    there, so text conditioning stays local; ``cross_sharpness`` scales the
    token logits.  ``out_gain`` sets how strongly attention features drive
    the noise prediction and ``cross_gain`` weighs text against self-attention.
    """

    channels: int = 32
    seed: int = 0
    cross_gain: float = 1.0
    out_gain: float = 0.02
    temb_gain: float = 0.05
    cross_sharpness: float = 3.0
    null_logit: float = 10.0
    weights: AttentionWeights = field(default=None, repr=False)

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", AttentionWeights.from_seed(self.seed, self.channels))

    def tokens(self, ids) -> TokenSet:
        return TokenSet.from_ids(ids, self.seed, self.channels)

    def step_bias(self, step: int) -> np.ndarray:
        c = np.arange(self.channels)
        freq = np.exp(-math.log(1000.0) * (c // 2) * 2.0 / self.channels)
        phase = np.where(c % 2 == 0, 0.0, math.pi / 2)
        return self.temb_gain * np.sin(step * freq + phase)

    def features(self, latent, prompt: TokenSet | None, m_con, r_q: float, r_k: float,
                 rng: SeededRng):
        """Attention output features and cross-attention maps of one pass.

        Returns ``(phi_self, phi, maps)``: the self-attention output, the full
        attention output (self plus weighted cross-attention), and the list of
        cross-attention maps.  Each map is ``(H*W, T + 1)``: one column per
        prompt token followed by the null slot.  ``maps`` is empty when there
        is no prompt.
        """
        phi_self, _ = _removed_self_attention(latent, m_con, r_q, r_k, rng, self.weights)
        return phi_self, *self.cross(latent, phi_self, prompt)

    def cross(self, latent, phi_self, prompt: TokenSet | None):
        if prompt is None or len(prompt) == 0:
            return phi_self, []
        d = self.channels
        x = (np.asarray(latent) + phi_self).reshape(-1, d)
        w = self.weights
        logits = self.cross_sharpness * (x @ w.wq) @ (prompt.embeddings @ w.wk).T / math.sqrt(d)
        logits = np.concatenate([logits, np.full((x.shape[0], 1), self.null_logit)], axis=1)
        a = _softmax_rows(logits)
        c = a[:, :-1] @ (prompt.embeddings @ w.wv)
        return phi_self + self.cross_gain * c.reshape(phi_self.shape), [a]

    def project(self, phi, step: int) -> np.ndarray:
        """Noise prediction from attention features at a schedule position."""
        return self.out_gain * (phi @ self.weights.wo) + self.step_bias(step)


def toy_denoise(latent, step: int, prompt: TokenSet | None, m_con, removal, rng: SeededRng,
                substrate: Substrate):
    """One denoiser evaluation: ``(noise_prediction, cross_attention_maps)``.

    ``removal`` is the pair of query/key removal rates for this step.
    """
    r_q, r_k = removal
    if not (0.0 <= r_q <= 1.0 and 0.0 <= r_k <= 1.0):
        raise ParameterError(f"removal rates must lie in [0, 1], got {(r_q, r_k)}")
    _, phi, maps = substrate.features(latent, prompt, m_con, r_q, r_k, rng)
    return substrate.project(phi, step), maps
