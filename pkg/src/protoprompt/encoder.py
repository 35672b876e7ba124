"""Frozen text-encoder boundary.

A deterministic stand-in for a pretrained text encoder: mean-pool the scaled
prompt tokens with the class-name token, apply a fixed orthogonal map, and
normalize. It is the simplest frozen encoder that mixes prompt and class-name
information while keeping nonzero, analytically known prompt gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ZeroNormError
from .numerics import seeded_orthogonal


@dataclass(frozen=True)
class ToyTextEncoder:
    """Immutable encoder state: a d x d orthogonal map and the prompt length M."""

    W: np.ndarray
    d: int
    M: int
    seed: int

    def __post_init__(self):
        if self.W.shape != (self.d, self.d):
            raise ShapeError(f"encoder map must be {self.d}x{self.d}, got {self.W.shape}")


def make_encoder(d, M, seed):
    return ToyTextEncoder(W=seeded_orthogonal(d, seed), d=d, M=M, seed=seed)


def encode_text_rows(enc, prompt, scale, tokens):
    """Encode one prompt block against R class tokens at once.

    h_k = (scale * sum_m prompt_m + token_k) / (M+1);  T_k = W h_k / |W h_k|.

    Returns (T, y_norms) with T of shape (R, d) and y_norms the pre-normalization
    magnitudes needed for gradient pullbacks.
    """
    prompt = np.asarray(prompt, dtype=np.float64)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    if prompt.shape != (enc.M, enc.d):
        raise ShapeError(f"prompt must be {enc.M}x{enc.d}, got {prompt.shape}")
    if tokens.shape[1] != enc.d:
        raise ShapeError(f"tokens must have dimension {enc.d}, got {tokens.shape[1]}")

    pooled = scale * prompt.sum(axis=0)
    h = (pooled[None, :] + tokens) / (enc.M + 1.0)
    y = h @ enc.W.T
    norms = np.linalg.norm(y, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroNormError("encoded text feature collapsed to zero norm")
    return y / norms[:, None], norms


def prompt_pullback_rows(enc, scale, T, y_norms, upstream):
    """Backpropagate dL/dT (R, d) through the encoder onto the prompt block.

    Every prompt token enters the mean pool identically, so each of the M rows
    of the returned (M, d) gradient is the same vector:
        scale/(M+1) * W^T * sum_k (I - T_k T_k^T) upstream_k / |y_k|.
    """
    inner = np.sum(T * upstream, axis=1)
    u = (upstream - T * inner[:, None]) / y_norms[:, None]
    v = (scale / (enc.M + 1.0)) * (u.sum(axis=0) @ enc.W)
    return np.tile(v, (enc.M, 1))


@dataclass(frozen=True)
class PromptPullback:
    """Linear map from an upstream d-vector to the (M, d) prompt gradient."""

    enc: ToyTextEncoder
    scale: float
    T: np.ndarray
    y_norm: float

    def pull(self, upstream):
        """dL/dprompt for a scalar loss with gradient `upstream` w.r.t. T."""
        return prompt_pullback_rows(
            self.enc, self.scale, self.T[None, :], np.array([self.y_norm]), np.atleast_2d(upstream)
        )

    def token_matrix(self):
        """Dense dT/dprompt_m (identical for every token m), for verification."""
        jac = (np.eye(self.enc.d) - np.outer(self.T, self.T)) / self.y_norm
        return jac @ self.enc.W * (self.scale / (self.enc.M + 1.0))


def encode_text(enc, prompt, scale, class_token):
    """Encode a single (prompt, class token) pair.

    Returns the unit-norm text feature and its prompt gradient as a linear map.
    """
    T, norms = encode_text_rows(enc, prompt, scale, np.asarray(class_token)[None, :])
    return T[0], PromptPullback(enc=enc, scale=scale, T=T[0], y_norm=float(norms[0]))
