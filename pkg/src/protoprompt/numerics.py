"""Deterministic vector/matrix primitives and differentiable building blocks.

All functions are pure, operate on float64 numpy arrays and are safe to call
from any number of threads. Gradients are hand-derived; `fd_check` is the
independent finite-difference oracle used to validate every analytic gradient
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ZeroNormError

# Norm below which a vector is considered directionless.
NORM_FLOOR = 1e-12


def cosine_sim(a, b):
    """Cosine similarity a.b / (|a||b|).

    Raises ZeroNormError if either input has (near-)zero norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_sim_grad(a, b):
    """Cosine similarity and its gradient with respect to the second argument.

    d cos(a,b) / db = a/(|a||b|) - cos(a,b) * b/|b|^2. The gradient uses the
    full normalized form so it stays exact when b drifts off unit norm (as it
    does under finite-difference perturbation).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    grad_b = a / (na * nb) - c * b / (nb * nb)
    return c, grad_b


def l2_normalize(v):
    """Return (v/|v|, J) where J is the Jacobian of the normalization.

    J = (I - u u^T) / |v| with u = v/|v|.
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n <= NORM_FLOOR:
        raise ZeroNormError("cannot normalize a near-zero vector")
    u = v / n
    jac = (np.eye(v.size) - np.outer(u, u)) / n
    return u, jac


def masked_softmax_ce(logits, target_index, lo, hi, tau):
    """Cross-entropy of a temperature softmax restricted to logits[lo..hi].

    Returns (loss, grad) where grad has the same length as `logits` and is
    exactly zero outside the inclusive index window [lo, hi].

    Args:
        logits: 1-D array of raw scores.
        target_index: index of the true class, must lie inside [lo, hi].
        lo, hi: inclusive window bounds.
        tau: softmax temperature, > 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not (0 <= lo <= hi < logits.size):
        raise IndexError(f"window [{lo},{hi}] out of bounds for {logits.size} logits")
    if not (lo <= target_index <= hi):
        raise IndexError(f"target {target_index} outside window [{lo},{hi}]")

    window = logits[lo : hi + 1] / tau
    m = float(np.max(window))
    exps = np.exp(window - m)
    z = float(np.sum(exps))
    probs = exps / z
    loss = -(window[target_index - lo] - m - math.log(z))

    grad = np.zeros_like(logits)
    grad[lo : hi + 1] = probs / tau
    grad[target_index] -= 1.0 / tau
    return float(loss), grad


@dataclass(frozen=True)
class LrSchedule:
    """Cosine decay schedule from lr0 down to lr_min over total_steps."""

    lr0: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if not (self.lr0 >= self.lr_min > 0):
            raise ConfigError(
                f"schedule requires lr0 >= lr_min > 0, got lr0={self.lr0}, lr_min={self.lr_min}"
            )
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step, sched):
    """Learning rate at `step`: lr_min + (lr0-lr_min)(1+cos(pi*step/total))/2.

    Steps past the end of the schedule clamp to lr_min.
    """
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if step > sched.total_steps:
        return sched.lr_min
    frac = step / sched.total_steps
    return sched.lr_min + 0.5 * (sched.lr0 - sched.lr_min) * (1.0 + math.cos(math.pi * frac))


def seeded_orthogonal(d, seed):
    """Deterministic d x d orthogonal matrix from a seeded Gaussian QR.

    The Q factor is sign-fixed by the diagonal of R so the result is unique
    (and therefore bitwise reproducible) for a given (d, seed).
    """
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs


def fd_check(f, x, analytic_grad, h=1e-5):
    """Max relative error between central differences of f and analytic_grad.

    For each coordinate the relative error is |fd - g| / max(1, |fd|, |g|),
    which behaves like an absolute error for small gradients and a relative
    one for large gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} does not match input {x.shape}")
    worst = 0.0
    flat_g = g.ravel()
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fd = (f(xp) - f(xm)) / (2.0 * h)
        denom = max(1.0, abs(fd), abs(flat_g[i]))
        worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst
