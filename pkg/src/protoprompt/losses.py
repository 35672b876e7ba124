"""Training objective: two cosine cross-entropy losses (vision and text
classifiers), a prompt-prototype pair-contrast term, and their weighted sum,
all with hand-derived analytic gradients.

Gradient conventions:
  - prototype gradients are keyed by bank row index and only ever contain
    non-frozen rows (a frozen parameter's gradient is identically zero and is
    simply omitted);
  - prompt gradients apply to the single selected prompt block, shared by all
    rows of the text classifier, and are None when that block is frozen;
  - all cosine gradients use the fully normalized form, so they remain exact
    off the unit sphere (required for finite-difference verification).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .encoder import prompt_pullback_rows
from .errors import ShapeError
from .numerics import masked_softmax_ce


class Selection(NamedTuple):
    """Result of prompt selection: bank row of the winning prototype and its
    cosine similarity (the prompt scale)."""

    row: int
    lam: float


@dataclass
class GradSet:
    proto: dict = field(default_factory=dict)  # bank row -> (d,)
    prompt: dict = field(default_factory=dict)  # bank row -> (M, d)

    def add_proto(self, row, g):
        if row in self.proto:
            self.proto[row] = self.proto[row] + g
        else:
            self.proto[row] = g

    def add_prompt(self, row, g):
        if row in self.prompt:
            self.prompt[row] = self.prompt[row] + g
        else:
            self.prompt[row] = g


@dataclass
class LossBreakdown:
    c1: float
    c2: float
    pp: float
    total: float
    grads: GradSet
    pp_degenerate: bool = False


def _cosine_rows(z, rows):
    """Cosines of z against each row, plus the pieces needed for gradients."""
    nz = float(np.linalg.norm(z))
    nr = np.linalg.norm(rows, axis=1)
    cos = rows @ z / (nz * nr)
    return cos, nz, nr


def _cosine_rows_grad(z, rows, cos, nz, nr, weights):
    """d(sum_k weights_k * cos(z, row_k)) / drow_k for every k, as an (R, d) array."""
    return weights[:, None] * (z[None, :] / (nz * nr[:, None]) - (cos / nr**2)[:, None] * rows)


def loss_c1(z, banks, target_row, k0, k1, tau):
    """Cross-entropy of the vision classifier restricted to rows [k0, k1].

    Returns (loss, proto_grads) with gradients only for non-frozen rows inside
    the window.
    """
    if not (k0 <= target_row <= k1):
        raise IndexError(f"target row {target_row} outside window [{k0},{k1}]")
    if not (0 <= k0 <= k1 < banks.n_classes):
        raise IndexError(f"window [{k0},{k1}] invalid for {banks.n_classes} classes")
    rows = banks.prototypes[k0 : k1 + 1]
    cos, nz, nr = _cosine_rows(np.asarray(z, dtype=np.float64), rows)
    loss, ce_grad = masked_softmax_ce(cos, target_row - k0, 0, cos.size - 1, tau)
    g_rows = _cosine_rows_grad(z, rows, cos, nz, nr, ce_grad)
    grads = {
        k0 + j: g_rows[j]
        for j in range(cos.size)
        if not banks.proto_frozen[k0 + j]
    }
    return loss, grads


def loss_c2(z, tc, target_class, tau, enc, prompt_trainable=True):
    """Cross-entropy of the text classifier over all of its rows.

    Gradients chain through the encoder onto the selected prompt block;
    returns (loss, prompt_grad) with prompt_grad None when the block is
    frozen (or the classifier carries no gradient state).
    """
    i = tc.row_of(target_class)
    z = np.asarray(z, dtype=np.float64)
    cos, nz, nt = _cosine_rows(z, tc.weights)
    loss, ce_grad = masked_softmax_ce(cos, i, 0, cos.size - 1, tau)
    if not prompt_trainable or tc.y_norms is None:
        return loss, None
    g_t = _cosine_rows_grad(z, tc.weights, cos, nz, nt, ce_grad)
    prompt_grad = prompt_pullback_rows(enc, tc.lam, tc.weights, tc.y_norms, g_t)
    return loss, prompt_grad


def _aligned_prototype_rows(tc, banks):
    rows = []
    for c in tc.class_ids:
        if not banks.has_class(c):
            raise IndexError(f"class {c} has no prototype row")
        rows.append(banks.row_of(c))
    return rows


def _pair_grads(T, I, S, n_t, n_i, coef):
    """Gradients of sum_jk coef_jk * cos(T_j, I_k) w.r.t. T rows and I rows."""
    a = coef / np.outer(n_t, n_i)
    g_i = a.T @ T - ((coef * S).sum(axis=0) / n_i**2)[:, None] * I
    g_t = a @ I - ((coef * S).sum(axis=1) / n_t**2)[:, None] * T
    return g_t, g_i


def _pair_scores(tc, banks):
    rows = _aligned_prototype_rows(tc, banks)
    I = banks.prototypes[rows]
    T = tc.weights
    n_t = np.linalg.norm(T, axis=1)
    n_i = np.linalg.norm(I, axis=1)
    S = (T @ I.T) / np.outer(n_t, n_i)
    return rows, T, I, S, n_t, n_i


def _finish_pair_loss(tc, banks, enc, rows, T, I, S, n_t, n_i, coef, loss, degenerate, prompt_trainable):
    g_t, g_i = _pair_grads(T, I, S, n_t, n_i, coef)
    proto_grads = {
        rows[k]: g_i[k] for k in range(len(rows)) if not banks.proto_frozen[rows[k]]
    }
    prompt_grad = None
    if prompt_trainable and tc.y_norms is not None:
        prompt_grad = prompt_pullback_rows(enc, tc.lam, T, tc.y_norms, g_t)
    return loss, proto_grads, prompt_grad, degenerate


def loss_pp(tc, banks, target_class, enc, prompt_trainable=True):
    """Pair-contrast term: cosine distance of the matched (text, prototype)
    pair plus the mean cosine similarity of every other pair.

    With R aligned rows there are R^2 - 1 non-matched pairs. A single-class
    classifier has no such pairs; the mean term is dropped and the result is
    flagged degenerate.

    Returns (loss, proto_grads, prompt_grad, degenerate).
    """
    rows, T, I, S, n_t, n_i = _pair_scores(tc, banks)
    i = tc.row_of(target_class)
    r = len(rows)
    if r == 1:
        loss = 1.0 - S[0, 0]
        coef = np.array([[-1.0]])
        degenerate = True
    else:
        n_pairs = r * r - 1
        loss = (1.0 - S[i, i]) + (S.sum() - S[i, i]) / n_pairs
        coef = np.full((r, r), 1.0 / n_pairs)
        coef[i, i] = -1.0
        degenerate = False
    return _finish_pair_loss(
        tc, banks, enc, rows, T, I, S, n_t, n_i, coef, float(loss), degenerate, prompt_trainable
    )


def supcon_variant(tc, banks, target_class, tau, enc, prompt_trainable=True):
    """Single-positive contrastive alternative to the pair-contrast term.

    -log( exp(s_ii/tau) / sum over non-matched pairs of exp(s_jk/tau) ); the
    denominator contains negatives only. Drop-in replacement for loss_pp under
    the ablation flag. Returns the same tuple shape as loss_pp.
    """
    rows, T, I, S, n_t, n_i = _pair_scores(tc, banks)
    # pairs are indexed (prototype row j, text row k) here; S is symmetric in
    # its construction either way since both sides use cosine similarity
    i = tc.row_of(target_class)
    r = len(rows)
    if r == 1:
        loss = -S[0, 0] / tau
        coef = np.array([[-1.0 / tau]])
        degenerate = True
    else:
        logits = S / tau
        neg_mask = np.ones((r, r), dtype=bool)
        neg_mask[i, i] = False
        m = float(np.max(logits[neg_mask]))
        w = np.where(neg_mask, np.exp(logits - m), 0.0)
        z = float(w.sum())
        loss = -logits[i, i] + m + math.log(z)
        coef = w / (z * tau)
        coef[i, i] = -1.0 / tau
        degenerate = False
    return _finish_pair_loss(
        tc, banks, enc, rows, T, I, S, n_t, n_i, coef, float(loss), degenerate, prompt_trainable
    )


def total_loss(
    z,
    banks,
    enc,
    selection,
    tc,
    target_class,
    tau=0.01,
    lambda_pp=1.5,
    c1_range=None,
    variant="pp",
):
    """Full objective: c1 + c2 + lambda_pp * pair term, with merged gradients.

    c1_range is the inclusive bank-row window of the current task's
    prototypes; pass None to skip the vision-classifier term (recurring-class
    records in domain-incremental training, whose targets lie outside the
    window).
    """
    grads = GradSet()
    c1 = 0.0
    if c1_range is not None:
        k0, k1 = c1_range
        c1, g1 = loss_c1(z, banks, banks.row_of(target_class), k0, k1, tau)
        for row, g in g1.items():
            grads.add_proto(row, g)

    prompt_trainable = not bool(banks.prompt_frozen[selection.row])
    c2, g_prompt = loss_c2(z, tc, target_class, tau, enc, prompt_trainable)
    if g_prompt is not None:
        grads.add_prompt(selection.row, g_prompt)

    if variant == "pp":
        pp, g_proto_pp, g_prompt_pp, degenerate = loss_pp(tc, banks, target_class, enc, prompt_trainable)
    elif variant == "supcon":
        pp, g_proto_pp, g_prompt_pp, degenerate = supcon_variant(
            tc, banks, target_class, tau, enc, prompt_trainable
        )
    else:
        raise ShapeError(f"unknown loss variant {variant!r}")

    for row, g in g_proto_pp.items():
        grads.add_proto(row, lambda_pp * g)
    if g_prompt_pp is not None:
        grads.add_prompt(selection.row, lambda_pp * g_prompt_pp)

    total = c1 + c2 + lambda_pp * pp
    return LossBreakdown(c1=c1, c2=c2, pp=pp, total=total, grads=grads, pp_degenerate=degenerate)
