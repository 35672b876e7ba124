"""Inference-time classification and metrics.

Prediction scores every seen class with both classifiers: the prototype rows
directly (vision) and the encoded text features built from the selected,
similarity-scaled prompt (text). The aggregated mode combines the two score
vectors; vision-only / text-only modes skip aggregation. Accuracy over a
growing task history uses the generalized average: correct predictions over
all exposed tasks' test data divided by the total test count, which weights
tasks by their test-set size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import encode_text_rows
from .errors import EmptyEvalError, NoClassesError
from .model import aggregate_scores, select_prompt

MODES = ("aggregated", "vision", "text")


def _vision_scores(z, banks):
    rows = banks.prototypes
    return rows @ z / (np.linalg.norm(rows, axis=1) * np.linalg.norm(z))


def class_scores(z, banks, enc, token_table, selection="weight_top_1", clamp_lambda=False, class_ids=None):
    """Score vectors (vision, text, candidate class ids).

    `class_ids` restricts the candidate label set (e.g. scoring only the
    second dataset's classes in a cross-dataset run); prompt selection always
    spans every prototype in the banks.
    """
    if banks.n_classes == 0:
        raise NoClassesError("no classes learned yet")
    z = np.asarray(z, dtype=np.float64)
    if class_ids is None:
        class_ids = banks.class_ids
        rows = np.arange(banks.n_classes)
    else:
        rows = np.array([banks.row_of(c) for c in class_ids])
    protos = banks.prototypes[rows]
    vision = protos @ z / (np.linalg.norm(protos, axis=1) * np.linalg.norm(z))
    tokens = np.stack([token_table.token(c) for c in class_ids])

    if selection == "weight_top_1":
        row, lam = select_prompt(z, banks, 0, banks.n_classes - 1)
        if clamp_lambda:
            lam = min(max(lam, 0.0), 1.0)
        weights, _ = encode_text_rows(enc, banks.prompts[row], lam, tokens)
    else:
        # ablation without selection: every class row uses its own prompt,
        # scaled by its own prototype similarity
        lam = vision.copy()
        if clamp_lambda:
            lam = np.clip(lam, 0.0, 1.0)
        pooled = banks.prompts[rows].sum(axis=1)
        h = (lam[:, None] * pooled + tokens) / (enc.M + 1.0)
        y = h @ enc.W.T
        weights = y / np.linalg.norm(y, axis=1, keepdims=True)

    text = weights @ z / (np.linalg.norm(weights, axis=1) * np.linalg.norm(z))
    return vision, text, list(class_ids)


def _argmax_class(scores, class_ids):
    best = np.max(scores)
    return min(class_ids[k] for k in np.nonzero(scores == best)[0])


def predict(
    z,
    banks,
    enc,
    token_table,
    mode="aggregated",
    aggregation="average",
    selection="weight_top_1",
    clamp_lambda=False,
    class_ids=None,
):
    """Classify one feature vector; ties resolve to the lowest class id."""
    vision, text, candidates = class_scores(
        z, banks, enc, token_table, selection, clamp_lambda, class_ids
    )
    if mode == "vision":
        scores = vision
    elif mode == "text":
        scores = text
    elif mode == "aggregated":
        scores = aggregate_scores(vision, text, aggregation)
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    return _argmax_class(scores, candidates)


def accuracy_counts(
    banks,
    enc,
    token_table,
    records,
    aggregation="average",
    selection="weight_top_1",
    clamp_lambda=False,
    class_ids=None,
):
    """(correct, total) per mode over a record list, sharing score computation."""
    counts = {m: 0 for m in MODES}
    for rec in records:
        vision, text, candidates = class_scores(
            rec.vector, banks, enc, token_table, selection, clamp_lambda, class_ids
        )
        agg = aggregate_scores(vision, text, aggregation)
        for mode, scores in (("aggregated", agg), ("vision", vision), ("text", text)):
            if _argmax_class(scores, candidates) == rec.class_id:
                counts[mode] += 1
    return {m: (counts[m], len(records)) for m in MODES}


def gen_avg_accuracy(per_task_counts, t):
    """Correct over tasks 1..t divided by their total test count.

    Args:
        per_task_counts: sequence of (n_correct, n_total), one per task in
            stream order (index 0 = first task).
        t: number of exposed tasks (1-based).
    """
    if not (1 <= t <= len(per_task_counts)):
        raise EmptyEvalError(f"t={t} outside 1..{len(per_task_counts)}")
    correct = sum(c for c, _ in per_task_counts[:t])
    total = sum(n for _, n in per_task_counts[:t])
    if total == 0:
        raise EmptyEvalError("no test records over the exposed tasks")
    return correct / total


def forward_transfer(acc_after_transfer, acc_standalone):
    """Accuracy gain of sequential cross-dataset training over training on
    the second dataset alone."""
    return acc_after_transfer - acc_standalone


def prototype_similarity_matrix(banks):
    """Symmetric matrix of pairwise prototype cosines (unit diagonal)."""
    if banks.n_classes == 0:
        raise NoClassesError("no prototypes to compare")
    rows = banks.prototypes
    norms = np.linalg.norm(rows, axis=1)
    return (rows @ rows.T) / np.outer(norms, norms)


@dataclass
class EvalReport:
    """Accuracy trajectories over a task sequence, one entry per eval point."""

    task_ids: list = field(default_factory=list)
    n_test: list = field(default_factory=list)  # cumulative test count at each point
    aggregated: list = field(default_factory=list)
    vision: list = field(default_factory=list)
    text: list = field(default_factory=list)
    ft: float = None

    @property
    def last_accuracy(self):
        return self.aggregated[-1]

    def append(self, task_id, n_test, agg, vis, txt):
        self.task_ids.append(task_id)
        self.n_test.append(n_test)
        self.aggregated.append(agg)
        self.vision.append(vis)
        self.text.append(txt)

    def summary(self):
        out = {
            "last_accuracy": self.aggregated[-1] if self.aggregated else None,
            "last_vision": self.vision[-1] if self.vision else None,
            "last_text": self.text[-1] if self.text else None,
            "n_eval_points": len(self.task_ids),
        }
        if self.ft is not None:
            out["forward_transfer"] = self.ft
        return out
