"""Per-task training loop.

Recipe per task: shuffle, per-example prompt selection over the current
task's prototype rows, a sampled text classifier (current classes plus a
fresh random draw of earlier class names each step), batch-averaged plain SGD
under a cosine learning-rate schedule, and prototype renormalization after
every step. Frozen rows are never touched.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import encode_text_rows
from .errors import ConfigError, NoDataError
from .losses import Selection, total_loss
from .model import TextClassifier, sample_old_classes, select_prompt
from .numerics import LrSchedule, cosine_lr

_TRAIN_NS = 201


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr0: float = 1e-3
    lr_min: float = 1e-4
    weight_decay: float = 0.0
    tau: float = 0.01
    lambda_pp: float = 1.5
    M: int = 6
    sample_old: int = 10
    clamp_lambda: bool = False
    loss_variant: str = "pp"  # pp | supcon
    selection: str = "weight_top_1"  # weight_top_1 | none
    proto_mode: str = "refined"  # refined | frozen | scratch
    stc: bool = True  # sampled text classifier; off = current-task names only
    aggregation: str = "average"  # average | max
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.M < 1 or self.sample_old < 0:
            raise ConfigError("epochs/batch_size/M/sample_old out of range")
        if self.tau <= 0 or self.lambda_pp < 0 or self.weight_decay < 0:
            raise ConfigError("tau must be > 0; lambda_pp and weight_decay must be >= 0")
        zero_lr = self.lr0 == 0.0 and self.lr_min == 0.0
        if not zero_lr and not (self.lr0 >= self.lr_min > 0):
            raise ConfigError(f"need lr0 >= lr_min > 0 (or both zero), got {self.lr0}, {self.lr_min}")
        if self.loss_variant not in ("pp", "supcon"):
            raise ConfigError(f"unknown loss_variant {self.loss_variant!r}")
        if self.selection not in ("weight_top_1", "none"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.proto_mode not in ("refined", "frozen", "scratch"):
            raise ConfigError(f"unknown proto_mode {self.proto_mode!r}")
        if self.aggregation not in ("average", "max"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class EpochStats:
    epoch: int
    c1: float
    c2: float
    pp: float
    total: float
    lr: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    steps: int = 0
    final_lr: float = 0.0


def snapshot(banks, rows=None):
    """Content hash of bank parameters; equal iff the parameters are byte-equal.

    `rows` restricts the digest to a subset of bank rows (e.g. everything
    introduced before the current task).
    """
    h = hashlib.sha256()
    indices = range(banks.n_classes) if rows is None else rows
    for k in indices:
        h.update(
            struct.pack(
                "<Iq??",
                banks.class_ids[k],
                int(banks.task_of[k]),
                bool(banks.proto_frozen[k]),
                bool(banks.prompt_frozen[k]),
            )
        )
        h.update(banks.prototypes[k].tobytes())
        h.update(banks.prompts[k].tobytes())
    return h.hexdigest()


def _select_for_example(z, banks, cfg, k0, k1, target_row):
    if cfg.selection == "weight_top_1":
        row, lam = select_prompt(z, banks, k0, k1)
    else:  # ground-truth routing: the example trains its own class's prompt
        row = target_row
        p = banks.prototypes[row]
        lam = float(p @ z / (np.linalg.norm(p) * np.linalg.norm(z)))
    if cfg.clamp_lambda:
        lam = min(max(lam, 0.0), 1.0)
    return row, lam


def train_task(banks, enc, records, cfg, token_table, task_id):
    """Train the current task's prototype rows and prompt blocks in place.

    `records` are the task's train-split embedding records (recurring classes
    from earlier tasks are allowed; they skip the vision-classifier window
    term). Returns a TrainLog with per-epoch mean loss components.
    """
    if not records:
        raise NoDataError(f"task {task_id} has no training records")
    new_rows = banks.rows_of_task(task_id)
    if new_rows.size == 0:
        raise NoDataError(f"banks contain no classes introduced by task {task_id}")
    k0, k1 = int(new_rows.min()), int(new_rows.max())
    new_class_ids = [banks.class_ids[k] for k in range(k0, k1 + 1)]
    old_class_ids = [c for c in banks.class_ids if banks.task_of[banks.row_of(c)] != task_id]

    log = TrainLog()
    if cfg.epochs == 0:
        return log

    n = len(records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    zero_lr = cfg.lr0 == 0.0 and cfg.lr_min == 0.0
    sched = None if zero_lr else LrSchedule(cfg.lr0, cfg.lr_min, max(1, total_steps - 1))

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TRAIN_NS, task_id]))
    token_vec = {c: token_table.token(c) for c in banks.class_ids}

    step = 0
    lr = 0.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for b0 in range(0, n, cfg.batch_size):
            batch = [records[i] for i in order[b0 : b0 + cfg.batch_size]]
            lr = 0.0 if zero_lr else cosine_lr(step, sched)

            if cfg.stc and old_class_ids:
                sampled = sample_old_classes(old_class_ids, cfg.sample_old, rng)
            else:
                sampled = []
            base_ids = new_class_ids + sampled
            token_stacks = {tuple(base_ids): np.stack([token_vec[c] for c in base_ids])}

            grads_proto = {}
            grads_prompt = {}
            for rec in batch:
                z = rec.vector
                target_row = banks.row_of(rec.class_id)
                sel_row, lam = _select_for_example(z, banks, cfg, k0, k1, target_row)

                ids = base_ids
                if rec.class_id not in ids:
                    ids = base_ids + [rec.class_id]
                key = tuple(ids)
                if key not in token_stacks:
                    token_stacks[key] = np.stack([token_vec[c] for c in ids])

                weights, y_norms = encode_text_rows(enc, banks.prompts[sel_row], lam, token_stacks[key])
                tc = TextClassifier(
                    weights=weights, class_ids=list(ids), y_norms=y_norms, lam=lam, prompt_row=sel_row
                )
                c1_range = (k0, k1) if k0 <= target_row <= k1 else None
                bd = total_loss(
                    z,
                    banks,
                    enc,
                    Selection(sel_row, lam),
                    tc,
                    rec.class_id,
                    tau=cfg.tau,
                    lambda_pp=cfg.lambda_pp,
                    c1_range=c1_range,
                    variant=cfg.loss_variant,
                )
                sums += (bd.c1, bd.c2, bd.pp, bd.total)
                for row, g in bd.grads.proto.items():
                    grads_proto[row] = grads_proto.get(row, 0.0) + g
                for row, g in bd.grads.prompt.items():
                    grads_prompt[row] = grads_prompt.get(row, 0.0) + g

            if lr != 0.0:
                inv = 1.0 / len(batch)
                for row, g in grads_proto.items():
                    p = banks.prototypes[row]
                    p = p - lr * (g * inv + cfg.weight_decay * p)
                    banks.prototypes[row] = p / np.linalg.norm(p)
                for row, g in grads_prompt.items():
                    block = banks.prompts[row]
                    banks.prompts[row] = block - lr * (g * inv + cfg.weight_decay * block)
            step += 1

        mean = sums / n
        log.epochs.append(
            EpochStats(epoch=epoch, c1=mean[0], c2=mean[1], pp=mean[2], total=mean[3], lr=lr)
        )

    log.steps = step
    log.final_lr = lr
    return log
