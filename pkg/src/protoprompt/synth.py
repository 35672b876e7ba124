"""Deterministic synthetic embedding streams for the three scenarios.

Class means live on the unit sphere; a sample is normalize(mean + domain
offset + Gaussian noise). The same config (including seed) always produces a
bitwise-identical stream because every random draw comes from a value-keyed
SeedSequence.

Modes:
  ci   disjoint classes per task, balanced per-class counts, single domain.
  cdc  a second dataset geometrically related to the ci stream of the same
       seed: class means and name tokens are perturbed copies (perturbation
       magnitude = domain_shift_scale), class ids are offset to stay disjoint,
       and all records carry domain id 1.
  cdi  later tasks reintroduce a fraction of earlier classes under a fresh
       domain offset; per-class train totals follow an exponential long-tail
       profile with max/min ratio equal to imbalance_factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .records import SPLIT_TEST, SPLIT_TRAIN, ClassTokenTable, EmbeddingRecord, Task, TaskStream

# SeedSequence namespace tags; distinct per purpose so streams never alias.
_NS_MEANS = 11
_NS_TOKEN = 12
_NS_RECUR = 13
_NS_SAMPLE = 14
_NS_DOMOFF = 15
_NS_CDC_MEAN = 16
_NS_CDC_TOKEN = 17


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for synthetic stream generation.

    samples_per_class is the train count of the most frequent class; under a
    long-tail profile (cdi) rarer classes decay down to samples_per_class /
    imbalance_factor, and a recurring class's total is split across its
    appearances.
    """

    d: int = 16
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 100
    imbalance_factor: float = 1.0
    domain_shift_scale: float = 0.0
    noise_scale: float = 0.1
    test_per_class_per_domain: int = 10
    recur_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "num_tasks", "classes_per_task", "samples_per_class", "test_per_class_per_domain"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.imbalance_factor < 1:
            raise ConfigError(f"imbalance_factor must be >= 1, got {self.imbalance_factor}")
        if self.domain_shift_scale < 0 or self.noise_scale < 0:
            raise ConfigError("scales must be non-negative")
        if not (0.0 <= self.recur_fraction <= 1.0):
            raise ConfigError(f"recur_fraction must be in [0,1], got {self.recur_fraction}")


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _class_means(cfg, n_classes):
    rng = _rng(cfg.seed, _NS_MEANS)
    means = rng.standard_normal((n_classes, cfg.d))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def _long_tail_counts(cfg, n_classes):
    """Per-class train totals: round(n_max * IF^(-i/(C-1))), descending in i."""
    n_max = cfg.samples_per_class
    if n_classes == 1 or cfg.imbalance_factor == 1.0:
        return [n_max] * n_classes
    counts = []
    for i in range(n_classes):
        n = round(n_max * cfg.imbalance_factor ** (-i / (n_classes - 1)))
        if n < 1:
            raise ConfigError(
                f"imbalance_factor {cfg.imbalance_factor} drives class {i} below one sample"
            )
        counts.append(n)
    return counts


def _sample_block(cfg, class_id, task_id, mean, offset, n_train, n_test):
    """Draw train+test records for one (class, task) appearance."""
    rng = _rng(cfg.seed, _NS_SAMPLE, task_id, class_id)
    out = []
    for split, n in ((SPLIT_TRAIN, n_train), (SPLIT_TEST, n_test)):
        for _ in range(n):
            v = mean + offset + cfg.noise_scale * rng.standard_normal(cfg.d)
            norm = np.linalg.norm(v)
            if norm <= 1e-12:
                raise ConfigError("noise cancelled a class mean exactly; change the seed")
            out.append((split, v / norm))
    return out


def gen_synthetic(cfg, mode):
    """Generate a TaskStream for the given scenario mode ("ci"/"cdc"/"cdi")."""
    mode = mode.lower()
    if mode not in ("ci", "cdc", "cdi"):
        raise ConfigError(f"unknown synthetic mode {mode!r}")

    n_classes = cfg.num_tasks * cfg.classes_per_task
    id_offset = n_classes if mode == "cdc" else 0
    means = _class_means(cfg, n_classes)

    tokens = ClassTokenTable()
    for idx in range(n_classes):
        tok = _unit(_rng(cfg.seed, _NS_TOKEN, idx), cfg.d)
        if mode == "cdc":
            perturb = _unit(_rng(cfg.seed, _NS_CDC_TOKEN, idx), cfg.d)
            tok = tok + cfg.domain_shift_scale * perturb
            tok = tok / np.linalg.norm(tok)
        tokens.add(id_offset + idx, f"class_{id_offset + idx}", tok)

    if mode == "cdc":
        for idx in range(n_classes):
            perturb = _unit(_rng(cfg.seed, _NS_CDC_MEAN, idx), cfg.d)
            m = means[idx] + cfg.domain_shift_scale * perturb
            means[idx] = m / np.linalg.norm(m)

    intro_task = {idx: idx // cfg.classes_per_task for idx in range(n_classes)}
    appearances = {idx: [intro_task[idx]] for idx in range(n_classes)}
    if mode == "cdi":
        for t in range(1, cfg.num_tasks):
            prev = [idx for idx in range(n_classes) if intro_task[idx] < t]
            k = round(cfg.recur_fraction * len(prev))
            if k > 0:
                rng = _rng(cfg.seed, _NS_RECUR, t)
                for idx in sorted(rng.choice(prev, size=k, replace=False).tolist()):
                    appearances[idx].append(t)

    totals = _long_tail_counts(cfg, n_classes) if mode == "cdi" else [cfg.samples_per_class] * n_classes
    train_counts = {}
    for idx in range(n_classes):
        apps = appearances[idx]
        base, rem = divmod(totals[idx], len(apps))
        if base < 1:
            raise ConfigError(
                f"class {idx} has {totals[idx]} train samples for {len(apps)} appearances"
            )
        for a, t in enumerate(apps):
            train_counts[(idx, t)] = base + (1 if a < rem else 0)

    def domain_offset(task_id):
        if mode != "cdi" or task_id == 0 or cfg.domain_shift_scale == 0.0:
            return np.zeros(cfg.d)
        return cfg.domain_shift_scale * _unit(_rng(cfg.seed, _NS_DOMOFF, task_id), cfg.d)

    tasks = []
    for t in range(cfg.num_tasks):
        present = [idx for idx in range(n_classes) if t in appearances[idx]]
        offset = domain_offset(t)
        domain_id = t if mode == "cdi" else (1 if mode == "cdc" else 0)
        train, test = [], []
        for idx in present:
            cid = id_offset + idx
            block = _sample_block(
                cfg, cid, t, means[idx], offset, train_counts[(idx, t)], cfg.test_per_class_per_domain
            )
            for split, vec in block:
                rec = EmbeddingRecord(cid, domain_id, split, vec)
                (train if split == SPLIT_TRAIN else test).append(rec)
        tasks.append(
            Task(
                task_id=t,
                new_class_ids=[id_offset + idx for idx in range(n_classes) if intro_task[idx] == t],
                domain_ids=[domain_id],
                train=train,
                test=test,
            )
        )
    return TaskStream(tasks=tasks, tokens=tokens, d=cfg.d, mode=mode)
