"""Scenario orchestration over task streams.

run_ci: expand -> train -> evaluate over all exposed tasks, per task.
run_cdc: train stream A fully, then continue on stream B with prompt blocks
         transferred from the most similar old prototypes; evaluates on B
         only (I2C) or on the pooled test sets of both (I_plus_C).
run_cdi: later tasks may revisit earlier classes under new domains; only
         genuinely new classes expand the banks, revisit records train
         through the text-classifier terms only.
prototypes_only_baseline: nearest-prototype classification without any
         training, as the reference point.
"""

from __future__ import annotations

import json
import logging
import os

import numpy as np

from .encoder import make_encoder
from .errors import ConfigError
from .evaluator import EvalReport, accuracy_counts, gen_avg_accuracy, prototype_similarity_matrix
from .model import Banks, expand, init_prototypes, save_checkpoint
from .records import SPLIT_TRAIN
from .trainer import train_task

logger = logging.getLogger(__name__)


def _features_by_class(records, class_ids):
    wanted = set(class_ids)
    feats = {c: [] for c in class_ids}
    for r in records:
        if r.split == SPLIT_TRAIN and r.class_id in wanted:
            feats[r.class_id].append(r.vector)
    return {c: np.stack(v) for c, v in feats.items() if v}


def _check_ci_stream(stream):
    seen = set()
    for task in stream.tasks:
        overlap = seen.intersection(task.new_class_ids)
        if overlap:
            raise ConfigError(f"classes {sorted(overlap)} appear in more than one task")
        seen.update(task.new_class_ids)


def _eval_point(banks, enc, tokens, test_sets, cfg, class_ids=None):
    """Generalized average accuracy per mode over a list of per-task test sets."""
    per_task = {m: [] for m in ("aggregated", "vision", "text")}
    for records in test_sets:
        counts = accuracy_counts(
            banks,
            enc,
            tokens,
            records,
            aggregation=cfg.aggregation,
            selection=cfg.selection,
            clamp_lambda=cfg.clamp_lambda,
            class_ids=class_ids,
        )
        for m, c in counts.items():
            per_task[m].append(c)
    t = len(test_sets)
    return {m: gen_avg_accuracy(per_task[m], t) for m in per_task}, sum(
        len(r) for r in test_sets
    )


def run_ci(stream, cfg, sink=None):
    """Class-incremental run; returns the accuracy trajectory report."""
    _check_ci_stream(stream)
    enc = make_encoder(stream.d, cfg.M, cfg.seed)
    banks = Banks(d=stream.d, M=cfg.M)
    report = EvalReport()
    test_sets = []
    for t, task in enumerate(stream.tasks):
        feats = _features_by_class(task.train, task.new_class_ids)
        expand(
            banks,
            task.new_class_ids,
            feats,
            t,
            proto_mode=cfg.proto_mode,
            seed=cfg.seed,
        )
        log = train_task(banks, enc, task.train, cfg, stream.tokens, t)
        test_sets.append(task.test)
        accs, n_test = _eval_point(banks, enc, stream.tokens, test_sets, cfg)
        report.append(task.task_id, n_test, accs["aggregated"], accs["vision"], accs["text"])
        if sink is not None:
            sink.on_task(t, banks, enc, log)
    if sink is not None:
        sink.finish(report, banks)
    return report


def transfer_init_prompts(new_prototypes, banks, clamp=False):
    """Initial prompt blocks for new classes, copied from the old class whose
    prototype is most cosine-similar to each new prototype.

    Args:
        new_prototypes: dict class_id -> unit-norm prototype vector.
        banks: banks holding the already-trained classes.

    Returns dict class_id -> (M, d) prompt block; empty when the banks hold
    nothing to transfer from (callers fall back to Gaussian init).
    """
    if banks.n_classes == 0:
        logger.warning("no earlier classes to transfer prompts from; falling back to Gaussian init")
        return {}
    old = banks.prototypes
    norms = np.linalg.norm(old, axis=1)
    blocks = {}
    for cid, proto in new_prototypes.items():
        sims = old @ proto / (norms * np.linalg.norm(proto))
        best = int(np.argmax(sims))  # first (lowest) row on ties
        blocks[cid] = np.array(banks.prompts[best])
    return blocks


def run_cdc(stream_a, stream_b, cfg, eval_mode="I2C", transfer=True, sink=None):
    """Cross-dataset run: full pass over stream A, then continue on stream B.

    eval_mode "I2C" scores stream B's test sets only and reports forward
    transfer against a standalone stream-B run; "I_plus_C" scores the pooled
    test sets of both datasets.
    """
    if eval_mode not in ("I2C", "I_plus_C"):
        raise ConfigError(f"unknown eval mode {eval_mode!r}")
    ids_a = {c for task in stream_a.tasks for c in task.new_class_ids}
    ids_b = {c for task in stream_b.tasks for c in task.new_class_ids}
    if ids_a & ids_b:
        raise ConfigError(f"class id spaces overlap: {sorted(ids_a & ids_b)[:5]} ...")
    if stream_a.tasks and stream_a.d != stream_b.d:
        raise ConfigError(f"dimension mismatch: {stream_a.d} vs {stream_b.d}")

    tokens = stream_a.tokens.merged_with(stream_b.tokens)
    enc = make_encoder(stream_b.d, cfg.M, cfg.seed)
    banks = Banks(d=stream_b.d, M=cfg.M)

    task_counter = 0
    for task in stream_a.tasks:
        feats = _features_by_class(task.train, task.new_class_ids)
        expand(banks, task.new_class_ids, feats, task_counter, proto_mode=cfg.proto_mode, seed=cfg.seed)
        log = train_task(banks, enc, task.train, cfg, tokens, task_counter)
        if sink is not None:
            sink.on_task(task_counter, banks, enc, log)
        task_counter += 1

    report = EvalReport()
    a_test_sets = [task.test for task in stream_a.tasks]
    b_test_sets = []
    # I2C scores within the second dataset's label space (methods that learn
    # nothing then score identically with or without the first dataset, which
    # pins forward transfer at zero for them); I_plus_C pools both datasets'
    # test sets and label spaces.
    b_ids = sorted(ids_b)
    for task in stream_b.tasks:
        feats = _features_by_class(task.train, task.new_class_ids)
        prompt_blocks = None
        if transfer:
            rows = init_prototypes(feats)
            prompt_blocks = transfer_init_prompts(rows, banks) or None
        expand(
            banks,
            task.new_class_ids,
            feats,
            task_counter,
            proto_mode=cfg.proto_mode,
            prompt_blocks=prompt_blocks,
            seed=cfg.seed,
        )
        log = train_task(banks, enc, task.train, cfg, tokens, task_counter)
        b_test_sets.append(task.test)
        if eval_mode == "I2C":
            seen_b = [c for c in b_ids if banks.has_class(c)]
            accs, n_test = _eval_point(banks, enc, tokens, b_test_sets, cfg, class_ids=seen_b)
        else:
            accs, n_test = _eval_point(banks, enc, tokens, a_test_sets + b_test_sets, cfg)
        report.append(task.task_id, n_test, accs["aggregated"], accs["vision"], accs["text"])
        if sink is not None:
            sink.on_task(task_counter, banks, enc, log)
        task_counter += 1

    if eval_mode == "I2C":
        standalone = run_ci(stream_b, cfg)
        report.ft = report.last_accuracy - standalone.last_accuracy
    if sink is not None:
        sink.finish(report, banks)
    return report


def run_cdi(stream, cfg, sink=None):
    """Class-and-domain incremental run over a stream with recurring classes."""
    enc = make_encoder(stream.d, cfg.M, cfg.seed)
    banks = Banks(d=stream.d, M=cfg.M)
    report = EvalReport()
    test_sets = []
    for t, task in enumerate(stream.tasks):
        new_ids = [c for c in task.new_class_ids if not banks.has_class(c)]
        feats = _features_by_class(task.train, new_ids)
        expand(banks, new_ids, feats, t, proto_mode=cfg.proto_mode, seed=cfg.seed)
        log = None
        if new_ids:
            log = train_task(banks, enc, task.train, cfg, stream.tokens, t)
        test_sets.append(task.test)
        accs, n_test = _eval_point(banks, enc, stream.tokens, test_sets, cfg)
        report.append(task.task_id, n_test, accs["aggregated"], accs["vision"], accs["text"])
        if sink is not None:
            sink.on_task(t, banks, enc, log)
    if sink is not None:
        sink.finish(report, banks)
    return report


def prototypes_only_baseline(stream, sink=None):
    """Nearest-prototype classification with no training at all.

    Prototypes are the normalized class means of each class's first
    appearance; there is no text classifier, so all three trajectory columns
    carry the same number.
    """
    protos = {}
    report = EvalReport()
    test_sets = []
    for task in stream.tasks:
        new_ids = [c for c in task.new_class_ids if c not in protos]
        feats = _features_by_class(task.train, new_ids)
        protos.update(init_prototypes(feats))
        test_sets.append(task.test)

        ids = sorted(protos)
        mat = np.stack([protos[c] for c in ids])
        norms = np.linalg.norm(mat, axis=1)
        per_task = []
        for records in test_sets:
            correct = 0
            for rec in records:
                sims = mat @ rec.vector / (norms * np.linalg.norm(rec.vector))
                best = np.max(sims)
                pred = min(ids[k] for k in np.nonzero(sims == best)[0])
                correct += pred == rec.class_id
            per_task.append((correct, len(records)))
        acc = gen_avg_accuracy(per_task, len(per_task))
        report.append(task.task_id, sum(n for _, n in per_task), acc, acc, acc)
    if sink is not None:
        sink.finish(report, None)
    return report


def _fmt(x):
    return f"{x:.17g}" if isinstance(x, float) else str(x)


class RunDirWriter:
    """Writes the run directory: config.json, train_log.csv, per-task
    checkpoints, trajectory.csv, summary.json, prototype_similarity.csv."""

    def __init__(self, run_dir, config, config_hash):
        self.run_dir = run_dir
        self.config_hash = config_hash
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self._log_path = os.path.join(run_dir, "train_log.csv")
        with open(self._log_path, "w") as fh:
            fh.write("task,epoch,c1,c2,pp,total,lr\n")

    def on_task(self, task_index, banks, enc, train_log):
        if train_log is not None:
            with open(self._log_path, "a") as fh:
                for e in train_log.epochs:
                    row = [task_index, e.epoch, e.c1, e.c2, e.pp, e.total, e.lr]
                    fh.write(",".join(_fmt(x) for x in row) + "\n")
        path = os.path.join(self.run_dir, f"checkpoint_task_{task_index:03d}.ptpc")
        save_checkpoint(banks, enc.seed, self.config_hash, path)

    def finish(self, report, banks):
        with open(os.path.join(self.run_dir, "trajectory.csv"), "w") as fh:
            fh.write("eval_index,task_id,n_test,aggregated,vision,text\n")
            for i in range(len(report.task_ids)):
                row = [
                    i,
                    report.task_ids[i],
                    report.n_test[i],
                    report.aggregated[i],
                    report.vision[i],
                    report.text[i],
                ]
                fh.write(",".join(_fmt(x) for x in row) + "\n")
        summary = report.summary()
        summary["config_hash"] = self.config_hash
        if banks is not None:
            summary["n_classes"] = banks.n_classes
        with open(os.path.join(self.run_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if banks is not None and banks.n_classes:
            sim = prototype_similarity_matrix(banks)
            with open(os.path.join(self.run_dir, "prototype_similarity.csv"), "w") as fh:
                for r in range(sim.shape[0]):
                    fh.write(",".join(_fmt(float(v)) for v in sim[r]) + "\n")
