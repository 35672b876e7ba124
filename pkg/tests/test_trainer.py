import dataclasses
import math

import numpy as np
import pytest

from protoprompt.encoder import make_encoder
from protoprompt.errors import ConfigError, NoDataError
from protoprompt.model import Banks, expand
from protoprompt.synth import SynthConfig, gen_synthetic
from protoprompt.trainer import TrainConfig, snapshot, train_task

from conftest import unit


def separable_stream(seed=5, noise=0.05, tasks=1):
    cfg = SynthConfig(
        d=16, num_tasks=tasks, classes_per_task=4, samples_per_class=200,
        noise_scale=noise, test_per_class_per_domain=20, seed=seed,
    )
    return gen_synthetic(cfg, "ci")


def setup_task(stream, cfg, task_index=0):
    from protoprompt.scenarios import _features_by_class

    enc = make_encoder(stream.d, cfg.M, cfg.seed)
    banks = Banks(d=stream.d, M=cfg.M)
    for t in range(task_index + 1):
        task = stream.tasks[t]
        feats = _features_by_class(task.train, task.new_class_ids)
        expand(banks, task.new_class_ids, feats, t, proto_mode=cfg.proto_mode, seed=cfg.seed)
        if t < task_index:
            train_task(banks, enc, task.train, cfg, stream.tokens, t)
    return enc, banks


class TestTrainTask:
    def test_zero_epochs_leaves_banks_bitwise_unchanged(self):
        stream = separable_stream()
        cfg = TrainConfig(epochs=0, seed=5)
        enc, banks = setup_task(stream, cfg)
        before = snapshot(banks)
        log = train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
        assert snapshot(banks) == before
        assert log.steps == 0

    def test_zero_learning_rate_is_a_noop(self):
        stream = separable_stream()
        cfg = TrainConfig(lr0=0.0, lr_min=0.0, epochs=3, seed=5)
        enc, banks = setup_task(stream, cfg)
        before = snapshot(banks)
        train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
        assert snapshot(banks) == before

    def test_loss_decreases_and_train_accuracy_high(self):
        from protoprompt.evaluator import predict

        stream = separable_stream()
        cfg = TrainConfig(seed=5)
        enc, banks = setup_task(stream, cfg)
        log = train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
        totals = [e.total for e in log.epochs]
        assert all(totals[i + 1] < totals[i] for i in range(4))
        correct = sum(
            predict(r.vector, banks, enc, stream.tokens) == r.class_id
            for r in stream.tasks[0].train
        )
        assert correct / len(stream.tasks[0].train) >= 0.95

    def test_deterministic(self):
        stream = separable_stream()
        cfg = TrainConfig(seed=5, epochs=3)
        digests = []
        for _ in range(2):
            enc, banks = setup_task(stream, cfg)
            train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
            digests.append(snapshot(banks))
        assert digests[0] == digests[1]

    def test_frozen_rows_unchanged_across_training(self):
        stream = separable_stream(tasks=2)
        cfg = TrainConfig(seed=5, epochs=3)
        enc, banks = setup_task(stream, cfg, task_index=1)
        frozen_rows = [k for k in range(banks.n_classes) if banks.proto_frozen[k]]
        before = snapshot(banks, rows=frozen_rows)
        train_task(banks, enc, stream.tasks[1].train, cfg, stream.tokens, 1)
        assert snapshot(banks, rows=frozen_rows) == before

    def test_step_count_and_final_lr(self):
        stream = separable_stream()
        cfg = TrainConfig(seed=5, epochs=3, batch_size=128)
        enc, banks = setup_task(stream, cfg)
        log = train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
        n = len(stream.tasks[0].train)
        assert log.steps == 3 * math.ceil(n / 128)
        assert log.final_lr == pytest.approx(cfg.lr_min, abs=1e-15)
        assert log.epochs[-1].lr == pytest.approx(cfg.lr_min, abs=1e-15)

    def test_only_current_task_prompts_move(self):
        stream = separable_stream(tasks=2)
        cfg = TrainConfig(seed=5, epochs=2)
        enc, banks = setup_task(stream, cfg, task_index=1)
        old_rows = banks.rows_of_task(0)
        old_prompts = banks.prompts[old_rows].copy()
        new_prompts = banks.prompts[banks.rows_of_task(1)].copy()
        train_task(banks, enc, stream.tasks[1].train, cfg, stream.tokens, 1)
        assert np.array_equal(banks.prompts[old_rows], old_prompts)
        assert not np.array_equal(banks.prompts[banks.rows_of_task(1)], new_prompts)

    def test_prototype_rows_stay_unit_norm(self):
        stream = separable_stream()
        cfg = TrainConfig(seed=5, epochs=2)
        enc, banks = setup_task(stream, cfg)
        train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
        norms = np.linalg.norm(banks.prototypes, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-6)

    def test_empty_records_raises(self):
        stream = separable_stream()
        cfg = TrainConfig(seed=5)
        enc, banks = setup_task(stream, cfg)
        with pytest.raises(NoDataError):
            train_task(banks, enc, [], cfg, stream.tokens, 0)

    def test_selection_none_trains_ground_truth_prompt(self):
        stream = separable_stream()
        cfg = TrainConfig(seed=5, epochs=1, selection="none")
        enc, banks = setup_task(stream, cfg)
        log = train_task(banks, enc, stream.tasks[0].train, cfg, stream.tokens, 0)
        assert log.steps > 0


class TestSnapshot:
    def test_equal_banks_equal_digest(self, rng):
        from conftest import make_banks

        banks = make_banks(rng, 8, 3, [[0, 1]])
        assert snapshot(banks) == snapshot(banks)
        assert snapshot(banks) == snapshot(banks.clone())

    def test_single_value_flip_changes_digest(self, rng):
        from conftest import make_banks

        banks = make_banks(rng, 8, 3, [[0, 1]])
        before = snapshot(banks)
        banks.prompts[0, 0, 0] = np.nextafter(banks.prompts[0, 0, 0], 1.0)
        assert snapshot(banks) != before


class TestTrainConfig:
    def test_defaults_match_recipe(self):
        cfg = TrainConfig()
        assert cfg.epochs == 10
        assert cfg.batch_size == 128
        assert cfg.lr0 == 1e-3
        assert cfg.lr_min == 1e-4
        assert cfg.weight_decay == 0.0
        assert cfg.lambda_pp == 1.5
        assert cfg.M == 6

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr0=1e-3, lr_min=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(selection="argmax")
        with pytest.raises(ConfigError):
            TrainConfig(tau=0.0)
