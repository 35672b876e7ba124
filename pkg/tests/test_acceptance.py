"""Acceptance suite: every gate criterion at its stated tolerance, one
printed pass/fail line per criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete.
"""

import dataclasses
import json
import math
import subprocess
import sys
import time

import numpy as np

import protoprompt as pp
from protoprompt.evaluator import gen_avg_accuracy
from protoprompt.model import TextClassifier

from conftest import make_banks, make_tokens, unit
from loss_instances import Instance, fd_error, pp_bruteforce
from test_evaluator import loop_predict


def _report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


def test_gradient_correctness():
    rng = np.random.default_rng(2024)
    kinds = ("c1", "c2", "pp", "supcon", "total")
    start = time.perf_counter()
    worst = {k: 0.0 for k in kinds}
    for _ in range(100):
        inst = Instance(rng, d=8, m=3)
        for kind in kinds:
            worst[kind] = max(worst[kind], fd_error(inst, kind))
    elapsed = time.perf_counter() - start
    ok = all(err < 1e-4 for err in worst.values()) and elapsed < 30.0
    detail = " ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f" runtime={elapsed:.1f}s"
    _report("gradient-correctness", ok, detail)


def test_formula_oracles():
    rng = np.random.default_rng(77)

    # pair-contrast term vs double-loop brute force
    from protoprompt.model import Banks, expand

    worst_pp = 0.0
    for _ in range(1000):
        r, d = int(rng.integers(2, 6)), 7
        T = np.stack([unit(rng, d) for _ in range(r)])
        I = np.stack([unit(rng, d) for _ in range(r)])
        i = int(rng.integers(0, r))
        banks = Banks(d=d, M=2)
        expand(banks, list(range(r)), {c: I[c][None, :] for c in range(r)}, 0)
        banks.prototypes = I.copy()
        tc = TextClassifier(weights=T, class_ids=list(range(r)))
        loss, _, _, _ = pp.loss_pp(tc, banks, i, enc=None, prompt_trainable=False)
        worst_pp = max(worst_pp, abs(loss - pp_bruteforce(T, I, i)))

    # generalized average accuracy vs hand counting
    worst_acc = 0.0
    for _ in range(100):
        tasks = int(rng.integers(1, 8))
        table = []
        for _ in range(tasks):
            n = int(rng.integers(1, 50))
            table.append((int(rng.integers(0, n + 1)), n))
        t = int(rng.integers(1, tasks + 1))
        num = sum(c for c, _ in table[:t])
        den = sum(n for _, n in table[:t])
        worst_acc = max(worst_acc, abs(gen_avg_accuracy(table, t) - num / den))

    # predict vs a from-scratch loop re-derivation
    banks = make_banks(rng, 8, 3, [[0, 1, 2], [3, 4]], prompt_scale=0.3)
    enc = pp.make_encoder(8, 3, 9)
    tokens = make_tokens(rng, list(range(5)), 8)
    mismatches = 0
    for _ in range(200):
        z = unit(rng, 8)
        for mode in ("aggregated", "vision", "text"):
            got = pp.predict(z, banks, enc, tokens, mode=mode)
            if got != loop_predict(z, banks, enc, tokens, mode):
                mismatches += 1

    ok = worst_pp < 1e-12 and worst_acc == 0.0 and mismatches == 0
    _report(
        "formula-oracles",
        ok,
        f"pp_err={worst_pp:.2e} acc_err={worst_acc:.2e} predict_mismatches={mismatches}",
    )


def test_freezing_invariant():
    from protoprompt.model import Banks, expand
    from protoprompt.scenarios import _features_by_class
    from protoprompt.trainer import snapshot, train_task

    cfg_s = pp.SynthConfig(d=12, num_tasks=5, classes_per_task=3, samples_per_class=40,
                           noise_scale=0.1, test_per_class_per_domain=5, seed=13)
    stream = pp.gen_synthetic(cfg_s, "ci")
    cfg = pp.TrainConfig(seed=13)
    enc = pp.make_encoder(stream.d, cfg.M, cfg.seed)
    banks = Banks(d=stream.d, M=cfg.M)
    violations = []
    for t, task in enumerate(stream.tasks):
        feats = _features_by_class(task.train, task.new_class_ids)
        expand(banks, task.new_class_ids, feats, t, seed=cfg.seed)
        older_rows = [k for k in range(banks.n_classes) if banks.task_of[k] < t]
        before = snapshot(banks, rows=older_rows)
        train_task(banks, enc, task.train, cfg, stream.tokens, t)
        after = snapshot(banks, rows=older_rows)
        if t >= 1 and before != after:
            violations.append(t)
    _report("freezing-invariant", not violations, f"violating_tasks={violations}")


def test_trivial_anchors():
    checks = {}

    loss, _ = pp.masked_softmax_ce(np.array([2.0, 5.0, 1.0]), 1, 1, 1, 0.3)
    checks["single_class_ce"] = loss == 0.0

    sched = pp.LrSchedule(lr0=1e-3, lr_min=1e-4, total_steps=64)
    checks["lr_start"] = abs(pp.cosine_lr(0, sched) - 1e-3) < 1e-18
    checks["lr_end"] = abs(pp.cosine_lr(64, sched) - 1e-4) < 1e-18

    cfg = pp.TrainConfig()
    checks["lambda_pp_default"] = cfg.lambda_pp == 1.5
    checks["prompt_length_default"] = cfg.M == 6

    checks["forward_transfer"] = abs(pp.forward_transfer(0.844, 0.833) - 0.011) < 1e-12

    bad = [k for k, v in checks.items() if not v]
    _report("trivial-anchors", not bad, f"failed={bad}")


CI_SYNTH = dict(d=16, num_tasks=5, classes_per_task=4, samples_per_class=200,
                noise_scale=0.05, test_per_class_per_domain=50, seed=3)


def test_synthetic_ci_experiment():
    start = time.perf_counter()
    stream = pp.gen_synthetic(pp.SynthConfig(**CI_SYNTH), "ci")
    report = pp.run_ci(stream, pp.TrainConfig(seed=3))
    baseline = pp.prototypes_only_baseline(stream)
    elapsed = time.perf_counter() - start

    last = report.last_accuracy
    ok = (
        last >= 0.90
        and last >= baseline.last_accuracy - 0.02
        and last >= max(report.vision[-1], report.text[-1]) - 0.02
        and elapsed < 120.0
    )
    _report(
        "synthetic-ci-experiment",
        ok,
        f"last={last:.4f} baseline={baseline.last_accuracy:.4f} "
        f"vision={report.vision[-1]:.4f} text={report.text[-1]:.4f} runtime={elapsed:.1f}s",
    )


def test_ablation_direction():
    stream = pp.gen_synthetic(pp.SynthConfig(**dict(CI_SYNTH, noise_scale=0.15, seed=11)), "ci")
    full_cfg = pp.TrainConfig(seed=11)
    single_knob_off = {
        "prototypes_frozen": {"proto_mode": "frozen"},
        "prototypes_scratch": {"proto_mode": "scratch"},
        "no_selection": {"selection": "none"},
        "no_sampled_classifier": {"stc": False},
        "no_pair_loss": {"lambda_pp": 0.0},
    }
    full = pp.run_ci(stream, full_cfg).last_accuracy
    results = {}
    for name, off in single_knob_off.items():
        results[name] = pp.run_ci(stream, dataclasses.replace(full_cfg, **off)).last_accuracy
    bad = {k: v for k, v in results.items() if full < v - 0.01}
    detail = f"full={full:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in results.items())
    _report("ablation-direction", not bad, detail)


def test_cdc_transfer_property():
    import copy

    from protoprompt.model import Banks, expand, init_prototypes
    from protoprompt.scenarios import _features_by_class, transfer_init_prompts
    from protoprompt.trainer import train_task

    wins = 0
    for seed in range(10):
        cfg_s = pp.SynthConfig(d=16, num_tasks=2, classes_per_task=3, samples_per_class=60,
                               noise_scale=0.1, test_per_class_per_domain=5,
                               domain_shift_scale=0.3, seed=seed)
        a = pp.gen_synthetic(cfg_s, "ci")
        b = pp.gen_synthetic(cfg_s, "cdc")
        tokens = a.tokens.merged_with(b.tokens)
        cfg = pp.TrainConfig(seed=seed)
        enc = pp.make_encoder(cfg_s.d, cfg.M, cfg.seed)
        banks = Banks(d=cfg_s.d, M=cfg.M)
        t = 0
        for task in a.tasks:
            feats = _features_by_class(task.train, task.new_class_ids)
            expand(banks, task.new_class_ids, feats, t, seed=cfg.seed)
            train_task(banks, enc, task.train, cfg, tokens, t)
            t += 1

        task_b = b.tasks[0]
        feats = _features_by_class(task_b.train, task_b.new_class_ids)
        blocks = transfer_init_prompts(init_prototypes(feats), banks)
        one_epoch = dataclasses.replace(cfg, epochs=1)

        with_transfer = banks.clone()
        expand(with_transfer, task_b.new_class_ids, feats, t, prompt_blocks=blocks, seed=cfg.seed)
        loss_transfer = train_task(with_transfer, enc, task_b.train, one_epoch, tokens, t).epochs[0].total

        gaussian = banks.clone()
        expand(gaussian, task_b.new_class_ids, feats, t, seed=cfg.seed)
        loss_gaussian = train_task(gaussian, enc, task_b.train, one_epoch, tokens, t).epochs[0].total

        wins += loss_transfer < loss_gaussian
    _report("cdc-transfer-property", wins >= 8, f"wins={wins}/10")


def test_determinism(tmp_path):
    config = {
        "mode": "ci",
        "synth": {"d": 8, "num_tasks": 2, "classes_per_task": 2, "samples_per_class": 30,
                  "noise_scale": 0.1, "test_per_class_per_domain": 5, "seed": 4},
        "train": {"epochs": 2, "seed": 4},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    data = tmp_path / "data.ptps"
    gen = subprocess.run(
        [sys.executable, "-m", "protoprompt", "gen", "--config", str(cfg_path), "--out", str(data)],
        capture_output=True, text=True,
    )
    assert gen.returncode == 0, gen.stderr

    outs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        r = subprocess.run(
            [sys.executable, "-m", "protoprompt", "train", "--scenario", "ci",
             "--data", str(data), "--config", str(cfg_path), "--out", str(out)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        outs.append(out)

    same_traj = (outs[0] / "trajectory.csv").read_bytes() == (outs[1] / "trajectory.csv").read_bytes()
    ckpts = sorted(p.name for p in outs[0].glob("*.ptpc"))
    same_ckpts = bool(ckpts) and all(
        (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes() for name in ckpts
    )
    _report("determinism", same_traj and same_ckpts,
            f"trajectory_identical={same_traj} checkpoints_identical={same_ckpts} n_ckpts={len(ckpts)}")
