import numpy as np
import pytest

from protoprompt.encoder import make_encoder
from protoprompt.model import Banks, expand
from protoprompt.records import ClassTokenTable


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def make_tokens(rng, class_ids, d):
    table = ClassTokenTable()
    for c in class_ids:
        table.add(c, f"class_{c}", unit(rng, d))
    return table


def make_banks(rng, d, m, tasks, prompt_scale=0.1, seed=0):
    """Banks with the given per-task class-id lists; every class gets one
    random unit feature, so prototypes are random unit rows. All but the last
    task end up frozen."""
    banks = Banks(d=d, M=m)
    for t, ids in enumerate(tasks):
        feats = {c: unit(rng, d)[None, :] for c in ids}
        expand(banks, ids, feats, t, seed=seed)
        for c in ids:
            banks.prompts[banks.row_of(c)] = prompt_scale * rng.standard_normal((m, d))
    return banks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_setup(rng):
    """Two-task banks (rows 0-1 frozen, 2-3 trainable) plus encoder/tokens."""
    d, m = 8, 3
    enc = make_encoder(d, m, seed=5)
    banks = make_banks(rng, d, m, [[0, 1], [2, 3]])
    tokens = make_tokens(rng, [0, 1, 2, 3], d)
    return d, m, enc, banks, tokens
