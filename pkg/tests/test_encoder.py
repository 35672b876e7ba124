import numpy as np
import pytest

from protoprompt.encoder import encode_text, encode_text_rows, make_encoder
from protoprompt.numerics import fd_check

from conftest import unit


@pytest.fixture
def enc():
    return make_encoder(8, 3, seed=17)


def test_output_unit_norm(enc, rng):
    for _ in range(10):
        prompt = rng.standard_normal((3, 8))
        T, _ = encode_text(enc, prompt, rng.uniform(0, 2), unit(rng, 8))
        assert abs(np.linalg.norm(T) - 1.0) < 1e-9


def test_scale_zero_ignores_prompt(enc, rng):
    token = unit(rng, 8)
    t1, _ = encode_text(enc, rng.standard_normal((3, 8)), 0.0, token)
    t2, _ = encode_text(enc, rng.standard_normal((3, 8)), 0.0, token)
    expected = enc.W @ token
    expected /= np.linalg.norm(expected)
    assert np.allclose(t1, t2, atol=1e-15)
    assert np.allclose(t1, expected, atol=1e-12)


def test_deterministic(enc, rng):
    prompt = rng.standard_normal((3, 8))
    token = unit(rng, 8)
    t1, _ = encode_text(enc, prompt, 0.8, token)
    t2, _ = encode_text(enc, prompt, 0.8, token)
    assert t1.tobytes() == t2.tobytes()


def test_positive_homogeneity(enc, rng):
    # scaling the pooled input by c > 0 cannot change the normalized output
    prompt = rng.standard_normal((3, 8))
    token = unit(rng, 8)
    t1, _ = encode_text(enc, prompt, 0.8, token)
    c = 3.7
    t2, _ = encode_text(enc, c * prompt, 0.8, c * token)
    assert np.allclose(t1, t2, atol=1e-12)


def test_distinct_tokens_distinct_features(enc, rng):
    prompt = 0.05 * rng.standard_normal((3, 8))
    for _ in range(10):
        ta, tb = unit(rng, 8), unit(rng, 8)
        fa, _ = encode_text(enc, prompt, 1.0, ta)
        fb, _ = encode_text(enc, prompt, 1.0, tb)
        assert float(fa @ fb) < 1.0 - 1e-6


def test_prompt_gradient_matches_fd(enc, rng):
    for _ in range(5):
        prompt = 0.3 * rng.standard_normal((3, 8))
        token = unit(rng, 8)
        scale = rng.uniform(0.2, 1.5)
        upstream = rng.standard_normal(8)
        _, pull = encode_text(enc, prompt, scale, token)
        grad = pull.pull(upstream)

        def f(p):
            T, _ = encode_text(enc, p, scale, token)
            return float(upstream @ T)

        assert fd_check(f, prompt, grad) < 1e-5


def test_token_matrix_matches_fd(enc, rng):
    prompt = 0.3 * rng.standard_normal((3, 8))
    token = unit(rng, 8)
    _, pull = encode_text(enc, prompt, 0.9, token)
    mat = pull.token_matrix()
    # column j of dT/dp_m: perturb coordinate j of one prompt token
    h = 1e-6
    for j in range(8):
        pp_, pm = prompt.copy(), prompt.copy()
        pp_[1, j] += h
        pm[1, j] -= h
        tp, _ = encode_text(enc, pp_, 0.9, token)
        tm, _ = encode_text(enc, pm, 0.9, token)
        fd_col = (tp - tm) / (2 * h)
        assert np.allclose(fd_col, mat[:, j], atol=1e-6)


def test_rows_agree_with_single_encode(enc, rng):
    prompt = 0.2 * rng.standard_normal((3, 8))
    tokens = np.stack([unit(rng, 8) for _ in range(5)])
    T, _ = encode_text_rows(enc, prompt, 0.7, tokens)
    for k in range(5):
        single, _ = encode_text(enc, prompt, 0.7, tokens[k])
        assert np.allclose(T[k], single, atol=1e-12)
