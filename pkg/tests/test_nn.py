import numpy as np
import pytest

from hyperloop import nn
from hyperloop import tensor as tn
from hyperloop.errors import ContractError
from hyperloop.gradcheck import check_gradients
from hyperloop.tensor import Tensor


def rand(rng, *shape, scale=0.5, grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad, dtype=np.float64)


def attn_params(rng, C, scale=0.5):
    return nn.AttentionParams(*(rand(rng, C, C, scale=scale) for _ in range(4)), norm=Tensor(np.ones(C), True, np.float64))


def mlp_params(rng, C, F, scale=0.5):
    return nn.MlpParams(
        rand(rng, C, F, scale=scale), rand(rng, C, F, scale=scale), rand(rng, F, C, scale=scale),
        norm=Tensor(np.ones(C), True, np.float64),
    )


def zero_layer(C, F):
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    return nn.LayerParams(
        nn.AttentionParams(z(C, C), z(C, C), z(C, C), z(C, C), Tensor(np.ones(C))),
        nn.MlpParams(z(C, F), z(C, F), z(F, C), Tensor(np.ones(C))),
    )


def np_rmsnorm(x, eps=1e-5):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def test_single_token_attends_to_itself():
    rng = np.random.default_rng(0)
    p = attn_params(rng, 8)
    x = rng.standard_normal((1, 8))
    out = nn.attention(Tensor(x, dtype=np.float64), p, head_count=2).data
    expected = np_rmsnorm(x) @ p.wv.data @ p.wo.data
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_rope_position_zero_is_identity():
    cos, sin = nn.rope_tables(4, 8, 10000.0, np.dtype(np.float64).str)
    np.testing.assert_array_equal(cos[0], 1.0)
    np.testing.assert_array_equal(sin[0], 0.0)
    x = np.random.default_rng(1).standard_normal((1, 1, 8))
    np.testing.assert_array_equal(tn.rope(Tensor(x), cos[:1], sin[:1]).data, x)


def test_two_token_attention_weights_by_hand():
    # one head, C=4: q/k at each position rotated by hand with 2x2 rotations
    C = 4
    eye = np.eye(C)
    wq = np.diag([1.0, 2.0, -1.0, 0.5])
    wk = np.array([[0.5, 0, 0, 1], [0, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 2.0]])
    p = nn.AttentionParams(Tensor(wq), Tensor(wk), Tensor(eye), Tensor(eye), Tensor(np.ones(C)))
    x = np.array([[1.0, -2.0, 0.5, 3.0], [0.3, 0.1, -1.0, 2.0]])
    _, w = nn.attention(Tensor(x, dtype=np.float64), p, head_count=1, rope_base=10000.0, return_weights=True)

    h = np_rmsnorm(x)
    q, k = h @ wq, h @ wk

    def rotate(v, pos):
        # pairs (0, 2) and (1, 3) with frequencies 1 and 1/100 for d=4, base=1e4
        out = v.copy()
        for i, freq in enumerate([1.0, 10000.0 ** (-2 / 4)]):
            a = pos * freq
            x1, x2 = v[i], v[i + 2]
            out[i] = x1 * np.cos(a) - x2 * np.sin(a)
            out[i + 2] = x2 * np.cos(a) + x1 * np.sin(a)
        return out

    q1 = rotate(q[1], 1)
    scores = np.array([q1 @ rotate(k[0], 0), q1 @ rotate(k[1], 1)]) / 2.0
    expected = np.exp(scores - scores.max())
    expected /= expected.sum()
    np.testing.assert_allclose(w[0, 0, 1], expected, rtol=1e-12)
    np.testing.assert_allclose(w[0, 0, 0], [1.0, 0.0])


def test_attention_empty_sequence():
    p = attn_params(np.random.default_rng(0), 4)
    with pytest.raises(ContractError):
        nn.attention(Tensor(np.zeros((0, 4))), p, head_count=1)


def test_rope_score_depends_only_on_offset():
    rng = np.random.default_rng(2)
    d = 8
    q, k = rng.standard_normal(d), rng.standard_normal(d)
    cos, sin = nn.rope_tables(16, d, 10000.0, np.dtype(np.float64).str)

    def rot(v, pos):
        return tn.rope(Tensor(v[None]), cos[pos : pos + 1], sin[pos : pos + 1]).data[0]

    s1 = rot(q, 3) @ rot(k, 1)
    s2 = rot(q, 9) @ rot(k, 7)
    s3 = rot(q, 2) @ rot(k, 1)
    assert s1 == pytest.approx(s2, rel=1e-10)
    assert abs(s1 - s3) > 1e-6


def test_mlp_zero_input():
    rng = np.random.default_rng(0)
    out = nn.mlp(Tensor(np.zeros((3, 8))), mlp_params(rng, 8, 22))
    np.testing.assert_array_equal(out.data, 0.0)


def test_mlp_saturated_gate():
    rng = np.random.default_rng(0)
    C, F = 4, 6
    x = rng.standard_normal((2, C))
    xh = np_rmsnorm(x)
    # choose W_gate so every gate pre-activation is exactly 30
    w_gate = np.linalg.lstsq(xh, np.full((2, F), 30.0), rcond=None)[0]
    w_up, w_down = rng.standard_normal((C, F)), rng.standard_normal((F, C))
    p = nn.MlpParams(Tensor(w_gate), Tensor(w_up), Tensor(w_down), Tensor(np.ones(C)))
    out = nn.mlp(Tensor(x, dtype=np.float64), p).data
    gate_pre = xh @ w_gate
    np.testing.assert_allclose(gate_pre, 30.0, atol=1e-8)
    asymptote = ((xh @ w_up) * gate_pre) @ w_down
    np.testing.assert_allclose(out, asymptote, atol=1e-6 * np.abs(asymptote).max() + 1e-6)


def test_mlp_gradcheck():
    rng = np.random.default_rng(3)
    p = mlp_params(rng, 8, 22)
    x = rand(rng, 3, 8, scale=1.0)
    w = rng.standard_normal((3, 8))
    errs = check_gradients(lambda: (nn.mlp(x, p) * w).sum(), [x, *p.__dict__.values()])
    assert max(errs.values()) <= 1e-4


def test_zero_layer_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 5, 8))
    out = nn.transformer_layer(Tensor(x, dtype=np.float64), zero_layer(8, 16), head_count=2)
    np.testing.assert_array_equal(out.data, x)


def test_layer_applied_twice_matches_manual_composition():
    rng = np.random.default_rng(4)
    lp = nn.LayerParams(attn_params(rng, 8, 0.3), mlp_params(rng, 8, 16, 0.3))
    x = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
    once = nn.transformer_layer(x, lp, 2)
    twice = nn.transformer_layer(once, lp, 2)
    h = once.data + nn.attention(once, lp.attn, 2).data
    manual = h + nn.mlp(Tensor(h), lp.mlp).data
    np.testing.assert_allclose(twice.data, manual, rtol=1e-12)


def test_layer_gradcheck():
    rng = np.random.default_rng(5)
    lp = nn.LayerParams(attn_params(rng, 4, 0.5), mlp_params(rng, 4, 6, 0.5))
    x = rand(rng, 3, 4, scale=1.0)
    w = rng.standard_normal((3, 4))
    params = [x, *lp.attn.__dict__.values(), *lp.mlp.__dict__.values()]
    errs = check_gradients(lambda: (nn.transformer_layer(x, lp, 2) * w).sum(), params)
    assert max(errs.values()) <= 1e-4


def test_lm_head_contracts():
    rng = np.random.default_rng(6)
    V, C = 11, 8
    emb = nn.EmbeddingParams(Tensor(rng.standard_normal((V, C))), Tensor(rng.standard_normal((V, C))), Tensor(rng.uniform(0.5, 1.5, C)))
    zero_logits = nn.lm_head(Tensor(np.zeros((3, C))), emb).data
    assert zero_logits.shape == (3, V)
    np.testing.assert_allclose(tn.softmax(Tensor(zero_logits)).data, 1.0 / V)
    x = rng.standard_normal((4, C))
    manual = (np_rmsnorm(x) * emb.final_norm.data) @ emb.unembed.data.T
    np.testing.assert_allclose(nn.lm_head(Tensor(x), emb).data, manual, rtol=1e-5)


def test_causality():
    rng = np.random.default_rng(7)
    lp = nn.LayerParams(attn_params(rng, 8, 0.5), mlp_params(rng, 8, 16, 0.5))
    x = rng.standard_normal((6, 8))
    base = nn.transformer_layer(Tensor(x), lp, 2).data
    for t in range(6):
        x2 = x.copy()
        x2[t] += rng.standard_normal(8)
        out = nn.transformer_layer(Tensor(x2), lp, 2).data
        np.testing.assert_array_equal(out[:t], base[:t])
        assert np.abs(out[t] - base[t]).max() > 0
