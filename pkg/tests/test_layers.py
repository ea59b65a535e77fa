import numpy as np
import pytest

from rlt.ndnet import (
    DimensionError,
    ParamSet,
    Tensor,
    attention_block,
    forward_mlp,
    grad_check,
    init_attention,
    init_dense,
    init_layernorm,
    init_mlp,
    init_transformer,
    layernorm,
    transformer,
)


def _mlp(sizes, seed=0):
    ps = ParamSet()
    init_mlp(ps, np.random.default_rng(seed), "mlp", sizes)
    return ps


def test_mlp_zero_weights_zero_output():
    ps = _mlp([4, 5, 3])
    for _name, t in ps.items():
        t.data[:] = 0.0
    out = forward_mlp(ps, Tensor(np.random.default_rng(0).standard_normal((7, 4)).astype(np.float32)), "mlp")
    assert np.all(out.data == 0.0)


def test_mlp_identity_single_layer():
    ps = ParamSet()
    ps.new("mlp.l0.w", np.eye(4, dtype=np.float32))
    ps.new("mlp.l0.b", np.zeros(4, dtype=np.float32))
    v = np.random.default_rng(1).standard_normal((3, 4)).astype(np.float32)
    out = forward_mlp(ps, Tensor(v), "mlp", "linear")
    np.testing.assert_array_equal(out.data, v)


def test_mlp_stage2_shape_68_to_30():
    ps = _mlp([68, 256, 256, 30])
    out = forward_mlp(ps, Tensor(np.zeros((2, 68), dtype=np.float32)), "mlp")
    assert out.shape == (2, 30)


def test_mlp_input_dim_mismatch_raises():
    ps = _mlp([4, 5, 3])
    with pytest.raises(DimensionError):
        forward_mlp(ps, Tensor(np.zeros((2, 7), dtype=np.float32)), "mlp")


def test_attention_single_token_is_value_projection_path():
    rng = np.random.default_rng(2)
    ps = ParamSet()
    init_attention(ps, rng, "attn", 8)
    x = rng.standard_normal((1, 8)).astype(np.float32)
    out = attention_block(ps, "attn", Tensor(x), n_heads=2)
    v = x @ ps["attn.wv.w"].data + ps["attn.wv.b"].data
    expect = v @ ps["attn.wo.w"].data + ps["attn.wo.b"].data
    np.testing.assert_array_equal(out.data, expect)


def test_causal_attention_prefix_invariance_bit_exact():
    rng = np.random.default_rng(3)
    ps = ParamSet()
    init_attention(ps, rng, "attn", 8)
    x = rng.standard_normal((6, 8)).astype(np.float32)
    base = attention_block(ps, "attn", Tensor(x), n_heads=2, causal=True).data
    j = 4
    x2 = x.copy()
    x2[j] += 1.0
    pert = attention_block(ps, "attn", Tensor(x2), n_heads=2, causal=True).data
    assert base[:j].tobytes() == pert[:j].tobytes()
    assert not np.array_equal(base[j:], pert[j:])


def test_attention_uniform_tokens_identical_rows():
    rng = np.random.default_rng(4)
    ps = ParamSet()
    init_attention(ps, rng, "attn", 8)
    row = rng.standard_normal(8).astype(np.float32)
    x = np.tile(row, (5, 1))
    out = attention_block(ps, "attn", Tensor(x), n_heads=2).data
    for i in range(1, 5):
        np.testing.assert_array_equal(out[i], out[0])


def test_attention_mask_dim_mismatch():
    rng = np.random.default_rng(5)
    ps = ParamSet()
    init_attention(ps, rng, "attn", 8)
    with pytest.raises(DimensionError):
        attention_block(ps, "attn", Tensor(np.zeros((3, 6), dtype=np.float32)), n_heads=2)


def test_layernorm_normalizes_last_axis():
    ps = ParamSet()
    init_layernorm(ps, "ln", 6)
    x = np.random.default_rng(6).standard_normal((4, 6)).astype(np.float32) * 3 + 1
    out = layernorm(ps, "ln", Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)


@pytest.mark.parametrize("causal", [False, True], ids=["full", "causal"])
def test_transformer_grad_check(causal):
    rng = np.random.default_rng(7)
    ps = ParamSet()
    init_transformer(ps, rng, "tr", 8, 2)
    x = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    tgt = rng.standard_normal((2, 5, 8)).astype(np.float32)

    def f():
        d = transformer(ps, "tr", x, 2, 2, causal) - Tensor(tgt)
        return (d * d).mean()

    assert grad_check(f, ps, 1e-4, 100, np.random.default_rng(8)) <= 1e-4


def test_dense_init_bounds():
    ps = ParamSet()
    init_dense(ps, np.random.default_rng(9), "d", 16, 8)
    bound = 1 / np.sqrt(16)
    assert np.all(np.abs(ps["d.w"].data) <= bound)
    assert np.all(np.abs(ps["d.b"].data) <= bound)
