"""Dense, layer-norm, attention and transformer building blocks.

All initializers draw uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) and take an
explicit numpy Generator so construction is reproducible.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamSet
from .tensor import DimensionError, Tensor

ACTIVATIONS = ("relu", "gelu", "tanh", "linear")


def _act(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return T.relu(x)
    if activation == "gelu":
        return T.gelu(x)
    if activation == "tanh":
        return T.tanh(x)
    if activation == "linear":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def init_dense(params: ParamSet, rng: np.random.Generator, name: str, n_in: int, n_out: int):
    bound = 1.0 / np.sqrt(n_in)
    params.new(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32))
    params.new(f"{name}.b", rng.uniform(-bound, bound, size=(n_out,)).astype(np.float32))


def dense(params: ParamSet, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.w"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"dense {name}: input dim {x.shape[-1]} != weight fan-in {w.shape[0]}"
        )
    return T.affine(x, w, params[f"{name}.b"])


def init_mlp(params: ParamSet, rng: np.random.Generator, name: str, sizes: list[int]):
    """sizes = [in, hidden..., out]; layers named {name}.l0, {name}.l1, ..."""
    for i in range(len(sizes) - 1):
        init_dense(params, rng, f"{name}.l{i}", sizes[i], sizes[i + 1])


def mlp_layer_count(params: ParamSet, name: str) -> int:
    n = 0
    while f"{name}.l{n}.w" in params:
        n += 1
    return n


def forward_mlp(params: ParamSet, x: Tensor, name: str = "mlp", activation: str = "relu") -> Tensor:
    """Apply the dense stack under `name`; activation between layers, linear output."""
    n_layers = mlp_layer_count(params, name)
    if n_layers == 0:
        raise DimensionError(f"no mlp layers found under {name!r}")
    h = x
    for i in range(n_layers):
        h = dense(params, f"{name}.l{i}", h)
        if i < n_layers - 1:
            h = _act(h, activation)
    return h


def init_layernorm(params: ParamSet, name: str, dim: int):
    params.new(f"{name}.gamma", np.ones(dim, dtype=np.float32))
    params.new(f"{name}.beta", np.zeros(dim, dtype=np.float32))


def layernorm(params: ParamSet, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layernorm_op(x, params[f"{name}.gamma"], params[f"{name}.beta"], eps)


def init_attention(params: ParamSet, rng: np.random.Generator, name: str, dim: int):
    for proj in ("wq", "wk", "wv", "wo"):
        init_dense(params, rng, f"{name}.{proj}", dim, dim)


_MASK_NEG = np.float32(-1e9)


def causal_mask(m: int) -> np.ndarray:
    """Additive (1,1,m,m) mask: -1e9 strictly above the diagonal."""
    mask = np.triu(np.full((m, m), _MASK_NEG, dtype=np.float32), k=1)
    return mask[None, None, :, :]


def attention_block(
    params: ParamSet,
    name: str,
    tokens: Tensor,
    n_heads: int,
    causal: bool = False,
) -> Tensor:
    """Multi-head self-attention with output projection.

    tokens: (..., M, d). With causal=True, output at position i depends only
    on positions <= i (bit-exact: masked scores underflow to exactly zero
    after the stable softmax).
    """
    d = tokens.shape[-1]
    if d % n_heads != 0:
        raise DimensionError(f"model dim {d} not divisible by {n_heads} heads")
    if params[f"{name}.wq.w"].shape[0] != d:
        raise DimensionError(f"attention {name}: dim {d} does not match parameters")
    m = tokens.shape[-2]
    dh = d // n_heads
    batched = tokens.ndim == 3
    x = tokens if batched else T.reshape(tokens, (1, m, d))
    b = x.shape[0]

    def heads(t: Tensor) -> Tensor:
        t = T.reshape(t, (b, m, n_heads, dh))
        return T.transpose(t, (0, 2, 1, 3))  # (B, h, M, dh)

    q = heads(dense(params, f"{name}.wq", x))
    k = heads(dense(params, f"{name}.wk", x))
    v = heads(dense(params, f"{name}.wv", x))
    scores = T.matmul(q, T.swap_last(k)) * Tensor(np.float32(1.0 / np.sqrt(dh)))
    if causal:
        scores = scores + Tensor(causal_mask(m))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, h, M, dh)
    ctx = T.transpose(ctx, (0, 2, 1, 3))
    ctx = T.reshape(ctx, (b, m, d))
    out = dense(params, f"{name}.wo", ctx)
    return out if batched else T.reshape(out, (m, d))


def init_transformer_block(params: ParamSet, rng: np.random.Generator, name: str, dim: int, ff_mult: int = 4):
    init_layernorm(params, f"{name}.ln1", dim)
    init_attention(params, rng, f"{name}.attn", dim)
    init_layernorm(params, f"{name}.ln2", dim)
    init_dense(params, rng, f"{name}.ff1", dim, dim * ff_mult)
    init_dense(params, rng, f"{name}.ff2", dim * ff_mult, dim)


def transformer_block(params: ParamSet, name: str, x: Tensor, n_heads: int, causal: bool) -> Tensor:
    """Pre-LN block: x + MHA(LN(x)); x + GELU-FFN(LN(x))."""
    h = x + attention_block(params, f"{name}.attn", layernorm(params, f"{name}.ln1", x), n_heads, causal)
    ff = dense(params, f"{name}.ff2", T.gelu(dense(params, f"{name}.ff1", layernorm(params, f"{name}.ln2", h))))
    return h + ff


def init_transformer(params: ParamSet, rng: np.random.Generator, name: str, dim: int, n_layers: int):
    for i in range(n_layers):
        init_transformer_block(params, rng, f"{name}.blk{i}", dim)
    init_layernorm(params, f"{name}.lnf", dim)


def transformer(params: ParamSet, name: str, x: Tensor, n_layers: int, n_heads: int, causal: bool) -> Tensor:
    h = x
    for i in range(n_layers):
        h = transformer_block(params, f"{name}.blk{i}", h, n_heads, causal)
    return layernorm(params, f"{name}.lnf", h)
