"""Stage-1 readout bottleneck over the frozen backbone tokens.

A learned readout embedding is appended to the M backbone tokens; a small
encoder transformer produces the compressed state vector at that position,
and a causal decoder is trained (teacher-forced) to reconstruct the token
sequence from it. After training the whole module is frozen and Stage 2
treats the readout vector as the state representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndnet import (
    ParamSet,
    Tensor,
    adam_step,
    AdamState,
    dense,
    init_dense,
    init_transformer,
    no_grad,
    transformer,
)
from .ndnet import tensor as T
from .ndnet.tensor import DimensionError, NumericError
from .vlastub import DemoDataset, FrozenBackbone, M_TOKENS, TOKEN_DIM

N_HEADS = 2
N_ENC_LAYERS = 2
N_DEC_LAYERS = 2


class TrainingError(RuntimeError):
    pass


@dataclass
class ReadoutModule:
    params: ParamSet
    trained: bool = False
    m: int = M_TOKENS
    dim: int = TOKEN_DIM

    @classmethod
    def create(cls, seed: int = 0) -> "ReadoutModule":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70C3]))
        params = ParamSet()
        params.new("e_rl", rng.normal(0.0, 0.02, size=(TOKEN_DIM,)).astype(np.float32))
        params.new(
            "enc.pos", rng.normal(0.0, 0.02, size=(M_TOKENS + 1, TOKEN_DIM)).astype(np.float32)
        )
        params.new(
            "dec.pos", rng.normal(0.0, 0.02, size=(M_TOKENS, TOKEN_DIM)).astype(np.float32)
        )
        init_transformer(params, rng, "enc", TOKEN_DIM, N_ENC_LAYERS)
        init_transformer(params, rng, "dec", TOKEN_DIM, N_DEC_LAYERS)
        init_dense(params, rng, "head", TOKEN_DIM, TOKEN_DIM)
        return cls(params=params)

    def freeze(self):
        self.params.freeze()
        self.trained = True

    def checksum(self) -> int:
        return self.params.checksum()


def _as_batched(tokens) -> tuple[Tensor, bool]:
    t = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=np.float32))
    if t.ndim == 2:
        return T.reshape(t, (1,) + t.shape), False
    if t.ndim == 3:
        return t, True
    raise DimensionError(f"expected (M, d) or (B, M, d) tokens, got shape {t.shape}")


def encode_rl_token(readout: ReadoutModule, tokens) -> Tensor:
    """Readout vector: encoder output at the appended special-token position.

    tokens: (M, d) or (B, M, d). Returns (d,) or (B, d) correspondingly.
    """
    x, batched = _as_batched(tokens)
    if x.shape[1] != readout.m or x.shape[2] != readout.dim:
        raise DimensionError(
            f"expected {readout.m}x{readout.dim} tokens, got {x.shape[1]}x{x.shape[2]}"
        )
    b = x.shape[0]
    e = T.reshape(readout.params["e_rl"], (1, 1, readout.dim))
    e = e + Tensor(np.zeros((b, 1, readout.dim), dtype=np.float32))
    seq = T.concat([x, e], axis=1) + readout.params["enc.pos"]
    h = transformer(readout.params, "enc", seq, N_ENC_LAYERS, N_HEADS, causal=False)
    out = h[:, readout.m, :]
    return out if batched else T.reshape(out, (readout.dim,))


def encode_rl_token_batch(readout: ReadoutModule, tokens: np.ndarray) -> np.ndarray:
    """Inference path: (B, M, d) numpy in, (B, d) numpy out, no tape."""
    with no_grad():
        return encode_rl_token(readout, tokens).data


def decode_reconstruct(readout: ReadoutModule, z_rl, targets) -> Tensor:
    """Teacher-forced causal reconstruction.

    Prediction i attends only to z_rl and targets 1..i-1; targets must be
    gradient-free copies of the backbone tokens.
    """
    tgt, _ = _as_batched(targets)
    z = z_rl if isinstance(z_rl, Tensor) else Tensor(np.asarray(z_rl, dtype=np.float32))
    if z.ndim == 1:
        z = T.reshape(z, (1, z.shape[0]))
    b, m, d = tgt.shape
    if isinstance(targets, Tensor) and targets.requires_grad:
        raise T.ContractError("reconstruction targets must be stop-gradient copies")
    z3 = T.reshape(z, (b, 1, d))
    seq = T.concat([z3, tgt[:, : m - 1, :]], axis=1) + readout.params["dec.pos"]
    h = transformer(readout.params, "dec", seq, N_DEC_LAYERS, N_HEADS, causal=True)
    return dense(readout.params, "head", h)


def recon_loss(predictions: Tensor, targets) -> Tensor:
    """Mean over batch of the summed squared token reconstruction error."""
    tgt = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=np.float32))
    d = predictions - tgt
    per_item = (d * d).sum(axis=(-2, -1))
    return per_item.mean() if per_item.ndim else per_item


@dataclass
class ReadoutTrainReport:
    loss_curve: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.loss_curve[0] if self.loss_curve else float("nan")

    @property
    def final(self) -> float:
        return self.loss_curve[-1] if self.loss_curve else float("nan")


def demo_token_bank(backbone: FrozenBackbone, demos: DemoDataset) -> np.ndarray:
    """Precompute backbone tokens for every demo frame: (N, M, d)."""
    frames = [s.pixels for traj in demos.trajectories for s in traj.steps]
    if not frames:
        return np.zeros((0, M_TOKENS, TOKEN_DIM), dtype=np.float32)
    return backbone.embed_batch(np.stack(frames))


def train_readout(
    readout: ReadoutModule,
    demos: DemoDataset,
    steps: int = 4000,
    batch: int = 64,
    lr: float = 3e-4,
    seed: int = 0,
    backbone: FrozenBackbone | None = None,
    log_every: int = 50,
) -> tuple[ReadoutModule, ReadoutTrainReport]:
    """Adam on the readout parameters only; freezes the module at the end."""
    if len(demos) == 0:
        raise TrainingError("cannot train the readout on an empty demo set")
    report = ReadoutTrainReport()
    if steps <= 0:
        return readout, report
    bank = demo_token_bank(backbone or FrozenBackbone(), demos)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA0]))
    opt = AdamState(lr=lr)
    for step_i in range(steps):
        idx = rng.integers(0, bank.shape[0], size=batch)
        tokens = Tensor(bank[idx])  # gradient-free: the sg() targets
        readout.params.zero_grad()
        z = encode_rl_token(readout, tokens)
        preds = decode_reconstruct(readout, z, tokens)
        loss = recon_loss(preds, tokens)
        lv = float(loss.item())
        if not np.isfinite(lv):
            raise TrainingError(f"non-finite reconstruction loss at step {step_i}")
        if step_i % log_every == 0 or step_i == steps - 1:
            report.loss_curve.append(lv)
        loss.backward()
        adam_step(opt, readout.params)
    readout.freeze()
    return readout, report
