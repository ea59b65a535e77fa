"""Chunk-transition replay buffer with stride subsampling and persistence.

Episodes arrive as per-step arrays plus RL states at window boundaries;
windows are cut on a stride grid anchored at the episode end so the
terminal (reward-carrying) step is always covered and the stored count is
exactly floor((L - C) / stride) + 1. Storage is a flat ring of preallocated
arrays; eviction is strictly FIFO.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .chunkrl import ACT_DIM, CHUNK_LEN, Batch, X_DIM
from .ndnet.tensor import ContractError

SOURCE_VLA_WARMUP = 0
SOURCE_RL_ACTOR = 1
SOURCE_HUMAN = 2
SOURCE_NAMES = {SOURCE_VLA_WARMUP: "vla_warmup", SOURCE_RL_ACTOR: "rl_actor", SOURCE_HUMAN: "human_intervention"}

NO_TERMINAL = 255  # wire encoding of "no terminal inside the window"

BUFFER_MAGIC = b"RLTB"
BUFFER_VERSION = 1


class BufferIOError(RuntimeError):
    pass


@dataclass
class ChunkTransition:
    x: np.ndarray  # (x_dim,)
    action: np.ndarray  # (C, d) executed
    ref: np.ndarray  # (C, d) stored reference (equals action under intervention)
    rewards: np.ndarray  # (C,)
    next_x: np.ndarray  # (x_dim,)
    next_ref: np.ndarray  # (C, d) reference for the bootstrap actor query
    terminal_within: int | None
    source: int


@dataclass
class PreparedEpisode:
    """Per-step episode arrays, readout states precomputed at window indices.

    refs_ext must extend at least C steps past the episode end (sliced from
    the final proposal's tail) so next-window references always exist.
    Intervened steps must already carry the executed action as their ref.
    """

    length: int
    xs: dict[int, np.ndarray]  # window boundary index -> (x_dim,) state
    actions: np.ndarray  # (L, d)
    refs_ext: np.ndarray  # (>= L + C, d)
    rewards: np.ndarray  # (L,)
    sources: np.ndarray  # (L,) uint8
    terminal: bool = True


def window_starts(length: int, chunk: int, stride: int) -> list[int]:
    """Stride grid anchored at the final window so the terminal step is
    covered; count is floor((L - C) / stride) + 1. Episodes shorter than C
    yield the single truncated window at 0."""
    if length <= 0:
        return []
    if length < chunk:
        return [0]
    last = length - chunk
    starts = list(range(last, -1, -stride))
    starts.reverse()
    return starts


def _window_source(sources: np.ndarray) -> int:
    """Human only when every step is an intervention (the ref-override
    invariant then holds exactly); otherwise the first non-human step's tag."""
    if np.all(sources == SOURCE_HUMAN):
        return SOURCE_HUMAN
    non_human = sources[sources != SOURCE_HUMAN]
    return int(non_human[0])


def build_transitions(episode: PreparedEpisode, chunk: int = CHUNK_LEN, stride: int = 2) -> list[ChunkTransition]:
    l = episode.length
    if l == 0:
        return []
    term_idx = l - 1 if episode.terminal else None
    out = []
    for t in window_starts(l, chunk, stride):
        end = t + chunk
        n_real = min(end, l) - t
        action = np.zeros((chunk, ACT_DIM), dtype=np.float32)
        action[:n_real] = episode.actions[t : t + n_real]
        ref = np.zeros((chunk, ACT_DIM), dtype=np.float32)
        ref[:n_real] = episode.refs_ext[t : t + n_real]
        rewards = np.zeros(chunk, dtype=np.float32)
        rewards[:n_real] = episode.rewards[t : t + n_real]
        if term_idx is not None and t <= term_idx < end:
            terminal_within = term_idx - t
        else:
            terminal_within = None
        next_idx = min(end, l)
        out.append(
            ChunkTransition(
                x=np.asarray(episode.xs[t], dtype=np.float32),
                action=action,
                ref=ref,
                rewards=rewards,
                next_x=np.asarray(episode.xs[next_idx], dtype=np.float32),
                next_ref=episode.refs_ext[end : end + chunk].astype(np.float32),
                terminal_within=terminal_within,
                source=_window_source(episode.sources[t : t + n_real]),
            )
        )
    return out


class ReplayBuffer:
    """FIFO ring over flat float32 arrays; uniform with-replacement sampling."""

    def __init__(self, capacity: int = 100_000, x_dim: int = X_DIM, chunk: int = CHUNK_LEN, act_dim: int = ACT_DIM):
        if capacity <= 0:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.x_dim = x_dim
        self.chunk = chunk
        self.act_dim = act_dim
        self.insert_count = 0
        cd = chunk * act_dim
        self._x = np.zeros((capacity, x_dim), dtype=np.float32)
        self._a = np.zeros((capacity, cd), dtype=np.float32)
        self._ref = np.zeros((capacity, cd), dtype=np.float32)
        self._r = np.zeros((capacity, chunk), dtype=np.float32)
        self._nx = np.zeros((capacity, x_dim), dtype=np.float32)
        self._nref = np.zeros((capacity, cd), dtype=np.float32)
        self._term = np.full(capacity, -1, dtype=np.int16)
        self._src = np.zeros(capacity, dtype=np.uint8)

    def __len__(self):
        return min(self.insert_count, self.capacity)

    def add(self, tr: ChunkTransition):
        i = self.insert_count % self.capacity
        self._x[i] = tr.x
        self._a[i] = tr.action.reshape(-1)
        self._ref[i] = tr.ref.reshape(-1)
        self._r[i] = tr.rewards
        self._nx[i] = tr.next_x
        self._nref[i] = tr.next_ref.reshape(-1)
        self._term[i] = -1 if tr.terminal_within is None else tr.terminal_within
        self._src[i] = tr.source
        self.insert_count += 1

    def append_episode(self, episode: PreparedEpisode, chunk: int | None = None, stride: int = 2) -> int:
        transitions = build_transitions(episode, chunk or self.chunk, stride)
        for tr in transitions:
            self.add(tr)
        return len(transitions)

    def sample_batch(self, n: int, rng: np.random.Generator) -> Batch:
        size = len(self)
        if size == 0:
            raise ContractError("cannot sample from an empty buffer")
        idx = rng.integers(0, size, size=n)
        c, d = self.chunk, self.act_dim
        return Batch(
            x=self._x[idx].copy(),
            action=self._a[idx].reshape(n, c, d).copy(),
            ref=self._ref[idx].reshape(n, c, d).copy(),
            rewards=self._r[idx].copy(),
            next_x=self._nx[idx].copy(),
            next_ref=self._nref[idx].reshape(n, c, d).copy(),
            terminal_within=self._term[idx].astype(np.int64),
            source=self._src[idx].copy(),
        )

    def get(self, i: int) -> ChunkTransition:
        if not 0 <= i < len(self):
            raise IndexError(i)
        if self.insert_count > self.capacity:
            i = (self.insert_count + i) % self.capacity
        c, d = self.chunk, self.act_dim
        term = int(self._term[i])
        return ChunkTransition(
            x=self._x[i].copy(),
            action=self._a[i].reshape(c, d).copy(),
            ref=self._ref[i].reshape(c, d).copy(),
            rewards=self._r[i].copy(),
            next_x=self._nx[i].copy(),
            next_ref=self._nref[i].reshape(c, d).copy(),
            terminal_within=None if term < 0 else term,
            source=int(self._src[i]),
        )

    def checksum(self) -> int:
        import zlib

        crc = 0
        for i in range(len(self)):
            tr = self.get(i)
            for arr in (tr.x, tr.action, tr.ref, tr.rewards, tr.next_x, tr.next_ref):
                crc = zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes(), crc)
            crc = zlib.crc32(bytes([tr.source, NO_TERMINAL if tr.terminal_within is None else tr.terminal_within]), crc)
        return crc

    # Persistence -----------------------------------------------------------

    def persist(self, path):
        """RLTB: magic, version u32, count u64, x_dim u32, C u32, d u32, then
        fixed-size records (x, a, ref, r, x', ref' as f32 LE) followed by a
        source byte and a terminal-index byte (255 = none)."""
        with open(path, "wb") as f:
            f.write(BUFFER_MAGIC)
            f.write(struct.pack("<I", BUFFER_VERSION))
            f.write(struct.pack("<Q", len(self)))
            f.write(struct.pack("<III", self.x_dim, self.chunk, self.act_dim))
            for i in range(len(self)):
                tr = self.get(i)
                for arr in (tr.x, tr.action, tr.ref, tr.rewards, tr.next_x, tr.next_ref):
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
                term = NO_TERMINAL if tr.terminal_within is None else tr.terminal_within
                f.write(struct.pack("<BB", tr.source, term))

    @classmethod
    def load(cls, path, capacity: int = 100_000) -> "ReplayBuffer":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != BUFFER_MAGIC:
            raise BufferIOError(f"{path}: bad magic {blob[:4]!r}, expected {BUFFER_MAGIC!r}")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != BUFFER_VERSION:
            raise BufferIOError(f"{path}: buffer version {version}, loader supports {BUFFER_VERSION}")
        (count,) = struct.unpack_from("<Q", blob, 8)
        x_dim, chunk, act_dim = struct.unpack_from("<III", blob, 16)
        off = 28
        cd = chunk * act_dim
        rec_floats = x_dim + cd + cd + chunk + x_dim + cd
        rec_size = rec_floats * 4 + 2
        if len(blob) - off != count * rec_size:
            raise BufferIOError(
                f"{path}: corrupt buffer (expected {count * rec_size} record bytes, found {len(blob) - off})"
            )
        buf = cls(capacity=max(capacity, int(count) or 1), x_dim=x_dim, chunk=chunk, act_dim=act_dim)
        for _ in range(count):
            floats = np.frombuffer(blob, "<f4", rec_floats, off)
            off += rec_floats * 4
            src, term = struct.unpack_from("<BB", blob, off)
            off += 2
            p = 0
            x = floats[p : p + x_dim]; p += x_dim
            a = floats[p : p + cd].reshape(chunk, act_dim); p += cd
            ref = floats[p : p + cd].reshape(chunk, act_dim); p += cd
            r = floats[p : p + chunk]; p += chunk
            nx = floats[p : p + x_dim]; p += x_dim
            nref = floats[p : p + cd].reshape(chunk, act_dim)
            buf.add(
                ChunkTransition(
                    x=x.astype(np.float32), action=a.astype(np.float32), ref=ref.astype(np.float32),
                    rewards=r.astype(np.float32), next_x=nx.astype(np.float32),
                    next_ref=nref.astype(np.float32),
                    terminal_within=None if term == NO_TERMINAL else int(term),
                    source=int(src),
                )
            )
        return buf
