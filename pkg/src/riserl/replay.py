"""Transition replay with stored per-step embeddings.

Each env writes into its own ring segment so an episode is contiguous in
memory; windows and framestacks are rebuilt by (episode id, step index)
lookups and never cross an episode boundary. A sum tree over all slots drives
both uniform and prioritized sampling: a slot only carries mass once its
successor chain is complete.
"""

from __future__ import annotations

import json
import struct
import threading
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, NotReady

BUF_MAGIC = b"RISEbuf1"


def embedding_memory_bytes(d: int, capacity: int, bytes_per: int = 4) -> int:
    if d <= 0 or capacity <= 0 or bytes_per <= 0:
        raise ConfigError("all arguments must be positive")
    return d * capacity * bytes_per


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


class PrioritySumTree:
    """Binary sum tree over ``capacity`` leaves (rounded up to a power of two)."""

    def __init__(self, capacity: int):
        self.capacity = _next_pow2(capacity)
        self.tree = np.zeros(2 * self.capacity, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.tree[1]) if self.capacity > 1 else float(self.tree[1])

    def set(self, leaves, values) -> None:
        kernels.tree_set(self.tree, np.asarray(leaves, dtype=np.int64), np.asarray(values, dtype=np.float64))

    def get(self, leaves) -> np.ndarray:
        return self.tree[self.capacity + np.asarray(leaves, dtype=np.int64)]

    def leaves(self) -> np.ndarray:
        return self.tree[self.capacity:]

    def find(self, targets) -> np.ndarray:
        return kernels.tree_find(self.tree, np.asarray(targets, dtype=np.float64))


@dataclass
class TransitionRecord:
    obs: np.ndarray
    action: int
    reward: float
    terminal: bool
    embedding: np.ndarray
    episode: int
    step: int
    hidden: np.ndarray | None = None


@dataclass
class ContextBatch:
    """Embedding windows of length k+n: the first k slots end at t, the rest run to t+n."""

    embeddings: np.ndarray      # [b, k+n, d]
    valid_mask: np.ndarray      # [b, k+n]
    obs: np.ndarray             # [b, fs, H, W] at t
    next_obs: np.ndarray        # [b, fs, H, W] at t+steps
    actions: np.ndarray         # [b]
    returns: np.ndarray         # [b]
    discounts: np.ndarray       # [b] gamma ** steps
    terminals: np.ndarray       # [b]
    steps: np.ndarray           # [b] effective n
    weights: np.ndarray         # [b]
    indices: np.ndarray         # [b]
    generations: np.ndarray     # [b]
    episodes: np.ndarray        # [b]
    k: int
    hidden: np.ndarray | None = None         # [b, 2, H] at the online window start
    next_hidden: np.ndarray | None = None    # [b, 2, H] at the target window start

    @property
    def batch_size(self) -> int:
        return self.actions.shape[0]

    def online_window(self) -> tuple[np.ndarray, np.ndarray]:
        return self.embeddings[:, :self.k], self.valid_mask[:, :self.k]

    def target_window(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.steps[:, None] + np.arange(self.k)[None, :]
        emb = np.take_along_axis(self.embeddings, idx[:, :, None], axis=1)
        return emb, np.take_along_axis(self.valid_mask, idx, axis=1)


@dataclass
class SequenceBatch:
    """Sequences of l+m trained/burn-in steps plus the observation after the last one."""

    obs: np.ndarray             # [b, l+m+1, fs, H, W]
    mask: np.ndarray            # [b, l+m+1]
    actions: np.ndarray         # [b, l+m]
    rewards: np.ndarray         # [b, l+m]
    terminals: np.ndarray       # [b, l+m]
    burn_in: int
    train_len: int
    weights: np.ndarray
    indices: np.ndarray
    generations: np.ndarray
    episodes: np.ndarray
    hidden: np.ndarray | None = None
    next_hidden: np.ndarray | None = None

    @property
    def trainable(self) -> np.ndarray:
        t = np.zeros_like(self.mask[:, :-1])
        t[:, self.burn_in:] = True
        return t & self.mask[:, :-1]


class ReplayBuffer:
    def __init__(
        self,
        capacity: int,
        frame_hw: tuple[int, int],
        embed_dim: int,
        num_envs: int = 1,
        framestack: int = 2,
        hidden_dim: int | None = None,
        prioritized: bool = False,
        alpha: float = 0.2,
        beta: float = 0.4,
        eps_priority: float = 1e-6,
        chain: int = 3,
        seed: int = 0,
        threadsafe: bool = False,
    ):
        if capacity <= 0 or num_envs <= 0 or capacity % num_envs:
            raise ConfigError(f"capacity {capacity} must be a positive multiple of num_envs {num_envs}")
        if chain < 1:
            raise ConfigError("chain must be >= 1")
        self.capacity = capacity
        self.num_envs = num_envs
        self.per_env = capacity // num_envs
        self.frame_hw = tuple(frame_hw)
        self.embed_dim = embed_dim
        self.framestack = framestack
        self.hidden_dim = hidden_dim
        self.prioritized = prioritized
        self.alpha, self.beta, self.eps_priority = alpha, beta, eps_priority
        self.chain = chain
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock() if threadsafe else nullcontext()

        self.frames = np.zeros((capacity, *self.frame_hw), dtype=np.uint8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.embeddings = np.zeros((capacity, embed_dim), dtype=np.float32)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.step = np.full(capacity, -1, dtype=np.int64)
        self.generation = np.zeros(capacity, dtype=np.int64)
        self.hidden = np.zeros((capacity, 2, hidden_dim), dtype=np.float32) if hidden_dim else None
        self.cursor = np.zeros(num_envs, dtype=np.int64)
        self.count = np.zeros(num_envs, dtype=np.int64)
        self.tree = PrioritySumTree(capacity)
        self.max_priority = 1.0
        self.num_active = 0
        self.stale_updates = 0

    # -- writing ---------------------------------------------------------

    def __len__(self) -> int:
        return int(self.count.sum())

    @property
    def size(self) -> int:
        return len(self)

    def push(self, record: TransitionRecord, env: int = 0) -> int:
        emb = np.asarray(record.embedding, dtype=np.float32).reshape(-1)
        if emb.shape[0] != self.embed_dim:
            raise ConfigError(f"embedding width {emb.shape[0]} != {self.embed_dim}")
        frame = np.asarray(record.obs).reshape(self.frame_hw)
        with self._lock:
            slot = env * self.per_env + int(self.cursor[env])
            self._set_active([slot], False)
            self.frames[slot] = np.rint(frame * 255.0).astype(np.uint8) if frame.dtype != np.uint8 else frame
            self.actions[slot] = record.action
            self.rewards[slot] = record.reward
            self.terminals[slot] = record.terminal
            self.embeddings[slot] = emb
            self.episode[slot] = record.episode
            self.step[slot] = record.step
            self.generation[slot] += 1
            if self.hidden is not None:
                self.hidden[slot] = 0.0 if record.hidden is None else np.asarray(record.hidden).reshape(2, -1)
            self.cursor[env] = (self.cursor[env] + 1) % self.per_env
            self.count[env] = min(self.count[env] + 1, self.per_env)
            self._activate_completed(slot, record)
        return slot

    def _offset_slot(self, slot: int, offset: int) -> int | None:
        pos, mask = kernels.window_index(self.episode, self.step, np.array([slot]), self.per_env, offset, offset)
        return int(pos[0, 0]) if mask[0, 0] else None

    def _activate_completed(self, slot: int, record: TransitionRecord) -> None:
        ready = []
        s = self._offset_slot(slot, -self.chain)
        if s is not None:
            ready.append(s)
        if record.terminal:
            for off in range(-self.chain + 1, 1):
                s = self._offset_slot(slot, off)
                if s is not None:
                    ready.append(s)
        if ready:
            self._set_active(ready, True)

    def _set_active(self, slots, on: bool) -> None:
        slots = np.asarray(slots, dtype=np.int64)
        was = self.tree.get(slots) > 0
        value = (self.max_priority if self.prioritized else 1.0) if on else 0.0
        self.tree.set(slots, np.full(slots.shape, value))
        self.num_active += int(on) * int((~was).sum()) - int(not on) * int(was.sum())

    # -- sampling --------------------------------------------------------

    def ready(self, min_fill: int) -> bool:
        return len(self) >= min_fill and self.num_active > 0

    def sample_slots(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``b`` active slots; returns (slots, importance weights)."""
        total = self.tree.total
        if self.num_active == 0 or total <= 0.0:
            raise NotReady("no sampleable transitions yet")
        targets = self.rng.random(b) * total
        slots = self.tree.find(targets)
        if not self.prioritized:
            return slots, np.ones(b, dtype=np.float32)
        probs = self.tree.get(slots) / total
        w = (self.num_active * probs) ** (-self.beta)
        return slots, (w / w.max()).astype(np.float32)

    def _gather_frames(self, pos: np.ndarray, mask: np.ndarray) -> np.ndarray:
        f = self.frames[pos].astype(np.float32) / np.float32(255.0)
        return f * mask[..., None, None]

    def _stacks(self, frames: np.ndarray, count: int) -> np.ndarray:
        # frames [b, count+fs-1, H, W] -> [b, count, fs, H, W]
        fs = self.framestack
        idx = np.arange(count)[:, None] + np.arange(fs)[None, :]
        return frames[:, idx]

    def sample_context(self, b: int, k: int, n: int, gamma: float = 0.99, min_fill: int = 1) -> ContextBatch:
        if k < 1 or n < 1:
            raise ConfigError("k and n must be >= 1")
        with self._lock:
            if not self.ready(min_fill):
                raise NotReady(f"replay holds {len(self)} < {min_fill} transitions or none sampleable")
            slots, weights = self.sample_slots(b)
            pos, mask = kernels.window_index(self.episode, self.step, slots, self.per_env, -(k - 1), n)
            emb = self.embeddings[pos] * mask[..., None]
            chain = slice(k - 1, k - 1 + n)
            G, steps, done = kernels.nstep_returns(self.rewards[pos[:, chain]], self.terminals[pos[:, chain]],
                                                   mask[:, chain], gamma)
            fs = self.framestack
            fpos, fmask = kernels.window_index(self.episode, self.step, slots, self.per_env, -(fs - 1), n)
            frames = self._gather_frames(fpos, fmask)
            stacks = self._stacks(frames, n + 1)
            rows = np.arange(b)
            hidden = next_hidden = None
            if self.hidden is not None:
                hidden = self.hidden[pos[:, 0]] * mask[:, 0, None, None]
                tpos, tmask = pos[rows, steps], mask[rows, steps]
                next_hidden = self.hidden[tpos] * tmask[:, None, None]
            return ContextBatch(
                embeddings=emb,
                valid_mask=mask,
                obs=stacks[:, 0],
                next_obs=stacks[rows, steps],
                actions=self.actions[slots].copy(),
                returns=G.astype(np.float32),
                discounts=(gamma ** steps.astype(np.float64)).astype(np.float32),
                terminals=done,
                steps=steps,
                weights=weights,
                indices=slots,
                generations=self.generation[slots].copy(),
                episodes=self.episode[slots].copy(),
                k=k,
                hidden=hidden,
                next_hidden=next_hidden,
            )

    def sample_sequences(self, b: int, m: int, l: int, min_fill: int = 1) -> SequenceBatch:
        """Sequences ending at a sampled slot: l burn-in steps, then m trained steps."""
        if m < 1 or l < 0:
            raise ConfigError("need m >= 1 and l >= 0")
        with self._lock:
            if not self.ready(min_fill):
                raise NotReady(f"replay holds {len(self)} < {min_fill} transitions or none sampleable")
            slots, weights = self.sample_slots(b)
            T = l + m
            pos, mask = kernels.window_index(self.episode, self.step, slots, self.per_env, -(T - 1), 1)
            fs = self.framestack
            fpos, fmask = kernels.window_index(self.episode, self.step, slots, self.per_env, -(T - 1) - (fs - 1), 1)
            stacks = self._stacks(self._gather_frames(fpos, fmask), T + 1)
            stacks = stacks * mask[:, :, None, None, None]
            body = pos[:, :T]
            bmask = mask[:, :T]
            hidden = next_hidden = None
            if self.hidden is not None:
                hidden = self.hidden[pos[:, 0]] * mask[:, 0, None, None]
                next_hidden = self.hidden[pos[:, 1]] * mask[:, 1, None, None] if T > 1 else \
                    np.zeros_like(hidden)
            return SequenceBatch(
                obs=stacks,
                mask=mask,
                actions=np.where(bmask, self.actions[body], 0),
                rewards=np.where(bmask, self.rewards[body], 0.0).astype(np.float32),
                terminals=self.terminals[body] & bmask,
                burn_in=l,
                train_len=m,
                weights=weights,
                indices=slots,
                generations=self.generation[slots].copy(),
                episodes=self.episode[slots].copy(),
                hidden=hidden,
                next_hidden=next_hidden,
            )

    def update_priorities(self, indices, td_errors, generations=None) -> None:
        if not self.prioritized:
            return
        indices = np.asarray(indices, dtype=np.int64)
        td = np.abs(np.asarray(td_errors, dtype=np.float64))
        with self._lock:
            keep = self.tree.get(indices) > 0
            if generations is not None:
                keep &= self.generation[indices] == np.asarray(generations)
            self.stale_updates += int((~keep).sum())
            if not keep.any():
                return
            p = (td[keep] + self.eps_priority) ** self.alpha
            self.tree.set(indices[keep], p)
            self.max_priority = max(self.max_priority, float(p.max()))

    # -- diagnostics -----------------------------------------------------

    def recompute_embeddings(self, encoder, slots) -> np.ndarray:
        """Re-embed stored frames with ``encoder`` (a callable on [B,H,W] float32 tensors)."""
        import torch

        frames = torch.from_numpy(self.frames[np.asarray(slots)].astype(np.float32) / np.float32(255.0))
        with torch.no_grad():
            return encoder(frames).numpy()

    # -- persistence -----------------------------------------------------

    _ARRAYS = ("frames", "actions", "rewards", "terminals", "embeddings", "episode", "step", "generation",
               "cursor", "count")

    def save(self, path: str | Path) -> None:
        arrays = {name: getattr(self, name) for name in self._ARRAYS}
        if self.hidden is not None:
            arrays["hidden"] = self.hidden
        arrays["tree"] = self.tree.tree
        meta = {
            "capacity": self.capacity, "num_envs": self.num_envs, "frame_hw": list(self.frame_hw),
            "embed_dim": self.embed_dim, "framestack": self.framestack, "hidden_dim": self.hidden_dim,
            "prioritized": self.prioritized, "alpha": self.alpha, "beta": self.beta,
            "eps_priority": self.eps_priority, "chain": self.chain, "max_priority": self.max_priority,
            "num_active": self.num_active,
            "arrays": {k: [str(v.dtype), list(v.shape)] for k, v in arrays.items()},
        }
        blob = json.dumps(meta).encode()
        with open(path, "wb") as fh:
            fh.write(BUF_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v).tobytes())

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "ReplayBuffer":
        data = Path(path).read_bytes()
        if data[:8] != BUF_MAGIC:
            raise ConfigError(f"{path}: not a replay checkpoint")
        (n,) = struct.unpack_from("<I", data, 8)
        meta = json.loads(data[12:12 + n])
        buf = cls(meta["capacity"], tuple(meta["frame_hw"]), meta["embed_dim"], meta["num_envs"],
                  meta["framestack"], meta["hidden_dim"], meta["prioritized"], meta["alpha"], meta["beta"],
                  meta["eps_priority"], meta["chain"], seed)
        off = 12 + n
        for name, (dtype, shape) in meta["arrays"].items():
            size = int(np.prod(shape)) * np.dtype(dtype).itemsize
            arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
            off += size
            if name == "tree":
                buf.tree.tree = arr
            else:
                setattr(buf, name, arr)
        buf.max_priority = meta["max_priority"]
        buf.num_active = meta["num_active"]
        return buf


def episode_overlap(episodes: np.ndarray) -> float:
    """Fraction of distinct sample pairs in a batch drawn from the same episode."""
    episodes = np.asarray(episodes)
    b = episodes.shape[0]
    if b < 2:
        return 0.0
    same = (episodes[:, None] == episodes[None, :]).sum() - b
    return float(same) / (b * (b - 1))
