"""Offline trajectory data: episodes, action-limited masking, merging, sampling.

Actions are stored per environment as *local* ids (indices into that
environment's ``action_vocab``); ``-1`` marks a missing label. A
:class:`MergedDataset` maps local ids into a global vocabulary built as the
ordered union of action names, so identically named actions share a global id.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ._validation import check_random_state

NO_LABEL = -1
MAGIC = b"ALPT"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Episode:
    """One trajectory of ``T`` transitions.

    ``states[t]`` is observed before ``actions[t]``; ``final_state`` is the
    observation after the last action, so every transition has a successor.
    """

    env_id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns_to_go: np.ndarray | None = None
    final_state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float32))
        if self.returns_to_go is not None:
            object.__setattr__(
                self, "returns_to_go", np.asarray(self.returns_to_go, dtype=np.float32)
            )
        n = len(self.states)
        lengths = {len(self.actions), len(self.rewards)}
        if self.returns_to_go is not None:
            lengths.add(len(self.returns_to_go))
        if lengths != {n}:
            raise ValueError("states, actions, rewards and returns_to_go differ in length")
        object.__setattr__(self, "final_state", int(self.final_state))

    def __len__(self) -> int:
        return len(self.states)

    @property
    def observations(self) -> np.ndarray:
        """States followed by the final state (``T + 1`` entries)."""
        return np.append(self.states, self.final_state)

    @property
    def labelled(self) -> np.ndarray:
        return self.actions != NO_LABEL

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and self.final_state == other.final_state
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.returns_to_go, other.returns_to_go)
        )

    def slice(self, start: int, stop: int, keep_labels: bool = True) -> "Episode":
        final = self.states[stop] if stop < len(self) else self.final_state
        actions = self.actions[start:stop].copy()
        if not keep_labels:
            actions[:] = NO_LABEL
        return Episode(
            self.env_id,
            self.states[start:stop].copy(),
            actions,
            self.rewards[start:stop].copy(),
            None if self.returns_to_go is None else self.returns_to_go[start:stop].copy(),
            int(final),
        )


def compute_returns_to_go(episode: Episode) -> Episode:
    """Undiscounted suffix sums of the rewards."""
    rtg = np.cumsum(episode.rewards[::-1], dtype=np.float64)[::-1].astype(np.float32)
    return replace(episode, returns_to_go=rtg)


@dataclass(eq=False)
class TrajectoryDataset:
    env_id: str
    episodes: list[Episode]
    action_vocab: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.action_vocab = tuple(self.action_vocab)
        n = len(self.action_vocab)
        for ep in self.episodes:
            bad = (ep.actions != NO_LABEL) & ((ep.actions < 0) | (ep.actions >= n))
            if bad.any():
                raise ValueError(f"action id outside vocabulary {self.action_vocab}")

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    @property
    def label_budget_used(self) -> int:
        return int(sum(ep.labelled.sum() for ep in self.episodes))

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and self.action_vocab == other.action_vocab
            and self.metadata == other.metadata
            and len(self.episodes) == len(other.episodes)
            and all(a == b for a, b in zip(self.episodes, other.episodes))
        )


def apply_action_budget(
    dataset: TrajectoryDataset,
    budget: int,
    segment_len: int = 25,
    seed=0,
    k: int = 5,
) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Keep action labels on random contiguous segments totalling ``budget``.

    Episodes are tiled into blocks of ``segment_len`` transitions; a random
    subset of blocks keeps its labels (the last chosen block is truncated so
    the total is exact). Adjacent chosen blocks are fused. Returns the
    labelled segments and the unlabelled remainder as separate datasets whose
    transitions partition the input. Segments never cross episode boundaries.
    """
    total = dataset.n_transitions
    if budget > total:
        raise ValueError(f"budget {budget} exceeds the {total} available transitions")
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if segment_len < k:
        raise ValueError(f"segment_len {segment_len} is shorter than the IDM window {k}")
    rng = check_random_state(seed)

    blocks = [
        (i, s, min(s + segment_len, len(ep)))
        for i, ep in enumerate(dataset.episodes)
        for s in range(0, len(ep), segment_len)
    ]
    order = rng.permutation(len(blocks))
    keep = [np.zeros(len(ep), dtype=bool) for ep in dataset.episodes]
    remaining = budget
    for b in order:
        if remaining == 0:
            break
        i, s, e = blocks[b]
        e = min(e, s + remaining)
        keep[i][s:e] = True
        remaining -= e - s

    labelled, unlabelled = [], []
    for ep, mask in zip(dataset.episodes, keep):
        for start, stop, on in _runs(mask):
            piece = ep.slice(start, stop, keep_labels=on)
            (labelled if on else unlabelled).append(piece)
    meta = dict(dataset.metadata, label_budget=budget, segment_len=segment_len)
    return (
        TrajectoryDataset(dataset.env_id, labelled, dataset.action_vocab, dict(meta, part="labelled")),
        TrajectoryDataset(dataset.env_id, unlabelled, dataset.action_vocab, dict(meta, part="unlabelled")),
    )


def _runs(mask: np.ndarray):
    """Yield (start, stop, value) for maximal constant runs of a bool array."""
    if mask.size == 0:
        return
    edges = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    bounds = np.concatenate([[0], edges, [mask.size]])
    for s, e in zip(bounds[:-1], bounds[1:]):
        yield int(s), int(e), bool(mask[s])


class MergedDataset:
    """Several datasets sharing one global action vocabulary.

    ``weights`` gives the relative probability of drawing from each source
    dataset; ``None`` draws proportionally to transition counts.
    """

    def __init__(
        self,
        sources: Sequence[TrajectoryDataset],
        weights: Sequence[float] | None = None,
        global_vocab: Sequence[str] | None = None,
    ):
        if not sources:
            raise ValueError("cannot merge an empty list of datasets")
        self.sources = list(sources)
        vocab: list[str] = list(global_vocab or ())
        for ds in self.sources:
            for name in ds.action_vocab:
                if name not in vocab:
                    if global_vocab is not None:
                        raise ValueError(f"action {name!r} missing from the global vocabulary")
                    vocab.append(name)
        self.global_action_vocab = tuple(vocab)
        self._local_to_global = [
            np.array([vocab.index(n) for n in ds.action_vocab], dtype=np.int64)
            for ds in self.sources
        ]
        if weights is None:
            weights = [ds.n_transitions for ds in self.sources]
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(self.sources),) or (weights < 0).any() or weights.sum() <= 0:
            raise ValueError("weights must be non-negative, one per source, not all zero")
        self.weights = weights / weights.sum()
        self.episodes: list[Episode] = []
        self.source_of_episode: list[int] = []
        for j, ds in enumerate(self.sources):
            self.episodes.extend(ds.episodes)
            self.source_of_episode.extend([j] * len(ds.episodes))
        self.env_of_episode = [self.episodes[i].env_id for i in range(len(self.episodes))]
        self._global_actions = [
            self.to_global(j, ep.actions) for j, ep in zip(self.source_of_episode, self.episodes)
        ]
        self._index_cache: dict = {}

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(ds.n_transitions for ds in self.sources)

    def to_global(self, source: int, local_actions) -> np.ndarray:
        local = np.asarray(local_actions, dtype=np.int64)
        table = self._local_to_global[source]
        out = np.where(local == NO_LABEL, NO_LABEL, table[np.clip(local, 0, None)])
        return out

    def decode(self, global_id: int, env_id: str) -> int:
        """Local id of a global action within ``env_id``'s vocabulary."""
        for ds in self.sources:
            if ds.env_id == env_id:
                return ds.action_vocab.index(self.global_action_vocab[global_id])
        raise KeyError(env_id)

    def global_actions(self, episode_index: int) -> np.ndarray:
        return self._global_actions[episode_index]

    def _eligible(self, key, build):
        if key not in self._index_cache:
            self._index_cache[key] = build()
        return self._index_cache[key]

    def _pick(self, per_source: list[np.ndarray], n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` (episode, start) rows: a source by weight, then uniformly within it."""
        sizes = np.array([len(p) for p in per_source], dtype=np.float64)
        probs = np.where(sizes > 0, self.weights, 0.0)
        if probs.sum() == 0:
            raise ValueError("no eligible windows in any source")
        probs = probs / probs.sum()
        src = rng.choice(len(per_source), size=n, p=probs)
        rows = np.empty((n, 2), dtype=np.int64)
        for j in np.unique(src):
            sel = src == j
            idx = rng.integers(len(per_source[j]), size=int(sel.sum()))
            rows[sel] = per_source[j][idx]
        return rows


def merge(
    datasets: Iterable[TrajectoryDataset],
    weights: Sequence[float] | None = None,
    global_vocab: Sequence[str] | None = None,
) -> MergedDataset:
    return MergedDataset(list(datasets), weights, global_vocab)


class IDMBatch(NamedTuple):
    observations: np.ndarray  # (B, k + 1) state tokens
    actions: np.ndarray  # (B, k) global action ids, NO_LABEL where missing
    env_ids: list
    positions: np.ndarray  # (B, 2) episode index, window start


def _idm_positions(merged: MergedDataset, k: int, labelled_only: bool) -> list[np.ndarray]:
    per_source: list[list] = [[] for _ in merged.sources]
    for i, ep in enumerate(merged.episodes):
        n_windows = len(ep) - k + 1
        if n_windows <= 0:
            continue
        starts = np.arange(n_windows)
        if labelled_only:
            lab = np.concatenate([[0], np.cumsum(ep.labelled)])
            starts = starts[(lab[starts + k] - lab[starts]) == k]
        per_source[merged.source_of_episode[i]].append(
            np.stack([np.full(starts.size, i), starts], axis=1)
        )
    return [
        np.concatenate(p) if p else np.empty((0, 2), dtype=np.int64) for p in per_source
    ]


def idm_positions(merged: MergedDataset, k: int, labelled_only: bool) -> list[np.ndarray]:
    """Eligible (episode, start) pairs per source for ``k``-action windows."""
    return merged._eligible(("idm", k, labelled_only), lambda: _idm_positions(merged, k, labelled_only))


def sample_idm_window(
    merged: MergedDataset,
    k: int = 5,
    batch_size: int = 64,
    labelled_only: bool = True,
    seed=None,
) -> IDMBatch:
    """Windows of ``k + 1`` observations and the ``k`` actions between them."""
    rng = check_random_state(seed)
    per_source = idm_positions(merged, k, labelled_only)
    if sum(len(p) for p in per_source) == 0:
        raise ValueError(f"no episode offers a window of {k + 1} observations")
    pos = merged._pick(per_source, batch_size, rng)
    obs = np.empty((batch_size, k + 1), dtype=np.int64)
    act = np.empty((batch_size, k), dtype=np.int64)
    for b, (i, s) in enumerate(pos):
        ep = merged.episodes[i]
        obs[b] = ep.observations[s : s + k + 1]
        act[b] = merged.global_actions(i)[s : s + k]
    return IDMBatch(obs, act, [merged.env_of_episode[i] for i in pos[:, 0]], pos)


class DTBatch(NamedTuple):
    """Right-padded windows of ``C`` timesteps; four tokens (s, G, a, r) each."""

    states: np.ndarray  # (B, C)
    returns: np.ndarray  # (B, C) return bins
    actions: np.ndarray  # (B, C) global ids, NO_LABEL if missing or padding
    rewards: np.ndarray  # (B, C) reward bins
    valid: np.ndarray  # (B, C) False on padding
    labelled: np.ndarray  # (B, C) True where a true label is present
    positions: np.ndarray  # (B, 2) episode index, window start
    env_ids: list

    @property
    def placeholder(self) -> np.ndarray:
        """Timesteps whose action token is the unlabelled placeholder."""
        return self.valid & ~self.labelled

    @property
    def token_kinds(self) -> np.ndarray:
        return np.tile(np.array(TOKEN_KINDS), self.states.shape[1])


TOKEN_KINDS = ("state", "return", "action", "reward")


def quantize(values, n_bins: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Map scalars onto ``n_bins`` evenly spaced bin centres spanning [low, high]."""
    values = np.asarray(values, dtype=np.float64)
    if n_bins == 1:
        return np.zeros(values.shape, dtype=np.int64)
    scaled = (values - low) / (high - low) * (n_bins - 1)
    return np.clip(np.rint(scaled), 0, n_bins - 1).astype(np.int64)


def bin_values(n_bins: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return np.linspace(low, high, n_bins) if n_bins > 1 else np.array([low])


def _dt_positions(merged: MergedDataset) -> list[np.ndarray]:
    per_source: list[list] = [[] for _ in merged.sources]
    for i, ep in enumerate(merged.episodes):
        starts = np.arange(len(ep))
        per_source[merged.source_of_episode[i]].append(
            np.stack([np.full(starts.size, i), starts], axis=1)
        )
    return [
        np.concatenate(p) if p else np.empty((0, 2), dtype=np.int64) for p in per_source
    ]


def sample_dt_window(
    merged: MergedDataset,
    context_timesteps: int = 5,
    batch_size: int = 64,
    seed=None,
    return_bins: int = 2,
    reward_bins: int = 2,
    return_range: tuple[float, float] = (0.0, 1.0),
    reward_range: tuple[float, float] = (0.0, 1.0),
) -> DTBatch:
    """Windows starting at a uniformly drawn timestep, right-padded to the context."""
    if context_timesteps < 1:
        raise ValueError("context_timesteps must be at least 1")
    rng = check_random_state(seed)
    per_source = merged._eligible(("dt",), lambda: _dt_positions(merged))
    pos = merged._pick(per_source, batch_size, rng)
    C = context_timesteps
    states = np.zeros((batch_size, C), dtype=np.int64)
    returns = np.zeros((batch_size, C), dtype=np.int64)
    actions = np.full((batch_size, C), NO_LABEL, dtype=np.int64)
    rewards = np.zeros((batch_size, C), dtype=np.int64)
    valid = np.zeros((batch_size, C), dtype=bool)
    for b, (i, s) in enumerate(pos):
        ep = merged.episodes[i]
        e = min(s + C, len(ep))
        n = e - s
        states[b, :n] = ep.states[s:e]
        returns[b, :n] = quantize(ep.returns_to_go[s:e], return_bins, *return_range)
        rewards[b, :n] = quantize(ep.rewards[s:e], reward_bins, *reward_range)
        actions[b, :n] = merged.global_actions(i)[s:e]
        valid[b, :n] = True
    labelled = valid & (actions != NO_LABEL)
    return DTBatch(
        states, returns, actions, rewards, valid, labelled, pos,
        [merged.env_of_episode[i] for i in pos[:, 0]],
    )


def idm_context_windows(
    merged: MergedDataset, batch: DTBatch, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """IDM observation windows covering each placeholder action in a DT batch.

    Returns ``(rows, cols, windows, offsets)`` flattened over placeholder
    timesteps: ``windows[j]`` holds ``k + 1`` observations and the action of
    timestep ``(rows[j], cols[j])`` is the transition at ``offsets[j]``.
    Episodes with fewer than ``k + 1`` observations are padded by repeating
    their last observation.
    """
    rows, cols = np.nonzero(batch.placeholder)
    windows = np.empty((rows.size, k + 1), dtype=np.int64)
    offsets = np.empty(rows.size, dtype=np.int64)
    for j, (b, c) in enumerate(zip(rows, cols)):
        i, s = batch.positions[b]
        obs = merged.episodes[i].observations
        t = s + c
        start = int(np.clip(t - k // 2, 0, max(0, obs.size - (k + 1))))
        win = obs[start : start + k + 1]
        if win.size < k + 1:
            win = np.concatenate([win, np.full(k + 1 - win.size, win[-1])])
        windows[j] = win
        offsets[j] = t - start
    return rows, cols, windows, offsets


# -- serialization -----------------------------------------------------------

_HEADER = struct.Struct("<4sHI")
_EPISODE = struct.Struct("<IIq")


def dumps_dataset(dataset: TrajectoryDataset) -> bytes:
    """Binary container: header, JSON metadata, length-prefixed episodes.

    Integers are little-endian; rewards and returns are float32; a missing
    label is stored as -1.
    """
    meta = json.dumps(
        {
            "env_id": dataset.env_id,
            "action_vocab": list(dataset.action_vocab),
            "metadata": dataset.metadata,
            "n_episodes": len(dataset.episodes),
        },
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta)))
    buf.write(meta)
    for ep in dataset.episodes:
        rtg = ep.returns_to_go if ep.returns_to_go is not None else compute_returns_to_go(ep).returns_to_go
        body = b"".join(
            [
                ep.states.astype("<i8").tobytes(),
                ep.actions.astype("<i4").tobytes(),
                ep.rewards.astype("<f4").tobytes(),
                rtg.astype("<f4").tobytes(),
            ]
        )
        buf.write(_EPISODE.pack(len(body) + 12, len(ep), ep.final_state))
        buf.write(body)
    return buf.getvalue()


def loads_dataset(raw: bytes) -> TrajectoryDataset:
    magic, version, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError("not an ALPT dataset file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {version}")
    off = _HEADER.size
    meta = json.loads(raw[off : off + meta_len])
    off += meta_len
    episodes = []
    for _ in range(meta["n_episodes"]):
        rec_len, T, final = _EPISODE.unpack_from(raw, off)
        off += _EPISODE.size
        body = memoryview(raw)[off : off + rec_len - 12]
        off += rec_len - 12
        o = 0
        states = np.frombuffer(body, "<i8", T, o).astype(np.int64)
        o += 8 * T
        actions = np.frombuffer(body, "<i4", T, o).astype(np.int64)
        o += 4 * T
        rewards = np.frombuffer(body, "<f4", T, o).astype(np.float32)
        o += 4 * T
        rtg = np.frombuffer(body, "<f4", T, o).astype(np.float32)
        episodes.append(Episode(meta["env_id"], states, actions, rewards, rtg, final))
    if off != len(raw):
        raise ValueError("trailing bytes after last episode record")
    return TrajectoryDataset(meta["env_id"], episodes, tuple(meta["action_vocab"]), meta["metadata"])


def save_dataset(dataset: TrajectoryDataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_dataset(dataset))
    return path


def load_dataset(path) -> TrajectoryDataset:
    return loads_dataset(Path(path).read_bytes())
