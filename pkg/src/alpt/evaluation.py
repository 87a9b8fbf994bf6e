"""Return-conditioned rollouts, IDM accuracy and learning curves."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .data import bin_values, quantize
from .maze import EnvState, MazeSpec, displacement_action, sample_start_goal, step
from .models import DecisionTransformer, InverseDynamicsTransformer


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100
    max_steps: int = 500
    return_quantile: float = 0.85
    # condition on this return instead of the quantile estimate when set
    fixed_return: float | None = None
    action_mode: str = "greedy"  # or "sample"
    temperature: float = 1.0
    seed: int = 0
    return_range: tuple[float, float] = (0.0, 1.0)
    reward_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if not 0.0 < self.return_quantile <= 1.0:
            raise ValueError("return_quantile must lie in (0, 1]")
        if self.action_mode not in ("greedy", "sample"):
            raise ValueError(f"unknown action mode {self.action_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


MAZE_EVAL = EvalConfig(episodes=100, max_steps=500, action_mode="sample")
ATARI_EVAL = EvalConfig(episodes=16, max_steps=2500)


class EpisodeResult(NamedTuple):
    ret: float
    length: int


@dataclass
class EvalReport:
    mean_return: float
    success_rate: float
    per_episode: list[EpisodeResult]
    checkpoint_step: int = 0

    def to_dict(self) -> dict:
        return {
            "checkpoint_step": self.checkpoint_step,
            "mean_return": self.mean_return,
            "success_rate": self.success_rate,
            "per_episode": [list(e) for e in self.per_episode],
        }


def choose_return(probs, quantile: float) -> int:
    """Smallest bin whose cumulative probability reaches ``quantile``."""
    cdf = np.cumsum(np.asarray(probs, dtype=np.float64), axis=-1)
    cdf = cdf / cdf[..., -1:]
    return (cdf < quantile - 1e-12).sum(axis=-1)


def _pick_actions(logits: torch.Tensor, allowed: np.ndarray, config: EvalConfig, uniforms) -> np.ndarray:
    masked = torch.full_like(logits, float("-inf"))
    masked[:, allowed] = logits[:, allowed]
    if config.action_mode == "greedy":
        return masked.argmax(-1).numpy()
    probs = (masked.double() / config.temperature).softmax(-1).numpy()
    cdf = np.cumsum(probs, axis=-1)
    picks = (np.asarray(uniforms)[:, None] * cdf[:, -1:] > cdf).sum(-1)
    return np.minimum(picks, logits.shape[-1] - 1)


@torch.no_grad()
def select_action(
    dt: DecisionTransformer,
    states,
    returns,
    actions,
    rewards,
    config: EvalConfig = EvalConfig(),
    allowed: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[int, float]:
    """Action for the last timestep of a context window.

    The last timestep's return, action and reward entries are ignored: the
    return token is filled with the optimistic estimate, read off the
    predicted return distribution at the current state token.
    """
    C = dt.config.context_tokens // 4
    states, returns, actions, rewards = (np.asarray(x, dtype=np.int64)[-C:] for x in (states, returns, actions, rewards))
    returns, actions, rewards = returns.copy(), actions.copy(), rewards.copy()
    actions[-1], rewards[-1] = -1, 0
    values = bin_values(dt.config.return_bins, *config.return_range)
    t = lambda x: torch.as_tensor(x)[None]
    if config.fixed_return is not None:
        g_bin = int(quantize(config.fixed_return, dt.config.return_bins, *config.return_range))
    else:
        out = dt(t(states), t(returns), t(actions), t(rewards))
        g_bin = int(choose_return(out.return_logits[0, -1].softmax(-1).double().numpy(), config.return_quantile))
    returns[-1] = g_bin
    out = dt(t(states), t(returns), t(actions), t(rewards))
    allowed = np.arange(dt.config.action_vocab) if allowed is None else np.asarray(allowed)
    u = (rng or np.random.default_rng(config.seed)).random(1)
    a = int(_pick_actions(out.action_logits[:, -1], allowed, config, u)[0])
    return a, float(values[g_bin])


@torch.no_grad()
def _run_episodes(
    dt: DecisionTransformer,
    maze: MazeSpec,
    config: EvalConfig,
    seeds: Sequence[np.random.SeedSequence],
    vocab: Sequence[str],
    starts: Sequence[EnvState] | None = None,
):
    """Roll out ``len(seeds)`` episodes in lock-step, batching the forward passes."""
    n = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    if starts is None:
        starts = [sample_start_goal(maze, r)[0] for r in rngs]
    allowed = np.array([list(vocab).index(a) for a in maze.actions])
    local = {g: maze.actions.index(vocab[g]) for g in allowed}
    C = dt.config.context_tokens // 4
    R = dt.config.return_bins
    fixed = (
        None if config.fixed_return is None
        else int(quantize(config.fixed_return, R, *config.return_range))
    )
    S = np.zeros((n, C), np.int64)
    G = np.zeros((n, C), np.int64)
    A = np.full((n, C), -1, np.int64)
    W = np.zeros((n, C), np.int64)
    agent = np.array([s.agent for s in starts])
    goal = np.array([s.goal for s in starts])
    done = np.zeros(n, bool)
    total = np.zeros(n)
    length = np.zeros(n, np.int64)
    trajectories = [[] for _ in range(n)]
    provisional = np.full(n, R - 1 if fixed is None else fixed)
    for t in range(config.max_steps):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        pos = min(t, C - 1)
        if t >= C:
            for X in (S, G, A, W):
                X[:, :-1] = X[:, 1:]
        S[:, pos] = agent * maze.n_cells + goal
        A[:, pos] = -1
        W[:, pos] = 0
        G[:, pos] = provisional
        L = pos + 1
        tt = lambda X: torch.as_tensor(X[live, :L])
        out = dt(tt(S), tt(G), tt(A), tt(W))
        logits = out.action_logits[:, pos]
        if fixed is None:
            probs = out.return_logits[:, pos].softmax(-1).double().numpy()
            g = choose_return(probs, config.return_quantile)
            redo = g != G[live, pos]
            G[live, pos] = g
            if redo.any():
                rows = live[redo]
                tr = lambda X: torch.as_tensor(X[rows, :L])
                logits = logits.clone()
                logits[torch.as_tensor(np.flatnonzero(redo))] = dt(tr(S), tr(G), tr(A), tr(W)).action_logits[:, pos]
        u = np.array([rngs[i].random() for i in live])
        picks = _pick_actions(logits, allowed, config, u)
        for j, i in enumerate(live):
            a = int(picks[j])
            outcome = step(maze, EnvState(int(agent[i]), int(goal[i])), local[a])
            trajectories[i].append((int(agent[i]), a, outcome.reward))
            A[i, pos] = a
            W[i, pos] = int(quantize(outcome.reward, dt.config.reward_bins, *config.reward_range))
            agent[i] = outcome.next.agent
            total[i] += outcome.reward
            length[i] += 1
            done[i] = outcome.done
        provisional = G[:, pos].copy()
    return total, length, trajectories


def rollout(
    dt: DecisionTransformer,
    maze: MazeSpec,
    config: EvalConfig = EvalConfig(),
    seed: int = 0,
    vocab: Sequence[str] | None = None,
    start: EnvState | None = None,
):
    """One evaluation episode: (return, length, [(agent cell, action, reward), ...])."""
    vocab = tuple(vocab or maze.actions)
    total, length, traj = _run_episodes(
        dt, maze, config, [np.random.SeedSequence(seed)], vocab, None if start is None else [start]
    )
    return float(total[0]), int(length[0]), traj[0]


def evaluate(
    dt: DecisionTransformer,
    maze: MazeSpec,
    config: EvalConfig = MAZE_EVAL,
    vocab: Sequence[str] | None = None,
    checkpoint_step: int = 0,
) -> EvalReport:
    """Success statistics over ``config.episodes`` seeded episodes.

    Parameters are left untouched; the model is put in eval mode only for
    the duration of the rollouts.
    """
    vocab = tuple(vocab or maze.actions)
    seeds = np.random.SeedSequence(config.seed).spawn(config.episodes)
    was_training = dt.training
    dt.eval()
    try:
        total, length, _ = _run_episodes(dt, maze, config, seeds, vocab)
    finally:
        dt.train(was_training)
    per = [EpisodeResult(float(r), int(n)) for r, n in zip(total, length)]
    mean = float(np.mean(total))
    return EvalReport(mean, float(np.mean(total > 0)), per, checkpoint_step)


@torch.no_grad()
def idm_accuracy(
    idm: InverseDynamicsTransformer,
    observations,
    actions,
    maze: MazeSpec,
    vocab: Sequence[str],
) -> tuple[float, float]:
    """(overall accuracy, accuracy on transitions where the agent moved)."""
    obs = np.asarray(observations, dtype=np.int64)
    act = np.asarray(actions, dtype=np.int64)
    if obs.size == 0:
        raise ValueError("no held-out windows to score")
    pred = idm(torch.as_tensor(obs)).argmax(-1).numpy()
    labelled = act >= 0
    moved = np.zeros_like(labelled)
    for b in range(obs.shape[0]):
        for i in range(act.shape[1]):
            name = displacement_action(maze, int(obs[b, i]), int(obs[b, i + 1]))
            moved[b, i] = name is not None
    hit = (pred == act) & labelled
    overall = hit.sum() / labelled.sum()
    unamb = labelled & moved
    return float(overall), float(hit[unamb].sum() / max(unamb.sum(), 1))


# -- curves ------------------------------------------------------------------


@dataclass
class LearningCurve:
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_seeds: int = 1

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("curve steps must be strictly increasing")

    @property
    def points(self) -> list[tuple[int, float, float]]:
        return [(int(s), float(m), float(d)) for s, m, d in zip(self.steps, self.mean, self.std)]


def build_curve(logs: Sequence[Sequence[tuple[int, float]]]) -> LearningCurve:
    """Mean and (population) std across seeds of (step, value) logs."""
    if not logs:
        raise ValueError("no logs given")
    grids = [tuple(s for s, _ in log) for log in logs]
    if any(g != grids[0] for g in grids):
        raise ValueError("seed logs do not share one step grid")
    values = np.array([[v for _, v in log] for log in logs], dtype=np.float64)
    return LearningCurve(np.array(grids[0]), values.mean(0), values.std(0), len(logs))


def steps_to_threshold(steps, values, threshold: float) -> int | None:
    """First step whose value reaches ``threshold``; None if it never does."""
    for s, v in zip(steps, values):
        if v >= threshold:
            return int(s)
    return None


def emit_curve(
    runs: Mapping[str, Sequence[Sequence[tuple[int, float]]]],
    out_prefix,
    ylabel: str = "success rate",
) -> tuple[Path, Path]:
    """Write ``<prefix>.svg`` (mean ± std band per regime) and ``<prefix>.tsv``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_prefix = Path(out_prefix)
    curves = {name: build_curve(logs) for name, logs in runs.items()}
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = []
    for name, c in curves.items():
        ax.plot(c.steps, c.mean, label=name)
        ax.fill_between(c.steps, c.mean - c.std, c.mean + c.std, alpha=0.2)
        rows += [(name, s, m, d, c.n_seeds) for s, m, d in c.points]
    ax.set_xlabel("gradient steps")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    svg = out_prefix.with_suffix(".svg")
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(["regime", "step", "mean", "std", "n_seeds"])
    writer.writerows(rows)
    tsv = out_prefix.with_suffix(".tsv")
    tsv.write_text(buf.getvalue())
    return svg, tsv
