"""Desk-scale maze scenarios and the steps-to-threshold comparison."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TrajectoryDataset, apply_action_budget
from .evaluation import MAZE_EVAL, EvalConfig, EvalReport, evaluate, steps_to_threshold
from .maze import MazeSpec, collect_trajectories, corridor_maze, generate_maze
from .training import ExperimentData, Regime, RunConfig, train

log = logging.getLogger(__name__)

TARGET_SEED = 1
SOURCE_SEEDS = {"blocked": (2, 4, 6), "tunneled": (3, 5, 7)}
LABEL_BUDGET = 250
N_TRAJECTORIES = 500
EPSILON = 0.5
THRESHOLD = 0.8


@dataclass(frozen=True)
class Scenario:
    """Target maze plus an ordered list of source mazes."""

    name: str
    target: MazeSpec
    sources: tuple[MazeSpec, ...] = ()
    eval_config: EvalConfig = MAZE_EVAL


def blocked(n_sources: int = 1) -> Scenario:
    """Blocked target; sources alternate blocked and tunneled after the first."""
    styles = ["blocked", "tunneled"] * n_sources
    picked, used = [], {"blocked": 0, "tunneled": 0}
    for style in styles[:n_sources]:
        picked.append(generate_maze(SOURCE_SEEDS[style][used[style]], style))
        used[style] += 1
    name = "blocked" if n_sources == 1 else f"blocked-n{n_sources}"
    return Scenario(name, generate_maze(TARGET_SEED, "blocked"), tuple(picked))


def blocked_tunneled() -> Scenario:
    target = generate_maze(TARGET_SEED, "blocked")
    sources = (generate_maze(SOURCE_SEEDS["blocked"][0], "blocked"), generate_maze(SOURCE_SEEDS["tunneled"][0], "tunneled"))
    return Scenario("blocked+tunneled", target, sources)


def corridor() -> Scenario:
    """Horizontal-only target, vertical-only source on open grids.

    With two actions an undirected walk reaches a goal on the same row fairly
    often, so episodes are capped at three times the grid width; a uniform
    policy then succeeds about half the time.
    """
    return Scenario(
        "corridor",
        corridor_maze(TARGET_SEED, "horizontal"),
        (corridor_maze(SOURCE_SEEDS["blocked"][0], "vertical"),),
        replace(MAZE_EVAL, max_steps=60),
    )


SCENARIOS = {
    "blocked": lambda: blocked(1),
    "blocked+tunneled": blocked_tunneled,
    "blocked-n2": lambda: blocked(2),
    "blocked-n4": lambda: blocked(4),
    "corridor": corridor,
}


_CACHE: dict[tuple, TrajectoryDataset] = {}


def _collect(maze: MazeSpec, seed: int) -> TrajectoryDataset:
    key = (maze.name, maze.style, seed)
    if key not in _CACHE:
        _CACHE[key] = collect_trajectories(maze, epsilon=EPSILON, count=N_TRAJECTORIES, seed=seed)
    return _CACHE[key]


def build_data(scenario: Scenario, seed: int, regime: Regime | str) -> ExperimentData:
    """Collect (cached) datasets and draw the seed's label mask on the target."""
    regime = Regime(regime)
    target = _collect(scenario.target, 1000 + scenario.target.seed)
    labelled, unlabelled = apply_action_budget(target, LABEL_BUDGET, seed=seed)
    sources = []
    if regime.uses_sources:
        sources = [_collect(m, 1000 + m.seed) for m in scenario.sources]
    return ExperimentData(labelled, unlabelled, sources)


@dataclass
class ThresholdRun:
    regime: str
    scenario: str
    seed: int
    log: list[tuple[int, float]] = field(default_factory=list)
    reports: list[EvalReport] = field(default_factory=list)
    budget: int = 0

    @property
    def steps(self) -> int | None:
        return steps_to_threshold([s for s, _ in self.log], [v for _, v in self.log], THRESHOLD)


def run_to_threshold(
    regime: Regime | str,
    scenario: Scenario,
    seed: int = 0,
    budget: int = 4000,
    run: RunConfig | None = None,
    stop_early: bool = True,
) -> ThresholdRun:
    """Train one regime, evaluating periodically until success reaches the threshold."""
    regime = Regime(regime)
    run = replace(run or RunConfig(), regime=regime, single_stage=True, finetune_steps=budget, seed=seed)
    data = build_data(scenario, seed, regime)
    out = ThresholdRun(regime.value, scenario.name, seed, budget=budget)

    def callback(step, trainer):
        report = evaluate(trainer.dt, scenario.target, scenario.eval_config, trainer.vocab, step)
        out.log.append((step, report.success_rate))
        out.reports.append(report)
        log.info("%s %s seed=%d step=%d success=%.2f", regime.value, scenario.name, seed, step, report.success_rate)
        return stop_early and report.success_rate >= THRESHOLD

    train(run, data, callback)
    return out


@dataclass
class Comparison:
    """Mean steps-to-threshold over seeds; censored seeds count as the budget."""

    mean_steps: float
    censored: int
    per_seed: list[int | None]

    @property
    def exact(self) -> bool:
        return self.censored == 0


def summarize(runs: list[ThresholdRun]) -> Comparison:
    steps = [r.steps for r in runs]
    filled = [s if s is not None else r.budget for s, r in zip(steps, runs)]
    return Comparison(float(np.mean(filled)), sum(s is None for s in steps), steps)


def speedup(fast: Comparison, slow: Comparison) -> float | None:
    """Lower bound on ``slow / fast``; None when ``fast`` itself is censored."""
    if not fast.exact:
        return None
    if fast.mean_steps == 0:
        return float("inf")
    return slow.mean_steps / fast.mean_steps
