"""Two-stage IDM/DT training, pseudo-labelling, and the baseline regimes."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch

from .data import (
    NO_LABEL,
    MergedDataset,
    TrajectoryDataset,
    idm_context_windows,
    sample_dt_window,
    sample_idm_window,
)
from .models import (
    DecisionTransformer,
    InverseDynamicsTransformer,
    TransformerConfig,
    dt_loss,
    gradient,
    idm_loss,
)
from .optim import OptimizerConfig, OptimizerState, lamb_step, lr_schedule

log = logging.getLogger(__name__)


class Regime(str, Enum):
    ALPT = "ALPT"
    ALPT_NO_DT_PRETRAIN = "ALPT_NoDTPretrain"
    DT1 = "DT1"
    DT1_IDM = "DT1_IDM"
    DT5 = "DT5"
    DT5_RET = "DT5_RET"

    @property
    def uses_idm(self) -> bool:
        return self in (Regime.ALPT, Regime.ALPT_NO_DT_PRETRAIN, Regime.DT1_IDM)

    @property
    def pretrains(self) -> bool:
        return self in (Regime.ALPT, Regime.ALPT_NO_DT_PRETRAIN, Regime.DT5, Regime.DT5_RET)

    @property
    def uses_sources(self) -> bool:
        return self.pretrains


class Stage(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    JOINT = "joint"


class RegimeError(ValueError):
    """A stage or dataset was requested that the regime does not allow."""


@dataclass(frozen=True)
class PseudoLabelPolicy:
    mode: str = "argmax"  # or "sample"
    refresh: str = "per_batch"

    def __post_init__(self):
        if self.mode not in ("argmax", "sample"):
            raise ValueError(f"unknown pseudo-label mode {self.mode!r}")
        if self.refresh != "per_batch":
            raise ValueError("only per-batch pseudo-label refresh is supported")


DESK_OPTIMIZER = OptimizerConfig(learning_rate=1e-2, warmup_steps=200, batch_size=64)


@dataclass(frozen=True)
class RunConfig:
    regime: Regime = Regime.ALPT
    pretrain_steps: int = 0
    finetune_steps: int = 4000
    # one concurrent stage over the pretraining data plan, evaluated throughout
    single_stage: bool = False
    optimizer: OptimizerConfig = DESK_OPTIMIZER
    model: TransformerConfig = field(
        default_factory=lambda: TransformerConfig(hidden=64, heads=4, layers=2, grid_width=20)
    )
    k: int = 5
    context_timesteps: int = 5
    eval_every: int = 250
    seed: int = 0
    # share of DT and IDM batches drawn from target data when sources are mixed in
    dt_target_fraction: float | None = 0.5
    idm_target_fraction: float | None = 0.5
    pseudo_label: PseudoLabelPolicy = PseudoLabelPolicy()

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.pretrain_steps and not self.regime.pretrains:
            raise RegimeError(f"{self.regime.value} has no pretraining stage")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")
        if self.optimizer.warmup_steps > max(self.pretrain_steps, self.finetune_steps, 1) and (
            self.pretrain_steps or self.finetune_steps
        ):
            raise ValueError("warmup_steps exceeds the longest stage")

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "pretrain_steps": self.pretrain_steps,
            "finetune_steps": self.finetune_steps,
            "single_stage": self.single_stage,
            "optimizer": self.optimizer.to_dict(),
            "model": self.model.to_dict(),
            "k": self.k,
            "context_timesteps": self.context_timesteps,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "dt_target_fraction": self.dt_target_fraction,
            "idm_target_fraction": self.idm_target_fraction,
            "pseudo_label": {"mode": self.pseudo_label.mode, "refresh": self.pseudo_label.refresh},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        # partial optimizer and model blocks override the desk defaults field by field
        base = cls()
        if "optimizer" in d:
            d["optimizer"] = replace(base.optimizer, **d["optimizer"])
        if "model" in d:
            d["model"] = replace(base.model, **d["model"])
        if "pseudo_label" in d:
            d["pseudo_label"] = PseudoLabelPolicy(**d["pseudo_label"])
        return cls(**d)


@dataclass
class ExperimentData:
    """Fully labelled source datasets plus the split target dataset."""

    target_labelled: TrajectoryDataset
    target_unlabelled: TrajectoryDataset
    sources: list[TrajectoryDataset] = field(default_factory=list)

    def all_datasets(self) -> list[TrajectoryDataset]:
        return [*self.sources, self.target_labelled, self.target_unlabelled]

    @property
    def action_vocab(self) -> tuple[str, ...]:
        vocab: list[str] = []
        for ds in self.all_datasets():
            for name in ds.action_vocab:
                if name not in vocab:
                    vocab.append(name)
        return tuple(vocab)


@dataclass(frozen=True)
class StagePlan:
    idm_data: tuple[str, ...]  # subset of {"sources", "labelled"}
    dt_data: tuple[str, ...]  # subset of {"sources", "labelled", "unlabelled"}
    # how DT treats unlabelled target actions: "pseudo" or "mask" (return term only)
    unlabelled_actions: str = "pseudo"


def stage_plan(regime: Regime, stage: Stage) -> StagePlan:
    """Which datasets each model trains on for a regime and stage."""
    regime = Regime(regime)
    if stage is Stage.JOINT:
        stage = Stage.PRETRAIN if regime in (Regime.ALPT, Regime.DT5, Regime.DT5_RET) else Stage.FINETUNE
        if regime is Regime.ALPT_NO_DT_PRETRAIN:
            return StagePlan(("sources", "labelled"), ("labelled", "unlabelled"))
    if stage is Stage.PRETRAIN:
        if not regime.pretrains:
            raise RegimeError(f"{regime.value} does not pretrain")
        return {
            Regime.ALPT: StagePlan(("sources", "labelled"), ("sources", "labelled", "unlabelled")),
            Regime.ALPT_NO_DT_PRETRAIN: StagePlan(("sources", "labelled"), ()),
            Regime.DT5: StagePlan((), ("sources", "labelled")),
            Regime.DT5_RET: StagePlan((), ("sources", "labelled", "unlabelled"), "mask"),
        }[regime]
    return {
        Regime.ALPT: StagePlan(("labelled",), ("labelled", "unlabelled")),
        Regime.ALPT_NO_DT_PRETRAIN: StagePlan(("labelled",), ("labelled", "unlabelled")),
        Regime.DT1: StagePlan((), ("labelled",)),
        Regime.DT1_IDM: StagePlan(("labelled",), ("labelled", "unlabelled")),
        Regime.DT5: StagePlan((), ("labelled",)),
        Regime.DT5_RET: StagePlan((), ("labelled", "unlabelled"), "mask"),
    }[regime]


def _merge_plan(
    data: ExperimentData,
    parts: Sequence[str],
    target_fraction: float | None,
    vocab: Sequence[str],
) -> MergedDataset | None:
    if not parts:
        return None
    datasets, is_target = [], []
    if "sources" in parts:
        datasets += data.sources
        is_target += [False] * len(data.sources)
    if "labelled" in parts:
        datasets.append(data.target_labelled)
        is_target.append(True)
    if "unlabelled" in parts:
        datasets.append(data.target_unlabelled)
        is_target.append(True)
    keep = [i for i, ds in enumerate(datasets) if ds.n_transitions > 0]
    if not keep:
        raise ValueError(f"no transitions in {parts}")
    datasets = [datasets[i] for i in keep]
    is_target = np.array([is_target[i] for i in keep])
    sizes = np.array([ds.n_transitions for ds in datasets], dtype=np.float64)
    weights = sizes
    if target_fraction is not None and is_target.any() and (~is_target).any():
        weights = np.where(
            is_target,
            target_fraction * sizes / sizes[is_target].sum(),
            (1 - target_fraction) * sizes / sizes[~is_target].sum(),
        )
    # global ids follow the whole experiment, not the datasets this stage mixes
    return MergedDataset(datasets, weights, vocab)


# -- pseudo labels -----------------------------------------------------------


@torch.no_grad()
def pseudo_label(
    idm: InverseDynamicsTransformer,
    windows,
    offsets=None,
    true_labels=None,
    policy: PseudoLabelPolicy = PseudoLabelPolicy(),
    rng: np.random.Generator | None = None,
    allowed=None,
) -> np.ndarray:
    """IDM action ids for observation windows.

    With ``offsets`` given, returns one id per window (the transition at that
    offset); otherwise an ``(n, k)`` array. Entries of ``true_labels`` that are
    not ``-1`` are returned unchanged. ``allowed`` is an optional boolean
    ``(n, |A|)`` mask of the actions each window's environment offers; other
    actions are never chosen. Argmax ties go to the lowest id.
    """
    windows = torch.as_tensor(np.asarray(windows), dtype=torch.long)
    if windows.ndim == 1:
        windows = windows[None]
    if windows.shape[0] == 0:
        return np.empty((0,) if offsets is not None else (0, windows.shape[1] - 1), dtype=np.int64)
    logits = idm(windows)
    if offsets is not None:
        logits = logits[torch.arange(len(logits)), torch.as_tensor(np.asarray(offsets))]
    if allowed is not None:
        allowed = torch.as_tensor(np.asarray(allowed, dtype=bool))
        if offsets is None:
            allowed = allowed[:, None, :]
        logits = logits.masked_fill(~allowed, float("-inf"))
    if policy.mode == "argmax":
        labels = logits.argmax(-1).numpy()  # torch argmax returns the first maximum
    else:
        rng = rng if rng is not None else np.random.default_rng()
        probs = logits.softmax(-1).double().numpy()
        cdf = probs.cumsum(-1)
        u = rng.random(cdf.shape[:-1] + (1,)) * cdf[..., -1:]
        labels = (u > cdf).sum(-1)
    labels = labels.astype(np.int64)
    if true_labels is not None:
        true_labels = np.asarray(true_labels)
        labels = np.where(true_labels != NO_LABEL, true_labels, labels)
    return labels


def displacement_labeler(maze, merged: MergedDataset) -> Callable:
    """Labeler that reads the action off the maze dynamics (moves only)."""
    from .maze import displacement_action

    vocab = merged.global_action_vocab

    def label(windows: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        out = np.empty(len(windows), dtype=np.int64)
        for j, (w, o) in enumerate(zip(windows, offsets)):
            name = displacement_action(maze, int(w[o]), int(w[o + 1]))
            if name is None:
                raise ValueError("transition without displacement has no oracle label")
            out[j] = vocab.index(name)
        return out

    return label


# -- trainer -----------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    stage: str
    lr: float
    idm_loss: float | None
    dt_loss: float | None
    dt_action_loss: float | None
    dt_return_loss: float | None
    wall_clock: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Trainer:
    """Coordinates the IDM and DT updates for one run.

    Each iteration takes one IDM step (if the stage trains the IDM) and then
    one DT step whose unlabelled actions are pseudo-labelled by the freshly
    updated IDM. IDM and DT batches come from separate seeded streams.
    """

    def __init__(
        self,
        run: RunConfig,
        data: ExperimentData,
        idm: InverseDynamicsTransformer | None = None,
        dt: DecisionTransformer | None = None,
        labeler: Callable | None = None,
    ):
        self.run = run
        self.data = data
        self.vocab = data.action_vocab
        n_actions = len(self.vocab)
        base = replace(run.model, action_vocab=n_actions, seed=run.seed)
        if idm is None and run.regime.uses_idm and labeler is None:
            idm = InverseDynamicsTransformer(replace(base, context_tokens=run.k + 1))
        if dt is None:
            dt = DecisionTransformer(
                replace(base, context_tokens=4 * run.context_timesteps, seed=run.seed + 1)
            )
        self.idm, self.dt = idm, dt
        self.labeler = labeler
        seeds = np.random.SeedSequence(run.seed).spawn(3)
        self.idm_rng = np.random.default_rng(seeds[0])
        self.dt_rng = np.random.default_rng(seeds[1])
        self.label_rng = np.random.default_rng(seeds[2])
        self.history: list[StepRecord] = []
        self.consumed: dict[str, set] = {"idm": set(), "dt": set(), "pseudo": set()}
        self._t0 = time.perf_counter()

    def run_stage(
        self,
        stage: Stage,
        steps: int,
        callback: Callable[[int, "Trainer"], None] | None = None,
    ) -> list[StepRecord]:
        plan = stage_plan(self.run.regime, stage)
        if plan.idm_data and self.idm is None and self.labeler is None:
            raise RegimeError(f"{self.run.regime.value} has no IDM for stage {stage.value}")
        idm_data = _merge_plan(self.data, plan.idm_data, self.run.idm_target_fraction, self.vocab)
        dt_data = _merge_plan(self.data, plan.dt_data, self.run.dt_target_fraction, self.vocab)
        train_idm = idm_data is not None and self.idm is not None
        idm_opt, dt_opt = OptimizerState(), OptimizerState()
        idm_params = dict(self.idm.named_parameters()) if train_idm else {}
        dt_params = dict(self.dt.named_parameters())
        cfg = self.run.optimizer
        records = []
        if callback is not None and callback(0, self) is True:
            return records
        for step in range(1, steps + 1):
            rec = StepRecord(step, stage.value, lr_schedule(step, cfg), None, None, None, None, 0.0)
            if train_idm:
                batch = sample_idm_window(idm_data, self.run.k, cfg.batch_size, True, self.idm_rng)
                self.consumed["idm"].update(batch.env_ids)
                rec.idm_loss = self._idm_step(batch, idm_params, idm_opt)
            if dt_data is not None:
                report = self._dt_step(dt_data, plan, dt_params, dt_opt)
                rec.dt_loss, rec.dt_action_loss, rec.dt_return_loss = report
            rec.wall_clock = time.perf_counter() - self._t0
            records.append(rec)
            if callback is not None and step % self.run.eval_every == 0:
                # a callback returning True ends the stage early
                if callback(step, self) is True:
                    break
        self.history.extend(records)
        return records

    def _idm_step(self, batch, params, opt_state) -> float:
        holder = {}

        def loss_fn(m):
            holder["r"] = idm_loss(m, batch.observations, batch.actions)
            return holder["r"]

        lamb_step(params, gradient(self.idm, loss_fn), opt_state, self.run.optimizer)
        return float(holder["r"].total.detach())

    def _allowed(self, merged, episodes) -> np.ndarray:
        """Action masks restricting pseudo-labels to each episode's own action set."""
        table = np.zeros((len(merged.sources), len(self.vocab)), dtype=bool)
        for i, ds in enumerate(merged.sources):
            table[i, [self.vocab.index(a) for a in ds.action_vocab]] = True
        return table[np.asarray(merged.source_of_episode)[episodes]]

    def _dt_step(self, merged, plan, params, opt_state):
        cfg = self.run.optimizer
        mc = self.dt.config
        batch = sample_dt_window(
            merged, self.run.context_timesteps, cfg.batch_size, self.dt_rng,
            return_bins=mc.return_bins, reward_bins=mc.reward_bins,
        )
        self.consumed["dt"].update(
            (merged.sources[merged.source_of_episode[i]].metadata.get("part", "full"), e)
            for i, e in zip(batch.positions[:, 0], batch.env_ids)
        )
        labels = batch.actions.copy()
        weight = batch.valid.astype(np.float64)
        holes = batch.placeholder
        if holes.any():
            if plan.unlabelled_actions == "mask":
                weight[holes] = 0.0
            else:
                rows, cols, windows, offsets = idm_context_windows(merged, batch, self.run.k)
                if self.labeler is not None:
                    fill = self.labeler(windows, offsets)
                elif self.idm is not None:
                    fill = pseudo_label(
                        self.idm, windows, offsets, policy=self.run.pseudo_label, rng=self.label_rng,
                        allowed=self._allowed(merged, batch.positions[rows, 0]),
                    )
                else:
                    raise RegimeError("unlabelled actions reached a regime without an IDM")
                labels[rows, cols] = fill
                self.consumed["pseudo"].update(batch.env_ids[r] for r in np.unique(rows))
        holder = {}

        def loss_fn(m):
            holder["r"] = dt_loss(
                m, batch.states, batch.returns, labels, batch.rewards, batch.valid, weight
            )
            return holder["r"]

        lamb_step(params, gradient(self.dt, loss_fn), opt_state, cfg)
        r = holder["r"]
        return float(r.total.detach()), float(r.action.detach()), float(r.ret.detach())


def pretrain(run: RunConfig, data: ExperimentData, trainer: Trainer | None = None) -> Trainer:
    """First stage: IDM on sources + labelled target, DT on everything."""
    if not run.regime.pretrains:
        raise RegimeError(f"{run.regime.value} has no pretraining stage")
    trainer = trainer or Trainer(run, data)
    trainer.run_stage(Stage.PRETRAIN, run.pretrain_steps)
    if run.regime is Regime.ALPT_NO_DT_PRETRAIN:
        # the DT starts the finetuning stage from scratch
        trainer.dt = DecisionTransformer(trainer.dt.config)
    return trainer


def finetune(
    run: RunConfig,
    data: ExperimentData,
    trainer: Trainer | None = None,
    callback: Callable[[int, Trainer], None] | None = None,
) -> Trainer:
    """Second stage: both models restricted to the target datasets."""
    trainer = trainer or Trainer(run, data)
    trainer.run_stage(Stage.FINETUNE, run.finetune_steps, callback)
    return trainer


def train(
    run: RunConfig,
    data: ExperimentData,
    callback: Callable[[int, Trainer], None] | None = None,
    labeler: Callable | None = None,
) -> Trainer:
    """Full schedule for ``run.regime``; ``callback`` fires on the evaluated stage."""
    if run.regime.uses_sources and not data.sources and run.regime is not Regime.DT5_RET:
        log.warning("%s run without source datasets", run.regime.value)
    trainer = Trainer(run, data, labeler=labeler)
    if run.single_stage:
        trainer.run_stage(Stage.JOINT, run.finetune_steps, callback)
        return trainer
    if run.regime.pretrains:
        pretrain(run, data, trainer)
    return finetune(run, data, trainer, callback)
