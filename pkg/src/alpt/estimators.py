"""scikit-learn style wrappers around the IDM and the full training pipeline."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive, check_random_state, check_token_array
from .data import NO_LABEL
from .evaluation import MAZE_EVAL, EvalConfig, evaluate
from .models import InverseDynamicsTransformer, TransformerConfig, gradient, idm_loss
from .optim import OptimizerConfig, OptimizerState, lamb_step
from .training import ExperimentData, RunConfig, train


class InverseDynamicsModel(ClassifierMixin, BaseEstimator):
    """Bidirectional transformer labelling the k actions inside a window of k+1 states.

    ``X`` holds state tokens of shape ``(n, k+1)``; ``y`` holds action ids of
    shape ``(n, k)`` with ``-1`` marking transitions that carry no label.
    """

    def __init__(
        self,
        k=5,
        n_actions=4,
        n_cells=400,
        grid_width=20,
        hidden=64,
        heads=4,
        layers=2,
        steps=1000,
        batch_size=64,
        learning_rate=1e-2,
        warmup_steps=200,
        seed=0,
    ):
        self.k = k
        self.n_actions = n_actions
        self.n_cells = n_cells
        self.grid_width = grid_width
        self.hidden = hidden
        self.heads = heads
        self.layers = layers
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.seed = seed

    def _check_X(self, X):
        return check_token_array(X, "X", ndim=2, width=self.k + 1)

    def fit(self, X, y):
        X = self._check_X(X)
        y = check_token_array(y, "y", ndim=2, width=self.k)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        if np.any((y < NO_LABEL) | (y >= self.n_actions)):
            raise ValueError("labels must be -1 or lie in [0, n_actions)")
        labelled = (y != NO_LABEL).any(1)
        if not labelled.any():
            raise ValueError("y carries no labels")
        check_positive(self.steps, "steps")
        X, y = X[labelled], y[labelled]
        config = TransformerConfig(
            layers=self.layers, heads=self.heads, hidden=self.hidden,
            context_tokens=self.k + 1, n_cells=self.n_cells, grid_width=self.grid_width,
            state_vocab=self.n_cells**2, action_vocab=self.n_actions, seed=self.seed,
        )
        opt = OptimizerConfig(
            learning_rate=self.learning_rate,
            warmup_steps=min(self.warmup_steps, self.steps),
            batch_size=self.batch_size,
        )
        self.model_ = InverseDynamicsTransformer(config)
        params = dict(self.model_.named_parameters())
        state = OptimizerState()
        rng = check_random_state(self.seed)
        obs_t, act_t = torch.as_tensor(X), torch.as_tensor(y)
        self.loss_curve_ = []
        for _ in range(self.steps):
            rows = torch.as_tensor(rng.integers(0, len(X), size=self.batch_size))
            holder = {}

            def loss_fn(m):
                holder["r"] = idm_loss(m, obs_t[rows], act_t[rows], weight=(act_t[rows] >= 0).double())
                return holder["r"]

            lamb_step(params, gradient(self.model_, loss_fn), state, opt)
            self.loss_curve_.append(float(holder["r"].total.detach()))
        self.model_.eval()
        self.classes_ = np.arange(self.n_actions)
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        return self.model_(torch.as_tensor(X)).softmax(-1).double().numpy()

    def predict(self, X):
        # argmax keeps the first maximum, so ties go to the lowest action id
        return self.predict_proba(X).argmax(-1)

    def transform(self, X):
        """Pseudo-labels for every transition of every window."""
        return self.predict(X)

    def score(self, X, y, sample_weight=None):
        """Accuracy over labelled transitions."""
        y = check_token_array(y, "y", ndim=2, width=self.k)
        pred = self.predict(X)
        mask = y != NO_LABEL
        if not mask.any():
            raise ValueError("y carries no labels to score against")
        return float((pred[mask] == y[mask]).mean())


class ALPTAgent(BaseEstimator):
    """Trains an IDM and a decision transformer for one regime and rolls it out."""

    def __init__(
        self,
        regime="ALPT",
        steps=4000,
        pretrain_steps=0,
        single_stage=True,
        hidden=64,
        heads=4,
        layers=2,
        n_cells=400,
        grid_width=20,
        learning_rate=1e-2,
        warmup_steps=200,
        batch_size=64,
        seed=0,
        eval_config=MAZE_EVAL,
    ):
        self.regime = regime
        self.steps = steps
        self.pretrain_steps = pretrain_steps
        self.single_stage = single_stage
        self.hidden = hidden
        self.heads = heads
        self.layers = layers
        self.n_cells = n_cells
        self.grid_width = grid_width
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.seed = seed
        self.eval_config = eval_config

    def run_config(self) -> RunConfig:
        return RunConfig(
            regime=self.regime,
            pretrain_steps=self.pretrain_steps,
            finetune_steps=self.steps,
            single_stage=self.single_stage,
            optimizer=OptimizerConfig(
                learning_rate=self.learning_rate,
                warmup_steps=self.warmup_steps,
                batch_size=self.batch_size,
            ),
            model=TransformerConfig(
                layers=self.layers, heads=self.heads, hidden=self.hidden,
                n_cells=self.n_cells, grid_width=self.grid_width,
            ),
            seed=self.seed,
        )

    def fit(self, data: ExperimentData, y=None):
        if not isinstance(data, ExperimentData):
            raise TypeError("fit expects an ExperimentData bundle")
        trainer = train(self.run_config(), data)
        self.trainer_ = trainer
        self.dt_ = trainer.dt
        self.idm_ = trainer.idm
        self.action_vocab_ = trainer.vocab
        return self

    def predict(self, maze, config: EvalConfig | None = None):
        """Evaluation report for rollouts in ``maze``."""
        check_is_fitted(self, "dt_")
        return evaluate(self.dt_, maze, config or self.eval_config, self.action_vocab_)

    def score(self, maze, y=None):
        """Success rate of the rolled-out policy."""
        return self.predict(maze).success_rate
