"""LAMB with global-norm clipping and linear warmup."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 5e-5
    gradient_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_steps: int = 4000
    batch_size: int = 256
    eps: float = 1e-6
    rule: str = "LAMB"

    def __post_init__(self):
        for name in ("learning_rate", "gradient_clip", "beta1", "beta2", "batch_size", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be non-negative")
        if self.rule != "LAMB":
            raise ValueError(f"unsupported optimizer rule {self.rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_OPTIMIZER = OptimizerConfig()


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def lr_schedule(step: int, config: OptimizerConfig) -> float:
    """Linear ramp from 0 to the base rate over the warmup, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


def clip_by_global_norm(grads: dict[str, torch.Tensor], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@torch.no_grad()
def lamb_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    config: OptimizerConfig,
) -> tuple[dict[str, torch.Tensor], OptimizerState]:
    """One in-place LAMB update of ``params``.

    Gradients are clipped to a global norm of ``config.gradient_clip``; each
    tensor's Adam direction (bias corrected, plus decoupled weight decay) is
    rescaled by the trust ratio ``||w|| / ||update||``, falling back to 1 when
    either norm is zero. The rate comes from :func:`lr_schedule` at the
    incremented step count.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {name}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    grads, _ = clip_by_global_norm(grads, config.gradient_clip)
    state.step += 1
    t = state.step
    lr = lr_schedule(t, config)
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        w = params[name]
        m = state.exp_avg.setdefault(name, torch.zeros_like(w))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(w))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        update = (m / (1 - b1**t)) / ((v / (1 - b2**t)).sqrt() + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * w
        w_norm = float(w.norm())
        u_norm = float(update.norm())
        trust = w_norm / u_norm if w_norm > 0 and u_norm > 0 else 1.0
        w.add_(update, alpha=-lr * trust)
    return params, state
