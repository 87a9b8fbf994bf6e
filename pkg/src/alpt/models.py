"""Shared transformer backbone for the inverse dynamics model and the DT.

The two models are the same GPT-2 style stack and differ only in the attention
mask (all-ones for the IDM, lower-triangular for the DT) and their output
heads.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import NO_LABEL


class MaskKind(str, Enum):
    CAUSAL = "causal"
    FULL = "full"


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 128
    context_tokens: int = 20
    mask_kind: MaskKind = MaskKind.CAUSAL
    # states are ``agent * n_cells + goal``; n_cells=None embeds raw ids
    n_cells: int | None = 400
    # adds row/column tables for agent and goal when set
    grid_width: int | None = None
    # "shared": rows and columns read one coordinate table through per-axis maps
    coordinates: str = "shared"
    state_vocab: int = 400 * 400
    action_vocab: int = 4
    return_bins: int = 2
    reward_bins: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask_kind", MaskKind(self.mask_kind))
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.coordinates not in ("separate", "shared"):
            raise ValueError(f"coordinates must be 'separate' or 'shared', got {self.coordinates!r}")
        if self.n_cells is not None and self.state_vocab != self.n_cells**2:
            object.__setattr__(self, "state_vocab", self.n_cells**2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_kind"] = self.mask_kind.value
        return d


DESK_SCALE = TransformerConfig()
PAPER_SCALE = TransformerConfig(layers=6, heads=8, hidden=512)


def build_attention_mask(kind: MaskKind | str, length: int) -> torch.Tensor:
    """Boolean allow-mask: ``mask[i, j]`` is True if position i may attend to j."""
    if length < 1:
        raise ValueError("length must be at least 1")
    ones = torch.ones(length, length, dtype=torch.bool)
    return ones if MaskKind(kind) is MaskKind.FULL else torch.tril(ones)


def _init_weights(module: nn.Module, generator: torch.Generator):
    """Truncated normal (std 0.02) weights, zero biases, unit LayerNorm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.fc = nn.Linear(hidden, 4 * hidden)
        self.out = nn.Linear(4 * hidden, hidden)

    def forward(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        B, L, H = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(H, dim=-1)
        q, k, v = (t.view(B, L, self.heads, H // self.heads).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(H // self.heads)
        att = att.masked_fill(~allow, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, H)
        x = x + self.proj(y)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class Backbone(nn.Module):
    def __init__(self, config: TransformerConfig):
        super().__init__()
        self.config = config
        self.pos = nn.Embedding(config.context_tokens, config.hidden)
        self.blocks = nn.ModuleList(Block(config.hidden, config.heads) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.hidden)
        self.register_buffer(
            "allow", build_attention_mask(config.mask_kind, config.context_tokens), persistent=False
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        L = tokens.shape[1]
        if L > self.config.context_tokens:
            raise ValueError(f"{L} tokens exceed the context of {self.config.context_tokens}")
        x = tokens + self.pos.weight[:L]
        allow = self.allow[:L, :L]
        for block in self.blocks:
            x = block(x, allow)
        return self.ln_f(x)


class StateEmbedding(nn.Module):
    """Sum of an agent-cell table and a goal-cell table (or one raw-id table)."""

    def __init__(self, config: TransformerConfig):
        super().__init__()
        self.n_cells = config.n_cells
        if self.n_cells is None:
            self.table = nn.Embedding(config.state_vocab, config.hidden)
        else:
            self.agent = nn.Embedding(self.n_cells, config.hidden)
            self.goal = nn.Embedding(self.n_cells, config.hidden)
        self.width = config.grid_width
        self.shared = config.coordinates == "shared"
        if self.width is not None:
            n_rows = -(-self.n_cells // self.width)
            if self.shared:
                # one table of positions along an axis, read through a map per (entity, axis)
                self.coord = nn.Embedding(max(n_rows, self.width), config.hidden)
                self.axes = nn.ModuleDict(
                    {name: nn.Linear(config.hidden, config.hidden, bias=False)
                     for name in ("agent_row", "agent_col", "goal_row", "goal_col")}
                )
            else:
                self.agent_row = nn.Embedding(n_rows, config.hidden)
                self.agent_col = nn.Embedding(self.width, config.hidden)
                self.goal_row = nn.Embedding(n_rows, config.hidden)
                self.goal_col = nn.Embedding(self.width, config.hidden)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        if self.n_cells is None:
            return self.table(states)
        agent, goal = states // self.n_cells, states % self.n_cells
        x = self.agent(agent) + self.goal(goal)
        if self.width is not None and self.shared:
            parts = {
                "agent_row": agent // self.width, "agent_col": agent % self.width,
                "goal_row": goal // self.width, "goal_col": goal % self.width,
            }
            for name, idx in parts.items():
                x = x + self.axes[name](self.coord(idx))
        elif self.width is not None:
            x = (
                x
                + self.agent_row(agent // self.width)
                + self.agent_col(agent % self.width)
                + self.goal_row(goal // self.width)
                + self.goal_col(goal % self.width)
            )
        return x


class InverseDynamicsTransformer(nn.Module):
    """Bidirectional model reading k+1 states and scoring the k actions between them."""

    def __init__(self, config: TransformerConfig):
        super().__init__()
        config = replace(config, mask_kind=MaskKind.FULL)
        self.config = config
        self.embed = StateEmbedding(config)
        self.backbone = Backbone(config)
        self.action_head = nn.Linear(config.hidden, config.action_vocab)
        generator = torch.Generator().manual_seed(config.seed)
        _init_weights(self, generator)
        nn.init.zeros_(self.action_head.weight)

    def forward(self, observations: torch.Tensor) -> torch.Tensor:
        if observations.ndim != 2 or observations.shape[1] < 2:
            raise ValueError(f"expected (batch, k + 1) states, got {tuple(observations.shape)}")
        h = self.backbone(self.embed(observations))
        return self.action_head(h[:, :-1])


class DTOutput(NamedTuple):
    return_logits: torch.Tensor  # (B, C, return_bins), read at state tokens
    action_logits: torch.Tensor  # (B, C, action_vocab), read at return tokens
    hidden: torch.Tensor  # (B, 4C, hidden)


class DecisionTransformer(nn.Module):
    """Causal model over interleaved (state, return, action, reward) tokens."""

    def __init__(self, config: TransformerConfig):
        super().__init__()
        config = replace(config, mask_kind=MaskKind.CAUSAL)
        self.config = config
        self.embed_state = StateEmbedding(config)
        self.embed_return = nn.Embedding(config.return_bins, config.hidden)
        # last row is the placeholder for an unlabelled action
        self.embed_action = nn.Embedding(config.action_vocab + 1, config.hidden)
        self.embed_reward = nn.Embedding(config.reward_bins, config.hidden)
        self.backbone = Backbone(config)
        self.return_head = nn.Linear(config.hidden, config.return_bins)
        self.action_head = nn.Linear(config.hidden, config.action_vocab)
        generator = torch.Generator().manual_seed(config.seed)
        _init_weights(self, generator)
        nn.init.zeros_(self.return_head.weight)
        nn.init.zeros_(self.action_head.weight)

    @property
    def placeholder(self) -> int:
        return self.config.action_vocab

    def embed(self, states, returns, actions, rewards) -> torch.Tensor:
        actions = torch.where(actions < 0, torch.full_like(actions, self.placeholder), actions)
        parts = (
            self.embed_state(states),
            self.embed_return(returns),
            self.embed_action(actions),
            self.embed_reward(rewards),
        )
        B, C = states.shape
        return torch.stack(parts, dim=2).reshape(B, 4 * C, self.config.hidden)

    def forward(self, states, returns, actions, rewards) -> DTOutput:
        shapes = {tuple(t.shape) for t in (states, returns, actions, rewards)}
        if len(shapes) != 1 or states.ndim != 2:
            raise ValueError(f"token arrays must share one (batch, timesteps) shape, got {shapes}")
        h = self.backbone(self.embed(states, returns, actions, rewards))
        return DTOutput(self.return_head(h[:, 0::4]), self.action_head(h[:, 1::4]), h)


class LossReport(NamedTuple):
    total: torch.Tensor
    action: torch.Tensor
    ret: torch.Tensor
    token_count: int

    def as_floats(self) -> dict:
        return {"total": float(self.total), "action": float(self.action), "return": float(self.ret)}


def _as_tensor(x, dtype=torch.long) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def idm_loss(model: InverseDynamicsTransformer, observations, actions, weight=None) -> LossReport:
    """Mean negative log-likelihood of the labelled actions of each window.

    ``weight`` (same shape as ``actions``) rescales individual terms; the mean
    is taken over the weight total, and an all-zero weight gives a zero loss.
    """
    obs = _as_tensor(observations)
    act = _as_tensor(actions)
    logits = model(obs)
    if act.shape != logits.shape[:2]:
        raise ValueError(f"actions shape {tuple(act.shape)} does not match {tuple(logits.shape[:2])}")
    w = torch.ones(act.shape, dtype=logits.dtype) if weight is None else _as_tensor(weight, logits.dtype)
    if ((act == NO_LABEL) & (w > 0)).any():
        raise ValueError("idm_loss received an unlabelled action")
    nll = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), act.clamp(min=0).reshape(-1), reduction="none"
    ).view(act.shape)
    denom = w.sum()
    total = (nll * w).sum() / denom if denom > 0 else (nll * w).sum()
    return LossReport(total, total, torch.zeros_like(total), int((w > 0).sum()))


def dt_loss(
    model: DecisionTransformer,
    states,
    returns,
    action_labels,
    rewards,
    valid=None,
    action_weight=None,
) -> LossReport:
    """Return-token plus action-token cross-entropy, averaged per timestep.

    ``action_labels`` doubles as the action input tokens (``-1`` feeds the
    placeholder). Timesteps with ``action_weight`` 0 contribute no action
    loss; every other valid timestep must carry a label.
    """
    states, returns, acts, rewards = (_as_tensor(t) for t in (states, returns, action_labels, rewards))
    if states.numel() == 0:
        raise ValueError("dt_loss received an empty batch")
    valid = torch.ones_like(states, dtype=torch.bool) if valid is None else _as_tensor(valid, torch.bool)
    if not valid.any():
        raise ValueError("dt_loss received a batch with no valid timesteps")
    out = model(states, returns, acts, rewards)
    dtype = out.action_logits.dtype
    aw = valid.to(dtype) if action_weight is None else _as_tensor(action_weight, dtype) * valid
    if ((acts == NO_LABEL) & (aw > 0)).any():
        raise ValueError("dt_loss received a timestep with no action label")
    n = valid.sum().to(dtype)
    ret_nll = F.cross_entropy(out.return_logits.transpose(1, 2), returns, reduction="none")
    act_nll = F.cross_entropy(out.action_logits.transpose(1, 2), acts.clamp(min=0), reduction="none")
    ret_term = (ret_nll * valid).sum() / n
    act_term = (act_nll * aw).sum() / n
    return LossReport(ret_term + act_term, act_term, ret_term, int(valid.sum()))


def gradient(model: nn.Module, loss_fn: Callable[[nn.Module], LossReport | torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_fn(model)`` for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss = loss.total if isinstance(loss, LossReport) else loss
    if not torch.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {float(loss)}")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(params.items(), grads)
    }


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"ALPTCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sHI")


def save_checkpoint(model: nn.Module, path, step: int = 0, extra: dict | None = None) -> Path:
    """Header with config echo and step, then raw little-endian tensors."""
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    index, offset = [], 0
    for name, arr in tensors.items():
        nbytes = arr.astype(arr.dtype.newbyteorder("<")).nbytes
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>="), "offset": offset})
        offset += nbytes
    header = json.dumps(
        {
            "kind": type(model).__name__,
            "config": model.config.to_dict(),
            "step": step,
            "extra": extra or {},
            "tensors": index,
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path} is not an ALPT checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[_CKPT_HEAD.size : _CKPT_HEAD.size + hlen])
    base = _CKPT_HEAD.size + hlen
    cls = {"InverseDynamicsTransformer": InverseDynamicsTransformer, "DecisionTransformer": DecisionTransformer}[
        header["kind"]
    ]
    model = cls(TransformerConfig(**header["config"]))
    state = {}
    for entry in header["tensors"]:
        dtype = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiu" else np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype, count, base + entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    if next(iter(state.values())).dtype == torch.float64:
        model.double()
    return model, header
