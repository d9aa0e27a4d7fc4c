"""Low-rank adapters for the tracker's attention and MLP projections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .track import MLP, Attention

TARGETS = {"attention": (Attention, ("q", "k", "v", "o")), "mlp": (MLP, ("fc1", "fc2"))}


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    target_layers: tuple[str, ...] = ("attention", "mlp")
    mode: str = "fixed_rank"        # fixed_rank | adaptive_rank
    alpha: float | None = None      # scale = alpha / rank; None -> 1
    init_rank_factor: int = 2       # adaptive mode starts from rank * factor components
    prune_threshold: float = 1e-3   # adaptive mode also drops components below this share of the top score

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.mode not in ("fixed_rank", "adaptive_rank"):
            raise ValueError(f"unknown adapter mode {self.mode!r}")
        unknown = set(self.target_layers) - set(TARGETS)
        if unknown:
            raise ValueError(f"unknown target layers {sorted(unknown)}; choose from {sorted(TARGETS)}")
        if not self.target_layers:
            raise ValueError("no target layers")

    @property
    def initial_rank(self) -> int:
        return self.rank * (self.init_rank_factor if self.mode == "adaptive_rank" else 1)


class LoRALinear(nn.Module):
    """``base(x) + scale * B(mask * A(x))`` with ``B`` zero-initialized, so it starts as the base layer."""

    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.A = nn.Parameter(torch.randn(rank, base.in_features, dtype=base.weight.dtype) / math.sqrt(base.in_features))
        self.B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        self.register_buffer("mask", torch.ones(rank, dtype=base.weight.dtype))
        self.scale = scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.A.T) * self.mask) @ self.B.T

    @property
    def effective_rank(self) -> int:
        return int(self.mask.sum().item())

    def importance(self) -> torch.Tensor:
        """Per-component magnitude ||B[:, r]|| * ||A[r, :]||."""
        return self.B.detach().norm(dim=0) * self.A.detach().norm(dim=1)


def apply_adapters(model: nn.Module, cfg: AdapterConfig = AdapterConfig()) -> nn.Module:
    """Freeze ``model`` and wrap the targeted projections in place. Only adapter factors stay trainable."""
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = 0
    scale = 1.0 if cfg.alpha is None else cfg.alpha / cfg.rank
    for kind in cfg.target_layers:
        cls, names = TARGETS[kind]
        for module in model.modules():
            if not isinstance(module, cls):
                continue
            for name in names:
                layer = getattr(module, name)
                if isinstance(layer, LoRALinear):
                    continue
                if not isinstance(layer, nn.Linear):
                    raise TypeError(f"{cls.__name__}.{name} is not a linear layer")
                setattr(module, name, LoRALinear(layer, cfg.initial_rank, scale))
                wrapped += 1
    if wrapped == 0:
        raise ValueError(f"model has no {'/'.join(cfg.target_layers)} layers to adapt")
    return model


def adapters(model: nn.Module) -> list[LoRALinear]:
    return [m for m in model.modules() if isinstance(m, LoRALinear)]


def prune_ranks(model: nn.Module, cfg: AdapterConfig) -> dict[str, int]:
    """Adaptive mode: keep at most ``cfg.rank`` components per adapter, ranked by importance."""
    layers = adapters(model)
    if not layers:
        return {}
    top = max(float(m.importance().max()) for m in layers)
    out = {}
    for i, m in enumerate(layers):
        score = m.importance() * m.mask
        keep = torch.zeros_like(m.mask)
        order = torch.argsort(score, descending=True)[: cfg.rank]
        keep[order] = 1.0
        if top > 0:
            keep = keep * (score > cfg.prune_threshold * top).to(keep.dtype)
        if keep.sum() == 0:
            keep[order[0]] = 1.0
        m.mask.copy_(keep)
        out[f"adapter{i}"] = m.effective_rank
    return out


def merge_adapters(model: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight and unwrap it."""
    for module in list(model.modules()):
        for name, child in list(module.named_children()):
            if isinstance(child, LoRALinear):
                with torch.no_grad():
                    delta = child.scale * (child.B * child.mask) @ child.A
                    child.base.weight += delta
                setattr(module, name, child.base)
    return model


def parameter_counts(model: nn.Module) -> dict[str, int]:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    adapter = sum(m.A.numel() + m.B.numel() for m in adapters(model))
    return {"total": total, "trainable": trainable, "adapter": adapter}
