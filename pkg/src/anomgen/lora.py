"""Low-rank adapters on the denoiser's cross-attention projections.

An adapter turns a frozen projection W into W + s * B @ A with A of shape
(rank, d_in) and B of shape (d_out, rank). B starts at zero, so freshly
attached adapters change nothing; only A and B train.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
from torch import nn

from .errors import ConfigError


class LoraAdapter(nn.Module):
    """The trainable low-rank delta for one named projection."""

    def __init__(self, target: str, d_in: int, d_out: int, rank: int,
                 scale: float = 1.0, seed: int = 0):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}")
        self.target = target
        self.rank = rank
        self.scale = scale
        digest = hashlib.blake2b(f"{target}:{seed}".encode(),
                                 digest_size=8).digest()
        gen = torch.Generator().manual_seed(
            int.from_bytes(digest, "little") & 0x7FFF_FFFF)
        a = torch.empty(rank, d_in).normal_(0.0, 1.0 / math.sqrt(d_in),
                                            generator=gen)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


class LoraLinear(nn.Module):
    """A frozen linear layer plus its adapter, composed at runtime."""

    def __init__(self, base: nn.Linear, adapter: LoraAdapter):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.adapter = adapter

    @property
    def weight(self):
        return self.base.weight

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.base(x)
                + self.adapter.scale * ((x @ self.adapter.A.T)
                                        @ self.adapter.B.T))

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.adapter.delta()


def cross_attention_targets(predictor) -> list[str]:
    """All adapter-eligible projection names of a noise predictor."""
    return sorted(predictor.cross_attention_projections())


def make_adapters(predictor, rank: int = 4, scale: float = 1.0,
                  seed: int = 0, targets: list[str] | None = None,
                  ) -> list[LoraAdapter]:
    projections = predictor.cross_attention_projections()
    if targets is None:
        targets = sorted(projections)
    adapters = []
    for target in targets:
        if target not in projections:
            raise ConfigError(
                f"unknown adapter target {target!r}; cross-attention "
                f"projections are {sorted(projections)}")
        layer = projections[target]
        adapters.append(LoraAdapter(target, d_in=layer.in_features,
                                    d_out=layer.out_features, rank=rank,
                                    scale=scale, seed=seed))
    return adapters


def apply_lora(predictor, adapters: list[LoraAdapter]):
    """Attach adapters in place; base projections freeze, adapters train.

    Returns the predictor for chaining. Raises ConfigError when an adapter
    names a projection that does not exist.
    """
    projections = predictor.cross_attention_projections()
    for adapter in adapters:
        if adapter.target not in projections:
            raise ConfigError(f"unknown adapter target {adapter.target!r}")
    for adapter in adapters:
        attn_name, proj_name = adapter.target.rsplit(".", 1)
        attn = predictor.get_submodule(attn_name)
        base = getattr(attn, proj_name)
        if isinstance(base, LoraLinear):
            raise ConfigError(f"target {adapter.target!r} already adapted")
        setattr(attn, proj_name, LoraLinear(base, adapter))
    return predictor


def lora_modules(predictor) -> dict[str, LoraLinear]:
    return {name: mod for name, mod in predictor.named_modules()
            if isinstance(mod, LoraLinear)}


def lora_parameters(predictor):
    """Trainable adapter parameters, in stable name order."""
    params = []
    for _, mod in sorted(lora_modules(predictor).items()):
        params.extend([mod.adapter.A, mod.adapter.B])
    return params


def trainable_parameter_count(adapters: list[LoraAdapter]) -> int:
    return sum(a.A.numel() + a.B.numel() for a in adapters)


def merge_lora(predictor):
    """Materialize W + s*B@A into plain linear layers (new weights).

    Returns the predictor with every LoraLinear replaced by an ordinary
    nn.Linear holding the merged weight; used to check that runtime
    composition and merged weights agree.
    """
    for name, mod in lora_modules(predictor).items():
        attn_name, proj_name = name.rsplit(".", 1)
        attn = predictor.get_submodule(attn_name)
        merged = nn.Linear(mod.base.in_features, mod.base.out_features,
                           bias=mod.base.bias is not None,
                           dtype=mod.base.weight.dtype)
        with torch.no_grad():
            merged.weight.copy_(mod.merged_weight())
            if mod.base.bias is not None:
                merged.bias.copy_(mod.base.bias)
        setattr(attn, proj_name, merged)
    return predictor


def adapter_state(adapters: list[LoraAdapter]) -> dict[str, np.ndarray]:
    """Flat name->array view of adapter tensors for checkpointing."""
    state: dict[str, np.ndarray] = {}
    for a in adapters:
        state[f"{a.target}.A"] = a.A.detach().cpu().numpy()
        state[f"{a.target}.B"] = a.B.detach().cpu().numpy()
    return state
