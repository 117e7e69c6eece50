import copy

import numpy as np
import pytest
import torch

from anomgen import lora
from anomgen.diffusion import ToyUNet, UNetConfig
from anomgen.errors import ConfigError


def make_unet(seed=0):
    return ToyUNet(UNetConfig(seed=seed))


def forward_args(rng):
    z = torch.as_tensor(rng.standard_normal((12, 8, 8)).astype(np.float32))
    cond = torch.as_tensor(rng.standard_normal((5, 16)).astype(np.float32))
    return z, cond


def test_zero_initialized_adapters_are_identity(rng):
    unet = make_unet()
    z, cond = forward_args(rng)
    before = unet(z, 3, cond)
    lora.apply_lora(unet, lora.make_adapters(unet, rank=4))
    after = unet(z, 3, cond)
    assert torch.equal(before, after)


def test_trainable_parameter_count():
    unet = make_unet()
    adapters = lora.make_adapters(unet, rank=3,
                                  targets=["mid_attn.to_q"])
    # d_in = d_out = 32 for the mid level
    assert lora.trainable_parameter_count(adapters) == 3 * (32 + 32)


def test_merged_equals_composed_float64(rng):
    unet = make_unet().double()
    adapters = lora.make_adapters(unet, rank=2, scale=1.5)
    for a in adapters:
        a.double()
        with torch.no_grad():
            a.B.normal_(0, 0.2, generator=torch.Generator().manual_seed(1))
    lora.apply_lora(unet, adapters)
    z = torch.as_tensor(np.random.default_rng(0).standard_normal((12, 8, 8)))
    cond = torch.as_tensor(np.random.default_rng(1).standard_normal((5, 16)))
    composed = unet(z, 3, cond)
    merged = lora.merge_lora(copy.deepcopy(unet))
    out = merged(z, 3, cond)
    assert (out - composed).abs().max().item() < 1e-6


def test_unknown_target_rejected():
    unet = make_unet()
    with pytest.raises(ConfigError, match="unknown adapter target"):
        lora.make_adapters(unet, targets=["nowhere.to_q"])
    adapter = lora.LoraAdapter("nowhere.to_q", 4, 4, rank=1)
    with pytest.raises(ConfigError):
        lora.apply_lora(unet, [adapter])


def test_double_adaptation_rejected():
    unet = make_unet()
    adapters = lora.make_adapters(unet, rank=1, targets=["mid_attn.to_q"])
    lora.apply_lora(unet, adapters)
    again = lora.make_adapters(unet, rank=1, targets=["mid_attn.to_q"])
    with pytest.raises(ConfigError, match="already adapted"):
        lora.apply_lora(unet, again)


def test_base_frozen_adapters_trainable():
    unet = make_unet()
    lora.apply_lora(unet, lora.make_adapters(unet, rank=2))
    for name, mod in lora.lora_modules(unet).items():
        assert not mod.base.weight.requires_grad, name
        assert mod.adapter.A.requires_grad and mod.adapter.B.requires_grad
    params = lora.lora_parameters(unet)
    assert len(params) == 2 * 12


def test_rank_validation():
    with pytest.raises(ConfigError):
        lora.LoraAdapter("t", 4, 4, rank=0)


def test_adapter_initialization_seeded():
    a1 = lora.LoraAdapter("mid_attn.to_q", 8, 8, rank=2, seed=0)
    a2 = lora.LoraAdapter("mid_attn.to_q", 8, 8, rank=2, seed=0)
    a3 = lora.LoraAdapter("mid_attn.to_q", 8, 8, rank=2, seed=1)
    assert torch.equal(a1.A, a2.A)
    assert not torch.equal(a1.A, a3.A)
    assert torch.equal(a1.B, torch.zeros(8, 2))


def test_adapter_state_roundtrip():
    unet = make_unet()
    adapters = lora.make_adapters(unet, rank=2)
    with torch.no_grad():
        adapters[0].B.fill_(0.5)
    state = lora.adapter_state(adapters)
    assert set(state) == {f"{a.target}.{p}" for a in adapters
                          for p in ("A", "B")}
    fresh = lora.make_adapters(make_unet(), rank=2)
    from anomgen.checkpoint import restore_adapters
    restore_adapters(fresh, state)
    assert torch.equal(fresh[0].B, adapters[0].B)
