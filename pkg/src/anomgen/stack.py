"""Build and restore the full model stack from one config or a checkpoint."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint as ckpt
from .diffusion import (NoiseSchedule, ToyUNet, UNetConfig, build_codec)
from .encoders import (TextEncoderSpec, ToyImageEncoder, ToyTextEncoder,
                       build_image_encoder, build_text_encoder)
from .errors import ConfigError
from .lora import LoraAdapter, apply_lora, make_adapters
from .prompt_encoder import CPEConfig, CrossmodalPromptEncoder


@dataclass
class ModelConfig:
    patch_size: int = 8
    feat_dim: int = 16
    attn_dim: int = 16
    text_dim: int = 16
    cond_dim: int = 16
    token_limit: int = 77
    penalty: float = 1.0e4
    widths: tuple[int, int] = (16, 32)
    time_dim: int = 32
    timesteps: int = 50
    codec_kind: str = "identity-downsample"
    lora_rank: int = 4
    lora_scale: float = 1.0
    seed: int = 0


@dataclass
class ModelStack:
    image_encoder: object
    text_encoder: object
    cpe: CrossmodalPromptEncoder
    predictor: ToyUNet
    adapters: list
    codec: object
    schedule: NoiseSchedule
    config: ModelConfig


def build_stack(config: ModelConfig | None = None,
                registry: dict | None = None,
                registry_dir=None) -> ModelStack:
    """Fresh, seeded stack; registry entries override the toy encoders."""
    config = config or ModelConfig()
    if registry:
        image_enc = None
        text_enc = None
        for entry in registry.values():
            if entry.get("role") == "image_encoder":
                image_enc = build_image_encoder(entry, registry_dir)
            elif entry.get("role") == "text_encoder":
                text_enc = build_text_encoder(entry, registry_dir)
        if image_enc is None or text_enc is None:
            raise ConfigError(
                "registry must provide image_encoder and text_encoder roles")
    else:
        image_enc = ToyImageEncoder(patch_size=config.patch_size,
                                    feat_dim=config.feat_dim,
                                    seed=config.seed)
        text_enc = ToyTextEncoder(
            TextEncoderSpec(token_limit=config.token_limit,
                            embedding_dim=config.text_dim),
            seed=config.seed)
    cpe = CrossmodalPromptEncoder(
        CPEConfig(feat_dim=image_enc.feat_dim, attn_dim=config.attn_dim,
                  text_dim=text_enc.embedding_dim, cond_dim=config.cond_dim,
                  penalty=config.penalty, seed=config.seed),
        image_enc, text_enc)
    codec = build_codec(config.codec_kind)
    predictor = ToyUNet(UNetConfig(latent_channels=codec.latent_channels,
                                   widths=tuple(config.widths),
                                   cond_dim=config.cond_dim,
                                   time_dim=config.time_dim,
                                   seed=config.seed))
    adapters = make_adapters(predictor, rank=config.lora_rank,
                             scale=config.lora_scale, seed=config.seed)
    apply_lora(predictor, adapters)
    schedule = NoiseSchedule.linear(config.timesteps)
    return ModelStack(image_encoder=image_enc, text_encoder=text_enc,
                      cpe=cpe, predictor=predictor, adapters=adapters,
                      codec=codec, schedule=schedule, config=config)


def save_stack(path, stack: ModelStack) -> None:
    ckpt.save_checkpoint(path, cpe=stack.cpe, predictor=stack.predictor,
                         adapters=stack.adapters, schedule=stack.schedule,
                         codec=stack.codec,
                         extra_meta={"model_config": _config_dict(stack.config)})


def load_stack(path, registry: dict | None = None,
               registry_dir=None) -> ModelStack:
    """Rebuild the full stack from a checkpoint alone."""
    bundle = ckpt.load_checkpoint(path)
    if "model_config" not in bundle.meta:
        raise ConfigError(f"{path}: checkpoint lacks model_config metadata")
    cfg_dict = dict(bundle.meta["model_config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    config = ModelConfig(**cfg_dict)
    stack = build_stack(config, registry=registry, registry_dir=registry_dir)
    ckpt.restore_module_state(stack.cpe, bundle.segment("cpe"))
    ckpt.restore_predictor_base(stack.predictor,
                                bundle.segment("predictor_base"))
    if "lora" in bundle.segments:
        ckpt.restore_adapters(stack.adapters, bundle.segment("lora"))
    if "codec" in bundle.segments and "projection" in bundle.segments["codec"]:
        stack.codec._w = np.ascontiguousarray(
            bundle.segment("codec")["projection"])
    if "schedule" in bundle.segments:
        alphas = bundle.segment("schedule")["alphas"]
        stack = ModelStack(**{**stack.__dict__,
                              "schedule": NoiseSchedule(alphas, len(alphas))})
    return stack


def _config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(d["widths"])
    return d
