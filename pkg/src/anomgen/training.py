"""Prompt-guided inpainting training.

Each step samples a reference triplet, encodes its crossmodal condition,
dilates the anomaly mask into the inpainting mask, blanks the image under
it, noises the latent of that masked input at a uniform random timestep,
and minimizes the squared noise-prediction error restricted to the
inpainting region. Only the low-rank adapters and the prompt-encoder
parameters receive gradients; the frozen encoders and the denoiser base
never change, which the checksum helpers make checkable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .diffusion import NoiseSchedule, forward_noise
from .errors import ConfigError, NonFiniteLossError, RangeError, ShapeError
from .prompt_encoder import downsample_mask
from . import checkpoint as ckpt

MASK_FILLS = ("zeros", "noise")
LOSS_NORMALIZATIONS = ("masked-mean", "global-mean")


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-4
    dilation_radius: int = 8
    mask_fill: str = "zeros"
    loss_normalization: str = "masked-mean"
    seed: int = 0
    checkpoint_interval: int = 0      # 0 = final checkpoint only
    out_dir: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.dilation_radius < 0:
            raise ConfigError("dilation_radius must be >= 0")
        if self.mask_fill not in MASK_FILLS:
            raise ConfigError(f"mask_fill must be one of {MASK_FILLS}")
        if self.loss_normalization not in LOSS_NORMALIZATIONS:
            raise ConfigError(
                f"loss_normalization must be one of {LOSS_NORMALIZATIONS}")


@dataclass
class TrainState:
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a square element of side 2*radius+1."""
    if radius < 0:
        raise RangeError("dilation radius must be >= 0")
    if radius == 0:
        return mask.astype(bool).copy()
    side = 2 * radius + 1
    return ndimage.binary_dilation(mask.astype(bool),
                                   structure=np.ones((side, side), bool))


def masked_input(image: np.ndarray, inpainting_mask: np.ndarray,
                 fill: str = "zeros",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Blank the image under the inpainting mask with zeros or noise."""
    if image.shape[:2] != inpainting_mask.shape:
        raise ShapeError(f"image {image.shape[:2]} vs mask "
                         f"{inpainting_mask.shape}")
    if fill not in MASK_FILLS:
        raise ConfigError(f"unknown fill {fill!r}")
    out = image.copy()
    if fill == "zeros":
        out[inpainting_mask] = 0.0
    else:
        rng = rng or np.random.default_rng(0)
        noise = rng.random((int(inpainting_mask.sum()), image.shape[2]))
        out[inpainting_mask] = noise.astype(image.dtype)
    return out


def masked_loss(eps: torch.Tensor, eps_hat: torch.Tensor,
                m_lat: torch.Tensor,
                normalization: str = "masked-mean") -> torch.Tensor:
    """Squared error of the noise residual restricted to the mask.

    masked-mean divides by foreground cells x channels so the magnitude is
    invariant to anomaly size; global-mean divides by every element, which
    reduces to the plain conditional denoising loss when the mask is all
    ones. An all-background mask yields exactly zero (and zero gradients).
    """
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"{tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    if normalization not in LOSS_NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}")
    m = m_lat.to(eps.dtype)
    while m.ndim < eps.ndim - 1:
        m = m.unsqueeze(0)
    if m.ndim == eps.ndim - 1:          # (.., h, w) -> (.., 1, h, w)
        m = m.unsqueeze(-3)
    m = m.expand(eps.shape)
    residual = (eps - eps_hat) * m
    total = (residual ** 2).sum()
    if normalization == "global-mean":
        return total / eps.numel()
    fg = m.sum()
    if fg.item() == 0:
        return (eps_hat * 0.0).sum()
    return total / fg


def frozen_checksums(predictor, image_encoder, text_encoder) -> dict[str, str]:
    """Digests of everything training must not touch."""
    return {
        "predictor_base": predictor.base_checksum(),
        "image_encoder": image_encoder.fingerprint(),
        "text_encoder": text_encoder.fingerprint(),
    }


def train(manifest, predictor, cpe, codec, schedule: NoiseSchedule,
          config: TrainConfig, adapters=None) -> TrainState:
    """Run the optimization loop over the adapter and prompt-encoder weights.

    ``adapters`` is the list of attached low-rank adapters; pass it so the
    checkpoint can record them. The predictor must already carry them
    (apply_lora), otherwise there is nothing trainable on the denoiser side
    and the run is refused.
    """
    from .lora import lora_parameters

    if len(manifest.records) == 0:
        raise ConfigError("cannot train on an empty manifest")
    theta_l = lora_parameters(predictor)
    if not theta_l:
        raise ConfigError("no adapters attached to the predictor; "
                          "apply_lora before training")
    theta_cpe = [p for _, p in sorted(cpe.named_parameters(),
                                      key=lambda kv: kv[0])]
    optimizer = torch.optim.AdamW(theta_l + theta_cpe,
                                  lr=config.learning_rate)

    seq = np.random.SeedSequence(config.seed)
    data_rng = np.random.default_rng(seq.spawn(1)[0])
    noise_gen = torch.Generator().manual_seed(
        int(seq.generate_state(1, np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))

    out_dir = Path(config.out_dir) if config.out_dir else None
    history_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        history_fh = open(out_dir / "loss_history.jsonl", "w",
                          encoding="utf-8")

    state = TrainState()
    records = manifest.records
    try:
        for step in range(1, config.steps + 1):
            idx = data_rng.integers(0, len(records), size=config.batch_size)
            z0_list, mlat_list, cond_list = [], [], []
            for i in idx:
                rec = records[int(i)]
                img = rec.load_image(manifest.root)
                ref_mask = rec.load_mask(manifest.root)
                cond = cpe.encode_prompt(image=img, mask=ref_mask,
                                         caption=rec.caption)
                inpaint = dilate_mask(ref_mask, config.dilation_radius)
                x_in = masked_input(img, inpaint, config.mask_fill,
                                    rng=data_rng)
                z0 = codec.encode(x_in)
                grid = z0.shape[-2:]
                m_lat = torch.from_numpy(
                    downsample_mask(inpaint, (grid[0], grid[1])))
                z0_list.append(z0)
                mlat_list.append(m_lat[None])
                cond_list.append(cond.tokens)
            z0 = torch.stack(z0_list)
            m_lat = torch.stack(mlat_list)
            cond = torch.stack(cond_list)
            t = [int(v) for v in
                 data_rng.integers(1, schedule.T + 1, size=config.batch_size)]
            eps = torch.randn(z0.shape, generator=noise_gen)
            z_t = forward_noise(z0, t, eps, schedule)
            eps_hat = predictor(z_t, t, cond)
            loss = masked_loss(eps, eps_hat, m_lat,
                               config.loss_normalization)
            if not torch.isfinite(loss):
                _dump_diagnostics(out_dir, state, step, predictor, cpe)
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}; diagnostics dumped")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            state.step = step
            state.loss_history.append(float(loss.item()))
            if history_fh:
                history_fh.write(json.dumps(
                    {"step": step, "loss": float(loss.item()),
                     "wall_time": time.time()}) + "\n")
            if (out_dir and config.checkpoint_interval
                    and step % config.checkpoint_interval == 0):
                state.checkpoint_path = str(_save(out_dir, step, cpe,
                                                  predictor, adapters,
                                                  schedule, codec))
        if out_dir:
            state.checkpoint_path = str(_save(out_dir, None, cpe, predictor,
                                              adapters, schedule, codec))
    finally:
        if history_fh:
            history_fh.close()
    return state


def _save(out_dir: Path, step, cpe, predictor, adapters, schedule, codec):
    name = "checkpoint.npz" if step is None else f"checkpoint_{step:06d}.npz"
    path = out_dir / name
    ckpt.save_checkpoint(path, cpe=cpe, predictor=predictor,
                         adapters=adapters, schedule=schedule, codec=codec)
    return path


def _dump_diagnostics(out_dir, state: TrainState, step: int, predictor,
                      cpe) -> None:
    if out_dir is None:
        return
    diag = {
        "step": step,
        "recent_losses": state.loss_history[-20:],
        "param_stats": {
            name: {"norm": float(p.detach().norm()),
                   "finite": bool(torch.isfinite(p).all())}
            for name, p in list(predictor.named_parameters())
            + list(cpe.named_parameters())
        },
    }
    with open(Path(out_dir) / "diagnostics.json", "w", encoding="utf-8") as fh:
        json.dump(diag, fh, indent=2)


def save_train_config(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)


def load_train_config(path: str | Path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown train config keys {sorted(unknown)}")
    return TrainConfig(**data)
