"""Latent diffusion machinery: codec, schedule, DDIM, and the denoiser.

The latent codec maps images to the space the diffusion runs in. The
default toy codec is a lossless space-to-depth rearrangement (2x2 pixel
blocks become 12 channels at half resolution), so decode(encode(I)) == I
exactly and inpainting-preservation tests compare arrays instead of
tolerances. Sampling is deterministic DDIM; per-step latent blending for
inpainting hooks in through the sampler callback.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, RangeError, ShapeError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions alpha_1..alpha_T, non-increasing in t."""

    alphas: np.ndarray
    T: int

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        if alphas.shape != (self.T,):
            raise ValidationError(
                f"schedule needs exactly T={self.T} alphas, got {alphas.shape}")
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise ValidationError("schedule alphas must lie in (0, 1]")
        if np.any(np.diff(alphas) > 0):
            raise ValidationError("schedule alphas must be non-increasing")

    @classmethod
    def linear(cls, T: int = 50) -> "NoiseSchedule":
        """Signal fraction falling linearly from near 1 to near 0."""
        if T < 1:
            raise ValidationError("T must be >= 1")
        t = np.arange(1, T + 1, dtype=np.float64)
        return cls(alphas=1.0 - t / (T + 1), T=T)

    def alpha(self, t: int) -> float:
        """alpha_t with the convention alpha_0 = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise RangeError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alphas[t - 1])


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Noisy latent z_t = sqrt(a_t) z_0 + sqrt(1 - a_t) eps.

    ``t`` is an int applied to the whole batch or a per-sample sequence of
    ints matching the leading dimension.
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} vs latent "
                         f"{tuple(z0.shape)}")
    ts = [t] if isinstance(t, int) else [int(v) for v in t]
    for ti in ts:
        if not 1 <= ti <= schedule.T:
            raise RangeError(f"timestep {ti} outside [1, {schedule.T}]")
    if isinstance(t, int):
        a = schedule.alpha(t)
        return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps
    alphas = torch.tensor([schedule.alpha(int(ti)) for ti in t],
                          dtype=z0.dtype)
    shape = (-1,) + (1,) * (z0.ndim - 1)
    a = alphas.reshape(shape)
    return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps


def ddim_step(z_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor,
              schedule: NoiseSchedule) -> torch.Tensor:
    """One deterministic reverse step from timestep t to t_prev < t."""
    if t <= t_prev:
        raise RangeError(f"ddim step needs t > t_prev, got {t} <= {t_prev}")
    if t_prev < 0:
        raise RangeError(f"t_prev must be >= 0, got {t_prev}")
    a_t = schedule.alpha(t)
    a_prev = schedule.alpha(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1.0 - a_prev) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps from T down, length <= steps."""
    if steps < 1:
        raise RangeError("steps must be >= 1")
    steps = min(steps, T)
    ts = np.linspace(T, 1, steps).round().astype(int)
    out: list[int] = []
    for t in ts:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def sample(predict, condition, z_T: torch.Tensor, steps: int,
           schedule: NoiseSchedule, step_callback=None) -> torch.Tensor:
    """Run the DDIM loop from z_T down to the clean latent.

    ``predict(z, t, condition)`` returns the predicted noise.
    ``step_callback(z, t_prev)``, when given, maps the latent after every
    reverse step (inpainting blends plug in here) and must return the
    replacement latent.
    """
    ts = ddim_timesteps(schedule.T, steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = predict(z, t, condition)
        z = ddim_step(z, t, t_prev, eps_hat, schedule)
        if step_callback is not None:
            z = step_callback(z, t_prev)
    return z


def inpaint_blend(z_gen: torch.Tensor, z_known_t: torch.Tensor,
                  m_lat: torch.Tensor) -> torch.Tensor:
    """Keep generated content inside the mask, known content outside."""
    if z_gen.shape != z_known_t.shape:
        raise ShapeError(f"latent shapes differ: {tuple(z_gen.shape)} vs "
                         f"{tuple(z_known_t.shape)}")
    if m_lat.shape[-2:] != z_gen.shape[-2:]:
        raise ShapeError(f"mask {tuple(m_lat.shape)} does not cover latent "
                         f"{tuple(z_gen.shape)}")
    m = m_lat.to(z_gen.dtype)
    return z_gen * m + z_known_t * (1.0 - m)


class LatentCodec:
    """Image <-> latent mapping with a declared round-trip tolerance."""

    kind = "external-adapter"

    def __init__(self, encode_fn, decode_fn, latent_channels: int,
                 downscale: int, round_trip_tolerance: float):
        self._encode = encode_fn
        self._decode = decode_fn
        self.latent_channels = latent_channels
        self.downscale = downscale
        self.round_trip_tolerance = round_trip_tolerance

    def encode(self, image: np.ndarray) -> torch.Tensor:
        return self._encode(image)

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        return self._decode(latent)

    def latent_grid(self, resolution: tuple[int, int]) -> tuple[int, int]:
        h, w = resolution
        if h % self.downscale or w % self.downscale:
            raise ShapeError(
                f"resolution {h}x{w} not divisible by codec downscale "
                f"{self.downscale}")
        return h // self.downscale, w // self.downscale


class IdentityDownsampleCodec(LatentCodec):
    """Lossless 4x-area downsample: 2x2 pixel blocks become 12 channels."""

    kind = "identity-downsample"

    def __init__(self):
        super().__init__(None, None, latent_channels=12, downscale=2,
                         round_trip_tolerance=0.0)

    def encode(self, image: np.ndarray) -> torch.Tensor:
        h, w = image.shape[:2]
        if h % 2 or w % 2:
            raise ShapeError(f"image {h}x{w} must have even dimensions")
        blocks = (image.reshape(h // 2, 2, w // 2, 2, 3)
                  .transpose(1, 3, 4, 0, 2)
                  .reshape(12, h // 2, w // 2))
        return torch.from_numpy(np.ascontiguousarray(blocks, dtype=np.float32))

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        c, hh, ww = latent.shape
        if c != 12:
            raise ShapeError(f"expected 12 latent channels, got {c}")
        arr = latent.detach().cpu().numpy().astype(np.float32)
        return np.ascontiguousarray(
            arr.reshape(2, 2, 3, hh, ww).transpose(3, 0, 4, 1, 2)
            .reshape(hh * 2, ww * 2, 3))


class LinearBlockCodec(LatentCodec):
    """Lossy per-block linear codec standing in for a learned autoencoder.

    Projects each 2x2 pixel block (12 values) to ``latent_channels`` with a
    seeded orthonormal-row matrix; decode uses the transpose. The
    round-trip tolerance is measured on a probe batch at construction.
    """

    kind = "learned"

    def __init__(self, latent_channels: int = 8, seed: int = 0):
        if latent_channels > 12:
            raise ConfigError("latent_channels must be <= 12")
        rng = np.random.default_rng(seed)
        w, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        self._w = w[:, :latent_channels].astype(np.float32)  # (12, C)
        super().__init__(None, None, latent_channels=latent_channels,
                         downscale=2, round_trip_tolerance=0.0)
        probe = rng.random((16, 16, 3)).astype(np.float32)
        err = np.abs(self.decode(self.encode(probe)) - probe).max()
        self.round_trip_tolerance = float(err) * 1.5 + 1e-6

    def encode(self, image: np.ndarray) -> torch.Tensor:
        blocks = IdentityDownsampleCodec().encode(image)  # (12, h, w)
        z = np.einsum("chw,cd->dhw", blocks.numpy(), self._w)
        return torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        arr = latent.detach().cpu().numpy()
        blocks = np.einsum("dhw,cd->chw", arr, self._w)
        return IdentityDownsampleCodec().decode(
            torch.from_numpy(np.ascontiguousarray(blocks, dtype=np.float32)))


def build_codec(kind: str = "identity-downsample", **kwargs) -> LatentCodec:
    if kind == "identity-downsample":
        return IdentityDownsampleCodec()
    if kind == "learned":
        return LinearBlockCodec(**kwargs)
    raise ConfigError(f"unknown codec kind {kind!r}")


def timestep_embedding(t: torch.Tensor, dim: int,
                       max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal timestep features, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class SpatialCrossAttention(nn.Module):
    """Cross-attention from spatial feature tokens to condition tokens."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.channels = channels

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.to_q(tokens)
        k = self.to_k(cond)
        v = self.to_v(cond)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c), dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(1, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = (nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch
                     else nn.Identity())

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class UNetConfig:
    latent_channels: int = 12
    widths: tuple[int, int] = (16, 32)
    cond_dim: int = 16
    time_dim: int = 32
    seed: int = 0


class ToyUNet(nn.Module):
    """Two-level U-shaped noise predictor with per-level cross-attention.

    Output shape always equals the input latent shape. Small enough for
    finite-difference gradient checks when configured with narrow widths.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c, (w0, w1) = config.latent_channels, config.widths
        td = config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(),
                                      nn.Linear(td, td))
        self.conv_in = nn.Conv2d(c, w0, 3, padding=1)
        self.down_res = ResBlock(w0, w0, td)
        self.down_attn = SpatialCrossAttention(w0, config.cond_dim)
        self.downsample = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.mid_res = ResBlock(w1, w1, td)
        self.mid_attn = SpatialCrossAttention(w1, config.cond_dim)
        self.upsample = nn.ConvTranspose2d(w1, w0, 2, stride=2)
        self.up_res = ResBlock(2 * w0, w0, td)
        self.up_attn = SpatialCrossAttention(w0, config.cond_dim)
        self.conv_out = nn.Conv2d(w0, c, 3, padding=1)
        _seed_unet(self, config.seed)

    def forward(self, z: torch.Tensor, t, cond) -> torch.Tensor:
        if z.ndim == 3:
            return self.forward(z[None], t, cond)[0]
        if z.shape[-1] % 2 or z.shape[-2] % 2:
            raise ShapeError(
                f"latent spatial dims must be even, got {tuple(z.shape[-2:])}")
        b = z.shape[0]
        if isinstance(t, int):
            t = torch.full((b,), t, dtype=torch.long)
        else:
            t = torch.as_tensor(t, dtype=torch.long)
        cond_tokens = _condition_tokens(cond, b, z.dtype)
        temb = self.time_mlp(
            timestep_embedding(t, self.config.time_dim).to(z.dtype))
        h0 = self.conv_in(z)
        h0 = self.down_res(h0, temb)
        h0 = self.down_attn(h0, cond_tokens)
        h1 = self.downsample(h0)
        h1 = self.mid_res(h1, temb)
        h1 = self.mid_attn(h1, cond_tokens)
        u = self.upsample(h1)
        u = self.up_res(torch.cat([u, h0], dim=1), temb)
        u = self.up_attn(u, cond_tokens)
        return self.conv_out(u)

    def cross_attention_projections(self) -> dict[str, nn.Linear]:
        """Named q/k/v/out projections of every cross-attention layer."""
        out: dict[str, nn.Linear] = {}
        for attn_name in ("down_attn", "mid_attn", "up_attn"):
            attn = getattr(self, attn_name)
            for proj in ("to_q", "to_k", "to_v", "to_out"):
                out[f"{attn_name}.{proj}"] = getattr(attn, proj)
        return out

    def base_checksum(self) -> str:
        """Digest of every non-adapter parameter, for frozen-ness checks."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if ".adapter." in name:
                continue
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
        return h.hexdigest()


def _condition_tokens(cond, batch: int, dtype) -> torch.Tensor:
    tokens = cond.tokens if hasattr(cond, "tokens") else cond
    tokens = torch.as_tensor(tokens, dtype=dtype)
    if tokens.ndim == 2:
        tokens = tokens[None].expand(batch, -1, -1)
    return tokens


def _seed_unet(module: nn.Module, seed: int) -> None:
    # conv_out gets a wide init: the frozen toy base then has a substantial
    # output whose condition-dependent share is what adapter fine-tuning
    # learns to remove, mirroring how a pretrained backbone starts loud
    gen = torch.Generator().manual_seed((seed ^ 0x5F3759DF) & 0x7FFF_FFFF)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                gain = 5.0 if name.startswith("conv_out") else 1.0
                p.normal_(0.0, gain / np.sqrt(fan_in), generator=gen)
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
