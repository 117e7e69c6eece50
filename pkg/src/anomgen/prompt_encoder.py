"""Crossmodal prompt encoding: the trainable condition extractor.

Three stages turn an (image, mask, caption) prompt into the token sequence
consumed by the denoiser's cross-attention:

  1. region-focused attention over frozen image features, where background
     key positions get a large negative logit penalty so the visual prompt
     concentrates on the anomaly region;
  2. hierarchical text encoding that splits long captions into segments
     within the frozen text encoder's token limit and mean-pools the
     per-segment embeddings into one global vector;
  3. a bidirectional cross-attention fusion producing the final condition.

Everything trainable here (attention projections, fusion blocks, learned
null-modality tokens) lives in ``CrossmodalPromptEncoder``; the frozen
encoders stay outside its parameter set.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .encoders import ImageFeatureMap, ToyTextEncoder
from .errors import DegenerateMaskError, ShapeError, ValidationError


@dataclass
class CPEConfig:
    feat_dim: int = 16        # frozen image-feature dimension
    attn_dim: int = 16        # masked-attention (key/value) dimension
    text_dim: int = 16        # frozen text-embedding dimension
    cond_dim: int = 16        # condition token dimension fed to the denoiser
    penalty: float = 1.0e4    # background-key logit penalty
    fusion_heads: int = 1
    seed: int = 0


@dataclass
class TextPrompt:
    """Global caption embedding plus how many segments produced it."""

    vector: np.ndarray
    n_segments: int

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValidationError("a text prompt needs at least one segment")


@dataclass
class CrossmodalCondition:
    """Condition token sequence for the denoiser's cross-attention."""

    tokens: torch.Tensor  # (n_tokens, cond_dim)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"condition tokens shape {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("non-finite condition tokens")


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Any-pixel max-pooling of a pixel mask onto a coarser grid.

    A grid cell is foreground iff any pixel mapping into it is foreground,
    so small anomalies survive the resolution drop.
    """
    rows, cols = grid
    h, w = mask.shape
    if h < rows or w < cols:
        raise ShapeError(f"mask {h}x{w} smaller than grid {rows}x{cols}")
    cell_y = (np.arange(h) * rows) // h
    cell_x = (np.arange(w) * cols) // w
    out = np.zeros((rows, cols), dtype=bool)
    np.logical_or.at(out, (cell_y[:, None], cell_x[None, :]), mask.astype(bool))
    return out


class MaskedAttentionParams(nn.Module):
    """Query/key/value projections plus the background penalty scale."""

    def __init__(self, feat_dim: int, attn_dim: int, penalty: float = 1.0e4):
        super().__init__()
        if penalty <= 0:
            raise ValidationError("penalty must be positive")
        self.theta_q = nn.Linear(feat_dim, attn_dim, bias=False)
        self.theta_k = nn.Linear(feat_dim, attn_dim, bias=False)
        self.theta_v = nn.Linear(feat_dim, attn_dim, bias=False)
        self.penalty = penalty
        self.attn_dim = attn_dim


def region_focused_attention(features, mask, params: MaskedAttentionParams,
                             allow_empty: bool = False,
                             return_weights: bool = False):
    """Attention over image tokens with background keys suppressed.

    ``features`` is an ImageFeatureMap or an (N, feat_dim) tensor; ``mask``
    is the key-position mask at feature resolution, flattened or grid
    shaped. Every query position is kept; the penalty applies along the key
    axis only. An all-background mask is rejected by default because the
    softmax's shift invariance would silently turn it into unmasked
    attention; pass ``allow_empty=True`` to accept that reading.
    """
    if isinstance(features, ImageFeatureMap):
        feats = torch.as_tensor(features.tokens, dtype=torch.get_default_dtype())
    else:
        feats = features
    weight_dtype = params.theta_q.weight.dtype
    feats = feats.to(weight_dtype)
    m = torch.as_tensor(np.asarray(mask), dtype=weight_dtype).reshape(-1)
    if m.shape[0] != feats.shape[0]:
        raise ShapeError(
            f"mask has {m.shape[0]} cells for {feats.shape[0]} feature tokens")
    if m.sum() == 0:
        if not allow_empty:
            raise DegenerateMaskError(
                "mask downsampled to all-background; equivalent to unmasked "
                "attention, rejected by default")
        # softmax shift invariance: penalizing every key equals no penalty,
        # so apply the equivalence exactly instead of losing float precision
        # to a uniform -C shift
        m = torch.ones_like(m)
    q = params.theta_q(feats)
    k = params.theta_k(feats)
    v = params.theta_v(feats)
    logits = (q @ k.T) / np.sqrt(params.attn_dim)
    logits = logits - (1.0 - m)[None, :] * params.penalty
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_CLAUSE_SPLIT = re.compile(r"(?<=[,;])\s+")


def segment_caption(text: str, encoder) -> list[str]:
    """Split text into segments that each fit the encoder's token limit.

    Split preference: sentence boundaries, then clause boundaries (commas
    and semicolons), then hard word-count splits. Joining the returned
    segments with single spaces reproduces the input's token stream.
    """
    budget = max(1, encoder.token_limit - 2)  # begin/end markers
    if encoder.count_tokens(text) <= encoder.token_limit:
        return [text]

    def pack(pieces: list[str], splitter) -> list[str]:
        out: list[str] = []
        for piece in pieces:
            if encoder.count_tokens(piece) <= encoder.token_limit:
                out.append(piece)
                continue
            out.extend(splitter(piece))
        return out

    def split_hard(piece: str) -> list[str]:
        words = piece.split()
        return [" ".join(words[i:i + budget])
                for i in range(0, len(words), budget)]

    def split_clauses(piece: str) -> list[str]:
        clauses = _CLAUSE_SPLIT.split(piece)
        if len(clauses) == 1:
            return split_hard(piece)
        return _greedy_merge(pack(clauses, split_clauses), budget)

    sentences = _SENTENCE_SPLIT.split(text)
    segments = _greedy_merge(pack(sentences, split_clauses), budget)
    return segments


def _greedy_merge(pieces: list[str], budget: int) -> list[str]:
    """Merge consecutive pieces while the joint word count fits the budget."""
    merged: list[str] = []
    for piece in pieces:
        n = len(piece.split())
        if merged and len(merged[-1].split()) + n <= budget:
            merged[-1] = f"{merged[-1]} {piece}"
        else:
            merged.append(piece)
    return merged


def pool_segment_embeddings(embeddings: list[np.ndarray]) -> np.ndarray:
    """Mean over segment embeddings (float64).

    Each dimension is summed with exact rounding (fsum), so the pooled
    vector is bit-identical under any permutation of the segments.
    """
    stacked = np.stack([np.asarray(e, dtype=np.float64)
                        for e in embeddings])
    sums = np.array([math.fsum(stacked[:, d])
                     for d in range(stacked.shape[1])])
    return sums / stacked.shape[0]


def encode_text_hierarchical(text: str, encoder: ToyTextEncoder) -> TextPrompt:
    """Encode arbitrarily long text as the mean of its segment embeddings."""
    segments = segment_caption(text, encoder)
    embeddings = [encoder.tokenize_and_encode_segment(s) for s in segments]
    return TextPrompt(vector=pool_segment_embeddings(embeddings),
                      n_segments=len(segments))


class CrossAttentionBlock(nn.Module):
    """Pre-layer-norm cross-attention with a residual connection."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm_x = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        m = ctx.shape[0]
        h = self.heads
        q = self.to_q(self.norm_x(x)).reshape(n, h, d // h).transpose(0, 1)
        k = self.to_k(self.norm_ctx(ctx)).reshape(m, h, d // h).transpose(0, 1)
        v = self.to_v(self.norm_ctx(ctx)).reshape(m, h, d // h).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / np.sqrt(d // h), dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(n, d)
        return x + self.to_out(out)


class CrossFusionParams(nn.Module):
    """Projection, bidirectional cross-attention, and fusion weights."""

    def __init__(self, attn_dim: int, text_dim: int, cond_dim: int,
                 heads: int = 1):
        super().__init__()
        self.proj_visual = nn.Linear(attn_dim, cond_dim)
        self.proj_text = nn.Linear(text_dim, cond_dim)
        self.text_to_visual = CrossAttentionBlock(cond_dim, heads)
        self.visual_to_text = CrossAttentionBlock(cond_dim, heads)
        self.fuse = nn.Linear(cond_dim, cond_dim)


def cross_fusion(visual_tokens: torch.Tensor, text_vector,
                 params: CrossFusionParams) -> CrossmodalCondition:
    """Fuse the visual prompt tokens and the global text embedding.

    Both modalities project to the condition dimension; visual tokens
    attend to the text token and the text token attends to the visual
    tokens; the two attended sequences concatenate along the token axis
    (visual tokens first, one text token last) and pass through the output
    fusion projection.
    """
    dtype = params.fuse.weight.dtype
    if visual_tokens.ndim != 2:
        raise ShapeError(f"visual tokens must be 2-D, got {visual_tokens.shape}")
    pv = params.proj_visual(visual_tokens.to(dtype))
    if isinstance(text_vector, torch.Tensor):
        t = text_vector.to(dtype).reshape(1, -1)
    else:
        t = torch.as_tensor(np.asarray(text_vector),
                            dtype=dtype).reshape(1, -1)
    pt = params.proj_text(t)
    visual_attended = params.visual_to_text(pv, pt)
    text_attended = params.text_to_visual(pt, pv)
    fused = params.fuse(torch.cat([visual_attended, text_attended], dim=0))
    return CrossmodalCondition(tokens=fused)


class CrossmodalPromptEncoder(nn.Module):
    """Owns every trainable prompt-encoding parameter.

    The frozen image/text encoders are attached by reference and are not
    part of this module's parameter set, so optimizer construction over
    ``self.parameters()`` can never touch them.
    """

    def __init__(self, config: CPEConfig, image_encoder, text_encoder):
        super().__init__()
        self.config = config
        self.masked_attention = MaskedAttentionParams(
            config.feat_dim, config.attn_dim, config.penalty)
        self.fusion = CrossFusionParams(config.attn_dim, config.text_dim,
                                        config.cond_dim, config.fusion_heads)
        self.null_text = nn.Parameter(torch.zeros(config.text_dim))
        self.null_visual = nn.Parameter(torch.zeros(1, config.attn_dim))
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        _seed_module(self, config.seed)

    def encode_visual(self, image: np.ndarray, mask: np.ndarray,
                      allow_empty: bool = False) -> torch.Tensor:
        fmap = self.image_encoder.encode_image(image)
        if mask.shape != tuple(fmap.source_resolution):
            raise ShapeError(
                f"mask {mask.shape} does not match image "
                f"{fmap.source_resolution}")
        grid_mask = downsample_mask(mask, fmap.grid)
        return region_focused_attention(fmap, grid_mask,
                                        self.masked_attention,
                                        allow_empty=allow_empty)

    def encode_text(self, caption: str) -> TextPrompt:
        return encode_text_hierarchical(caption, self.text_encoder)

    def encode_prompt(self, image: np.ndarray | None = None,
                      mask: np.ndarray | None = None,
                      caption: str | None = None,
                      allow_empty_mask: bool = False) -> CrossmodalCondition:
        """Encode a full or partial prompt into the condition sequence.

        Visual-only prompts fuse with the learned null-text token;
        text-only prompts fuse with the learned null-visual token.
        """
        has_visual = image is not None and mask is not None
        has_text = caption is not None
        if not has_visual and not has_text:
            raise ValidationError(
                "a prompt needs (image and mask) or a caption")
        if has_visual:
            visual = self.encode_visual(image, mask,
                                        allow_empty=allow_empty_mask)
        else:
            visual = self.null_visual
        if has_text:
            text_vec = self.encode_text(caption).vector
        else:
            text_vec = self.null_text
        return cross_fusion(visual, text_vec, self.fusion)


@dataclass
class PromptSpec:
    """What drives one generation: a stored triplet or user-supplied parts."""

    triplet_id: str | None = None
    caption: str | None = None
    ref_image: np.ndarray | None = field(default=None, repr=False)
    ref_mask: np.ndarray | None = field(default=None, repr=False)

    def provenance(self) -> dict:
        if self.triplet_id is not None:
            return {"kind": "triplet", "triplet_id": self.triplet_id}
        parts = []
        if self.ref_image is not None:
            parts.append("ref_image")
        if self.ref_mask is not None:
            parts.append("ref_mask")
        if self.caption is not None:
            parts.append("caption")
        return {"kind": "user", "parts": parts}


def _seed_module(module: nn.Module, seed: int) -> None:
    """Deterministically re-initialize every parameter of a fresh module."""
    gen = torch.Generator().manual_seed(seed & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith("null_text") or name.endswith("null_visual"):
                p.normal_(0.0, 0.02, generator=gen)
            elif p.ndim >= 2:
                fan_in = p.shape[1]
                p.normal_(0.0, 1.0 / np.sqrt(fan_in), generator=gen)
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
