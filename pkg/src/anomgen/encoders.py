"""Frozen feature extractors abstracting the pretrained vision-language model.

Two interfaces: an image encoder producing a spatial token grid and a text
encoder with a hard token limit. The toy implementations are seeded,
dependency-free, and immutable after construction, so every pipeline test
runs without weight downloads. Real models plug in as ``external`` registry
entries that load pre-extracted weights from an .npz file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, SegmentLengthError, ShapeError

BEGIN_MARKER = "<|begin|>"
END_MARKER = "<|end|>"


@dataclass(frozen=True)
class ImageFeatureMap:
    """Spatial feature tokens from a frozen image encoder."""

    tokens: np.ndarray          # (N_patches, feat_dim)
    grid: tuple[int, int]       # (rows, cols), rows*cols == N_patches
    source_resolution: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens.shape[0] != rows * cols:
            raise ShapeError(
                f"{self.tokens.shape[0]} tokens for a {rows}x{cols} grid")
        if self.tokens.shape[1] <= 0:
            raise ShapeError("feature dimension must be positive")
        if not np.isfinite(self.tokens).all():
            raise ValueError("non-finite feature values")


@dataclass(frozen=True)
class TextEncoderSpec:
    token_limit: int = 77
    embedding_dim: int = 16

    def __post_init__(self):
        if self.token_limit < 2:
            raise ConfigError("token_limit must be >= 2 "
                              "(begin/end markers need room)")


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2b("|".join(map(str, parts)).encode(),
                             digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class ToyImageEncoder:
    """Per-patch linear projection with fixed seeded weights.

    Non-overlapping patches, no mixing across patches: token i depends only
    on the pixels of patch i. Two linear stages give a meaningful
    penultimate/final layer choice.
    """

    def __init__(self, patch_size: int = 8, feat_dim: int = 16,
                 seed: int = 0, layer: str = "final"):
        if layer not in ("final", "penultimate"):
            raise ConfigError(f"unknown feature layer {layer!r}")
        self.patch_size = patch_size
        self.feat_dim = feat_dim
        self.seed = seed
        self.layer = layer
        in_dim = patch_size * patch_size * 3
        rng = _seeded_rng("toy-image-encoder", seed, patch_size, feat_dim)
        self._w1 = (rng.standard_normal((in_dim, feat_dim))
                    / np.sqrt(in_dim)).astype(np.float32)
        self._w2 = (rng.standard_normal((feat_dim, feat_dim))
                    / np.sqrt(feat_dim)).astype(np.float32)

    def encode_image(self, image: np.ndarray) -> ImageFeatureMap:
        h, w = image.shape[:2]
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(
                f"image {h}x{w} not divisible by patch size {p}; resize first")
        rows, cols = h // p, w // p
        patches = (image.reshape(rows, p, cols, p, 3)
                   .transpose(0, 2, 1, 3, 4)
                   .reshape(rows * cols, p * p * 3)
                   .astype(np.float32))
        hidden = patches @ self._w1
        tokens = hidden if self.layer == "penultimate" else hidden @ self._w2
        return ImageFeatureMap(tokens=tokens, grid=(rows, cols),
                               source_resolution=(h, w))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self._w1.tobytes())
        h.update(self._w2.tobytes())
        h.update(f"{self.patch_size}:{self.feat_dim}:{self.layer}".encode())
        return h.hexdigest()


class ToyTextEncoder:
    """Seeded hash-derived token embeddings, mean-pooled per segment.

    Tokenization is lowercase whitespace splitting framed by begin/end
    markers; the marker pair counts toward the token limit. Each token's
    embedding is drawn from an RNG keyed by (seed, token), which makes the
    map injective in practice and needs no stored vocabulary.
    """

    def __init__(self, spec: TextEncoderSpec | None = None, seed: int = 0):
        self.spec = spec or TextEncoderSpec()
        self.seed = seed

    @property
    def token_limit(self) -> int:
        return self.spec.token_limit

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim

    def tokenize(self, text: str) -> list[str]:
        return [BEGIN_MARKER] + text.lower().split() + [END_MARKER]

    def count_tokens(self, text: str) -> int:
        return len(text.split()) + 2

    def _token_embedding(self, token: str) -> np.ndarray:
        rng = _seeded_rng("toy-text-encoder", self.seed, token)
        return rng.standard_normal(self.spec.embedding_dim) / np.sqrt(
            self.spec.embedding_dim)

    def tokenize_and_encode_segment(self, text: str) -> np.ndarray:
        """Global embedding of one segment (float64 vector).

        An empty string encodes the marker-only sequence; a segment over
        the token limit raises, since splitting is the caller's job.
        """
        tokens = self.tokenize(text)
        if len(tokens) > self.spec.token_limit:
            raise SegmentLengthError(
                f"segment has {len(tokens)} tokens, limit is "
                f"{self.spec.token_limit}")
        embs = np.stack([self._token_embedding(tok) for tok in tokens])
        return embs.mean(axis=0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.seed}:{self.spec.token_limit}:"
                 f"{self.spec.embedding_dim}".encode())
        probe = self.tokenize_and_encode_segment("probe weights frozen")
        h.update(probe.tobytes())
        return h.hexdigest()


class ExternalImageEncoder(ToyImageEncoder):
    """Patch-linear encoder driven by pre-extracted weights from .npz.

    The archive must hold ``w1`` of shape (patch*patch*3, feat) and ``w2``
    of shape (feat, feat). Weight download and conversion are out of scope;
    this is the attachment point for them.
    """

    def __init__(self, weight_path: str | Path, patch_size: int,
                 layer: str = "final"):
        data = np.load(weight_path)
        if "w1" not in data or "w2" not in data:
            raise ConfigError(f"{weight_path}: expected arrays 'w1' and 'w2'")
        w1 = np.asarray(data["w1"], dtype=np.float32)
        w2 = np.asarray(data["w2"], dtype=np.float32)
        if w1.shape[0] != patch_size * patch_size * 3:
            raise ConfigError(
                f"w1 rows {w1.shape[0]} do not match patch size {patch_size}")
        super().__init__(patch_size=patch_size, feat_dim=w1.shape[1],
                         layer=layer)
        self._w1 = w1
        self._w2 = w2


class ExternalTextEncoder(ToyTextEncoder):
    """Text encoder backed by a stored embedding table.

    The .npz must hold ``embeddings`` of shape (vocab, dim); tokens map to
    rows by a stable hash. Mean pooling over the marker-framed sequence,
    same as the toy encoder.
    """

    def __init__(self, weight_path: str | Path, token_limit: int = 77):
        data = np.load(weight_path)
        if "embeddings" not in data:
            raise ConfigError(f"{weight_path}: expected array 'embeddings'")
        table = np.asarray(data["embeddings"], dtype=np.float64)
        super().__init__(TextEncoderSpec(token_limit=token_limit,
                                         embedding_dim=table.shape[1]))
        self._table = table

    def _token_embedding(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
        row = int.from_bytes(digest, "little") % self._table.shape[0]
        return self._table[row]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self._table.tobytes())
        h.update(str(self.spec.token_limit).encode())
        return h.hexdigest()


def load_registry(path: str | Path) -> dict:
    """Read a model registry: name -> entry dict.

    Entry keys: ``role`` (image_encoder | text_encoder | change_detector),
    ``kind`` (toy | external), plus role-specific options (patch_size,
    feat_dim, token_limit, seed, layer, weight_path).
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        registry = json.load(fh)
    if not isinstance(registry, dict):
        raise ConfigError(f"{path}: registry must be a JSON object")
    for name, entry in registry.items():
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigError(f"{path}: entry {name!r} needs a 'kind'")
        if entry["kind"] not in ("toy", "external"):
            raise ConfigError(
                f"{path}: entry {name!r} has unknown kind {entry['kind']!r}")
    return registry


def build_image_encoder(entry: dict, base_dir: Path | None = None):
    kind = entry["kind"]
    if kind == "toy":
        return ToyImageEncoder(patch_size=entry.get("patch_size", 8),
                               feat_dim=entry.get("feat_dim", 16),
                               seed=entry.get("seed", 0),
                               layer=entry.get("layer", "final"))
    weight_path = _weights(entry, base_dir)
    return ExternalImageEncoder(weight_path,
                                patch_size=entry.get("patch_size", 8),
                                layer=entry.get("layer", "final"))


def build_text_encoder(entry: dict, base_dir: Path | None = None):
    kind = entry["kind"]
    if kind == "toy":
        spec = TextEncoderSpec(token_limit=entry.get("token_limit", 77),
                               embedding_dim=entry.get("feat_dim", 16))
        return ToyTextEncoder(spec, seed=entry.get("seed", 0))
    weight_path = _weights(entry, base_dir)
    return ExternalTextEncoder(weight_path,
                               token_limit=entry.get("token_limit", 77))


def _weights(entry: dict, base_dir: Path | None) -> Path:
    if "weight_path" not in entry:
        raise ConfigError("external registry entry needs weight_path")
    p = Path(entry["weight_path"])
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    if not p.exists():
        raise ConfigError(f"weight file not found: {p}")
    return p
