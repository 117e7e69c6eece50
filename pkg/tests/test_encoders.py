import json

import numpy as np
import pytest

from anomgen import encoders
from anomgen.errors import ConfigError, SegmentLengthError, ShapeError

from conftest import random_image


def test_toy_image_encoder_grid_shape(rng):
    enc = encoders.ToyImageEncoder(patch_size=8, feat_dim=16)
    fmap = enc.encode_image(random_image(rng, 64, 64))
    assert fmap.grid == (8, 8)
    assert fmap.tokens.shape == (64, 16)
    assert fmap.source_resolution == (64, 64)


def test_toy_image_encoder_deterministic(rng):
    enc = encoders.ToyImageEncoder()
    img = random_image(rng, 32, 32)
    a = enc.encode_image(img)
    b = enc.encode_image(img)
    assert np.array_equal(a.tokens, b.tokens)
    # a second instance with the same seed agrees bit for bit
    c = encoders.ToyImageEncoder().encode_image(img)
    assert np.array_equal(a.tokens, c.tokens)


def test_toy_image_encoder_patch_locality(rng):
    """Changing one patch only changes the token covering it."""
    enc = encoders.ToyImageEncoder(patch_size=8, feat_dim=16)
    img = random_image(rng, 32, 32)
    other = img.copy()
    other[8:16, 16:24] = rng.random((8, 8, 3)).astype(np.float32)
    ta = enc.encode_image(img).tokens
    tb = enc.encode_image(other).tokens
    changed = [i for i in range(ta.shape[0])
               if not np.array_equal(ta[i], tb[i])]
    assert changed == [1 * 4 + 2]  # row 1, col 2 of the 4x4 grid


def test_toy_image_encoder_rejects_indivisible(rng):
    enc = encoders.ToyImageEncoder(patch_size=8)
    with pytest.raises(ShapeError, match="resize"):
        enc.encode_image(random_image(rng, 30, 32))


def test_penultimate_layer_differs(rng):
    img = random_image(rng, 32, 32)
    final = encoders.ToyImageEncoder(layer="final").encode_image(img)
    pen = encoders.ToyImageEncoder(layer="penultimate").encode_image(img)
    assert not np.array_equal(final.tokens, pen.tokens)
    with pytest.raises(ConfigError):
        encoders.ToyImageEncoder(layer="middle")


def test_feature_map_invariants(rng):
    with pytest.raises(ShapeError):
        encoders.ImageFeatureMap(tokens=np.zeros((5, 4)), grid=(2, 2),
                                 source_resolution=(16, 16))
    with pytest.raises(ValueError):
        encoders.ImageFeatureMap(tokens=np.full((4, 4), np.nan),
                                 grid=(2, 2), source_resolution=(16, 16))


def test_text_encoder_empty_string_defined():
    enc = encoders.ToyTextEncoder()
    vec = enc.tokenize_and_encode_segment("")
    assert vec.shape == (enc.embedding_dim,)
    assert np.isfinite(vec).all()


def test_text_encoder_deterministic():
    enc = encoders.ToyTextEncoder()
    a = enc.tokenize_and_encode_segment("a crack near the rim")
    b = enc.tokenize_and_encode_segment("a crack near the rim")
    assert np.array_equal(a, b)


def test_text_encoder_distinguishes_tokens():
    enc = encoders.ToyTextEncoder()
    assert not np.allclose(enc.tokenize_and_encode_segment("abc"),
                           enc.tokenize_and_encode_segment("abd"))


def test_text_encoder_token_limit():
    enc = encoders.ToyTextEncoder(encoders.TextEncoderSpec(token_limit=6))
    enc.tokenize_and_encode_segment("one two three four")  # 4 + 2 markers
    with pytest.raises(SegmentLengthError):
        enc.tokenize_and_encode_segment("one two three four five")


def test_token_limit_floor():
    with pytest.raises(ConfigError):
        encoders.TextEncoderSpec(token_limit=1)
    encoders.TextEncoderSpec(token_limit=2)


def test_fingerprints_are_stable_and_distinct():
    a = encoders.ToyImageEncoder(seed=0)
    b = encoders.ToyImageEncoder(seed=0)
    c = encoders.ToyImageEncoder(seed=1)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    ta = encoders.ToyTextEncoder(seed=0)
    tb = encoders.ToyTextEncoder(seed=1)
    assert ta.fingerprint() == encoders.ToyTextEncoder(seed=0).fingerprint()
    assert ta.fingerprint() != tb.fingerprint()


def test_registry_loading(tmp_path):
    registry = {
        "img": {"role": "image_encoder", "kind": "toy", "patch_size": 4,
                "feat_dim": 8},
        "txt": {"role": "text_encoder", "kind": "toy", "token_limit": 16},
    }
    path = tmp_path / "registry.json"
    path.write_text(json.dumps(registry))
    loaded = encoders.load_registry(path)
    img_enc = encoders.build_image_encoder(loaded["img"])
    txt_enc = encoders.build_text_encoder(loaded["txt"])
    assert img_enc.patch_size == 4
    assert txt_enc.token_limit == 16


def test_registry_rejects_unknown_kind(tmp_path):
    path = tmp_path / "registry.json"
    path.write_text(json.dumps({"img": {"kind": "quantum"}}))
    with pytest.raises(ConfigError, match="quantum"):
        encoders.load_registry(path)


def test_external_image_encoder_matches_toy_weights(tmp_path, rng):
    """External adapters run loaded weights through the same patch path."""
    toy = encoders.ToyImageEncoder(patch_size=8, feat_dim=16, seed=3)
    weight_path = tmp_path / "weights.npz"
    np.savez(weight_path, w1=toy._w1, w2=toy._w2)
    ext = encoders.ExternalImageEncoder(weight_path, patch_size=8)
    img = random_image(rng, 32, 32)
    assert np.array_equal(ext.encode_image(img).tokens,
                          toy.encode_image(img).tokens)


def test_external_image_encoder_validates_shapes(tmp_path):
    np.savez(tmp_path / "bad.npz", w1=np.zeros((10, 4)),
             w2=np.zeros((4, 4)))
    with pytest.raises(ConfigError, match="patch size"):
        encoders.ExternalImageEncoder(tmp_path / "bad.npz", patch_size=8)


def test_external_text_encoder(tmp_path):
    table = np.random.default_rng(0).standard_normal((32, 8))
    np.savez(tmp_path / "emb.npz", embeddings=table)
    enc = encoders.ExternalTextEncoder(tmp_path / "emb.npz", token_limit=10)
    a = enc.tokenize_and_encode_segment("worn edge")
    assert a.shape == (8,)
    assert np.array_equal(a, enc.tokenize_and_encode_segment("worn edge"))
    with pytest.raises(SegmentLengthError):
        enc.tokenize_and_encode_segment(" ".join(["w"] * 20))
