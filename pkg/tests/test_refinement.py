import numpy as np
import pytest

from anomgen import refinement as rf
from anomgen.errors import ConfigError, ShapeError, ValidationError

from conftest import random_image, random_mask


def test_absdiff_identical_images(rng):
    img = random_image(rng)
    assert np.array_equal(rf.absdiff_score(img, img), np.zeros((32, 32)))


def test_absdiff_single_full_range_pixel():
    a = np.zeros((8, 8, 3), dtype=np.float32)
    b = a.copy()
    b[3, 5, 1] = 1.0
    score = rf.absdiff_score(a, b)
    assert score[3, 5] == 1.0
    assert score.sum() == 1.0


def test_absdiff_matches_elementwise_oracle(rng):
    a = random_image(rng, 12, 9)
    b = random_image(rng, 12, 9)
    expected = np.zeros((12, 9))
    for y in range(12):
        for x in range(9):
            expected[y, x] = max(abs(float(a[y, x, c]) - float(b[y, x, c]))
                                 for c in range(3))
    np.testing.assert_allclose(rf.absdiff_score(a, b), expected, atol=1e-7)


def test_absdiff_requires_same_resolution(rng):
    with pytest.raises(ShapeError):
        rf.absdiff_score(random_image(rng, 8, 8), random_image(rng, 8, 9))


def test_refine_identical_images_empty_mask(rng):
    img = random_image(rng)
    coarse = np.ones((32, 32), bool)
    refined = rf.refine(img, img, coarse)
    assert not refined.any()


def test_refine_recovers_exact_block(rng):
    img = np.zeros((32, 32, 3), dtype=np.float32)
    gen = img.copy()
    gen[10:20, 12:22] = 1.0  # full-intensity 10x10 block
    coarse = np.zeros((32, 32), bool)
    coarse[8:24, 8:26] = True
    refined = rf.refine(img, gen, coarse,
                        config=rf.RefineConfig(min_component_area=100))
    expected = np.zeros((32, 32), bool)
    expected[10:20, 12:22] = True
    assert np.array_equal(refined, expected)


def test_refine_clips_to_coarse_mask(rng):
    img = np.zeros((32, 32, 3), dtype=np.float32)
    gen = img.copy()
    gen[10:20, 10:20] = 1.0  # straddles the coarse boundary
    coarse = np.zeros((32, 32), bool)
    coarse[:, :15] = True
    refined = rf.refine(img, gen, coarse)
    assert not refined[:, 15:].any()
    assert refined[10:20, 10:15].all()


def test_refine_containment_property(rng):
    for _ in range(25):
        a = random_image(rng, 16, 16)
        b = random_image(rng, 16, 16)
        coarse = random_mask(rng, 16, 16, p=0.4)
        refined = rf.refine(a, b, coarse,
                            config=rf.RefineConfig(threshold=0.2))
        assert not (refined & ~coarse).any()


def test_refine_threshold_monotone_before_cleanup(rng):
    a = random_image(rng, 24, 24)
    b = random_image(rng, 24, 24)
    coarse = np.ones((24, 24), bool)
    no_cleanup = dict(min_component_area=0, closing_radius=0)
    previous = None
    for tau in np.linspace(0.05, 0.95, 10):
        mask = rf.refine(a, b, coarse,
                         config=rf.RefineConfig(threshold=float(tau),
                                                **no_cleanup))
        if previous is not None:
            assert not (mask & ~previous).any()  # shrinking foreground
        previous = mask


def test_refine_idempotent_as_coarse(rng):
    a = random_image(rng, 16, 16)
    b = random_image(rng, 16, 16)
    coarse = np.ones((16, 16), bool)
    cfg = rf.RefineConfig(threshold=0.3)
    first = rf.refine(a, b, coarse, config=cfg)
    again = rf.refine(a, b, first, config=cfg)
    assert not (again & ~first).any()


def test_refine_resolution_mismatch(rng):
    with pytest.raises(ShapeError):
        rf.refine(random_image(rng, 8, 8), random_image(rng, 9, 8),
                  np.ones((8, 8), bool))


def test_refine_config_validation():
    with pytest.raises(ValidationError):
        rf.RefineConfig(threshold=0.0)
    with pytest.raises(ValidationError):
        rf.RefineConfig(threshold=1.0)
    with pytest.raises(ValidationError):
        rf.RefineConfig(min_component_area=-1)


def test_cleanup_removes_small_components():
    mask = np.zeros((16, 16), bool)
    mask[2, 2] = True              # area 1, dropped
    mask[8:12, 8:12] = True        # area 16, kept
    out = rf.remove_small_components(mask, 4)
    assert not out[2, 2]
    assert out[8:12, 8:12].all()


def test_cleanup_uses_eight_connectivity():
    mask = np.zeros((8, 8), bool)
    mask[1, 1] = True
    mask[2, 2] = True  # diagonal neighbor: one component of area 2
    out = rf.remove_small_components(mask, 2)
    assert out.sum() == 2


def test_closing_fills_small_gaps():
    mask = np.zeros((12, 12), bool)
    mask[4:8, 4:8] = True
    mask[5, 5] = False  # pinhole
    closed = rf.morphological_closing(mask, 1)
    assert closed[5, 5]
    assert rf.morphological_closing(mask, 0).sum() == mask.sum()


def test_external_detector_clamps_and_validates(rng):
    a = random_image(rng, 8, 8)
    b = random_image(rng, 8, 8)
    det = rf.ExternalDetectorAdapter(lambda x, y: np.full((8, 8), 3.5))
    assert (det.score(a, b) == 1.0).all()
    bad = rf.ExternalDetectorAdapter(lambda x, y: np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        bad.score(a, b)


def test_kernel_detector_from_registry_weights(tmp_path, rng):
    np.savez(tmp_path / "det.npz", kernel=np.ones((3, 3)))
    det = rf.build_detector({"kind": "external",
                             "weight_path": str(tmp_path / "det.npz")})
    a = np.zeros((8, 8, 3), dtype=np.float32)
    b = a.copy()
    b[4, 4] = 1.0
    score = det.score(a, b)
    assert score[4, 4] == pytest.approx(1 / 9)
    assert rf.build_detector(None).kind == "absdiff-default"
    with pytest.raises(ConfigError):
        rf.build_detector({"kind": "external"})
