import numpy as np
import pytest

from anomgen import generation as gen
from anomgen import images
from anomgen.clients import MockMllmClient
from anomgen.errors import (RetrievalError, SamplingError, ShapeError,
                            ValidationError)
from anomgen.prompt_encoder import PromptSpec
from anomgen.refinement import RefineConfig
from anomgen.stack import ModelConfig, build_stack

from conftest import random_image


@pytest.fixture(scope="module")
def small_stack():
    return build_stack(ModelConfig(seed=13))


# ------------------------------------------------------------ retrieval

def test_retrieve_cashew_query_returns_paper_answer(toy_manifest):
    result = gen.retrieve(gen.RetrievalQuery(
        "What defects commonly appear in cashews?"), toy_manifest,
        MockMllmClient())
    assert result.answer == "cracks, holes, bulges, scratches"
    assert result.categories == ["cracks", "holes", "bulges", "scratches"]
    # plural names adjudicate onto the manifest's singular defect types
    assert result.matched_defect_types == ["bulge", "crack", "hole",
                                           "scratch"]
    assert len(result.triplet_ids) == 16


def test_retrieve_exact_match_path(toy_manifest):
    client = MockMllmClient(answers={"q": "crack"})
    result = gen.retrieve(gen.RetrievalQuery("q"), toy_manifest, client)
    assert result.matched_defect_types == ["crack"]
    assert sorted(result.triplet_ids) == [
        "candle_crack", "capsule_crack", "cashew_crack", "pcb_crack"]
    assert client.calls == 1  # no adjudication round needed


def test_retrieve_category_hint_filters(toy_manifest):
    client = MockMllmClient(answers={"q": "crack"})
    result = gen.retrieve(gen.RetrievalQuery("q", category_hint="cashew"),
                          toy_manifest, client)
    assert result.triplet_ids == ["cashew_crack"]


def test_retrieve_unknown_category_diagnostic(toy_manifest):
    client = MockMllmClient(answers={"q": "warp drive failure"})
    result = gen.retrieve(gen.RetrievalQuery("q"), toy_manifest, client)
    assert result.triplet_ids == []
    assert result.matched_defect_types == []
    assert "nearest literal names" in result.diagnostic


def test_retrieve_soundness(toy_manifest):
    result = gen.retrieve(gen.RetrievalQuery(
        "What defects commonly appear in cashews?"), toy_manifest,
        MockMllmClient())
    ids = {r.id for r in toy_manifest.records}
    for tid in result.triplet_ids:
        assert tid in ids
        assert toy_manifest.by_id(tid).defect_type in \
            result.matched_defect_types


def test_retrieve_client_failure(toy_manifest):
    with pytest.raises(RetrievalError):
        gen.retrieve(gen.RetrievalQuery("q"), toy_manifest,
                     MockMllmClient(fail=True))


def test_retrieval_query_validation():
    with pytest.raises(ValidationError):
        gen.RetrievalQuery("")


def test_select_prompt_modes(toy_manifest):
    result = gen.retrieve(gen.RetrievalQuery(
        "What defects commonly appear in cashews?"), toy_manifest,
        MockMllmClient())
    rng = np.random.default_rng(0)
    uniform = gen.select_prompt(result, toy_manifest, rng)
    assert uniform.triplet_id in result.triplet_ids
    rr = [gen.select_prompt(result, toy_manifest, rng, index=i,
                            mode="round-robin").triplet_id
          for i in range(len(result.triplet_ids))]
    assert rr == result.triplet_ids


# ---------------------------------------------------------- coarse mask

def test_coarse_mask_seeded_determinism():
    spec = gen.CoarseMaskSpec(seed=7)
    a = gen.sample_coarse_mask(spec, (64, 64))
    b = gen.sample_coarse_mask(spec, (64, 64))
    assert np.array_equal(a, b)
    c = gen.sample_coarse_mask(gen.CoarseMaskSpec(seed=8), (64, 64))
    assert not np.array_equal(a, c)


def test_coarse_mask_area_contract_512():
    spec = gen.CoarseMaskSpec(area_fraction=(0.01, 0.05), seed=3)
    mask = gen.sample_coarse_mask(spec, (512, 512))
    assert 2621 <= mask.sum() <= 13107


def test_coarse_mask_area_contract_all_shapes(rng):
    for shape in ("ellipse", "polygon", "brush-stroke"):
        for seed in range(4):
            spec = gen.CoarseMaskSpec(shape=shape, seed=seed,
                                      area_fraction=(0.02, 0.08))
            mask = gen.sample_coarse_mask(spec, (96, 96))
            frac = mask.mean()
            assert 0.02 <= frac <= 0.08, (shape, seed, frac)


def test_coarse_mask_within_foreground(rng):
    fg = np.zeros((64, 64), bool)
    fg[16:52, 10:40] = True
    spec = gen.CoarseMaskSpec(placement="within-foreground-mask", seed=2,
                              area_fraction=(0.005, 0.03))
    for seed in range(5):
        spec = gen.CoarseMaskSpec(placement="within-foreground-mask",
                                  seed=seed, area_fraction=(0.005, 0.03))
        mask = gen.sample_coarse_mask(spec, (64, 64), foreground=fg)
        assert not (mask & ~fg).any()
        assert mask.any()


def test_coarse_mask_from_file(tmp_path):
    mask = np.zeros((32, 32), bool)
    mask[4:9, 4:9] = True
    path = tmp_path / "mask.png"
    images.save_mask(mask, path)
    spec = gen.CoarseMaskSpec(shape="from-file", mask_path=str(path))
    assert np.array_equal(gen.sample_coarse_mask(spec, (32, 32)), mask)
    # empty masks are allowed from file (explicit override)
    images.save_mask(np.zeros((32, 32), bool), path)
    assert not gen.sample_coarse_mask(spec, (32, 32)).any()
    with pytest.raises(ShapeError):
        gen.sample_coarse_mask(spec, (16, 16))
    with pytest.raises(ValidationError):
        gen.sample_coarse_mask(gen.CoarseMaskSpec(shape="from-file"),
                               (32, 32))


def test_coarse_mask_infeasible_constraints():
    fg = np.zeros((64, 64), bool)
    fg[0, 0] = True  # single foreground pixel
    spec = gen.CoarseMaskSpec(placement="within-foreground-mask",
                              area_fraction=(0.2, 0.3), seed=0,
                              max_retries=20)
    with pytest.raises(SamplingError):
        gen.sample_coarse_mask(spec, (64, 64), foreground=fg)


def test_coarse_mask_spec_validation():
    with pytest.raises(ValidationError):
        gen.CoarseMaskSpec(area_fraction=(0.0, 0.5))
    with pytest.raises(ValidationError):
        gen.CoarseMaskSpec(area_fraction=(0.6, 0.5))
    with pytest.raises(ValidationError):
        gen.CoarseMaskSpec(shape="triangle")
    with pytest.raises(ValidationError):
        gen.CoarseMaskSpec(placement="everywhere")
    with pytest.raises(ValidationError):
        gen.sample_coarse_mask(
            gen.CoarseMaskSpec(placement="within-foreground-mask"),
            (32, 32))


# ------------------------------------------------------------- generate

def test_generate_empty_mask_returns_input_exactly(small_stack, toy_manifest,
                                                   tmp_path, rng):
    target = random_image(rng)
    empty = np.zeros((32, 32), bool)
    path = tmp_path / "empty.png"
    images.save_mask(empty, path)
    spec = gen.CoarseMaskSpec(shape="from-file", mask_path=str(path))
    result = gen.generate(target, PromptSpec(caption="a dent"), spec,
                          small_stack.predictor, small_stack.cpe,
                          small_stack.codec, small_stack.schedule,
                          gen.SamplerConfig(steps=5, seed=1))
    assert np.array_equal(result.generated_image, target)
    assert not result.refined_mask.any()


def test_generate_deterministic(small_stack, toy_manifest, rng):
    target = toy_manifest.records[0].load_image(toy_manifest.root)
    spec = gen.CoarseMaskSpec(seed=4, area_fraction=(0.02, 0.08))
    cfg = gen.SamplerConfig(steps=6, seed=21)
    results = [gen.generate(target, PromptSpec(triplet_id="pcb_hole"), spec,
                            small_stack.predictor, small_stack.cpe,
                            small_stack.codec, small_stack.schedule, cfg,
                            manifest=toy_manifest) for _ in range(2)]
    assert np.array_equal(results[0].generated_image,
                          results[1].generated_image)
    assert np.array_equal(results[0].coarse_mask, results[1].coarse_mask)
    assert np.array_equal(results[0].refined_mask, results[1].refined_mask)


def test_generate_preserves_outside_and_changes_inside(small_stack,
                                                       toy_manifest):
    target = toy_manifest.records[3].load_image(toy_manifest.root)
    spec = gen.CoarseMaskSpec(seed=9, area_fraction=(0.03, 0.1))
    result = gen.generate(target, PromptSpec(triplet_id="cashew_crack"),
                          spec, small_stack.predictor, small_stack.cpe,
                          small_stack.codec, small_stack.schedule,
                          gen.SamplerConfig(steps=6, seed=2),
                          manifest=toy_manifest)
    outside = ~result.coarse_mask
    assert np.array_equal(result.generated_image[outside], target[outside])
    inside_diff = np.abs(result.generated_image[result.coarse_mask]
                         - target[result.coarse_mask]).mean()
    assert inside_diff > 0


def test_generate_never_mutates_target(small_stack, toy_manifest, rng):
    target = random_image(rng)
    original = target.copy()
    spec = gen.CoarseMaskSpec(seed=1, area_fraction=(0.02, 0.08))
    gen.generate(target, PromptSpec(caption="a scratch"), spec,
                 small_stack.predictor, small_stack.cpe, small_stack.codec,
                 small_stack.schedule, gen.SamplerConfig(steps=4, seed=0))
    assert np.array_equal(target, original)


def test_generate_refined_mask_contained(small_stack, toy_manifest):
    target = toy_manifest.records[5].load_image(toy_manifest.root)
    for seed in range(4):
        spec = gen.CoarseMaskSpec(seed=seed, area_fraction=(0.02, 0.1))
        result = gen.generate(target, PromptSpec(triplet_id="capsule_hole"),
                              spec, small_stack.predictor, small_stack.cpe,
                              small_stack.codec, small_stack.schedule,
                              gen.SamplerConfig(steps=4, seed=seed),
                              manifest=toy_manifest,
                              refine_config=RefineConfig(threshold=0.3))
        assert not (result.refined_mask & ~result.coarse_mask).any()


def test_generate_batch_provenance(small_stack, toy_manifest):
    target = toy_manifest.records[0].load_image(toy_manifest.root)
    spec = gen.CoarseMaskSpec(seed=2, area_fraction=(0.02, 0.08))
    cfg = gen.SamplerConfig(steps=4, seed=5, count=3)
    results = gen.generate_batch(target, PromptSpec(triplet_id="pcb_crack"),
                                 spec, small_stack.predictor,
                                 small_stack.cpe, small_stack.codec,
                                 small_stack.schedule, cfg,
                                 manifest=toy_manifest)
    assert len(results) == 3
    assert [r.provenance["request_index"] for r in results] == [0, 1, 2]
    assert all(r.provenance["triplet_id"] == "pcb_crack" for r in results)
    # different request indices draw different masks/noise
    assert not np.array_equal(results[0].generated_image,
                              results[1].generated_image)


def test_generate_user_prompt_provenance(small_stack, rng):
    target = random_image(rng)
    ref = random_image(rng)
    mask = np.zeros((32, 32), bool)
    mask[5:12, 5:12] = True
    spec = gen.CoarseMaskSpec(seed=3, area_fraction=(0.02, 0.08))
    result = gen.generate(target,
                          PromptSpec(caption="a chip", ref_image=ref,
                                     ref_mask=mask),
                          spec, small_stack.predictor, small_stack.cpe,
                          small_stack.codec, small_stack.schedule,
                          gen.SamplerConfig(steps=4, seed=6))
    assert result.provenance["kind"] == "user"
    assert set(result.provenance["parts"]) == {"ref_image", "ref_mask",
                                               "caption"}


def test_generation_result_validation(rng):
    img = random_image(rng)
    with pytest.raises(ShapeError):
        gen.GenerationResult(input_image=img,
                             coarse_mask=np.zeros((16, 16), bool),
                             generated_image=img,
                             refined_mask=np.zeros((32, 32), bool),
                             provenance={}, seed=0)
    with pytest.raises(ValidationError):
        gen.GenerationResult(input_image=img,
                             coarse_mask=np.zeros((32, 32), bool),
                             generated_image=img,
                             refined_mask=np.zeros((32, 32), dtype=float),
                             provenance={}, seed=0)
