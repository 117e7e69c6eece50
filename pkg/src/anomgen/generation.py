"""Prompt-driven anomaly generation on normal target images.

Retrieval maps a free-text user query through an MLLM client to defect
categories, then to stored triplets. Generation encodes the chosen prompt,
samples a coarse inpainting mask, runs the DDIM loop with a per-step
latent blend that keeps everything outside the mask on the input's
trajectory, decodes, composites the untouched pixels back at pixel
granularity, and attaches the refined mask.

Every generation is a pure function of (weights, prompt, target, seeds):
its RNG streams derive from (base seed, request index), so batches are
reproducible and requests are independent.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field

import numpy as np
import torch
from skimage.draw import polygon as draw_polygon

from .diffusion import forward_noise, inpaint_blend, sample
from .errors import RetrievalError, SamplingError, ShapeError, ValidationError
from .images import load_mask
from .prompt_encoder import PromptSpec, downsample_mask
from .refinement import RefineConfig, refine
from .clients import build_match_question, parse_match_answer


@dataclass
class RetrievalQuery:
    query: str
    category_hint: str | None = None

    def __post_init__(self):
        if not self.query:
            raise ValidationError("query must be non-empty")


@dataclass
class RetrievalResult:
    answer: str
    categories: list[str]
    triplet_ids: list[str]
    matched_defect_types: list[str] = field(default_factory=list)
    diagnostic: str = ""


def _parse_categories(answer: str) -> list[str]:
    parts = []
    for chunk in answer.replace(" and ", ",").split(","):
        name = chunk.strip().strip(".")
        if name and name.lower() != "unknown":
            parts.append(name)
    return parts


def retrieve(query: RetrievalQuery, manifest, client) -> RetrievalResult:
    """Query -> semantic answer -> defect categories -> stored triplets.

    Categories match manifest defect types case-insensitively first; the
    leftovers go back to the client for semantic adjudication. Zero
    matches produce an empty result whose diagnostic lists the nearest
    literal defect-type names.
    """
    try:
        answer = client.ask(query.query)
    except Exception as exc:
        raise RetrievalError(f"mllm client failed: {exc}") from exc
    categories = _parse_categories(answer)

    records = manifest.records
    if query.category_hint:
        hint = query.category_hint.lower()
        records = [r for r in records if r.category.lower() == hint]
    vocabulary = sorted({r.defect_type for r in records})
    vocab_lower = {v.lower(): v for v in vocabulary}

    matched: dict[str, str] = {}
    unmatched: list[str] = []
    for cat in categories:
        if cat.lower() in vocab_lower:
            matched[cat] = vocab_lower[cat.lower()]
        else:
            unmatched.append(cat)
    if unmatched and vocabulary:
        try:
            verdict = client.ask(build_match_question(unmatched, vocabulary))
        except Exception as exc:
            raise RetrievalError(f"mllm client failed: {exc}") from exc
        for name, term in parse_match_answer(verdict).items():
            if term and term in vocabulary:
                matched[name] = term

    matched_types = sorted(set(matched.values()))
    ids = [r.id for r in records if r.defect_type in matched_types]
    diagnostic = ""
    if not ids:
        near = []
        for cat in categories:
            near.extend(difflib.get_close_matches(cat.lower(),
                                                  list(vocab_lower), n=2,
                                                  cutoff=0.0))
        seen = sorted(set(near))
        diagnostic = (f"no manifest defect type matched {categories}; "
                      f"nearest literal names: {seen}")
    return RetrievalResult(answer=answer, categories=categories,
                           triplet_ids=ids,
                           matched_defect_types=matched_types,
                           diagnostic=diagnostic)


MASK_SHAPES = ("ellipse", "polygon", "brush-stroke", "from-file")
PLACEMENTS = ("uniform", "center-biased", "within-foreground-mask")


@dataclass
class CoarseMaskSpec:
    shape: str = "ellipse"
    area_fraction: tuple[float, float] = (0.01, 0.05)
    placement: str = "center-biased"
    seed: int = 0
    n_blobs: tuple[int, int] = (1, 3)
    mask_path: str | None = None
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.area_fraction
        if not 0.0 < lo <= hi < 1.0:
            raise ValidationError(
                f"area fractions must satisfy 0 < min <= max < 1, got "
                f"({lo}, {hi})")
        if self.shape not in MASK_SHAPES:
            raise ValidationError(f"unknown mask shape {self.shape!r}")
        if self.placement not in PLACEMENTS:
            raise ValidationError(f"unknown placement {self.placement!r}")


def _pick_center(rng, h, w, placement, foreground):
    if placement == "within-foreground-mask":
        ys, xs = np.nonzero(foreground)
        if ys.size == 0:
            raise SamplingError("foreground mask is empty")
        i = rng.integers(0, ys.size)
        return float(ys[i]), float(xs[i])
    if placement == "center-biased":
        cy = np.clip(rng.normal(h / 2, h / 6), 0, h - 1)
        cx = np.clip(rng.normal(w / 2, w / 6), 0, w - 1)
        return float(cy), float(cx)
    return float(rng.uniform(0, h - 1)), float(rng.uniform(0, w - 1))


def _draw_ellipse(rng, h, w, target_area, center):
    cy, cx = center
    aspect = rng.uniform(0.5, 2.0)
    r = np.sqrt(target_area / np.pi)
    ry, rx = max(r * aspect, 1.0), max(r / aspect, 1.0)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _draw_polygon(rng, h, w, target_area, center):
    cy, cx = center
    n_vertices = int(rng.integers(5, 10))
    base_r = np.sqrt(target_area / np.pi) * 1.15
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = base_r * rng.uniform(0.5, 1.0, n_vertices)
    ys = np.clip(cy + radii * np.sin(angles), 0, h - 1)
    xs = np.clip(cx + radii * np.cos(angles), 0, w - 1)
    rr, cc = draw_polygon(ys, xs, shape=(h, w))
    mask = np.zeros((h, w), dtype=bool)
    mask[rr, cc] = True
    return mask


def _draw_brush_stroke(rng, h, w, target_area, center):
    n_steps = int(rng.integers(6, 14))
    radius = max(np.sqrt(target_area / (n_steps * 2.0)), 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    cy, cx = center
    vy, vx = rng.normal(size=2)
    for _ in range(n_steps):
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        vy = 0.7 * vy + 0.3 * rng.normal()
        vx = 0.7 * vx + 0.3 * rng.normal()
        norm = max(np.hypot(vy, vx), 1e-6)
        cy = np.clip(cy + vy / norm * radius * 1.5, 0, h - 1)
        cx = np.clip(cx + vx / norm * radius * 1.5, 0, w - 1)
    return mask


_DRAWERS = {"ellipse": _draw_ellipse, "polygon": _draw_polygon,
            "brush-stroke": _draw_brush_stroke}


def sample_coarse_mask(spec: CoarseMaskSpec, resolution: tuple[int, int],
                       foreground: np.ndarray | None = None,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Randomly sample the coarse inpainting mask.

    The mask's foreground fraction lands inside the configured range and,
    under within-foreground placement, never leaves the object mask.
    Deterministic per seed. ``from-file`` loads the mask verbatim and
    skips the area constraint, which is how callers force exact or empty
    masks.
    """
    h, w = resolution
    if spec.shape == "from-file":
        if not spec.mask_path:
            raise ValidationError("from-file mask spec needs mask_path")
        mask = load_mask(spec.mask_path)
        if mask.shape != (h, w):
            raise ShapeError(f"mask file is {mask.shape}, target is {(h, w)}")
        return mask
    if spec.placement == "within-foreground-mask":
        if foreground is None:
            raise ValidationError(
                "within-foreground placement needs a foreground mask")
        if foreground.shape != (h, w):
            raise ShapeError(f"foreground {foreground.shape} vs {(h, w)}")
    rng = rng or np.random.default_rng(spec.seed)
    lo, hi = spec.area_fraction
    total = h * w
    draw = _DRAWERS[spec.shape]
    for _ in range(spec.max_retries):
        n_blobs = int(rng.integers(spec.n_blobs[0], spec.n_blobs[1] + 1))
        frac = rng.uniform(lo, hi)
        per_blob = frac * total / n_blobs
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(n_blobs):
            center = _pick_center(rng, h, w, spec.placement, foreground)
            mask |= draw(rng, h, w, per_blob, center)
        if spec.placement == "within-foreground-mask":
            mask &= foreground
        area = mask.sum() / total
        if lo <= area <= hi:
            return mask
    raise SamplingError(
        f"could not sample a mask with area in [{lo}, {hi}] after "
        f"{spec.max_retries} attempts")


@dataclass
class SamplerConfig:
    steps: int = 20
    seed: int = 0
    count: int = 1


@dataclass
class GenerationResult:
    input_image: np.ndarray
    coarse_mask: np.ndarray
    generated_image: np.ndarray
    refined_mask: np.ndarray
    provenance: dict
    seed: int

    def __post_init__(self):
        shapes = {self.input_image.shape[:2], self.coarse_mask.shape,
                  self.generated_image.shape[:2], self.refined_mask.shape}
        if len(shapes) != 1:
            raise ShapeError(f"result resolutions disagree: {shapes}")
        if self.refined_mask.dtype != np.bool_:
            raise ValidationError("refined mask must be binary")


def resolve_prompt(prompt: PromptSpec, manifest=None):
    """Turn a prompt spec into encode_prompt keyword arguments."""
    if prompt.triplet_id is not None:
        if manifest is None:
            raise ValidationError("a triplet prompt needs the manifest")
        rec = manifest.by_id(prompt.triplet_id)
        return {"image": rec.load_image(manifest.root),
                "mask": rec.load_mask(manifest.root),
                "caption": rec.caption or None}
    return {"image": prompt.ref_image, "mask": prompt.ref_mask,
            "caption": prompt.caption}


def select_prompt(result: RetrievalResult, manifest,
                  rng: np.random.Generator, index: int = 0,
                  mode: str = "uniform") -> PromptSpec:
    """Pick one retrieved triplet, uniformly or round-robin by index."""
    if not result.triplet_ids:
        raise ValidationError("retrieval returned no triplets")
    if mode == "round-robin":
        tid = result.triplet_ids[index % len(result.triplet_ids)]
    else:
        tid = result.triplet_ids[int(rng.integers(0, len(result.triplet_ids)))]
    return PromptSpec(triplet_id=tid)


def generate(target: np.ndarray, prompt: PromptSpec,
             mask_spec: CoarseMaskSpec, predictor, cpe, codec, schedule,
             sampler_config: SamplerConfig, manifest=None, detector=None,
             refine_config: RefineConfig | None = None,
             foreground: np.ndarray | None = None,
             request_index: int = 0) -> GenerationResult:
    """Synthesize one anomaly on a normal image, refined mask attached.

    Deterministic for fixed (weights, prompt, target, seeds); the input
    image object is never mutated. Latents update only inside the coarse
    mask during sampling, and the final composite restores every pixel
    outside the coarse mask from the input.
    """
    seq = np.random.SeedSequence(
        (sampler_config.seed, request_index, mask_spec.seed))
    np_rng = np.random.default_rng(seq.spawn(1)[0])
    torch_gen = torch.Generator().manual_seed(
        int(seq.generate_state(1, np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))

    kwargs = resolve_prompt(prompt, manifest)
    condition = cpe.encode_prompt(**kwargs)

    h, w = target.shape[:2]
    coarse = sample_coarse_mask(mask_spec, (h, w), foreground=foreground,
                                rng=np_rng)

    z0_known = codec.encode(target)
    grid = tuple(z0_known.shape[-2:])
    m_lat = torch.from_numpy(downsample_mask(coarse, grid))
    z_t = torch.randn(z0_known.shape, generator=torch_gen)

    def predict(z, t, cond):
        with torch.no_grad():
            return predictor(z, t, cond)

    def blend(z, t_prev):
        if t_prev == 0:
            z_known = z0_known
        else:
            eps = torch.randn(z0_known.shape, generator=torch_gen)
            z_known = forward_noise(z0_known, t_prev, eps, schedule)
        return inpaint_blend(z, z_known, m_lat)

    z_final = sample(predict, condition, z_t, sampler_config.steps, schedule,
                     step_callback=blend)
    decoded = np.clip(codec.decode(z_final), 0.0, 1.0)
    generated = np.where(coarse[:, :, None], decoded, target)

    refined = refine(target, generated, coarse, detector=detector,
                     config=refine_config)
    provenance = prompt.provenance()
    provenance.update({
        "seed": sampler_config.seed,
        "request_index": request_index,
        "steps": sampler_config.steps,
        "mask_shape": mask_spec.shape,
    })
    return GenerationResult(input_image=target.copy(), coarse_mask=coarse,
                            generated_image=generated.astype(target.dtype),
                            refined_mask=refined, provenance=provenance,
                            seed=sampler_config.seed)


def generate_batch(target: np.ndarray, prompt: PromptSpec,
                   mask_spec: CoarseMaskSpec, predictor, cpe, codec,
                   schedule, sampler_config: SamplerConfig, **kwargs
                   ) -> list[GenerationResult]:
    """One anomalous image per request index, count from the config."""
    return [generate(target, prompt, mask_spec, predictor, cpe, codec,
                     schedule, sampler_config, request_index=i, **kwargs)
            for i in range(sampler_config.count)]
