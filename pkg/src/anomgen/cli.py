"""Command-line entry point.

Subcommands: build-dataset, stats, train, generate, refine-mask, retrieve,
evaluate. Option precedence is CLI flag > config file > built-in default,
and every run that produces artifacts writes the merged options as a
config snapshot beside them, so a run is reproducible from its snapshot
alone. All randomness flows from the global --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import images, metrics, triplets
from .clients import (HttpCaptioningClient, HttpMllmClient,
                      MockCaptioningClient, MockMllmClient)
from .encoders import load_registry
from .errors import AnomgenError, ConfigError
from .generation import (CoarseMaskSpec, PromptSpec, RetrievalQuery,
                         SamplerConfig, generate_batch, retrieve,
                         select_prompt)
from .refinement import RefineConfig, build_detector, refine
from .stack import ModelConfig, build_stack, load_stack, save_stack
from .training import TrainConfig, train

log = logging.getLogger("anomgen")

GLOBAL_DEFAULTS = {"seed": 0, "log_level": "warning", "out_dir": None,
                   "registry": None, "config": None}


def _add_globals(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="global random seed (default 0)")
    parser.add_argument("--log-level", default=None,
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--out-dir", default=None,
                        help="directory for all artifacts")
    parser.add_argument("--registry", default=None,
                        help="model registry JSON path")
    parser.add_argument("--config", default=None,
                        help="JSON config file; CLI flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomgen",
        description="Zero-shot anomaly generation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("build-dataset",
                       help="validate a manifest and caption its records")
    _add_globals(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--client", default=None, choices=["mock", "http"])
    p.add_argument("--endpoint", default=None)
    p.add_argument("--force", action="store_true", default=None)
    p.add_argument("--bbox-mode", default=None,
                   choices=["overlay", "coords"])

    p = sub.add_parser("stats", help="dataset statistics report")
    _add_globals(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", action="store_true", default=None,
                   dest="as_json")

    p = sub.add_parser("train", help="run prompt-guided inpainting training")
    _add_globals(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--dilation-radius", type=int, default=None)
    p.add_argument("--mask-fill", default=None, choices=["zeros", "noise"])
    p.add_argument("--loss-normalization", default=None,
                   choices=["masked-mean", "global-mean"])
    p.add_argument("--checkpoint-interval", type=int, default=None)
    p.add_argument("--lora-rank", type=int, default=None)
    p.add_argument("--lora-scale", type=float, default=None)
    p.add_argument("--timesteps", type=int, default=None)

    p = sub.add_parser("generate", help="synthesize anomalies on an image")
    _add_globals(p)
    p.add_argument("--target", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--query", default=None)
    p.add_argument("--triplet-id", default=None)
    p.add_argument("--caption", default=None)
    p.add_argument("--ref-image", default=None)
    p.add_argument("--ref-mask", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--mask-spec", default=None,
                   help="inline JSON or a path to a JSON mask spec")

    p = sub.add_parser("refine-mask",
                       help="refine an anomaly mask from an image pair")
    _add_globals(p)
    p.add_argument("--input", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--coarse-mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--min-component-area", type=int, default=None)
    p.add_argument("--closing-radius", type=int, default=None)
    p.add_argument("--detector", default=None,
                   help="registry entry name for an external detector")

    p = sub.add_parser("retrieve", help="inspect prompt retrieval")
    _add_globals(p)
    p.add_argument("--query", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--category-hint", default=None)
    p.add_argument("--client", default=None, choices=["mock", "http"])
    p.add_argument("--endpoint", default=None)
    p.add_argument("--json", action="store_true", default=None,
                   dest="as_json")

    p = sub.add_parser("evaluate", help="metrics over a results directory")
    _add_globals(p)
    p.add_argument("--results-dir", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--detections", default=None,
                   help="JSONL of {score,label[,map,gt_mask]} records")
    p.add_argument("--export-features", default=None,
                   help="write a delimited feature table to this path")
    p.add_argument("--report", default=None,
                   help="report JSON path (default <results>/report.json)")
    return parser


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """CLI flag > config file > defaults; unknown config keys rejected."""
    merged = dict(GLOBAL_DEFAULTS)
    merged.update(defaults)
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise ConfigError(
                f"unknown config keys {sorted(unknown)}; known keys: "
                f"{sorted(merged)}")
        merged.update(file_cfg)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _snapshot(opts: dict, command: str) -> None:
    if not opts.get("out_dir"):
        return
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command,
               **{k: v for k, v in sorted(opts.items()) if k != "config"}}
    with open(out / f"{command}-config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _load_registry_arg(opts: dict):
    if not opts.get("registry"):
        return None, None
    path = Path(opts["registry"])
    return load_registry(path), path.parent


def cmd_build_dataset(args) -> int:
    opts = _merge(args, {"manifest": None, "out": None, "client": "mock",
                         "endpoint": None, "force": False,
                         "bbox_mode": "overlay"})
    manifest = triplets.load_manifest(opts["manifest"])
    for rec in manifest.records:
        rec.validate_content(manifest.root)
    if opts["client"] == "http":
        client = HttpCaptioningClient(opts["endpoint"] or "")
    else:
        client = MockCaptioningClient()
    captioned, summary = triplets.caption_triplets(
        manifest, client, force=opts["force"], bbox_mode=opts["bbox_mode"])
    triplets.write_manifest(captioned, opts["out"])
    print(f"captioned {len(summary.captioned)}, "
          f"skipped {len(summary.skipped)}, failed {len(summary.failed)}")
    for rec_id, reason in summary.failed.items():
        print(f"  failed {rec_id}: {reason}")
    _snapshot(opts, "build-dataset")
    return 0


def cmd_stats(args) -> int:
    opts = _merge(args, {"manifest": None, "as_json": False})
    manifest = triplets.load_manifest(opts["manifest"])
    report = triplets.dataset_stats(manifest)
    if opts["as_json"]:
        print(json.dumps(asdict(report), indent=2, sort_keys=True))
    else:
        print(report.format_text())
    _snapshot(opts, "stats")
    return 0


def cmd_train(args) -> int:
    opts = _merge(args, {
        "manifest": None, "steps": 500, "batch_size": 4,
        "learning_rate": 1e-4, "dilation_radius": 8, "mask_fill": "zeros",
        "loss_normalization": "masked-mean", "checkpoint_interval": 0,
        "lora_rank": 4, "lora_scale": 1.0, "timesteps": 50})
    if not opts["out_dir"]:
        raise ConfigError("train needs --out-dir for its artifacts")
    manifest = triplets.load_manifest(opts["manifest"])
    registry, registry_dir = _load_registry_arg(opts)
    stack = build_stack(ModelConfig(timesteps=opts["timesteps"],
                                    lora_rank=opts["lora_rank"],
                                    lora_scale=opts["lora_scale"],
                                    seed=opts["seed"]),
                        registry=registry, registry_dir=registry_dir)
    config = TrainConfig(
        steps=opts["steps"], batch_size=opts["batch_size"],
        learning_rate=opts["learning_rate"],
        dilation_radius=opts["dilation_radius"],
        mask_fill=opts["mask_fill"],
        loss_normalization=opts["loss_normalization"],
        seed=opts["seed"], checkpoint_interval=opts["checkpoint_interval"],
        out_dir=opts["out_dir"])
    state = train(manifest, stack.predictor, stack.cpe, stack.codec,
                  stack.schedule, config, adapters=stack.adapters)
    save_stack(Path(opts["out_dir"]) / "checkpoint.npz", stack)
    print(f"trained {state.step} steps; final loss "
          f"{state.loss_history[-1]:.6f}; checkpoint at "
          f"{Path(opts['out_dir']) / 'checkpoint.npz'}")
    _snapshot(opts, "train")
    return 0


def _mask_spec_from(value: str | None, seed: int) -> CoarseMaskSpec:
    if value is None:
        return CoarseMaskSpec(seed=seed)
    text = value
    if not value.lstrip().startswith("{"):
        with open(value, encoding="utf-8") as fh:
            text = fh.read()
    data = json.loads(text)
    known = set(CoarseMaskSpec.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown mask spec keys {sorted(unknown)}")
    if "area_fraction" in data:
        data["area_fraction"] = tuple(data["area_fraction"])
    if "n_blobs" in data:
        data["n_blobs"] = tuple(data["n_blobs"])
    data.setdefault("seed", seed)
    return CoarseMaskSpec(**data)


def cmd_generate(args) -> int:
    opts = _merge(args, {
        "target": None, "checkpoint": None, "manifest": None, "query": None,
        "triplet_id": None, "caption": None, "ref_image": None,
        "ref_mask": None, "count": 1, "steps": 20, "mask_spec": None})
    if not opts["out_dir"]:
        raise ConfigError("generate needs --out-dir for its artifacts")
    out_dir = Path(opts["out_dir"])
    registry, registry_dir = _load_registry_arg(opts)
    if opts["checkpoint"]:
        stack = load_stack(opts["checkpoint"], registry=registry,
                           registry_dir=registry_dir)
    else:
        stack = build_stack(ModelConfig(seed=opts["seed"]),
                            registry=registry, registry_dir=registry_dir)
    manifest = (triplets.load_manifest(opts["manifest"])
                if opts["manifest"] else None)

    target = images.load_image(opts["target"])
    rng = np.random.default_rng(opts["seed"])
    if opts["query"]:
        if manifest is None:
            raise ConfigError("--query needs --manifest")
        result = retrieve(RetrievalQuery(opts["query"]), manifest,
                          MockMllmClient())
        if not result.triplet_ids:
            raise ConfigError(f"retrieval found nothing: {result.diagnostic}")
        prompt = select_prompt(result, manifest, rng)
    elif opts["triplet_id"]:
        prompt = PromptSpec(triplet_id=opts["triplet_id"])
    else:
        ref_image = (images.load_image(opts["ref_image"])
                     if opts["ref_image"] else None)
        ref_mask = (images.load_mask(opts["ref_mask"])
                    if opts["ref_mask"] else None)
        prompt = PromptSpec(caption=opts["caption"], ref_image=ref_image,
                            ref_mask=ref_mask)

    mask_spec = _mask_spec_from(opts["mask_spec"], opts["seed"])
    sampler = SamplerConfig(steps=opts["steps"], seed=opts["seed"],
                            count=opts["count"])
    results = generate_batch(target, prompt, mask_spec, stack.predictor,
                             stack.cpe, stack.codec, stack.schedule, sampler,
                             manifest=manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "provenance.jsonl", "w", encoding="utf-8") as fh:
        for i, res in enumerate(results):
            stem = f"{Path(opts['target']).stem}_{i:03d}"
            files = {
                "generated": f"generated_{stem}.png",
                "coarse_mask": f"coarse_{stem}.png",
                "refined_mask": f"refined_{stem}.png",
            }
            images.save_image(res.generated_image, out_dir / files["generated"])
            images.save_mask(res.coarse_mask, out_dir / files["coarse_mask"])
            images.save_mask(res.refined_mask, out_dir / files["refined_mask"])
            fh.write(json.dumps({"index": i, "files": files,
                                 **res.provenance}, sort_keys=True) + "\n")
    print(f"wrote {len(results)} generation(s) to {out_dir}")
    _snapshot(opts, "generate")
    return 0


def cmd_refine_mask(args) -> int:
    opts = _merge(args, {"input": None, "generated": None,
                         "coarse_mask": None, "out": None, "threshold": 0.9,
                         "min_component_area": 4, "closing_radius": 1,
                         "detector": None})
    detector = None
    if opts["detector"]:
        registry, registry_dir = _load_registry_arg(opts)
        if not registry or opts["detector"] not in registry:
            raise ConfigError(
                f"detector {opts['detector']!r} not in the registry")
        detector = build_detector(registry[opts["detector"]], registry_dir)
    refined = refine(
        images.load_image(opts["input"]),
        images.load_image(opts["generated"]),
        images.load_mask(opts["coarse_mask"]),
        detector=detector,
        config=RefineConfig(threshold=opts["threshold"],
                            min_component_area=opts["min_component_area"],
                            closing_radius=opts["closing_radius"]))
    images.save_mask(refined, opts["out"])
    print(f"refined mask: {int(refined.sum())} foreground pixels -> "
          f"{opts['out']}")
    _snapshot(opts, "refine-mask")
    return 0


def cmd_retrieve(args) -> int:
    opts = _merge(args, {"query": None, "category_hint": None,
                         "client": "mock", "endpoint": None,
                         "as_json": False, "manifest": None})
    manifest = triplets.load_manifest(opts["manifest"])
    if opts["client"] == "http":
        client = HttpMllmClient(opts["endpoint"] or "")
    else:
        client = MockMllmClient()
    result = retrieve(RetrievalQuery(opts["query"], opts["category_hint"]),
                      manifest, client)
    if opts["as_json"]:
        print(json.dumps({
            "answer": result.answer, "categories": result.categories,
            "matched_defect_types": result.matched_defect_types,
            "triplet_ids": result.triplet_ids,
            "diagnostic": result.diagnostic}, indent=2, sort_keys=True))
    else:
        print(f"answer: {result.answer}")
        print(f"categories: {', '.join(result.categories) or '(none)'}")
        print(f"matched defect types: "
              f"{', '.join(result.matched_defect_types) or '(none)'}")
        print(f"triplets: {', '.join(result.triplet_ids) or '(none)'}")
        if result.diagnostic:
            print(f"diagnostic: {result.diagnostic}")
    _snapshot(opts, "retrieve")
    return 0


def _load_map(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.asarray(images.load_image(path)).mean(axis=2)


def cmd_evaluate(args) -> int:
    opts = _merge(args, {"results_dir": None, "manifest": None,
                         "detections": None, "export_features": None,
                         "report": None})
    results_dir = Path(opts["results_dir"])
    prov_path = results_dir / "provenance.jsonl"
    if not prov_path.exists():
        raise ConfigError(f"no provenance.jsonl under {results_dir}")
    manifest = (triplets.load_manifest(opts["manifest"])
                if opts["manifest"] else None)

    entries = []
    with open(prov_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    gen_images, groups = [], []
    clusters: dict[str, list[np.ndarray]] = {}
    for entry in entries:
        img = images.load_image(results_dir / entry["files"]["generated"])
        gen_images.append(img)
        key = "user"
        if entry.get("triplet_id") and manifest is not None:
            rec = manifest.by_id(entry["triplet_id"])
            key = f"{rec.category}/{rec.defect_type}"
        groups.append(key)
        clusters.setdefault(key, []).append(img)

    classifier = metrics.ToyClassifier(seed=opts["seed"])
    distance = metrics.ToyPerceptualDistance()
    report: dict = {"n_generated": len(gen_images)}
    if gen_images:
        report["inception_score"] = metrics.inception_score(gen_images,
                                                            classifier)
        multi = [imgs for imgs in clusters.values() if len(imgs) >= 2]
        if multi:
            report["intra_cluster_distance"] = metrics.intra_cluster_lpips(
                multi, distance)
        report["per_cluster"] = {
            key: {"count": len(imgs),
                  "inception_score": metrics.inception_score(imgs,
                                                             classifier)}
            for key, imgs in sorted(clusters.items())}

    if opts["detections"]:
        image_scores, pixel_maps = [], []
        base = Path(opts["detections"]).parent
        with open(opts["detections"], encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                image_scores.append((float(rec["score"]), int(rec["label"])))
                if rec.get("map") and rec.get("gt_mask"):
                    pixel_maps.append((_load_map(base / rec["map"]),
                                       images.load_mask(base / rec["gt_mask"])))
        if image_scores:
            report["i_roc"] = metrics.roc_auc(image_scores)
            report["i_f1"] = metrics.max_f1(image_scores)
        if pixel_maps:
            report["pro"] = metrics.pro_auc(pixel_maps)
            report["p_f1"] = metrics.pixel_max_f1(pixel_maps)

    if opts["export_features"] and gen_images:
        metrics.export_features(gen_images, groups,
                                path=opts["export_features"])
        report["feature_table"] = str(opts["export_features"])

    report_path = Path(opts["report"] or results_dir / "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    _snapshot(opts, "evaluate")
    return 0


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "stats": cmd_stats,
    "train": cmd_train,
    "generate": cmd_generate,
    "refine-mask": cmd_refine_mask,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    level = (args.log_level or "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    try:
        return COMMANDS[args.command](args)
    except AnomgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the contract: one-line diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
