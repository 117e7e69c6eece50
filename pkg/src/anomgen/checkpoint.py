"""Checkpoint archive: one file, named tensor segments, a version field.

The container is NPZ (a zip of .npy entries, each carrying its own
dtype/shape header). Keys are ``<segment>/<name>`` with segments
``cpe``, ``lora``, ``predictor_base``, ``schedule``, and ``codec``;
``__meta__`` holds a JSON blob with the format version, the adapter
layout, and the model configuration needed to rebuild the modules.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

FORMAT_VERSION = "1"
SEGMENTS = ("cpe", "lora", "predictor_base", "schedule", "codec")


def save_checkpoint(path: str | Path, cpe=None, predictor=None,
                    adapters=None, schedule=None, codec=None,
                    extra_meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"version": FORMAT_VERSION, "segments": []}

    if cpe is not None:
        for name, p in cpe.state_dict().items():
            arrays[f"cpe/{name}"] = p.detach().cpu().numpy()
        meta["segments"].append("cpe")
        meta["cpe_config"] = _dataclass_dict(cpe.config)
    if predictor is not None:
        for name, p in predictor.state_dict().items():
            if ".adapter." in name:
                continue
            base_name = name.replace(".base.", ".")
            arrays[f"predictor_base/{base_name}"] = p.detach().cpu().numpy()
        meta["segments"].append("predictor_base")
        cfg = _dataclass_dict(predictor.config)
        cfg["widths"] = list(cfg["widths"])
        meta["unet_config"] = cfg
    if adapters:
        from .lora import adapter_state
        arrays.update({f"lora/{k}": v
                       for k, v in adapter_state(adapters).items()})
        meta["segments"].append("lora")
        meta["lora"] = [{"target": a.target, "rank": a.rank,
                         "scale": a.scale} for a in adapters]
    if schedule is not None:
        arrays["schedule/alphas"] = np.asarray(schedule.alphas)
        meta["segments"].append("schedule")
    if codec is not None:
        meta["segments"].append("codec")
        meta["codec"] = {"kind": codec.kind,
                         "latent_channels": codec.latent_channels,
                         "round_trip_tolerance": codec.round_trip_tolerance}
        if hasattr(codec, "_w"):
            arrays["codec/projection"] = np.asarray(codec._w)
    if extra_meta:
        meta.update(extra_meta)

    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


class CheckpointBundle:
    def __init__(self, segments: dict[str, dict[str, np.ndarray]], meta: dict):
        self.segments = segments
        self.meta = meta

    def segment(self, name: str) -> dict[str, np.ndarray]:
        if name not in self.segments:
            raise ConfigError(f"checkpoint has no segment {name!r}; "
                              f"present: {sorted(self.segments)}")
        return self.segments[name]


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ConfigError(f"{path}: not a checkpoint (missing __meta__)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != FORMAT_VERSION:
            raise ConfigError(
                f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        segments: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key == "__meta__":
                continue
            segment, name = key.split("/", 1)
            segments.setdefault(segment, {})[name] = data[key]
    return CheckpointBundle(segments, meta)


def restore_module_state(module: torch.nn.Module,
                         arrays: dict[str, np.ndarray],
                         rename=None) -> None:
    """Load a segment into a module, strict on names and shapes."""
    state = {}
    for name, arr in arrays.items():
        if rename:
            name = rename(name)
        state[name] = torch.from_numpy(np.ascontiguousarray(arr))
    module.load_state_dict(state, strict=True)


def restore_predictor_base(predictor, arrays: dict[str, np.ndarray]) -> None:
    """Load base weights into a predictor that may carry adapters."""
    own = predictor.state_dict()
    mapping = {name: name for name in arrays}
    for name in arrays:
        if name not in own:
            wrapped = _wrap_name(name)
            if wrapped in own:
                mapping[name] = wrapped
            else:
                raise ConfigError(f"checkpoint tensor {name!r} has no "
                                  f"matching predictor parameter")
    state = {mapping[name]: torch.from_numpy(np.ascontiguousarray(arr))
             for name, arr in arrays.items()}
    merged = dict(own)
    merged.update(state)
    predictor.load_state_dict(merged, strict=True)


def _wrap_name(name: str) -> str:
    head, leaf = name.rsplit(".", 1)
    return f"{head}.base.{leaf}"


def restore_adapters(adapters, arrays: dict[str, np.ndarray]) -> None:
    for a in adapters:
        for part in ("A", "B"):
            key = f"{a.target}.{part}"
            if key not in arrays:
                raise ConfigError(f"checkpoint lora segment missing {key!r}")
            tensor = torch.from_numpy(np.ascontiguousarray(arrays[key]))
            with torch.no_grad():
                getattr(a, part).copy_(tensor)


def _dataclass_dict(obj) -> dict:
    from dataclasses import asdict, is_dataclass
    return asdict(obj) if is_dataclass(obj) else dict(obj)
