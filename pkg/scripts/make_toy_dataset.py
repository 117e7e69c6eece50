#!/usr/bin/env python3
"""Generate the committed 16-triplet toy dataset.

Four object categories x four defect types, 32x32 images with structured
backgrounds and a visible defect blob inside each mask. Fully
deterministic, so re-running reproduces the committed fixture bit for bit.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from anomgen import images
from anomgen.triplets import (DatasetManifest, Triplet,
                              render_caption_template, write_manifest)

SIZE = 32

CATEGORIES = {
    "cashew": {"domain": "consumer goods", "base": (0.82, 0.66, 0.42),
               "desc": "a cashew nut on a dark tray"},
    "capsule": {"domain": "medicine", "base": (0.85, 0.3, 0.25),
                "desc": "a two-tone medical capsule"},
    "pcb": {"domain": "electronics", "base": (0.1, 0.45, 0.2),
            "desc": "a printed circuit board"},
    "candle": {"domain": "industrial", "base": (0.9, 0.88, 0.8),
               "desc": "a wax candle in a holder"},
}

DEFECTS = {
    "crack": {"color": (0.05, 0.05, 0.05), "location": "near the center",
              "detail": "a thin dark fissure", "features": "jagged edges"},
    "hole": {"color": (0.0, 0.0, 0.0), "location": "on the upper side",
             "detail": "a deep circular cavity", "features": "sharp rims"},
    "bulge": {"color": (0.95, 0.95, 0.9), "location": "near the lower edge",
              "detail": "a raised rounded swelling",
              "features": "soft highlights"},
    "scratch": {"color": (0.6, 0.6, 0.62), "location": "across the surface",
                "detail": "a shallow elongated groove",
                "features": "parallel streaks"},
}


def make_base(rng: np.random.Generator, base_color) -> np.ndarray:
    img = np.zeros((SIZE, SIZE, 3), dtype=np.float32)
    img[:] = base_color
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    ripple = 0.05 * np.sin(yy / 3.0) * np.cos(xx / 4.0)
    img += ripple[:, :, None].astype(np.float32)
    img += rng.normal(0, 0.02, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_defect_mask(rng: np.random.Generator, defect: str) -> np.ndarray:
    mask = np.zeros((SIZE, SIZE), dtype=bool)
    cy, cx = rng.integers(8, SIZE - 8, size=2)
    if defect == "crack":
        y, x = int(cy), int(cx)
        for _ in range(10):
            mask[y % SIZE, x % SIZE] = True
            y += int(rng.integers(-1, 2))
            x += 1
            x = min(x, SIZE - 1)
    elif defect == "hole":
        yy, xx = np.mgrid[0:SIZE, 0:SIZE]
        r = int(rng.integers(2, 4))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    elif defect == "bulge":
        yy, xx = np.mgrid[0:SIZE, 0:SIZE]
        ry, rx = rng.integers(2, 5, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:  # scratch
        length = int(rng.integers(8, 14))
        x0 = int(np.clip(cx - length // 2, 0, SIZE - 1))
        mask[cy, x0:min(x0 + length, SIZE)] = True
        mask[min(cy + 1, SIZE - 1), x0:min(x0 + length, SIZE)] = True
    return mask


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out",
                        default=str(Path(__file__).resolve().parents[1]
                                    / "tests" / "fixtures" / "toy_dataset"))
    args = parser.parse_args()
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(20250810)
    records = []
    for category, cinfo in CATEGORIES.items():
        for defect, dinfo in DEFECTS.items():
            rec_id = f"{category}_{defect}"
            img = make_base(rng, cinfo["base"])
            mask = make_defect_mask(rng, defect)
            img[mask] = dinfo["color"]
            images.save_image(img, out / "images" / f"{rec_id}.png")
            images.save_mask(mask, out / "masks" / f"{rec_id}.png")
            caption = render_caption_template(
                cinfo["desc"], defect, dinfo["location"], dinfo["detail"],
                dinfo["features"])
            records.append(Triplet(
                id=rec_id,
                image=f"images/{rec_id}.png",
                mask=f"masks/{rec_id}.png",
                caption=caption,
                category=category,
                defect_type=defect,
                source_dataset="toy",
                split="train",
                domain=cinfo["domain"],
            ))
    write_manifest(DatasetManifest(records=records), out / "manifest.jsonl")
    print(f"wrote {len(records)} records under {out}")


if __name__ == "__main__":
    main()
