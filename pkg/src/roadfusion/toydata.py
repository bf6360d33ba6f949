"""Procedurally textured toy road corpus for end-to-end desk-scale runs.

Images are seeded noise + gradient shading; defected test images get a
mask-confined procedural perturbation plus the mask as ground truth. The
corpus ships with an explicit split manifest: all-train normals, a test
split of held-out normals and defected images, no validation split.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import DatasetManifest, ImageRecord, ManifestEntry
from .synthesis import MaskParams, build_triplet, generate_anomalous


def toy_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic road surface: base gray + smooth mottling + gradient."""
    base = rng.uniform(0.4, 0.6)
    mottle = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=4.0)
    mottle = 0.08 * mottle / max(np.abs(mottle).max(), 1e-6)
    direction = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gradient = 0.12 * (np.cos(direction) * xx + np.sin(direction) * yy)
    grain = rng.normal(0.0, 0.015, (size, size))
    gray = np.clip(base + mottle + gradient + grain, 0.05, 0.95)
    tint = rng.uniform(-0.02, 0.02, 3)
    image = np.clip(gray[..., None] + tint[None, None, :], 0.0, 1.0)
    return image.astype(np.float32)


def build_toy_corpus(
    root: str | Path,
    n_normal: int = 100,
    n_defect: int = 20,
    size: int = 64,
    n_train: int = 80,
    seed: int = 0,
) -> DatasetManifest:
    """Write images/, masks/ and a pre-split manifest under `root`.

    The first `n_train` normals form the train split; the remaining
    normals plus all defected images form the test split.
    """
    if n_train >= n_normal:
        raise ValueError("need held-out normals for the test split")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    from PIL import Image

    def save(array, path):
        if array.ndim == 2:
            Image.fromarray((array * 255).astype(np.uint8), mode="L").save(path)
        else:
            Image.fromarray((array * 255).round().astype(np.uint8), mode="RGB").save(
                path
            )

    entries = []
    for i in range(n_normal):
        rng = np.random.default_rng((seed, 1, i))
        image = toy_texture(size, rng)
        name = f"road_{i:03d}"
        save(image, root / "images" / f"{name}.png")
        entries.append(
            ManifestEntry(
                id=name,
                image_path=f"images/{name}.png",
                mask_path=None,
                label="normal",
                split="train" if i < n_train else "test",
            )
        )

    mask_params = MaskParams(min_area=0.02, max_area=0.12)
    for i in range(n_defect):
        rng = np.random.default_rng((seed, 2, i))
        clean = toy_texture(size, rng)
        name = f"defect_{i:03d}"
        record = ImageRecord(
            id=name, image=clean, mask=None, label="normal", source="synthetic"
        )
        triplet = build_triplet(
            record,
            prompt_bank=("crack", "pothole"),
            mask_kind="stroke" if i % 2 == 0 else "blob",
            seed=int(rng.integers(2**31)),
            params=mask_params,
        )
        defected = generate_anomalous(triplet, backend="procedural")
        save(defected.image, root / "images" / f"{name}.png")
        save(defected.mask.astype(np.float32), root / "masks" / f"{name}.png")
        entries.append(
            ManifestEntry(
                id=name,
                image_path=f"images/{name}.png",
                mask_path=f"masks/{name}.png",
                label="anomalous",
                split="test",
            )
        )

    entries.sort(key=lambda e: e.id)
    manifest = DatasetManifest(entries=entries, root=str(root), seed=seed)
    manifest.save(root / "manifest.jsonl")
    return manifest


def toy_config_dict(root: str | Path, output_dir: str | Path, seed: int = 0) -> dict:
    """Config for the reduced toy pipeline (tiny backbone, 10 epochs)."""
    return {
        "dataset": {
            "root": str(root),
            "manifest": str(Path(root) / "manifest.jsonl"),
            "seed": seed,
        },
        "synthesis": {
            "backend": "procedural",
            "count_per_image": 1,
            "mask_kind": "mixed",
            "mask_min_area": 0.02,
            "mask_max_area": 0.12,
            "seed": seed,
        },
        "model": {
            "architecture": "tiny",
            "weights_id": "untrained:0",
            "levels": [2, 3],
            "patchsize": 3,
            "input_size": 64,
        },
        "train": {
            "epochs": 10,
            "batch_size": 8,
            "seed": seed,
        },
        "inference": {"sigma": 4.0},
        "output_dir": str(output_dir),
    }
