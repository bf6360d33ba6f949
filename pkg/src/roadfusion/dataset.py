"""Corpus ingestion: uniform image/mask layouts, manifests, deterministic splits.

Canonical on-disk layout is `images/` plus an optional `masks/` directory
with filename-matched binary masks. Per-dataset adapters normalize other
layouts onto this convention.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import sha256_text

MANIFEST_FORMAT = "roadfusion-manifest-v1"
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    """Fatal dataset problem (bad layout, impossible split, ...)."""


class RecordError(DatasetError):
    """Per-record failure; carries the record id."""

    def __init__(self, record_id: str, message: str):
        super().__init__(f"record {record_id!r}: {message}")
        self.record_id = record_id


@dataclass(frozen=True)
class LayoutSpec:
    """Where a dataset keeps its images and masks below the root."""

    images_dir: str = "images"
    masks_dir: str = "masks"
    image_exts: tuple[str, ...] = IMAGE_EXTS
    mask_exts: tuple[str, ...] = IMAGE_EXTS


# The named road-damage corpora each normalize onto the canonical layout;
# entries below encode their native directory names where they differ.
ADAPTERS: dict[str, LayoutSpec] = {
    "generic": LayoutSpec(),
    "crack500": LayoutSpec(),
    "gaps384": LayoutSpec(),
    "edmcrack600": LayoutSpec(),
    "pothole600": LayoutSpec(images_dir="rgb", masks_dir="label"),
    "cprid": LayoutSpec(),
    "cnr-road": LayoutSpec(),
}


def get_adapter(name: str) -> LayoutSpec:
    try:
        return ADAPTERS[name]
    except KeyError:
        raise DatasetError(
            f"unknown dataset adapter {name!r}; known: {sorted(ADAPTERS)}"
        ) from None


@dataclass(frozen=True)
class ManifestEntry:
    """Reference to one image (and optional mask) relative to the root."""

    id: str
    image_path: str
    mask_path: str | None
    label: str  # normal | anomalous
    split: str = ""  # train | val | test | "" (unassigned)


@dataclass
class ImageRecord:
    """One decoded image with optional binary ground-truth mask."""

    id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray | None  # H x W uint8, 1 = defect pixel
    label: str
    source: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise RecordError(self.id, f"image must be HxWx3, got {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise RecordError(self.id, "image values must lie in [0, 1]")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise RecordError(
                self.id,
                f"mask shape {self.mask.shape} does not match image "
                f"{self.image.shape[:2]}",
            )
        has_defect = self.mask is not None and int(self.mask.sum()) >= 1
        expected = "anomalous" if has_defect else "normal"
        if self.label != expected:
            raise RecordError(
                self.id, f"label {self.label!r} inconsistent with mask content"
            )


@dataclass
class DatasetManifest:
    """Ordered records plus split assignment metadata."""

    entries: list[ManifestEntry]
    root: str
    seed: int | None = None
    ratios: tuple[float, float, float] | None = None

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def entry(self, record_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == record_id:
                return e
        raise RecordError(record_id, "not in manifest")

    def serialize(self, root: str | None = None) -> str:
        meta = {
            "format": MANIFEST_FORMAT,
            "root": self.root if root is None else root,
            "seed": self.seed,
            "ratios": list(self.ratios) if self.ratios is not None else None,
        }
        lines = [json.dumps(meta, sort_keys=True)]
        for e in self.entries:
            lines.append(
                json.dumps(
                    {
                        "id": e.id,
                        "image": e.image_path,
                        "mask": e.mask_path or "",
                        "label": e.label,
                        "split": e.split,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return sha256_text(self.serialize())

    def save(self, path: str | Path) -> None:
        # the stored root must resolve relative to the manifest file, not
        # to whatever cwd the manifest was built under
        path = Path(path)
        try:
            root = os.path.relpath(
                Path(self.root).resolve(), path.parent.resolve()
            )
        except ValueError:
            root = str(Path(self.root).resolve())
        path.write_text(self.serialize(root=root))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"manifest file not found: {path}")
        lines = [l for l in path.read_text().splitlines() if l.strip()]
        if not lines:
            raise DatasetError(f"manifest file {path} is empty")
        meta = json.loads(lines[0])
        if meta.get("format") != MANIFEST_FORMAT:
            raise DatasetError(f"{path} is not a {MANIFEST_FORMAT} file")
        root = meta.get("root", ".")
        if not Path(root).is_absolute():
            root = str((path.parent / root).resolve())
        entries = []
        for line in lines[1:]:
            row = json.loads(line)
            entries.append(
                ManifestEntry(
                    id=row["id"],
                    image_path=row["image"],
                    mask_path=row["mask"] or None,
                    label=row["label"],
                    split=row.get("split", ""),
                )
            )
        ratios = meta.get("ratios")
        return cls(
            entries=entries,
            root=root,
            seed=meta.get("seed"),
            ratios=tuple(ratios) if ratios else None,
        )


def _decode_array(path: Path) -> np.ndarray:
    """Decode an 8/16-bit raster to float in [0, 1] (any channel layout)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    if arr.dtype in (np.int32, np.int64):  # PIL mode "I" rasters
        return np.clip(arr.astype(np.float32) / 65535.0, 0.0, 1.0)
    if np.issubdtype(arr.dtype, np.floating):
        return np.clip(arr.astype(np.float32), 0.0, 1.0)
    raise ValueError(f"unsupported raster dtype {arr.dtype}")


def load_mask(path: str | Path) -> np.ndarray:
    """Load a mask and binarize at 0.5 of full scale -> uint8 {0, 1}."""
    arr = _decode_array(Path(path))
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2)
    return (arr >= 0.5).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    """Load an image as HxWx3 float32 in [0, 1]; grayscale is replicated."""
    arr = _decode_array(Path(path))
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=-1)
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] >= 4:
        arr = arr[..., :3]
    elif arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"unsupported image shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_image_record(entry: ManifestEntry, root: str | Path) -> ImageRecord:
    """Decode one manifest entry into an ImageRecord."""
    root = Path(root)
    image_path = root / entry.image_path
    try:
        image = load_image(image_path)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise RecordError(entry.id, f"cannot decode image {image_path}: {e}") from e
    mask = None
    if entry.mask_path:
        mask_path = root / entry.mask_path
        try:
            mask = load_mask(mask_path)
        except (OSError, UnidentifiedImageError, ValueError) as e:
            raise RecordError(entry.id, f"cannot decode mask {mask_path}: {e}") from e
    label = "anomalous" if (mask is not None and mask.sum() >= 1) else "normal"
    return ImageRecord(
        id=entry.id, image=image, mask=mask, label=label, source=str(image_path)
    )


def _list_by_stem(directory: Path, exts: tuple[str, ...]) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in exts or not p.is_file():
            continue
        if p.stem in found:
            raise DatasetError(f"duplicate stem {p.stem!r} in {directory}")
        found[p.stem] = p
    return found


def load_manifest(root: str | Path, layout: str | LayoutSpec = "generic") -> DatasetManifest:
    """Scan a dataset root into a manifest, sorted lexicographically by id.

    Labels are derived from mask content: a record is anomalous iff its
    mask exists and contains at least one defect pixel.
    """
    root = Path(root)
    spec = get_adapter(layout) if isinstance(layout, str) else layout
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    images_dir = root / spec.images_dir
    if not images_dir.is_dir():
        raise DatasetError(f"missing {spec.images_dir}/ directory under {root}")
    images = _list_by_stem(images_dir, spec.image_exts)
    if not images:
        raise DatasetError(f"no records found under {images_dir}")
    masks_dir = root / spec.masks_dir
    masks = _list_by_stem(masks_dir, spec.mask_exts) if masks_dir.is_dir() else {}
    orphan = sorted(set(masks) - set(images))
    if orphan:
        raise DatasetError(
            f"masks without matching images under {masks_dir}: {orphan[:5]}"
        )
    entries = []
    for stem in sorted(images):
        mask_path = masks.get(stem)
        label = "normal"
        if mask_path is not None and load_mask(mask_path).sum() >= 1:
            label = "anomalous"
        entries.append(
            ManifestEntry(
                id=stem,
                image_path=str(images[stem].relative_to(root)),
                mask_path=str(mask_path.relative_to(root)) if mask_path else None,
                label=label,
            )
        )
    return DatasetManifest(entries=entries, root=str(root))


def split_manifest(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetManifest:
    """Assign train/val/test splits deterministically from (sorted ids, seed).

    Split sizes use floor rounding with the remainder going to test. The
    train split only ever receives normal records; anomalous records land
    in val/test (proportionally to their capacities).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three nonnegative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    entries = sorted(manifest.entries, key=lambda e: e.id)
    n = len(entries)
    n_train = math.floor(ratios[0] * n)
    n_val = math.floor(ratios[1] * n)
    n_test = n - n_train - n_val

    normals = [e for e in entries if e.label == "normal"]
    anoms = [e for e in entries if e.label != "normal"]
    if not normals:
        raise DatasetError("no normal records for training")
    if len(anoms) > n_val + n_test:
        raise DatasetError(
            f"anomalous record unassignable: {len(anoms)} anomalous records "
            f"but only {n_val + n_test} val+test slots"
        )

    rng = np.random.default_rng(seed)
    normals = [normals[i] for i in rng.permutation(len(normals))]
    anoms = [anoms[i] for i in rng.permutation(len(anoms))] if anoms else []

    if anoms:
        want_val = round(len(anoms) * n_val / (n_val + n_test))
        n_anom_val = min(n_val, max(want_val, len(anoms) - n_test))
    else:
        n_anom_val = 0
    n_fill_val = n_val - n_anom_val

    assignment: dict[str, str] = {}
    for e in anoms[:n_anom_val]:
        assignment[e.id] = "val"
    for e in anoms[n_anom_val:]:
        assignment[e.id] = "test"
    for e in normals[:n_train]:
        assignment[e.id] = "train"
    for e in normals[n_train : n_train + n_fill_val]:
        assignment[e.id] = "val"
    for e in normals[n_train + n_fill_val :]:
        assignment[e.id] = "test"

    new_entries = [replace(e, split=assignment[e.id]) for e in entries]
    return DatasetManifest(
        entries=new_entries, root=manifest.root, seed=seed, ratios=tuple(ratios)
    )
