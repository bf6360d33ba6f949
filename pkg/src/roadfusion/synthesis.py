"""Synthetic anomaly generation: text+mask conditioned inpainting of defects.

Two backends share one contract: `diffusion` drives an external latent-
diffusion inpainting service, `procedural` applies a deterministic
mask-confined texture perturbation so the full pipeline runs offline.
Either way, pixels outside the mask stay (almost) untouched and pixels
inside change measurably.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import DatasetManifest, ImageRecord, load_image, load_image_record, load_mask

LOGGER = logging.getLogger(__name__)

ENDPOINT_ENV = "ROADFUSION_DIFFUSION_ENDPOINT"
MODEL_DIR_ENV = "ROADFUSION_DIFFUSION_MODEL"
POOL_MANIFEST = "manifest.jsonl"

OUTSIDE_MASK_TOLERANCE = 0.02  # max per-channel drift outside the mask
INSIDE_MASK_MIN_DELTA = 0.01  # min mean absolute change inside the mask

DEFAULT_PROMPTS = ("crack", "pothole", "raveling", "patch damage")
DEFAULT_NEGATIVE_PROMPT = "smooth road, clean asphalt"

# generate_anomalous invocation counter; inference-path tests assert it
# stays flat while scoring.
_GENERATION_CALLS = 0


def generation_call_count() -> int:
    return _GENERATION_CALLS


def reset_generation_call_count() -> None:
    global _GENERATION_CALLS
    _GENERATION_CALLS = 0


class SynthesisError(Exception):
    """Generation problem that is not retriable."""


class GenerationRejectedError(SynthesisError):
    """Backend returned an image violating the output contract."""


class BackendUnavailableError(SynthesisError):
    """Backend unreachable; retriable. Carries the triplet id."""

    def __init__(self, triplet_id: str, message: str):
        super().__init__(f"triplet {triplet_id!r}: {message}")
        self.triplet_id = triplet_id
        self.retriable = True


@dataclass(frozen=True)
class MaskParams:
    """Bounds on the defect area as a fraction of the image."""

    min_area: float = 0.01
    max_area: float = 0.15

    def __post_init__(self):
        if not (0.0 < self.min_area <= self.max_area <= 0.3):
            raise ValueError(
                f"area bounds must satisfy 0 < min <= max <= 0.3, got "
                f"({self.min_area}, {self.max_area})"
            )


@dataclass
class SynthesisTriplet:
    """(clean image, defect description, location mask) generation input."""

    normal_image: ImageRecord
    description: str
    negative_prompt: str
    mask: np.ndarray  # H x W uint8
    seed: int
    kind: str = "blob"  # which mask/perturbation family produced this

    def __post_init__(self):
        if self.normal_image.label != "normal":
            raise ValueError(
                f"triplet source {self.normal_image.id!r} must be a normal record"
            )
        if self.mask.shape != self.normal_image.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image "
                f"{self.normal_image.image.shape[:2]}"
            )
        frac = float(self.mask.sum()) / self.mask.size
        if self.mask.sum() < 1 or frac > 0.3:
            raise ValueError(
                f"mask must cover >= 1 pixel and <= 30% of the image, got "
                f"{frac:.3f}"
            )

    @property
    def id(self) -> str:
        return f"{self.normal_image.id}:{self.seed}"


@dataclass
class AnomalousImage:
    """Generated defective version of a clean image, mask-confined."""

    image: np.ndarray  # H x W x 3 float32
    mask: np.ndarray  # H x W uint8
    provenance: str  # diffusion | procedural
    triplet_ref: str


def _check_contract(out: np.ndarray, triplet: SynthesisTriplet) -> None:
    base = triplet.normal_image.image
    inside = triplet.mask.astype(bool)
    delta = np.abs(out - base)
    outside_max = float(delta[~inside].max()) if (~inside).any() else 0.0
    inside_mean = float(delta[inside].mean())
    if outside_max > OUTSIDE_MASK_TOLERANCE:
        raise GenerationRejectedError(
            f"triplet {triplet.id!r}: outside-mask drift {outside_max:.4f} "
            f"exceeds {OUTSIDE_MASK_TOLERANCE}"
        )
    if inside_mean < INSIDE_MASK_MIN_DELTA:
        raise GenerationRejectedError(
            f"triplet {triplet.id!r}: inside-mask mean change {inside_mean:.4f} "
            f"below {INSIDE_MASK_MIN_DELTA}"
        )


def _stroke_mask(
    shape: tuple[int, int], params: MaskParams, rng: np.random.Generator
) -> np.ndarray:
    """Dilated random-walk polyline: crack-like."""
    h, w = shape
    canvas = np.zeros(shape, dtype=np.uint8)
    y = rng.uniform(0.15 * h, 0.85 * h)
    x = rng.uniform(0.15 * w, 0.85 * w)
    angle = rng.uniform(0, 2 * np.pi)
    n_steps = max(int(0.6 * max(h, w)), 8)
    step = max(min(h, w) / n_steps * 1.5, 1.0)
    for _ in range(n_steps):
        angle += rng.normal(0.0, 0.35)
        ny = y + step * np.sin(angle)
        nx = x + step * np.cos(angle)
        length = max(int(np.hypot(ny - y, nx - x)) * 2, 2)
        ys = np.clip(np.linspace(y, ny, length).round().astype(int), 0, h - 1)
        xs = np.clip(np.linspace(x, nx, length).round().astype(int), 0, w - 1)
        canvas[ys, xs] = 1
        y, x = ny, nx
    target = rng.uniform(params.min_area, params.max_area)
    radius = 0
    mask = canvas
    while mask.sum() / mask.size < target and radius < max(h, w):
        radius += 1
        mask = ndimage.binary_dilation(canvas, iterations=radius)
    return mask.astype(np.uint8)


def _blob_mask(
    shape: tuple[int, int], params: MaskParams, rng: np.random.Generator
) -> np.ndarray:
    """Thresholded smooth-noise ellipse: pothole-like."""
    h, w = shape
    noise = ndimage.gaussian_filter(
        rng.standard_normal(shape), sigma=max(min(h, w) / 16.0, 1.0)
    )
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    ry = rng.uniform(0.12, 0.3) * h
    rx = rng.uniform(0.12, 0.3) * w
    yy, xx = np.mgrid[0:h, 0:w]
    window = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
    fieldmap = noise * 0.25 + window
    target = rng.uniform(params.min_area, params.max_area)
    thresh = np.quantile(fieldmap, 1.0 - target)
    return (fieldmap > thresh).astype(np.uint8)


def sample_mask(
    shape: tuple[int, int],
    kind: str,
    params: MaskParams | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Seeded binary defect mask with area fraction inside `params` bounds."""
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise ValueError(f"mask shape must be positive, got {shape}")
    if kind not in ("stroke", "blob"):
        raise ValueError(f"mask kind must be 'stroke' or 'blob', got {kind!r}")
    params = params or MaskParams()
    size = shape[0] * shape[1]
    for attempt in range(100):
        rng = np.random.default_rng((seed, attempt))
        mask = (
            _stroke_mask(shape, params, rng)
            if kind == "stroke"
            else _blob_mask(shape, params, rng)
        )
        frac = mask.sum() / size
        if mask.sum() >= 1 and params.min_area <= frac <= params.max_area:
            return mask
    raise SynthesisError(
        f"could not satisfy area bounds ({params.min_area}, {params.max_area}) "
        f"for a {kind} mask of shape {shape} after 100 attempts"
    )


def build_triplet(
    record: ImageRecord,
    prompt_bank: list[str] | tuple[str, ...],
    mask_kind: str = "mixed",
    seed: int = 0,
    params: MaskParams | None = None,
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT,
) -> SynthesisTriplet:
    """Seeded draw of (prompt, mask kind, mask) for one normal record."""
    if record.label != "normal":
        raise ValueError(f"record {record.id!r} is not a normal record")
    if not prompt_bank:
        raise ValueError("prompt bank must be nonempty")
    rng = np.random.default_rng(seed)
    prompt = prompt_bank[int(rng.integers(len(prompt_bank)))]
    kind = mask_kind
    if kind == "mixed":
        kind = "stroke" if rng.integers(2) == 0 else "blob"
    mask = sample_mask(
        record.image.shape[:2], kind, params, seed=int(rng.integers(2**31))
    )
    return SynthesisTriplet(
        normal_image=record,
        description=prompt,
        negative_prompt=negative_prompt,
        mask=mask,
        seed=seed,
        kind=kind,
    )


def _procedural_inpaint(triplet: SynthesisTriplet) -> np.ndarray:
    """Deterministic mask-confined darkening + granular texture perturbation."""
    rng = np.random.default_rng((triplet.seed, 0xD1F))
    base = triplet.normal_image.image
    mask = triplet.mask.astype(bool)
    out = base.copy()

    grain = rng.normal(0.0, 0.05, size=mask.shape)[..., None]
    if triplet.kind == "stroke":
        # thin dark curvilinear core inside the dilated stroke region
        core = ndimage.binary_erosion(mask, iterations=1)
        if not core.any():
            core = mask
        shade = np.where(core, rng.uniform(0.2, 0.35), rng.uniform(0.55, 0.75))
        perturbed = base * shade[..., None] + grain * 0.5
    else:
        shade = rng.uniform(0.35, 0.55)
        depth = ndimage.gaussian_filter(mask.astype(np.float32), sigma=2.0)
        depth = depth / max(depth.max(), 1e-6)
        perturbed = base * (1.0 - (1.0 - shade) * depth[..., None]) + grain

    perturbed = np.clip(perturbed, 0.0, 1.0)
    out[mask] = perturbed[mask]
    # very dark sources cannot darken further; brighten them instead
    if np.abs(out - base)[mask].mean() < INSIDE_MASK_MIN_DELTA:
        brightened = np.clip(base + 0.3 + grain, 0.0, 1.0)
        out[mask] = brightened[mask]
    return out.astype(np.float32)


def _encode_png(array: np.ndarray) -> str:
    if array.ndim == 2:
        img = Image.fromarray((array * 255).astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(
            (np.clip(array, 0, 1) * 255).round().astype(np.uint8), mode="RGB"
        )
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_png(data: str) -> np.ndarray:
    raw = base64.b64decode(data)
    with Image.open(io.BytesIO(raw)) as img:
        arr = np.asarray(img.convert("RGB"))
    return arr.astype(np.float32) / 255.0


@dataclass
class DiffusionClient:
    """Client for a text-conditioned latent-diffusion inpainting backend.

    Two configurations: an HTTP endpoint (receives PNG-encoded image and
    mask plus prompts and a seed, returns a PNG-encoded inpainted image)
    or a local inpainting-pipeline directory loaded through `diffusers`.
    Either way the returned image is composited back strictly inside the
    mask before the output contract is checked.
    """

    endpoint: str | None = None
    timeout_s: float = 60.0
    retries: int = 2
    model_dir: str | None = None

    def resolve_endpoint(self) -> str:
        return self.endpoint or os.environ.get(ENDPOINT_ENV, "")

    def resolve_model_dir(self) -> str:
        return self.model_dir or os.environ.get(MODEL_DIR_ENV, "")

    def inpaint(self, triplet: SynthesisTriplet) -> np.ndarray:
        endpoint = self.resolve_endpoint()
        if endpoint:
            return self._inpaint_http(triplet, endpoint)
        model_dir = self.resolve_model_dir()
        if model_dir:
            return self._inpaint_local(triplet, model_dir)
        raise BackendUnavailableError(
            triplet.id,
            f"no diffusion backend configured; set {ENDPOINT_ENV} / "
            f"synthesis.endpoint or {MODEL_DIR_ENV}",
        )

    def _inpaint_local(self, triplet: SynthesisTriplet, model_dir: str) -> np.ndarray:
        try:
            from diffusers import AutoPipelineForInpainting  # lazy: optional
            import torch
        except ImportError as e:
            raise BackendUnavailableError(
                triplet.id, f"local diffusion backend needs 'diffusers': {e}"
            ) from e
        if not os.path.isdir(model_dir):
            raise BackendUnavailableError(
                triplet.id, f"diffusion model directory not found: {model_dir}"
            )
        pipe = AutoPipelineForInpainting.from_pretrained(model_dir)
        base = triplet.normal_image.image
        generator = torch.Generator().manual_seed(triplet.seed)
        result = pipe(
            prompt=triplet.description,
            negative_prompt=triplet.negative_prompt,
            image=Image.fromarray((base * 255).round().astype(np.uint8)),
            mask_image=Image.fromarray(triplet.mask * 255),
            generator=generator,
        ).images[0]
        arr = np.asarray(result.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[:2] != base.shape[:2]:
            arr = np.asarray(
                result.convert("RGB").resize(
                    (base.shape[1], base.shape[0]), Image.BILINEAR
                ),
                dtype=np.float32,
            ) / 255.0
        return arr

    def _inpaint_http(self, triplet: SynthesisTriplet, endpoint: str) -> np.ndarray:
        request = {
            "image": _encode_png(triplet.normal_image.image),
            "mask": _encode_png(triplet.mask.astype(np.float32)),
            "prompt": triplet.description,
            "negative_prompt": triplet.negative_prompt,
            "seed": triplet.seed,
        }
        body = json.dumps(request).encode("utf-8")
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                req = urllib.request.Request(
                    endpoint, data=body,
                    headers={"Content-Type": "application/json"},
                )
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                if "image" not in payload:
                    raise GenerationRejectedError(
                        f"triplet {triplet.id!r}: endpoint response missing 'image'"
                    )
                return _decode_png(payload["image"])
            except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
                last_error = e
        raise BackendUnavailableError(triplet.id, f"endpoint unreachable: {last_error}")


def generate_anomalous(
    triplet: SynthesisTriplet,
    backend: str = "procedural",
    client: DiffusionClient | None = None,
) -> AnomalousImage:
    """Produce the anomalous image for a triplet via the chosen backend."""
    global _GENERATION_CALLS
    _GENERATION_CALLS += 1
    base = triplet.normal_image.image
    if backend == "procedural":
        generated = _procedural_inpaint(triplet)
    elif backend == "diffusion":
        client = client or DiffusionClient()
        raw = client.inpaint(triplet)
        if raw.shape != base.shape:
            raise GenerationRejectedError(
                f"triplet {triplet.id!r}: endpoint returned shape {raw.shape}, "
                f"expected {base.shape}"
            )
        inside = triplet.mask.astype(bool)
        generated = base.copy()
        generated[inside] = raw[inside]
    else:
        raise ValueError(f"unknown backend {backend!r}")
    _check_contract(generated, triplet)
    return AnomalousImage(
        image=generated,
        mask=triplet.mask.copy(),
        provenance=backend,
        triplet_ref=triplet.id,
    )


@dataclass(frozen=True)
class PoolEntry:
    """One generated sample in the augmentation pool manifest."""

    source_id: str
    anomalous_path: str
    mask_path: str
    prompt: str
    seed: int
    backend: str


@dataclass
class AugmentationPool:
    entries: list[PoolEntry]
    root: str

    def by_source(self) -> dict[str, list[PoolEntry]]:
        grouped: dict[str, list[PoolEntry]] = {}
        for e in self.entries:
            grouped.setdefault(e.source_id, []).append(e)
        return grouped

    def serialize(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(
                json.dumps(
                    {
                        "source_id": e.source_id,
                        "anomalous_path": e.anomalous_path,
                        "mask_path": e.mask_path,
                        "prompt": e.prompt,
                        "seed": e.seed,
                        "backend": e.backend,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize())

    @classmethod
    def load(cls, path: str | Path) -> "AugmentationPool":
        path = Path(path)
        if not path.exists():
            raise SynthesisError(f"pool manifest not found: {path}")
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            entries.append(PoolEntry(**row))
        return cls(entries=entries, root=str(path.parent))


def derive_seed(base_seed: int, source_id: str, index: int) -> int:
    """Stable per-(source, variant) seed; independent of iteration order."""
    digest = hashlib.sha256(f"{base_seed}:{source_id}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.ndim == 2:
        Image.fromarray((array * 255).astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(
            (np.clip(array, 0, 1) * 255).round().astype(np.uint8), mode="RGB"
        ).save(path)


def generate_pool(
    manifest: DatasetManifest,
    out_dir: str | Path,
    count_per_image: int = 1,
    backend: str = "procedural",
    prompt_bank: tuple[str, ...] = DEFAULT_PROMPTS,
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT,
    mask_kind: str = "mixed",
    mask_params: MaskParams | None = None,
    base_seed: int = 0,
    client: DiffusionClient | None = None,
    jobs: int = 1,
) -> AugmentationPool:
    """Generate `count_per_image` anomalous variants per normal train record.

    Seeds derive from (base_seed, source id, variant index), so reruns with
    the same config reproduce the pool bit for bit. Rejected generations
    are logged and skipped.
    """
    if count_per_image < 1:
        raise ValueError(f"count_per_image must be >= 1, got {count_per_image}")
    out_dir = Path(out_dir)
    train_entries = [e for e in manifest.split("train") if e.label == "normal"]
    if not train_entries:
        raise SynthesisError("manifest has no normal train records to augment")

    tasks = [
        (entry, k, derive_seed(base_seed, entry.id, k))
        for entry in train_entries
        for k in range(count_per_image)
    ]

    def _generate(task):
        entry, k, seed = task
        record = load_image_record(entry, manifest.root)
        triplet = build_triplet(
            record,
            prompt_bank,
            mask_kind=mask_kind,
            seed=seed,
            params=mask_params,
            negative_prompt=negative_prompt,
        )
        result = generate_anomalous(triplet, backend=backend, client=client)
        name = f"{entry.id}-aug{k:03d}"
        image_rel = f"images/{name}.png"
        mask_rel = f"masks/{name}.png"
        _save_png(result.image, out_dir / image_rel)
        _save_png(result.mask.astype(np.float32), out_dir / mask_rel)
        return PoolEntry(
            source_id=entry.id,
            anomalous_path=image_rel,
            mask_path=mask_rel,
            prompt=triplet.description,
            seed=seed,
            backend=backend,
        )

    def _try(task):
        try:
            return _generate(task), None
        except GenerationRejectedError as e:
            return None, e

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_try, tasks))
    else:
        results = [_try(task) for task in tasks]

    kept = []
    rejected = 0
    for entry, err in results:
        if err is not None:
            rejected += 1
            LOGGER.warning("generation rejected: %s", err)
        else:
            kept.append(entry)
    if rejected:
        LOGGER.warning("pool generation: %d rejection(s) skipped", rejected)
    pool = AugmentationPool(entries=kept, root=str(out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    pool.save(out_dir / POOL_MANIFEST)
    return pool


def revalidate_pool(pool: AugmentationPool, manifest: DatasetManifest) -> None:
    """Re-check mask confinement of every pool entry from its files."""
    for entry in pool.entries:
        src = load_image_record(manifest.entry(entry.source_id), manifest.root)
        image = load_image(Path(pool.root) / entry.anomalous_path)
        mask = load_mask(Path(pool.root) / entry.mask_path).astype(bool)
        delta = np.abs(image - src.image)
        outside = float(delta[~mask].max()) if (~mask).any() else 0.0
        if outside > OUTSIDE_MASK_TOLERANCE:
            raise GenerationRejectedError(
                f"pool entry {entry.anomalous_path}: outside-mask drift "
                f"{outside:.4f} exceeds {OUTSIDE_MASK_TOLERANCE}"
            )
