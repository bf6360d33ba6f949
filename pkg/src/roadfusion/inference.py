"""Test-time scoring and localization.

Only the normal pathway runs here: features -> Adaptor A -> discriminator.
Adaptor B and the anomaly generator are never invoked. Patch scores are
the negated discriminator outputs; the grid is upsampled to the input
resolution and Gaussian-smoothed for localization, while the image-level
score is the maximum of the raw grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adaptation import ModelState, adapt_normal, discriminate
from .dataset import ImageRecord
from .features import FeatureExtractor


@dataclass
class AnomalyMap:
    """Per-pixel anomaly scores plus the derived image-level score."""

    scores: np.ndarray  # (H, W) float32, smoothed, at input resolution
    grid_scores: np.ndarray  # (H0, W0) float32, raw
    image_score: float
    source_id: str


def patch_scores(q, model: ModelState) -> torch.Tensor:
    """Anomaly score per location: the negated normality value."""
    with torch.no_grad():
        return -discriminate(q, model.discriminator, mode="eval")


def image_score(grid) -> float:
    """Image-level anomaly score: maximum over the grid."""
    if isinstance(grid, np.ndarray):
        grid = torch.from_numpy(grid)
    if grid.numel() == 0:
        raise ValueError("image score undefined for an empty grid")
    return float(grid.max())


def _gaussian_kernel(sigma: float, dtype=torch.float32) -> torch.Tensor:
    radius = int(round(4.0 * sigma))
    if radius <= 0:
        return torch.ones(1, dtype=dtype)
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    kernel = torch.exp(-(x**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def localize(grid, target: tuple[int, int], sigma: float = 4.0) -> np.ndarray:
    """Bilinear upsample to `target`, then Gaussian blur (reflect padding).

    Kernel radius is 4*sigma. Downsampling is unsupported.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if isinstance(grid, np.ndarray):
        grid = torch.from_numpy(np.ascontiguousarray(grid))
    grid = grid.to(torch.float32)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {tuple(grid.shape)}")
    th, tw = target
    h0, w0 = grid.shape
    if th < h0 or tw < w0:
        raise ValueError(
            f"target {target} smaller than grid {(h0, w0)}: downsampling "
            f"is unsupported"
        )
    x = grid.unsqueeze(0).unsqueeze(0)
    if (th, tw) != (h0, w0):
        x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
    kernel = _gaussian_kernel(sigma)
    radius = (kernel.numel() - 1) // 2
    if radius > 0:
        ry = min(radius, th - 1)
        rx = min(radius, tw - 1)
        ky = kernel[radius - ry : radius + ry + 1]
        kx = kernel[radius - rx : radius + rx + 1]
        ky = (ky / ky.sum()).view(1, 1, -1, 1)
        kx = (kx / kx.sum()).view(1, 1, 1, -1)
        x = F.pad(x, (0, 0, ry, ry), mode="reflect")
        x = F.conv2d(x, ky)
        x = F.pad(x, (rx, rx, 0, 0), mode="reflect")
        x = F.conv2d(x, kx)
    return x.squeeze(0).squeeze(0).numpy().astype(np.float32)


class AnomalyScorer:
    """Inference pipeline over an immutable ModelState.

    Pure per image; safe to call from parallel workers. Adaptor B is never
    touched (its call counter stays flat across any number of calls).
    """

    def __init__(
        self,
        model: ModelState,
        extractor: FeatureExtractor,
        sigma: float = 4.0,
        image_score_from: str = "grid",
    ):
        if image_score_from not in ("grid", "smoothed"):
            raise ValueError(f"unknown score policy {image_score_from!r}")
        if model.backbone_spec != extractor.spec:
            raise ValueError(
                f"checkpoint backbone {model.backbone_spec} does not match "
                f"extractor backbone {extractor.spec}"
            )
        self.model = model
        self.extractor = extractor
        self.sigma = sigma
        self.image_score_from = image_score_from
        model.eval_mode()

    def infer_image(self, image: np.ndarray, source_id: str = "") -> AnomalyMap:
        o = self.extractor.extract(image, origin_id=source_id)
        with torch.no_grad():
            q = adapt_normal(o, self.model.adaptor_a)
        grid = patch_scores(q, self.model)
        smoothed = localize(grid, image.shape[:2], sigma=self.sigma)
        if self.image_score_from == "grid":
            score = image_score(grid)
        else:
            score = image_score(torch.from_numpy(smoothed))
        if not (np.isfinite(smoothed).all() and np.isfinite(score)):
            raise RuntimeError(f"non-finite anomaly scores for {source_id!r}")
        return AnomalyMap(
            scores=smoothed,
            grid_scores=grid.numpy().astype(np.float32),
            image_score=score,
            source_id=source_id,
        )

    def infer_record(self, record: ImageRecord) -> AnomalyMap:
        return self.infer_image(record.image, source_id=record.id)


def infer(image, model: ModelState, extractor: FeatureExtractor,
          sigma: float = 4.0, source_id: str = "") -> AnomalyMap:
    """One-shot functional form of AnomalyScorer.infer_image."""
    return AnomalyScorer(model, extractor, sigma=sigma).infer_image(
        image, source_id=source_id
    )


def _heat_rgb(normalized: np.ndarray) -> np.ndarray:
    """Simple blue->red heat colormap over [0, 1]."""
    x = np.clip(normalized, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * x - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * x - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * x - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def save_overlay(image: np.ndarray, scores: np.ndarray, path: str | Path) -> None:
    """Blend a per-image min-max normalized heatmap over the input image."""
    from PIL import Image as PILImage

    lo, hi = float(scores.min()), float(scores.max())
    normalized = (scores - lo) / max(hi - lo, 1e-12)
    heat = _heat_rgb(normalized)
    blended = np.clip(0.5 * image + 0.5 * heat, 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((blended * 255).round().astype(np.uint8)).save(path)


def write_map_outputs(
    amap: AnomalyMap,
    image: np.ndarray,
    out_dir: str | Path,
    scores_file,
    emit_overlay: bool = False,
) -> None:
    """Persist one inference result: raw float32 grid, optional overlay,
    and an `id <TAB> image_score` line appended to the open scores file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / f"{amap.source_id}.npy", amap.scores.astype(np.float32))
    if emit_overlay:
        save_overlay(image, amap.scores, out_dir / f"{amap.source_id}_overlay.png")
    scores_file.write(f"{amap.source_id}\t{amap.image_score:.8g}\n")
