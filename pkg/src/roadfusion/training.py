"""Joint optimization of adaptors and discriminator with the truncated-l1
objective (or a cross-entropy alternative).

Per step: one batch of normal images goes through Adaptor A, its paired
batch of generated anomalous images through Adaptor B; the discriminator
scores every location of both and a single optimizer step updates all
trainable parameters. The backbone never changes.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as metrics_mod
from .adaptation import ModelState, adapt_anomalous, adapt_normal
from .dataset import DatasetManifest, load_image, load_image_record, load_mask
from .features import FeatureExtractor
from .synthesis import AugmentationPool

LOGGER = logging.getLogger(__name__)


@dataclass
class LossConfig:
    tau_plus: float = 0.5
    tau_minus: float = -0.5
    kind: str = "truncated_l1"  # truncated_l1 | cross_entropy
    anomalous_masking: str = "mask_only"  # mask_only | all_locations

    def __post_init__(self):
        if self.tau_plus <= self.tau_minus:
            raise ValueError(
                f"tau_plus must exceed tau_minus, got ({self.tau_plus}, "
                f"{self.tau_minus})"
            )
        if self.kind not in ("truncated_l1", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.anomalous_masking not in ("mask_only", "all_locations"):
            raise ValueError(f"unknown masking mode {self.anomalous_masking!r}")


@dataclass
class TrainConfig:
    lr_adaptors: float = 1e-4
    lr_discriminator: float = 2e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.lr_adaptors <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def _checked_pair(scores_normal, scores_anomalous, down_mask):
    if scores_anomalous is not None and scores_normal.shape != scores_anomalous.shape:
        raise ValueError(
            f"shape mismatch: normal {tuple(scores_normal.shape)} vs anomalous "
            f"{tuple(scores_anomalous.shape)}"
        )
    if down_mask is not None and scores_anomalous is not None:
        if tuple(down_mask.shape) != tuple(scores_anomalous.shape):
            raise ValueError(
                f"down_mask shape {tuple(down_mask.shape)} does not match "
                f"scores {tuple(scores_anomalous.shape)}"
            )


def truncated_l1_loss(
    scores_normal: torch.Tensor,
    scores_anomalous: torch.Tensor,
    cfg: LossConfig,
    down_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Two-sided hinge: push normal scores above tau_plus and anomalous
    scores below tau_minus, averaged over all locations.

    With mask_only, anomalous-image locations outside `down_mask` are
    treated as normal locations (hinged at tau_plus) instead.
    """
    _checked_pair(scores_normal, scores_anomalous, down_mask)
    normal_term = torch.clamp(cfg.tau_plus - scores_normal, min=0.0)
    if cfg.anomalous_masking == "mask_only":
        if down_mask is None:
            raise ValueError("mask_only loss requires down_mask")
        m = down_mask.to(scores_anomalous.dtype)
        anomalous_term = m * torch.clamp(
            scores_anomalous - cfg.tau_minus, min=0.0
        ) + (1.0 - m) * torch.clamp(cfg.tau_plus - scores_anomalous, min=0.0)
    else:
        anomalous_term = torch.clamp(scores_anomalous - cfg.tau_minus, min=0.0)
    return (normal_term + anomalous_term).mean()


def cross_entropy_loss(
    scores_normal: torch.Tensor,
    scores_anomalous: torch.Tensor | None,
    cfg: LossConfig | None = None,
    down_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Binary cross-entropy with sigmoid(score) as probability-of-normal.

    Targets: 1 at normal locations, 0 at anomalous locations (outside-mask
    anomalous locations target 1 under mask_only). Mean over all scored
    location terms.
    """
    cfg = cfg or LossConfig(kind="cross_entropy")
    _checked_pair(scores_normal, scores_anomalous, down_mask)
    terms = [F.softplus(-scores_normal).reshape(-1)]
    if scores_anomalous is not None:
        if cfg.anomalous_masking == "mask_only":
            if down_mask is None:
                raise ValueError("mask_only loss requires down_mask")
            m = down_mask.to(scores_anomalous.dtype)
            anom = m * F.softplus(scores_anomalous) + (1.0 - m) * F.softplus(
                -scores_anomalous
            )
        else:
            anom = F.softplus(scores_anomalous)
        terms.append(anom.reshape(-1))
    return torch.cat(terms).mean()


def compute_loss(scores_normal, scores_anomalous, cfg: LossConfig, down_mask=None):
    if cfg.kind == "cross_entropy":
        return cross_entropy_loss(scores_normal, scores_anomalous, cfg, down_mask)
    return truncated_l1_loss(scores_normal, scores_anomalous, cfg, down_mask)


def downsample_mask(mask, target: tuple[int, int]) -> np.ndarray:
    """Reduce a pixel mask to the feature grid with max-pooling semantics:
    a cell is 1 iff its pixel region contains at least one defect pixel.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target must be positive, got {target}")
    if th <= h and tw <= w:
        out = np.zeros((th, tw), dtype=np.uint8)
        ys, xs = np.nonzero(mask)
        if len(ys):
            out[ys * th // h, xs * tw // w] = 1
        return out
    # target finer than the mask: nearest-pixel upsampling
    yy = (np.arange(th) * h) // th
    xx = (np.arange(tw) * w) // tw
    return (mask[np.ix_(yy, xx)] > 0).astype(np.uint8)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_steps: int
    val_i_auroc: float | None = None


class TrainingAborted(RuntimeError):
    """Non-finite loss or unusable inputs; carries diagnostics."""


def _extract_cached(extractor, records, label):
    cache = {}
    for rid, image in records:
        cache[rid] = extractor.extract(image, origin_id=rid).data.detach()
    LOGGER.info("cached %d %s feature maps", len(cache), label)
    return cache


def train(
    manifest: DatasetManifest,
    pool: AugmentationPool,
    model: ModelState,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    extractor: FeatureExtractor,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelState, list[EpochStats]]:
    """Optimize {A, B, discriminator} over the train split.

    Each normal image is paired per epoch with one of its own generated
    variants (round-robin over the pool). Deterministic given (cfg.seed,
    manifest, pool). Returns the trained state and per-epoch statistics.
    """
    train_entries = manifest.split("train")
    if not train_entries:
        raise TrainingAborted("train split is empty")
    bad = [e.id for e in train_entries if e.label != "normal"]
    if bad:
        raise TrainingAborted(f"train split contains anomalous records: {bad[:5]}")
    if not pool.entries:
        raise TrainingAborted(
            "augmentation pool is empty; run the generate stage first"
        )
    grouped = pool.by_source()
    missing = [e.id for e in train_entries if e.id not in grouped]
    if missing:
        raise TrainingAborted(
            f"augmentation pool does not cover train records: {missing[:5]}"
        )

    normal_feats = _extract_cached(
        extractor,
        (
            (e.id, load_image_record(e, manifest.root).image)
            for e in train_entries
        ),
        "normal",
    )
    h0, w0 = next(iter(normal_feats.values())).shape[:2]

    anom_feats: dict[str, torch.Tensor] = {}
    anom_masks: dict[str, torch.Tensor] = {}
    for src, entries in grouped.items():
        for i, entry in enumerate(entries):
            key = f"{src}#{i}"
            image = load_image(Path(pool.root) / entry.anomalous_path)
            anom_feats[key] = extractor.extract(image, origin_id=key).data.detach()
            mask = load_mask(Path(pool.root) / entry.mask_path)
            anom_masks[key] = torch.from_numpy(
                downsample_mask(mask, (h0, w0))
            ).to(torch.float32)
    LOGGER.info("cached %d anomalous feature maps", len(anom_feats))

    val_entries = manifest.split("val")
    val_feats = None
    val_labels = None
    if val_entries and len({e.label for e in val_entries}) == 2:
        val_feats = [
            extractor.extract(
                load_image_record(e, manifest.root).image, origin_id=e.id
            ).data.detach()
            for e in val_entries
        ]
        val_labels = [1 if e.label == "anomalous" else 0 for e in val_entries]

    backbone_checksum = extractor.checksum()

    optimizer = torch.optim.AdamW(
        [
            {"params": model.adaptor_parameters(), "lr": cfg.lr_adaptors},
            {"params": list(model.discriminator.parameters()),
             "lr": cfg.lr_discriminator},
        ],
        weight_decay=cfg.weight_decay,
    )

    ids = [e.id for e in train_entries]
    rng = torch.Generator().manual_seed(cfg.seed)
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")

    stats: list[EpochStats] = []
    best_val = -1.0
    global_step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train_mode()
            perm = torch.randperm(len(ids), generator=rng).tolist()
            losses = []
            for start in range(0, len(perm), cfg.batch_size):
                batch_ids = [ids[i] for i in perm[start : start + cfg.batch_size]]
                keys = [
                    f"{bid}#{(epoch - 1) % len(grouped[bid])}" for bid in batch_ids
                ]
                o_n = torch.stack([normal_feats[b] for b in batch_ids])
                o_a = torch.stack([anom_feats[k] for k in keys])
                dm = torch.stack([anom_masks[k] for k in keys])

                q_n = adapt_normal(o_n, model.adaptor_a)
                q_a = adapt_anomalous(o_a, model.adaptor_b)
                c = q_n.shape[-1]
                flat = torch.cat([q_n.reshape(-1, c), q_a.reshape(-1, c)])
                model.discriminator.train()
                scores = model.discriminator(flat)
                n_norm = q_n.reshape(-1, c).shape[0]
                s_n = scores[:n_norm].reshape(q_n.shape[:-1])
                s_a = scores[n_norm:].reshape(q_a.shape[:-1])

                loss = compute_loss(s_n, s_a, loss_cfg, dm)
                if not torch.isfinite(loss):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {global_step}: "
                        f"loss={loss.item()!r}, "
                        f"score range normal=({s_n.min():.3g},{s_n.max():.3g}) "
                        f"anomalous=({s_a.min():.3g},{s_a.max():.3g})"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                global_step += 1
                losses.append(float(loss.detach()))
                if log_file is not None:
                    log_file.write(
                        json.dumps(
                            {
                                "epoch": epoch,
                                "step": global_step,
                                "loss": losses[-1],
                                "lr_adaptors": cfg.lr_adaptors,
                                "lr_discriminator": cfg.lr_discriminator,
                                "wall_time": time.perf_counter() - t0,
                            }
                        )
                        + "\n"
                    )

            val_auroc = None
            if val_feats is not None:
                val_auroc = _val_i_auroc(model, val_feats, val_labels)
            stats.append(
                EpochStats(
                    epoch=epoch,
                    mean_loss=float(np.mean(losses)),
                    n_steps=len(losses),
                    val_i_auroc=val_auroc,
                )
            )
            LOGGER.info(
                "epoch %d/%d: loss %.5f%s",
                epoch,
                cfg.epochs,
                stats[-1].mean_loss,
                f", val I-AUROC {val_auroc:.4f}" if val_auroc is not None else "",
            )
            if checkpoint_dir is not None:
                model.save(Path(checkpoint_dir) / "last.ckpt")
                if val_auroc is not None and val_auroc > best_val:
                    best_val = val_auroc
                    model.save(Path(checkpoint_dir) / "best.ckpt")
    finally:
        if log_file is not None:
            log_file.close()

    if extractor.checksum() != backbone_checksum:
        raise TrainingAborted("backbone parameters changed during training")
    model.eval_mode()
    return model, stats


def _val_i_auroc(model: ModelState, val_feats, val_labels) -> float:
    model.eval_mode()
    scores = []
    with torch.no_grad():
        for feat in val_feats:
            q = model.adaptor_a(feat)
            c = q.shape[-1]
            s = -model.discriminator(q.reshape(-1, c))
            scores.append(float(s.max()))
    return metrics_mod.auroc(scores, val_labels)
