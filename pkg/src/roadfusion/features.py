"""Frozen-backbone multi-scale local features: neighborhood aggregation + fusion.

A pretrained (and permanently frozen) backbone yields feature maps at a
chosen subset of hierarchy levels; each map is averaged over a p x p
neighborhood per location, resized to a common grid and concatenated
channel-wise into one local-feature map per image.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError

WEIGHTS_DIR_ENV = "ROADFUSION_WEIGHTS_DIR"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    """Identity of the frozen feature hierarchy."""

    architecture: str = "wide-resnet-50"
    levels: tuple[int, ...] = (2, 3)
    weights_id: str = "wide_resnet50_2-imagenet"

    def __post_init__(self):
        if not self.levels:
            raise ValueError("levels must be nonempty")
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "levels": list(self.levels),
            "weights_id": self.weights_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            architecture=d["architecture"],
            levels=tuple(d["levels"]),
            weights_id=d["weights_id"],
        )


@dataclass
class AggregatedFeatureMap:
    """Fused multi-level local-feature grid for one image."""

    data: torch.Tensor  # (H0, W0, C) float32
    origin_id: str = ""
    levels_used: tuple[int, ...] = ()

    @property
    def channels(self) -> int:
        return int(self.data.shape[-1])


class _ResNetLevels(nn.Module):
    """Exposes residual-stage outputs of a torchvision resnet as levels 1-4."""

    def __init__(self, resnet: nn.Module, levels: tuple[int, ...]):
        super().__init__()
        self.stem = nn.Sequential(
            resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool
        )
        self.stages = nn.ModuleList(
            [resnet.layer1, resnet.layer2, resnet.layer3, resnet.layer4]
        )
        self.levels = levels
        self._last = max(levels)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        out = {}
        x = self.stem(x)
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in self.levels:
                out[i] = x
            if i == self._last:
                break
        return out


class _TinyLevels(nn.Module):
    """Small frozen conv pyramid for tests and desk-scale experiments.

    Three stages at strides /2, /4, /8 with 32/64/128 channels; weights are
    always seeded-random (there is no pretrained set for this architecture).
    """

    CHANNELS = {1: 32, 2: 64, 3: 128}

    def __init__(self, levels: tuple[int, ...]):
        super().__init__()

        def stage(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(cout, cout, 3, stride=1, padding=1),
                nn.ReLU(),
            )

        self.stages = nn.ModuleList([stage(3, 32), stage(32, 64), stage(64, 128)])
        self.levels = levels
        self._last = max(levels)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in self.levels:
                out[i] = x
            if i == self._last:
                break
        return out


@dataclass(frozen=True)
class _ArchInfo:
    channels: dict[int, int]
    strides: dict[int, int]
    build: "callable"


def _build_wide_resnet50(levels: tuple[int, ...]) -> nn.Module:
    from torchvision.models import wide_resnet50_2

    return _ResNetLevels(wide_resnet50_2(weights=None), levels)


ARCHITECTURES: dict[str, _ArchInfo] = {
    "wide-resnet-50": _ArchInfo(
        channels={1: 256, 2: 512, 3: 1024, 4: 2048},
        strides={1: 4, 2: 8, 3: 16, 4: 32},
        build=_build_wide_resnet50,
    ),
    "tiny": _ArchInfo(
        channels=dict(_TinyLevels.CHANNELS),
        strides={1: 2, 2: 4, 3: 8},
        build=lambda levels: _TinyLevels(levels),
    ),
}


def _arch_info(spec: BackboneSpec) -> _ArchInfo:
    try:
        info = ARCHITECTURES[spec.architecture]
    except KeyError:
        raise ConfigError(
            f"unknown backbone architecture {spec.architecture!r}; "
            f"known: {sorted(ARCHITECTURES)}"
        ) from None
    bad = [l for l in spec.levels if l not in info.channels]
    if bad:
        raise ConfigError(
            f"{spec.architecture} has no hierarchy level(s) {bad}; "
            f"available: {sorted(info.channels)}"
        )
    return info


def feature_dim_for(spec: BackboneSpec) -> int:
    """Fused channel count: sum of per-level channels over spec.levels."""
    info = _arch_info(spec)
    return sum(info.channels[l] for l in spec.levels)


def level_channels(spec: BackboneSpec) -> list[int]:
    info = _arch_info(spec)
    return [info.channels[l] for l in spec.levels]


def _seeded_init(module: nn.Module, seed: int) -> None:
    """Deterministic He-style init of all conv/linear weights from one seed."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = (2.0 / fan_in) ** 0.5
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def _load_pretrained(module: nn.Module, spec: BackboneSpec) -> None:
    weights_dir = os.environ.get(WEIGHTS_DIR_ENV, "")
    if not weights_dir:
        raise ConfigError(
            f"weights_id {spec.weights_id!r} requires a local weight cache; "
            f"set {WEIGHTS_DIR_ENV} to the directory holding "
            f"{spec.weights_id}.pth (or use weights_id 'untrained:<seed>')"
        )
    path = os.path.join(weights_dir, f"{spec.weights_id}.pth")
    if not os.path.exists(path):
        raise ConfigError(f"weight file not found: {path}")
    state = torch.load(path, map_location="cpu")
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    module.load_state_dict(state)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    """Instantiate, weight-load and freeze the backbone for `spec`."""
    info = _arch_info(spec)
    if spec.weights_id.startswith("untrained:"):
        try:
            seed = int(spec.weights_id.split(":", 1)[1])
        except ValueError:
            raise ConfigError(
                f"bad weights_id {spec.weights_id!r}: expected 'untrained:<int>'"
            ) from None
        module = info.build(spec.levels)
        _seeded_init(module, seed)
    else:
        if spec.architecture == "tiny":
            raise ConfigError(
                "the tiny backbone has no pretrained weight sets; "
                "use weights_id 'untrained:<seed>'"
            )
        from torchvision.models import wide_resnet50_2

        base = wide_resnet50_2(weights=None)
        _load_pretrained(base, spec)
        module = _ResNetLevels(base, spec.levels)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def neighborhood(
    h: int, w: int, p: int, bounds: tuple[int, int]
) -> set[tuple[int, int]]:
    """Valid coordinates within the p x p window centered at (h, w).

    Out-of-range coordinates are dropped (no padding).
    """
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patchsize must be odd, got {p}")
    hb, wb = bounds
    if not (0 <= h < hb and 0 <= w < wb):
        raise ValueError(f"location ({h}, {w}) outside bounds {bounds}")
    half = p // 2
    return {
        (hh, ww)
        for hh in range(max(0, h - half), min(hb - 1, h + half) + 1)
        for ww in range(max(0, w - half), min(wb - 1, w + half) + 1)
    }


def _as_hwc_tensor(array) -> torch.Tensor:
    if isinstance(array, np.ndarray):
        array = torch.from_numpy(np.ascontiguousarray(array))
    if array.ndim != 3:
        raise ValueError(f"expected an HxWxC map, got shape {tuple(array.shape)}")
    return array


def aggregate_patch_features(level_map, p: int) -> torch.Tensor:
    """Count-adaptive p x p neighborhood mean at every location.

    Border neighborhoods shrink to the valid index range, so the divisor
    adapts instead of padding with zeros. Output shape equals input shape.
    """
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patchsize must be odd, got {p}")
    x = _as_hwc_tensor(level_map)
    if p == 1:
        return x.clone()
    chw = x.permute(2, 0, 1).unsqueeze(0)
    pooled = F.avg_pool2d(
        chw, kernel_size=p, stride=1, padding=p // 2, count_include_pad=False
    )
    return pooled.squeeze(0).permute(1, 2, 0)


def fuse_levels(
    z_maps: list,
    target: tuple[int, int] | None = None,
    origin_id: str = "",
    levels_used: tuple[int, ...] = (),
) -> AggregatedFeatureMap:
    """Bilinearly resize each map to `target` and concatenate channel-wise.

    `target` defaults to the spatial size of the first (highest-resolution)
    map; channel order follows the input order.
    """
    if not z_maps:
        raise ValueError("z_maps must be nonempty")
    maps = [_as_hwc_tensor(z) for z in z_maps]
    if target is None:
        target = (int(maps[0].shape[0]), int(maps[0].shape[1]))
    resized = []
    for m in maps:
        chw = m.permute(2, 0, 1).unsqueeze(0)
        if tuple(chw.shape[-2:]) != tuple(target):
            chw = F.interpolate(
                chw, size=tuple(target), mode="bilinear", align_corners=False
            )
        resized.append(chw)
    fused = torch.cat(resized, dim=1).squeeze(0).permute(1, 2, 0).contiguous()
    return AggregatedFeatureMap(fused, origin_id=origin_id, levels_used=levels_used)


class FeatureExtractor:
    """Frozen backbone + aggregation pipeline producing fused feature maps.

    Instances are immutable after construction and safe for concurrent
    read-only inference.
    """

    def __init__(self, spec: BackboneSpec, input_size: int = 256, patchsize: int = 3):
        if patchsize < 1 or patchsize % 2 == 0:
            raise ValueError(f"patchsize must be odd, got {patchsize}")
        info = _arch_info(spec)
        min_stride = min(info.strides[l] for l in spec.levels)
        max_stride = max(info.strides[l] for l in spec.levels)
        if input_size < max_stride:
            raise ConfigError(
                f"input_size {input_size} smaller than backbone stride {max_stride}"
            )
        self.spec = spec
        self.input_size = int(input_size)
        self.patchsize = int(patchsize)
        self.backbone = build_backbone(spec)
        self.feature_dim = feature_dim_for(spec)
        self.grid_size = (input_size // min_stride, input_size // min_stride)
        self._mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)

    def _prepare(self, image) -> torch.Tensor:
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(
                f"expected an HxWx3 image in [0,1], got shape {tuple(image.shape)}"
            )
        x = image.to(torch.float32)
        if float(x.min()) < -1e-6 or float(x.max()) > 1.0 + 1e-6:
            raise ValueError("image values must lie in [0, 1]")
        x = x.permute(2, 0, 1).unsqueeze(0)
        if tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            x = F.interpolate(
                x,
                size=(self.input_size, self.input_size),
                mode="bilinear",
                align_corners=False,
            )
        return (x - self._mean) / self._std

    def extract_hierarchy(self, image) -> list[torch.Tensor]:
        """Per-level feature maps as (H_l, W_l, C_l) tensors, in level order."""
        x = self._prepare(image)
        with torch.no_grad():
            maps = self.backbone(x)
        return [maps[l].squeeze(0).permute(1, 2, 0) for l in self.spec.levels]

    def extract(self, image, origin_id: str = "") -> AggregatedFeatureMap:
        """Full pipeline: hierarchy -> neighborhood means -> fused grid."""
        hierarchy = self.extract_hierarchy(image)
        z_maps = [aggregate_patch_features(m, self.patchsize) for m in hierarchy]
        fused = fuse_levels(
            z_maps, origin_id=origin_id, levels_used=self.spec.levels
        )
        if fused.channels != self.feature_dim:
            raise ConfigError(
                f"fused channel count {fused.channels} does not match backbone "
                f"spec total {self.feature_dim}"
            )
        return fused

    def checksum(self) -> str:
        """Digest of all backbone parameters (frozen-ness witness)."""
        h = hashlib.sha256()
        for name, p in sorted(self.backbone.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def extract_features(
    image, extractor: FeatureExtractor, origin_id: str = ""
) -> AggregatedFeatureMap:
    """Functional alias for FeatureExtractor.extract."""
    return extractor.extract(image, origin_id=origin_id)
