"""Run configuration: schema, defaults, validation, canonical digests.

Config files are JSON with the fixed key set below. An empty file means
"all defaults". Unknown keys are rejected with the offending dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration (schema violation, unknown key, bad value)."""


@dataclass
class DatasetSection:
    root: str | None = None
    manifest: str | None = None
    adapter: str = "generic"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass
class SynthesisSection:
    backend: str = "procedural"  # procedural | diffusion
    prompts: tuple[str, ...] = ("crack", "pothole", "raveling", "patch damage")
    negative_prompt: str = "smooth road, clean asphalt"
    count_per_image: int = 1
    mask_kind: str = "mixed"  # stroke | blob | mixed
    mask_min_area: float = 0.01
    mask_max_area: float = 0.15
    seed: int = 0
    endpoint: str | None = None  # falls back to ROADFUSION_DIFFUSION_ENDPOINT
    timeout_s: float = 60.0
    retries: int = 2


@dataclass
class ModelSection:
    architecture: str = "wide-resnet-50"
    weights_id: str = "wide_resnet50_2-imagenet"
    levels: tuple[int, ...] = (2, 3)
    patchsize: int = 3
    hidden_width: int | None = None  # None -> fused channel count
    input_size: int = 256


@dataclass
class TrainSection:
    lr_adaptors: float = 1e-4
    lr_discriminator: float = 2e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    loss: str = "truncated_l1"  # truncated_l1 | cross_entropy
    tau_plus: float = 0.5
    tau_minus: float = -0.5
    anomalous_masking: str = "mask_only"  # mask_only | all_locations


@dataclass
class InferenceSection:
    sigma: float = 4.0
    image_score_from: str = "grid"  # grid | smoothed


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    output_dir: str = "runs"


_SECTIONS = ("dataset", "synthesis", "model", "train", "inference")


def default_config() -> RunConfig:
    return RunConfig()


def _coerce(value: Any, target: type, path: str) -> Any:
    """Coerce a JSON value onto a dataclass field type, or raise."""
    if value is None:
        return None
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if target is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value


_FIELD_TYPES: dict[str, type] = {
    "dataset.root": str,
    "dataset.manifest": str,
    "dataset.adapter": str,
    "dataset.ratios": tuple,
    "dataset.seed": int,
    "synthesis.backend": str,
    "synthesis.prompts": tuple,
    "synthesis.negative_prompt": str,
    "synthesis.count_per_image": int,
    "synthesis.mask_kind": str,
    "synthesis.mask_min_area": float,
    "synthesis.mask_max_area": float,
    "synthesis.seed": int,
    "synthesis.endpoint": str,
    "synthesis.timeout_s": float,
    "synthesis.retries": int,
    "model.architecture": str,
    "model.weights_id": str,
    "model.levels": tuple,
    "model.patchsize": int,
    "model.hidden_width": int,
    "model.input_size": int,
    "train.lr_adaptors": float,
    "train.lr_discriminator": float,
    "train.weight_decay": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.seed": int,
    "train.loss": str,
    "train.tau_plus": float,
    "train.tau_minus": float,
    "train.anomalous_masking": str,
    "inference.sigma": float,
    "inference.image_score_from": str,
    "output_dir": str,
}


def config_from_dict(data: dict, provenance: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from a plain dict, rejecting unknown keys.

    `provenance` (optional out-param) records "user" for every key the dict
    actually set; callers fill the remaining keys with "default".
    """
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    cfg = default_config()
    for key, value in data.items():
        if key == "output_dir":
            cfg.output_dir = _coerce(value, str, "output_dir")
            if provenance is not None:
                provenance["output_dir"] = "user"
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object, got {value!r}")
        section = getattr(cfg, key)
        known = {f.name for f in fields(section)}
        for sub, sub_value in value.items():
            path = f"{key}.{sub}"
            if sub not in known:
                raise ConfigError(f"unknown config key: {path}")
            setattr(section, sub, _coerce(sub_value, _FIELD_TYPES[path], path))
            if provenance is not None:
                provenance[path] = "user"
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Check cross-field invariants; raise ConfigError naming the keys."""
    d, s, m, t, i = cfg.dataset, cfg.synthesis, cfg.model, cfg.train, cfg.inference
    ratios = d.ratios
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError("dataset.ratios: need three nonnegative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"dataset.ratios: must sum to 1, got {sum(ratios)!r}")

    if s.backend not in ("procedural", "diffusion"):
        raise ConfigError(f"synthesis.backend: unknown backend {s.backend!r}")
    if s.mask_kind not in ("stroke", "blob", "mixed"):
        raise ConfigError(f"synthesis.mask_kind: unknown kind {s.mask_kind!r}")
    if not s.prompts:
        raise ConfigError("synthesis.prompts: must be nonempty")
    if s.count_per_image < 1:
        raise ConfigError("synthesis.count_per_image: must be >= 1")
    if not (0.0 < s.mask_min_area <= s.mask_max_area <= 0.3):
        raise ConfigError(
            "synthesis.mask_min_area/mask_max_area: need 0 < min <= max <= 0.3"
        )
    if s.timeout_s <= 0:
        raise ConfigError("synthesis.timeout_s: must be positive")
    if s.retries < 0:
        raise ConfigError("synthesis.retries: must be >= 0")

    if not m.levels:
        raise ConfigError("model.levels: must be nonempty")
    if any(not isinstance(l, int) for l in m.levels):
        raise ConfigError("model.levels: must be integers")
    if m.patchsize < 1 or m.patchsize % 2 == 0:
        raise ConfigError(f"model.patchsize: must be odd and >= 1, got {m.patchsize}")
    if m.hidden_width is not None and m.hidden_width < 1:
        raise ConfigError("model.hidden_width: must be positive")
    if m.input_size < 8:
        raise ConfigError("model.input_size: must be >= 8")

    for key in ("lr_adaptors", "lr_discriminator"):
        if getattr(t, key) <= 0:
            raise ConfigError(f"train.{key}: must be positive")
    if t.weight_decay < 0:
        raise ConfigError("train.weight_decay: must be >= 0")
    if t.batch_size < 1:
        raise ConfigError("train.batch_size: must be >= 1")
    if t.epochs < 1:
        raise ConfigError(f"train.epochs: must be >= 1, got {t.epochs}")
    if t.loss not in ("truncated_l1", "cross_entropy"):
        raise ConfigError(f"train.loss: unknown loss {t.loss!r}")
    if t.tau_plus <= t.tau_minus:
        raise ConfigError(
            f"train.tau_plus must exceed train.tau_minus "
            f"(got tau_plus={t.tau_plus}, tau_minus={t.tau_minus})"
        )
    if t.anomalous_masking not in ("mask_only", "all_locations"):
        raise ConfigError(
            f"train.anomalous_masking: unknown mode {t.anomalous_masking!r}"
        )

    if i.sigma <= 0:
        raise ConfigError("inference.sigma: must be positive")
    if i.image_score_from not in ("grid", "smoothed"):
        raise ConfigError(
            f"inference.image_score_from: unknown policy {i.image_score_from!r}"
        )


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a `--set key.path=value` override; value parsed as JSON, else string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_override(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part} is not a section")
    node[parts[-1]] = value


def load_config(
    path: str | Path | None,
    overrides: list[str] | None = None,
) -> tuple[RunConfig, dict[str, str]]:
    """Load + validate a config file, returning (config, provenance).

    Provenance maps every leaf key to "user" or "default". A missing or
    empty file yields the full-default config.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text().strip()
        if text:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    for item in overrides or []:
        key, value = parse_override(item)
        _apply_override(data, key, value)
    provenance: dict[str, str] = {}
    cfg = config_from_dict(data, provenance)
    for key in _FIELD_TYPES:
        provenance.setdefault(key, "default")
    return cfg, provenance


def to_canonical_dict(cfg: RunConfig) -> dict:
    """Plain nested dict with deterministic content (tuples -> lists)."""
    out = dataclasses.asdict(cfg)

    def _clean(node):
        if isinstance(node, dict):
            return {k: _clean(v) for k, v in sorted(node.items())}
        if isinstance(node, tuple):
            return [_clean(v) for v in node]
        return node

    return _clean(out)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(cfg: RunConfig) -> str:
    """Stable hash of the normalized config content."""
    return sha256_text(canonical_json(to_canonical_dict(cfg)))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def echo_lines(cfg: RunConfig, provenance: dict[str, str]) -> list[str]:
    """Normalized key=value listing with default/user provenance markers."""
    flat = []
    canon = to_canonical_dict(cfg)
    for section in (*_SECTIONS, "output_dir"):
        node = canon[section]
        if not isinstance(node, dict):
            flat.append((section, node))
            continue
        for sub, value in node.items():
            flat.append((f"{section}.{sub}", value))
    return [
        f"{key} = {canonical_json(value)}  [{provenance.get(key, 'default')}]"
        for key, value in flat
    ]
