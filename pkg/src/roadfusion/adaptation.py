"""Dual feature adaptors and the patch-level discriminator.

Adaptor A specializes features of normal images, Adaptor B features of
generated anomalous images; both are single bias-free linear maps applied
independently per spatial location. The discriminator is a 2-layer MLP
(batch norm + leaky ReLU 0.2) emitting one scalar normality value per
location; higher means more normal.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .config import ConfigError
from .features import AggregatedFeatureMap, BackboneSpec, feature_dim_for

CHECKPOINT_FORMAT = "roadfusion-ckpt-v1"


def _data_of(o) -> torch.Tensor:
    return o.data if isinstance(o, AggregatedFeatureMap) else o


class FeatureAdaptor(nn.Module):
    """Single bias-free linear layer applied per location (role A or B)."""

    def __init__(
        self,
        dim: int,
        role: str,
        generator: torch.Generator | None = None,
        init_std: float = 1e-4,
    ):
        super().__init__()
        if role not in ("A", "B"):
            raise ValueError(f"adaptor role must be 'A' or 'B', got {role!r}")
        if dim < 1:
            raise ValueError(f"feature dim must be positive, got {dim}")
        self.role = role
        self.linear = nn.Linear(dim, dim, bias=False)
        if generator is not None:
            with torch.no_grad():
                noise = torch.randn((dim, dim), generator=generator) * init_std
                self.linear.weight.copy_(torch.eye(dim) + noise)
        self.calls = 0

    @property
    def weight(self) -> torch.Tensor:
        return self.linear.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return self.linear(x)


def adapt_normal(o, adaptor: FeatureAdaptor) -> torch.Tensor:
    """Apply Adaptor A to a normal-image feature map (location-wise)."""
    if adaptor.role != "A":
        raise ValueError(
            f"adaptor role violation: adapt_normal requires role A, got "
            f"{adaptor.role}"
        )
    return adaptor(_data_of(o))


def adapt_anomalous(o, adaptor: FeatureAdaptor) -> torch.Tensor:
    """Apply Adaptor B to a generated-anomalous feature map (location-wise)."""
    if adaptor.role != "B":
        raise ValueError(
            f"adaptor role violation: adapt_anomalous requires role B, got "
            f"{adaptor.role}"
        )
    return adaptor(_data_of(o))


class Discriminator(nn.Module):
    """2-layer MLP normality estimator: (N, C) -> (N,) scalars.

    No final activation: the training hinges at +/-0.5 need an unbounded
    output. Batch-norm statistics update only in training mode.
    """

    def __init__(
        self, in_dim: int, hidden: int | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        hidden = in_dim if hidden is None else hidden
        if in_dim < 1 or hidden < 1:
            raise ValueError("discriminator dims must be positive")
        self.layer1 = nn.Linear(in_dim, hidden, bias=False)
        self.norm = nn.BatchNorm1d(hidden)
        self.act = nn.LeakyReLU(0.2)
        self.layer2 = nn.Linear(hidden, 1, bias=True)
        if generator is not None:
            with torch.no_grad():
                for layer in (self.layer1, self.layer2):
                    bound = 1.0 / (layer.in_features**0.5)
                    layer.weight.copy_(
                        (torch.rand(layer.weight.shape, generator=generator) * 2 - 1)
                        * bound
                    )
                    if layer.bias is not None:
                        layer.bias.copy_(
                            (torch.rand(layer.bias.shape, generator=generator) * 2 - 1)
                            * bound
                        )

    @property
    def in_dim(self) -> int:
        return self.layer1.in_features

    @property
    def hidden(self) -> int:
        return self.layer1.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layer2(self.act(self.norm(self.layer1(x)))).squeeze(-1)


def discriminate(q, disc: Discriminator, mode: str = "eval") -> torch.Tensor:
    """Score every spatial location of q; returns the leading shape of q.

    Accepts (H0, W0, C) or batched (N, H0, W0, C). Eval mode uses frozen
    batch-norm statistics and is deterministic.
    """
    data = _data_of(q)
    if data.shape[-1] != disc.in_dim:
        raise ValueError(
            f"channel dim {data.shape[-1]} does not match discriminator "
            f"input {disc.in_dim}"
        )
    lead = data.shape[:-1]
    flat = data.reshape(-1, disc.in_dim)
    if mode == "train":
        if flat.shape[0] < 2:
            raise ValueError(
                "train mode needs more than one location: batch normalization "
                "statistics are undefined for a single sample"
            )
        disc.train()
    elif mode == "eval":
        disc.eval()
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return disc(flat).reshape(lead)


@dataclass
class ModelState:
    """All trainable parameters plus the frozen backbone identity."""

    adaptor_a: FeatureAdaptor
    adaptor_b: FeatureAdaptor
    discriminator: Discriminator
    backbone_spec: BackboneSpec
    config_digest: str = ""

    def train_mode(self) -> None:
        self.adaptor_a.train()
        self.adaptor_b.train()
        self.discriminator.train()

    def eval_mode(self) -> None:
        self.adaptor_a.eval()
        self.adaptor_b.eval()
        self.discriminator.eval()

    def adaptor_parameters(self):
        return list(self.adaptor_a.parameters()) + list(self.adaptor_b.parameters())

    def parameter_arrays(self) -> dict[str, torch.Tensor]:
        d = self.discriminator
        return {
            "a.weight": self.adaptor_a.weight,
            "b.weight": self.adaptor_b.weight,
            "d.layer1.weight": d.layer1.weight,
            "d.norm.weight": d.norm.weight,
            "d.norm.bias": d.norm.bias,
            "d.norm.running_mean": d.norm.running_mean,
            "d.norm.running_var": d.norm.running_var,
            "d.norm.num_batches_tracked": d.norm.num_batches_tracked,
            "d.layer2.weight": d.layer2.weight,
            "d.layer2.bias": d.layer2.bias,
        }

    def digest(self) -> str:
        """Order-independent digest over all parameter bytes."""
        h = hashlib.sha256()
        for name, t in sorted(self.parameter_arrays().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "arrays": {
                k: v.detach().cpu().clone()
                for k, v in self.parameter_arrays().items()
            },
            "backbone_spec": self.backbone_spec.to_dict(),
            "config_digest": self.config_digest,
            "feature_dim": self.adaptor_a.weight.shape[0],
            "hidden_width": self.discriminator.hidden,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "ModelState":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
        dim = int(payload["feature_dim"])
        hidden = int(payload["hidden_width"])
        state = cls(
            adaptor_a=FeatureAdaptor(dim, "A"),
            adaptor_b=FeatureAdaptor(dim, "B"),
            discriminator=Discriminator(dim, hidden),
            backbone_spec=BackboneSpec.from_dict(payload["backbone_spec"]),
            config_digest=payload["config_digest"],
        )
        arrays = payload["arrays"]
        with torch.no_grad():
            for name, target in state.parameter_arrays().items():
                target.copy_(arrays[name])
        state.eval_mode()
        return state


def init_model(
    backbone_spec: BackboneSpec,
    seed: int = 0,
    feature_dim: int | None = None,
    hidden_width: int | None = None,
    config_digest: str = "",
) -> ModelState:
    """Seeded model initialization: near-identity adaptors, fan-in MLP.

    Identical (spec, dims, seed) always produce bitwise-equal states.
    """
    expected = feature_dim_for(backbone_spec)
    if feature_dim is not None and feature_dim != expected:
        raise ConfigError(
            f"feature_dim {feature_dim} does not match backbone spec total "
            f"{expected}"
        )
    dim = expected
    hidden = dim if hidden_width is None else hidden_width
    if hidden < 1:
        raise ConfigError(f"hidden width must be positive, got {hidden}")
    g = torch.Generator().manual_seed(seed)
    return ModelState(
        adaptor_a=FeatureAdaptor(dim, "A", generator=g),
        adaptor_b=FeatureAdaptor(dim, "B", generator=g),
        discriminator=Discriminator(dim, hidden, generator=g),
        backbone_spec=backbone_spec,
        config_digest=config_digest,
    )
