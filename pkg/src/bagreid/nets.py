"""Verification networks.

Both variants share a five-stage VGG16-style convolutional backbone whose
channel widths can be shrunk by ``backbone_scale`` for desk-scale training.
Batch normalization in the configured stages keeps one independent copy per
branch (probe / gallery) to absorb the domain gap; everything else — convs,
squeeze-excite gates, heads — is a single shared storage used by both
branches.

* basic variant: backbone -> flatten -> linear projection per branch,
  Euclidean distance between the two vectors, contrastive loss.
* merged variant: probe feature map minus gallery feature map (taken after
  the final pooling and squeeze-excite), flattened through a fully connected
  head into a two-way softmax giving P(same identity), cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

STAGE_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5")
_STAGE_CHANNELS = (64, 128, 256, 512, 512)
_STAGE_DEPTHS = (2, 2, 3, 3, 3)

CHECKPOINT_FORMAT_VERSION = 1


class NetworkError(ValueError):
    """Raised for invalid network configuration or input shapes."""


@dataclass
class NetworkConfig:
    variant: str = "merged"  # "basic" or "merged"
    use_se: bool = False
    se_reduction: int = 16
    freeze_stages: tuple[str, ...] = ("conv1", "conv2")
    bn_stages: tuple[str, ...] = ("conv4", "conv5")
    head_widths: tuple[int, ...] = (1024, 256)
    embed_dim: int = 256
    backbone_scale: float = 1.0
    merge_before_pool: bool = False
    contrastive_margin: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in ("basic", "merged"):
            raise NetworkError(f"unknown variant {self.variant!r}")
        for name in (*self.freeze_stages, *self.bn_stages):
            if name not in STAGE_NAMES:
                raise NetworkError(f"unknown stage {name!r}")
        if not 0.0 < self.backbone_scale <= 1.0:
            raise NetworkError("backbone_scale must be in (0, 1]")
        if self.se_reduction < 1:
            raise NetworkError("se_reduction must be >= 1")
        if not self.head_widths:
            raise NetworkError("head_widths must not be empty")
        self.freeze_stages = tuple(self.freeze_stages)
        self.bn_stages = tuple(self.bn_stages)
        self.head_widths = tuple(int(w) for w in self.head_widths)

    def stage_channels(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.backbone_scale)) for c in _STAGE_CHANNELS)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        data = dict(data)
        for key in ("freeze_stages", "bn_stages", "head_widths"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


class SqueezeExcite(nn.Module):
    """Channel gate: global average squeeze, bottleneck excitation, sigmoid scale.

    The bottleneck width is ceil(channels / reduction). Parameters are shared
    between branches by construction (one module instance serves both paths).
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, math.ceil(channels / reduction))
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(torch.relu(self.fc1(squeezed))))
        return x * gate[:, :, None, None]


class DualBatchNorm(nn.Module):
    """Batch normalization with independent probe/gallery parameter copies."""

    def __init__(self, channels: int):
        super().__init__()
        self.probe = nn.BatchNorm2d(channels)
        self.gallery = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor, branch: str) -> torch.Tensor:
        if branch == "probe":
            return self.probe(x)
        if branch == "gallery":
            return self.gallery(x)
        raise NetworkError(f"unknown branch {branch!r}")


class _Stage(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        depth: int,
        with_bn: bool,
        se: SqueezeExcite | None,
    ):
        super().__init__()
        convs = []
        bns = []
        for i in range(depth):
            convs.append(
                nn.Conv2d(in_channels if i == 0 else out_channels, out_channels, 3, padding=1)
            )
            if with_bn:
                bns.append(DualBatchNorm(out_channels))
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns) if with_bn else None
        self.pool = nn.MaxPool2d(2)
        self.se = se

    def forward(self, x: torch.Tensor, branch: str, skip_final_pool: bool = False) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.bns is not None:
                x = self.bns[i](x, branch)
            x = torch.relu(x)
        if skip_final_pool:
            return x
        x = self.pool(x)
        if self.se is not None:
            x = self.se(x)
        return x


class SiameseBackbone(nn.Module):
    """Five conv stages with 2x pooling each; 224 input gives a 7x7 map."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        channels = config.stage_channels()
        stages = []
        in_c = 3
        for name, out_c, depth in zip(STAGE_NAMES, channels, _STAGE_DEPTHS):
            se = None
            if config.use_se and name in ("conv4", "conv5"):
                se = SqueezeExcite(out_c, config.se_reduction)
            stages.append(_Stage(in_c, out_c, depth, name in config.bn_stages, se))
            in_c = out_c
        self.stages = nn.ModuleDict(dict(zip(STAGE_NAMES, stages)))
        self.out_channels = channels[-1]
        for name in config.freeze_stages:
            for param in self.stages[name].parameters():
                param.requires_grad_(False)

    def forward(self, x: torch.Tensor, branch: str, skip_final_pool: bool = False) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise NetworkError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        for i, name in enumerate(STAGE_NAMES):
            last = i == len(STAGE_NAMES) - 1
            x = self.stages[name](x, branch, skip_final_pool=skip_final_pool and last)
        return x


def _flat_dim(input_size: int, out_channels: int) -> int:
    if input_size % 32 != 0 or input_size < 32:
        raise NetworkError(f"input size must be a positive multiple of 32, got {input_size}")
    side = input_size // 32
    return side * side * out_channels


class BasicSiameseNet(nn.Module):
    """Two shared-weight branches producing feature vectors compared by
    Euclidean distance."""

    def __init__(self, config: NetworkConfig, input_size: int = 224):
        super().__init__()
        self.config = config
        self.input_size = input_size
        self.backbone = SiameseBackbone(config)
        self.project = nn.Linear(_flat_dim(input_size, self.backbone.out_channels), config.embed_dim)

    def embed(self, x: torch.Tensor, branch: str) -> torch.Tensor:
        features = self.backbone(x, branch)
        return self.project(features.flatten(1))

    def forward(
        self, probe: torch.Tensor, gallery: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        probe_vec = self.embed(probe, "probe")
        gallery_vec = self.embed(gallery, "gallery")
        distance = torch.linalg.vector_norm(probe_vec - gallery_vec, dim=1)
        return distance, probe_vec, gallery_vec


class MergedSiameseNet(nn.Module):
    """Element-wise probe-minus-gallery merge followed by a classification head.

    The subtraction is signed and taken in fixed probe-minus-gallery order, so
    swapping the arguments is not guaranteed to give the same probability.
    """

    def __init__(self, config: NetworkConfig, input_size: int = 224):
        super().__init__()
        self.config = config
        self.input_size = input_size
        self.backbone = SiameseBackbone(config)
        widths = [_flat_dim(input_size, self.backbone.out_channels), *config.head_widths]
        layers: list[nn.Module] = []
        for a, b in zip(widths, widths[1:]):
            layers.extend([nn.Linear(a, b), nn.ReLU()])
        layers.append(nn.Linear(widths[-1], 2))
        self.head = nn.Sequential(*layers)

    def branch_map(self, x: torch.Tensor, branch: str) -> torch.Tensor:
        return self.backbone(x, branch, skip_final_pool=self.config.merge_before_pool)

    def merge(self, probe_map: torch.Tensor, gallery_map: torch.Tensor) -> torch.Tensor:
        merged = probe_map - gallery_map
        if self.config.merge_before_pool:
            merged = self.backbone.stages["conv5"].pool(merged)
            se = self.backbone.stages["conv5"].se
            if se is not None:
                merged = se(merged)
        return merged

    def logits(self, probe: torch.Tensor, gallery: torch.Tensor) -> torch.Tensor:
        merged = self.merge(self.branch_map(probe, "probe"), self.branch_map(gallery, "gallery"))
        return self.head(merged.flatten(1))

    def forward(self, probe: torch.Tensor, gallery: torch.Tensor) -> torch.Tensor:
        """P(same identity) for each pair in the batch."""
        return torch.softmax(self.logits(probe, gallery), dim=1)[:, 1]


def build_network(config: NetworkConfig, input_size: int = 224) -> nn.Module:
    if config.variant == "basic":
        return BasicSiameseNet(config, input_size)
    return MergedSiameseNet(config, input_size)


def contrastive_loss(
    distance: torch.Tensor, label: torch.Tensor, margin: float = 1.0
) -> torch.Tensor:
    """y * d^2 + (1 - y) * max(0, margin - d)^2, elementwise.

    ``label`` is 1 for same-identity pairs, 0 for different.
    """
    if margin <= 0:
        raise NetworkError("margin must be positive")
    if torch.any(distance < 0):
        raise NetworkError("distances must be non-negative")
    label = label.to(distance.dtype)
    pull = label * distance**2
    push = (1.0 - label) * torch.clamp(margin - distance, min=0.0) ** 2
    return pull + push


def cross_entropy_loss(
    probability: torch.Tensor, label: torch.Tensor, eps: float = 1e-7
) -> torch.Tensor:
    """-[y log p + (1 - y) log(1 - p)] with p clamped to [eps, 1 - eps]."""
    p = torch.clamp(probability, eps, 1.0 - eps)
    label = label.to(p.dtype)
    return -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p))


# ---------------------------------------------------------------------------
# Parameter bookkeeping


@dataclass
class SharingReport:
    shared: list[str] = field(default_factory=list)
    branch_pairs: list[tuple[str, str]] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def _is_branch_param(name: str) -> bool:
    return ".probe." in name or ".gallery." in name


def parameter_sharing_report(module: nn.Module) -> SharingReport:
    """Audit parameter storage: every batch-norm tensor must exist in two
    independent per-branch copies, every other tensor exactly once."""
    report = SharingReport()
    named = dict(module.named_parameters())
    storages: dict[int, list[str]] = {}
    for name, param in named.items():
        storages.setdefault(param.data_ptr(), []).append(name)
    for ptr, names in storages.items():
        if len(names) > 1:
            report.problems.append(f"aliased parameter storage: {names}")

    for name, param in sorted(named.items()):
        if not _is_branch_param(name):
            report.shared.append(name)
            continue
        if ".gallery." in name:
            continue  # handled via the probe twin
        twin = name.replace(".probe.", ".gallery.")
        if twin not in named:
            report.problems.append(f"branch parameter {name} has no gallery twin")
            continue
        if named[name].data_ptr() == named[twin].data_ptr():
            report.problems.append(f"branch parameters {name} and {twin} share storage")
            continue
        report.branch_pairs.append((name, twin))
    gallery_only = [
        n for n in named if ".gallery." in n and n.replace(".gallery.", ".probe.") not in named
    ]
    for name in gallery_only:
        report.problems.append(f"branch parameter {name} has no probe twin")
    return report


def frozen_parameter_names(module: nn.Module) -> list[str]:
    return [name for name, p in module.named_parameters() if not p.requires_grad]


def save_checkpoint(
    path: Path | str,
    net: nn.Module,
    input_size: int,
    extra: dict | None = None,
) -> None:
    report = parameter_sharing_report(net)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "net_config": net.config.to_dict(),
        "input_size": input_size,
        "state_dict": net.state_dict(),
        "sharing": {
            "shared": report.shared,
            "per_branch": [name for pair in report.branch_pairs for name in pair],
        },
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: Path | str) -> tuple[nn.Module, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise NetworkError(f"unsupported checkpoint format_version {version!r}")
    config = NetworkConfig.from_dict(payload["net_config"])
    net = build_network(config, payload["input_size"])
    net.load_state_dict(payload["state_dict"])
    return net, payload.get("extra", {})
