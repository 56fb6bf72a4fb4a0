"""Backbone, task heads, and the four initialization regimes.

The backbone is a 50-layer residual network whose parameter names mirror the
de-facto standard layout (conv1/bn1/layer1..layer4, bottleneck blocks with
conv1..conv3 and a downsample branch), so externally trained weights of the
same family can be loaded blob-for-blob. ``base_width`` scales every channel
count; 64 is the standard network (2048-d embeddings), small values give
desk-scale models with the same shape grammar (width 8 -> 256-d).
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data import TASK_KINDS
from .errors import ConfigError, DataError

REGIMES = ("scratch", "general", "fundus", "general_fundus")

# provenance stages recorded on every bundle, in training order
PROVENANCE = {
    "scratch": ("scratch_init",),
    "general": ("general_init",),
    "fundus": ("scratch_init", "fundus_pretrained"),
    "general_fundus": ("general_init", "fundus_pretrained"),
}

HEAD_WIDTHS = {"abnormality": 2, "multi_disease": 8}

_STAGE_BLOCKS = (3, 4, 6, 3)   # the 50-layer configuration
_STAGE_STRIDES = (1, 2, 2, 2)
_EXPANSION = 4


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-component stream from one user seed."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


class Bottleneck(nn.Module):
    def __init__(self, in_channels: int, planes: int, stride: int = 1,
                 downsample: nn.Module | None = None):
        super().__init__()
        out_channels = planes * _EXPANSION
        self.conv1 = nn.Conv2d(in_channels, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class ResNetBackbone(nn.Module):
    """Residual encoder exposing the four stage outputs for decoder skips."""

    def __init__(self, base_width: int = 64):
        super().__init__()
        if base_width < 1:
            raise ConfigError("base_width must be positive")
        self.base_width = base_width
        self.conv1 = nn.Conv2d(3, base_width, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(base_width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)

        in_ch = base_width
        for idx, (blocks, stride) in enumerate(zip(_STAGE_BLOCKS, _STAGE_STRIDES)):
            planes = base_width * (2 ** idx)
            layer, in_ch = self._make_stage(in_ch, planes, blocks, stride)
            setattr(self, f"layer{idx + 1}", layer)
        self.embedding_dim = in_ch

    @staticmethod
    def _make_stage(in_ch: int, planes: int, blocks: int, stride: int):
        out_ch = planes * _EXPANSION
        downsample = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        layers = [Bottleneck(in_ch, planes, stride, downsample)]
        layers += [Bottleneck(out_ch, planes) for _ in range(blocks - 1)]
        return nn.Sequential(*layers), out_ch

    def stage_channels(self) -> tuple[int, int, int, int]:
        return tuple(self.base_width * (2 ** i) * _EXPANSION for i in range(4))

    def forward_stages(self, x):
        x = self.relu(self.bn1(self.conv1(x)))
        x = self.maxpool(x)
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return c1, c2, c3, c4

    def forward(self, x):
        return self.forward_stages(x)[3]


class LinearHead(nn.Module):
    def __init__(self, in_features: int, n_logits: int):
        super().__init__()
        self.fc = nn.Linear(in_features, n_logits)

    def forward(self, x):
        return self.fc(x)


class MLPHead(nn.Module):
    """Nonlinear probe variant: one hidden layer over frozen embeddings."""

    def __init__(self, in_features: int, n_logits: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(in_features // 4, n_logits)
        self.fc1 = nn.Linear(in_features, hidden)
        self.relu = nn.ReLU(inplace=True)
        self.fc2 = nn.Linear(hidden, n_logits)

    def forward(self, x):
        return self.fc2(self.relu(self.fc1(x)))


class _DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.relu(self.bn1(self.conv1(x)))
        return self.relu(self.bn2(self.conv2(x)))


class UNetDecoder(nn.Module):
    """Bilinear-upsample decoder with skips from the four encoder stages.

    Channel widths halve at each stage; the last two blocks carry the map
    from 1/4 scale back to input resolution without skips.
    """

    def __init__(self, stage_channels: tuple[int, int, int, int]):
        super().__init__()
        s1, s2, s3, s4 = stage_channels
        widths = (s4 // 2, s4 // 4, s4 // 8, s4 // 16, s4 // 32)
        self.up3 = _DecoderBlock(s4 + s3, widths[0])
        self.up2 = _DecoderBlock(widths[0] + s2, widths[1])
        self.up1 = _DecoderBlock(widths[1] + s1, widths[2])
        self.up_half = _DecoderBlock(widths[2], widths[3])
        self.up_full = _DecoderBlock(widths[3], widths[4])
        self.out_conv = nn.Conv2d(widths[4], 1, 1)

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, stages):
        c1, c2, c3, c4 = stages
        x = self.up3(torch.cat([self._up(c4), c3], dim=1))
        x = self.up2(torch.cat([self._up(x), c2], dim=1))
        x = self.up1(torch.cat([self._up(x), c1], dim=1))
        x = self.up_half(self._up(x))
        x = self.up_full(self._up(x))
        return self.out_conv(x)


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministic Kaiming fan-in normal init for conv/linear weights,
    zero biases, unit BN scales. Same seed, same bits."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


def to_model_input(batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Accept B x H x W x 3 arrays (preprocessing output) or B x 3 x H x W
    tensors; return a float32 NCHW tensor."""
    if isinstance(batch, torch.Tensor):
        t = batch
        if t.ndim != 4 or t.shape[1] != 3:
            raise DataError(f"expected B x 3 x H x W tensor, got {tuple(t.shape)}")
        return t.float()
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise DataError(f"expected B x H x W x 3 array, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()


@dataclass(eq=False)
class ModelBundle:
    backbone: ResNetBackbone
    head: nn.Module
    regime: str
    task_kind: str
    provenance: tuple[str, ...]
    resolution: int
    base_width: int
    seed: int
    head_kind: str = "linear"
    stage_history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.provenance:
            raise ConfigError("provenance must be non-empty")
        if self.provenance[0] not in ("scratch_init", "general_init"):
            raise ConfigError(
                f"provenance must start with an init stage, got {self.provenance[0]!r}")

    @property
    def embedding_dim(self) -> int:
        return self.backbone.embedding_dim

    @property
    def is_segmentation(self) -> bool:
        return self.task_kind == "vessel_segmentation"

    def modules(self) -> dict[str, nn.Module]:
        return {"backbone": self.backbone, "head": self.head}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits: B x C for classification, B x 1 x H x W for segmentation."""
        if self.is_segmentation:
            return self.head(self.backbone.forward_stages(x))
        feats = self.backbone(x)
        pooled = feats.mean(dim=(2, 3))
        return self.head(pooled)

    def predict(self, batch) -> np.ndarray:
        """Eval-mode forward on an NHWC batch; returns numpy logits
        (B x C, or B x H x W x 1 for segmentation)."""
        x = to_model_input(batch)
        self.backbone.eval()
        self.head.eval()
        with torch.no_grad():
            out = self.forward(x)
        if self.is_segmentation:
            return out.permute(0, 2, 3, 1).numpy()
        return out.numpy()


def embed(bundle: ModelBundle, batch) -> np.ndarray:
    """Global-average-pooled final-stage features, B x D, eval mode."""
    x = to_model_input(batch)
    if x.shape[2] != bundle.resolution or x.shape[3] != bundle.resolution:
        warnings.warn(
            f"batch resolution {tuple(x.shape[2:])} differs from the bundle's "
            f"training resolution {bundle.resolution}; proceeding (fully "
            "convolutional backbone)")
    bundle.backbone.eval()
    with torch.no_grad():
        feats = bundle.backbone(x)
        return feats.mean(dim=(2, 3)).numpy()


def _make_head(task_kind: str, embedding_dim: int, head_kind: str) -> nn.Module:
    if task_kind not in HEAD_WIDTHS:
        raise ConfigError(f"no classification head for task {task_kind!r}")
    n_logits = HEAD_WIDTHS[task_kind]
    if head_kind == "linear":
        return LinearHead(embedding_dim, n_logits)
    if head_kind == "mlp":
        return MLPHead(embedding_dim, n_logits)
    raise ConfigError(f"unknown head kind {head_kind!r}")


def _check_regime(regime: str, task_kind: str):
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task {task_kind!r}; expected one of {TASK_KINDS}")


def _init_backbone_for_regime(backbone: ResNetBackbone, regime: str,
                              resolution: int, base_width: int, seed: int,
                              store) -> tuple[str, ...]:
    """Fill backbone weights per regime; returns the provenance tuple.

    Scratch draws fresh weights. The other three regimes copy blobs from the
    checkpoint store and must match it bit-for-bit.
    """
    from .checkpoints import general_checkpoint_id, upstream_checkpoint_id

    seeded_init_(backbone, derive_seed(seed, "backbone"))
    if regime == "scratch":
        return PROVENANCE[regime]
    if store is None:
        raise ConfigError(f"regime {regime!r} needs a checkpoint store")
    if regime == "general":
        ckpt_id = general_checkpoint_id(base_width)
    else:
        ckpt_id = upstream_checkpoint_id(regime, resolution, base_width)
    blobs, meta = store.load(ckpt_id)
    store.load_module(backbone, blobs, prefix="backbone.")
    recorded = meta.get("provenance")
    return tuple(recorded) if recorded else PROVENANCE[regime]


def build_model(regime: str, task_kind: str, resolution: int, *,
                seed: int = 0, base_width: int = 64, head_kind: str = "linear",
                store=None) -> ModelBundle:
    """Construct a classification bundle under one of the four regimes.

    Heads are always freshly initialized; pretrained regimes load backbone
    blobs from ``store`` and raise a resolvable error naming the expected
    checkpoint id when it is absent.
    """
    _check_regime(regime, task_kind)
    if task_kind == "vessel_segmentation":
        return build_segmentation_model(regime, resolution, seed=seed,
                                        base_width=base_width, store=store)
    backbone = ResNetBackbone(base_width)
    provenance = _init_backbone_for_regime(backbone, regime, resolution,
                                           base_width, seed, store)
    head = _make_head(task_kind, backbone.embedding_dim, head_kind)
    seeded_init_(head, derive_seed(seed, f"head:{task_kind}:{head_kind}"))
    return ModelBundle(backbone=backbone, head=head, regime=regime,
                       task_kind=task_kind, provenance=provenance,
                       resolution=resolution, base_width=base_width,
                       seed=seed, head_kind=head_kind)


def build_segmentation_model(regime: str, resolution: int, *, seed: int = 0,
                             base_width: int = 64, store=None) -> ModelBundle:
    """Encoder-decoder bundle: regime-initialized encoder, fresh decoder with
    skip connections from the four residual stages."""
    _check_regime(regime, "vessel_segmentation")
    if resolution % 32 != 0:
        raise DataError(f"segmentation resolution must be divisible by 32, "
                        f"got {resolution}")
    backbone = ResNetBackbone(base_width)
    provenance = _init_backbone_for_regime(backbone, regime, resolution,
                                           base_width, seed, store)
    decoder = UNetDecoder(backbone.stage_channels())
    seeded_init_(decoder, derive_seed(seed, "head:segmentation"))
    return ModelBundle(backbone=backbone, head=decoder, regime=regime,
                       task_kind="vessel_segmentation", provenance=provenance,
                       resolution=resolution, base_width=base_width,
                       seed=seed, head_kind="decoder")
