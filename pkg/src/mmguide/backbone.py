"""ResNet mixed-convolution backbone: a 3D stem, one 3D residual block, three 2D ones."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .attention import DualAttention


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    base_width: int = 64
    num_classes: int = 2
    dropout: float = 0.5

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be >= 1")
        if self.num_classes != 2:
            raise ValueError("only binary grading is supported")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def widths(self) -> tuple[int, int, int, int]:
        c = self.base_width
        return c, 2 * c, 4 * c, 8 * c

    @property
    def feature_width(self) -> int:
        return 8 * self.base_width


class ShapeError(ValueError):
    pass


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 5:
        raise ShapeError(f"{where}: expected a rank-5 (N, C, D, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{where}: expected {expected} channels, got {x.shape[1]}")


class BasicUnit(nn.Module):
    """Two-conv residual unit. ``kernel`` is (3,3,3) in the 3D block, (1,3,3) in 2D blocks."""

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1)):
        super().__init__()
        pad = tuple(k // 2 for k in kernel)
        self.conv1 = nn.Conv3d(in_ch, out_ch, kernel, stride, pad, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, kernel, 1, pad, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        self.shortcut = None
        if in_ch != out_ch or tuple(stride) != (1, 1, 1):
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


def make_block(in_ch, out_ch, kernel, stride) -> nn.Sequential:
    return nn.Sequential(BasicUnit(in_ch, out_ch, kernel, stride), BasicUnit(out_ch, out_ch, kernel))


class Stem(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv3d(in_ch, out_ch, (3, 7, 7), (1, 2, 2), (1, 3, 3), bias=False),
            nn.BatchNorm3d(out_ch),
            nn.ReLU(inplace=False),
        )


class ClassifierHead(nn.Module):
    """Global average pool -> dropout -> affine map to class logits."""

    def __init__(self, in_features: int, num_classes: int = 2, dropout: float = 0.5):
        super().__init__()
        self.in_features = in_features
        self.dropout = dropout
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, f, dropout_active: bool = False, generator: Optional[torch.Generator] = None):
        _check_channels(f, self.in_features, "classifier")
        pooled = f.mean(dim=(2, 3, 4))
        if dropout_active and self.dropout > 0:
            keep = torch.rand(pooled.shape, generator=generator, dtype=pooled.dtype) >= self.dropout
            pooled = pooled * keep / (1.0 - self.dropout)
        return self.fc(pooled)


class RMC(nn.Module):
    """Backbone split as LFE (stem, layer1, layer2) and HFE (layer3, layer4).

    With ``attention=True`` a dual-attention block follows the HFE, giving the
    primary-modality semantic feature extractor.
    """

    def __init__(self, cfg: BackboneConfig, attention: bool = False, head: bool = True):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.widths
        self.stem = Stem(cfg.in_channels, c1)
        self.layer1 = make_block(c1, c1, (3, 3, 3), (1, 1, 1))
        self.layer2 = make_block(c1, c2, (1, 3, 3), (1, 2, 2))
        self.layer3 = make_block(c2, c3, (1, 3, 3), (1, 2, 2))
        self.layer4 = make_block(c3, c4, (1, 3, 3), (1, 2, 2))
        self.attention = DualAttention(c4) if attention else None
        self.head = ClassifierHead(c4, cfg.num_classes, cfg.dropout) if head else None

    def lfe(self, x):
        _check_channels(x, self.cfg.in_channels, "lfe")
        return self.layer2(self.layer1(self.stem(x)))

    def hfe(self, x):
        _check_channels(x, self.cfg.widths[1], "hfe")
        return self.layer4(self.layer3(x))

    def features(self, x):
        f = self.hfe(self.lfe(x))
        return f if self.attention is None else self.attention(f)

    def forward(self, x, dropout_active: Optional[bool] = None, generator=None):
        if dropout_active is None:
            dropout_active = self.training
        return self.head(self.features(x), dropout_active, generator)

    def classify(self, f, dropout_active: bool = False, generator=None):
        return torch.softmax(self.head(f, dropout_active, generator), dim=1)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.01)
            nn.init.zeros_(m.bias)


def build_backbone(cfg: BackboneConfig, seed: int = 0, attention: bool = False, head: bool = True) -> RMC:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = RMC(cfg, attention=attention, head=head)
        init_weights(model)
    return model


def lfe_forward(model: RMC, x):
    return model.lfe(x)


def hfe_forward(model: RMC, x):
    return model.hfe(x)


def classify(model: RMC, f, dropout_active: bool = False, generator=None):
    return model.classify(f, dropout_active, generator)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
