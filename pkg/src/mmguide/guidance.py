"""Cross-modality guidance, cumulative fusion and the weighted cross-entropy objectives."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import DualAttention
from .backbone import RMC, ShapeError, init_weights

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModalityRoles:
    primary: int
    secondaries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "secondaries", tuple(int(s) for s in self.secondaries))
        ids = (self.primary,) + self.secondaries
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise ValueError(f"modality roles must be distinct non-negative ids, got {ids}")

    @property
    def num_secondaries(self) -> int:
        return len(self.secondaries)

    @property
    def order(self) -> tuple[int, ...]:
        return (self.primary,) + self.secondaries

    @classmethod
    def parse(cls, text: str) -> "ModalityRoles":
        ids = [int(t) for t in text.replace(" ", "").split(",") if t]
        if not ids:
            raise ValueError("empty modality order")
        return cls(ids[0], tuple(ids[1:]))

    @classmethod
    def from_scores(cls, scores: dict) -> "ModalityRoles":
        """Primary = best uni-modal score; secondaries in descending score (ties by id)."""
        ranked = sorted(scores, key=lambda m: (-scores[m], m))
        return cls(ranked[0], tuple(ranked[1:]))

    def __str__(self):
        return ",".join(str(m) for m in self.order)


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Weight of class j is 1 - count_j / total."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ValueError("need sample counts for at least two classes")
    if (counts < 1).any():
        raise ValueError(f"every class needs at least one sample, got {counts.tolist()}")
    return 1.0 - counts / counts.sum()


def _as_weight_tensor(weights, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=like.dtype)


def _check_labels(labels: torch.Tensor, num_classes: int):
    if labels.dtype.is_floating_point or labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must be class indices in [0, {num_classes})")


def weighted_ce(probs, labels, weights) -> torch.Tensor:
    """Batch mean of -weight[y] * log(p[y]) on probability vectors (floored at 1e-12)."""
    probs = torch.as_tensor(probs)
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    labels = torch.as_tensor(labels).reshape(-1).long()
    _check_labels(labels, probs.shape[1])
    w = _as_weight_tensor(weights, probs)
    picked = probs.gather(1, labels[:, None]).squeeze(1).clamp_min(PROB_FLOOR)
    return (-w[labels] * torch.log(picked)).mean()


def weighted_ce_logits(logits, labels, weights) -> torch.Tensor:
    """Same objective as :func:`weighted_ce`, evaluated through log-softmax."""
    labels = labels.reshape(-1).long()
    _check_labels(labels, logits.shape[1])
    w = _as_weight_tensor(weights, logits)
    logp = torch.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return (-w[labels] * logp).mean()


def total_loss(primary_probs, fused_probs: Sequence, labels, weights) -> torch.Tensor:
    loss = weighted_ce(primary_probs, labels, weights)
    for p in fused_probs:
        loss = loss + weighted_ce(p, labels, weights)
    return loss


def upsample_to(f: torch.Tensor, target) -> torch.Tensor:
    """Nearest-neighbour upsampling in H and W; depth must already match."""
    d, h, w = (int(t) for t in target)
    if f.dim() != 5:
        raise ShapeError(f"expected rank-5 feature map, got {tuple(f.shape)}")
    if f.shape[2] != d:
        raise ShapeError(f"depth mismatch: {f.shape[2]} vs target {d}")
    if h < f.shape[3] or w < f.shape[4]:
        raise ShapeError(f"cannot shrink {tuple(f.shape[2:])} to {(d, h, w)}")
    if (h, w) == tuple(f.shape[3:]):
        return f
    return F.interpolate(f, size=(d, h, w), mode="nearest")


class GuidedSecondary(nn.Module):
    """One secondary path: LFE -> concat(primary guidance) -> 1x1 reducer -> HFE -> dual attention."""

    def __init__(self, primary: RMC):
        super().__init__()
        c1, c2, c3, c4 = primary.cfg.widths
        self.widths = (c1, c2, c3, c4)
        self.stem = copy.deepcopy(primary.stem)
        self.layer1 = copy.deepcopy(primary.layer1)
        self.layer2 = copy.deepcopy(primary.layer2)
        self.reducer = nn.Conv3d(c2 + c4, c2, 1)
        self.layer3 = copy.deepcopy(primary.layer3)
        self.layer4 = copy.deepcopy(primary.layer4)
        self.attention = DualAttention(c4)
        init_weights(self.attention)
        # Start as the copied primary pipeline: pass low-level channels through, ignore guidance.
        with torch.no_grad():
            self.reducer.weight.zero_()
            self.reducer.bias.zero_()
            self.reducer.weight[:, :c2, 0, 0, 0] = torch.eye(c2)
        for p in self.parameters():
            p.requires_grad_(True)

    def lfe(self, x):
        if x.dim() != 5 or x.shape[1] != self.stem[0].in_channels:
            raise ShapeError(f"secondary input must be (N, {self.stem[0].in_channels}, D, H, W), got {tuple(x.shape)}")
        return self.layer2(self.layer1(self.stem(x)))

    def hfe(self, g):
        return self.layer4(self.layer3(g))

    def guided_high(self, low, f_p_hat):
        if f_p_hat.shape[0] != low.shape[0] or f_p_hat.shape[2:] != low.shape[2:]:
            raise ShapeError(f"guidance {tuple(f_p_hat.shape)} does not match low-level features {tuple(low.shape)}")
        if f_p_hat.shape[1] != self.widths[3]:
            raise ShapeError(f"guidance must have {self.widths[3]} channels, got {f_p_hat.shape[1]}")
        g = self.reducer(torch.cat([low, f_p_hat], dim=1))
        return self.attention(self.hfe(g))

    def forward(self, x, f_p_hat):
        return self.guided_high(self.lfe(x), f_p_hat)


def make_fusion_reducer(width: int) -> nn.Conv3d:
    """1x1 conv (2*width -> width), initialised to pass the running fused features through."""
    conv = nn.Conv3d(2 * width, width, 1)
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        conv.weight[:, :width, 0, 0, 0] = torch.eye(width)
    return conv


def cumulative_fuse(reducers: Sequence[nn.Module], f_p, f_s_list: Sequence) -> list:
    if len(reducers) != len(f_s_list):
        raise ValueError(f"{len(reducers)} reducers for {len(f_s_list)} secondary features")
    fused, t = [], f_p
    for reducer, f_s in zip(reducers, f_s_list):
        if f_s.shape != t.shape:
            raise ShapeError(f"cannot fuse {tuple(f_s.shape)} with {tuple(t.shape)}")
        t = reducer(torch.cat([t, f_s], dim=1))
        fused.append(t)
    return fused


class GuidanceModel(nn.Module):
    """Primary DA-RMC (frozen after stage 1) plus guided secondary paths and fusion reducers.

    Inputs are stacked modalities ``(N, M+1, D, H, W)`` indexed by modality id.
    """

    def __init__(self, primary: RMC, roles: ModalityRoles):
        super().__init__()
        if primary.attention is None:
            raise ValueError("the primary extractor must carry dual attention")
        self.roles = roles
        self.primary = primary
        width = primary.cfg.feature_width
        self.guidance = nn.ModuleDict({f"sec{i + 1}": GuidedSecondary(primary) for i in range(roles.num_secondaries)})
        self.fusion = nn.ModuleDict({f"t{i + 1}": make_fusion_reducer(width) for i in range(roles.num_secondaries)})

    @property
    def input_modalities(self):
        return self.roles.order

    def secondary_parameters(self):
        yield from self.guidance.parameters()
        yield from self.fusion.parameters()

    def frozen_state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.primary.state_dict().items()}

    def primary_features(self, x_all):
        xp = x_all[:, self.roles.primary:self.roles.primary + 1]
        return self.primary.features(xp)

    def fused_features(self, x_all, f_p=None):
        if f_p is None:
            f_p = self.primary_features(x_all)
        f_s, f_p_hat = [], None
        for path, m in zip(self.guidance.values(), self.roles.secondaries):
            low = path.lfe(x_all[:, m:m + 1])
            if f_p_hat is None:
                f_p_hat = upsample_to(f_p, low.shape[2:])
            f_s.append(path.guided_high(low, f_p_hat))
        return f_p, cumulative_fuse(list(self.fusion.values()), f_p, f_s)

    def forward(self, x_all, dropout_active=None, generator=None):
        """Logits for the primary prediction and for every fused t_i."""
        if dropout_active is None:
            dropout_active = self.training
        f_p, fused = self.fused_features(x_all)
        head = self.primary.head
        return head(f_p, dropout_active, generator), [head(t, dropout_active, generator) for t in fused]

    @torch.no_grad()
    def predict_proba(self, x_all):
        primary_logits, fused_logits = self(x_all, dropout_active=False)
        final = fused_logits[-1] if fused_logits else primary_logits
        return torch.softmax(final, dim=1)
