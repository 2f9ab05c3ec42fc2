"""Two-stage training and fusion baselines with k-fold cross-validation."""

from __future__ import annotations

import copy
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import RMC, BackboneConfig, ClassifierHead, build_backbone
from .guidance import GuidanceModel, ModalityRoles, class_weights, weighted_ce_logits
from .metrics import MetricsReport, binary_metrics
from .volume import AugmentConfig, Case, Dataset, augment_array, crop_depth, preprocess, split_folds

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    lr_stage2: Optional[float] = None  # None: same as lr
    weight_decay: float = 1e-3
    epochs_stage1: int = 200
    epochs_stage2: int = 50
    batch_size: int = 1
    dropout: float = 0.5
    seed: int = 0
    base_width: int = 64
    class_weight_override: Optional[tuple] = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_stage2: bool = True
    # "accumulate": one update per batch on the summed loss; "per_secondary": one update per secondary term
    stage2_update: str = "accumulate"
    crop_depth: Optional[int] = None
    # recompute trained normalisation statistics over the training set after each stage
    norm_recalibration: bool = True

    def __post_init__(self):
        if not self.lr >= 0 or not (self.lr_stage2 is None or self.lr_stage2 >= 0):
            raise ValueError("lr must be non-negative")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage2_update not in ("accumulate", "per_secondary"):
            raise ValueError(f"unknown stage2_update {self.stage2_update!r}")

    def backbone(self, in_channels: int = 1) -> BackboneConfig:
        return BackboneConfig(in_channels=in_channels, base_width=self.base_width, dropout=self.dropout)


def derive_seed(base: int, *tags) -> int:
    """Stable child seed from a base seed and string/int tags."""
    words = [int(base) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(str(t).encode()))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------- models


class BackboneClassifier(nn.Module):
    """RMC fed with a fixed subset of the stacked modalities.

    One modality gives the uni-modal baseline (or the stage-1 primary model
    when the backbone carries attention); all modalities stacked as channels
    give pixel fusion.
    """

    def __init__(self, backbone: RMC, modalities: Sequence[int]):
        super().__init__()
        self.modalities = tuple(modalities)
        if backbone.cfg.in_channels != len(self.modalities):
            raise ValueError("backbone input channels must match the number of modalities")
        self.backbone = backbone

    @property
    def input_modalities(self):
        return self.modalities

    def select(self, x_all):
        return x_all[:, list(self.modalities)]

    def forward(self, x_all, dropout_active=None, generator=None):
        return self.backbone(self.select(x_all), dropout_active, generator)

    @torch.no_grad()
    def predict_proba(self, x_all):
        return torch.softmax(self(x_all, dropout_active=False), dim=1)


class FeatureFusion(nn.Module):
    """One extractor per modality; pooled features concatenated into one affine classifier."""

    def __init__(self, cfg: BackboneConfig, n_modalities: int, seed: int):
        super().__init__()
        self.extractors = nn.ModuleList(
            build_backbone(cfg, derive_seed(seed, "feature", m), head=False) for m in range(n_modalities)
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "feature-head"))
            self.head = ClassifierHead(n_modalities * cfg.feature_width, cfg.num_classes, cfg.dropout)
            nn.init.normal_(self.head.fc.weight, 0.0, 0.01)
            nn.init.zeros_(self.head.fc.bias)

    def forward(self, x_all, dropout_active=None, generator=None):
        if dropout_active is None:
            dropout_active = self.training
        feats = [ex.features(x_all[:, m:m + 1]) for m, ex in enumerate(self.extractors)]
        pooled = torch.cat([f.mean(dim=(2, 3, 4), keepdim=True) for f in feats], dim=1)
        return self.head(pooled, dropout_active, generator)

    @torch.no_grad()
    def predict_proba(self, x_all):
        return torch.softmax(self(x_all, dropout_active=False), dim=1)


class DecisionFusion(nn.Module):
    """Per-modality classifiers whose probabilities feed a 2(M+1) -> 32 -> 2 perceptron."""

    hidden = 32

    def __init__(self, cfg: BackboneConfig, n_modalities: int, seed: int):
        super().__init__()
        self.classifiers = nn.ModuleList(
            build_backbone(cfg, derive_seed(seed, "decision", m)) for m in range(n_modalities)
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "decision-mlp"))
            self.mlp = nn.Sequential(
                nn.Linear(2 * n_modalities, self.hidden), nn.ReLU(), nn.Linear(self.hidden, 2)
            )

    def fuse(self, probs):
        """probs: (N, 2*(M+1)) concatenated per-modality probabilities."""
        return self.mlp(probs)

    def forward(self, x_all, dropout_active=None, generator=None):
        probs = [
            torch.softmax(clf(x_all[:, m:m + 1], dropout_active, generator), dim=1)
            for m, clf in enumerate(self.classifiers)
        ]
        return self.fuse(torch.cat(probs, dim=1))

    @torch.no_grad()
    def predict_proba(self, x_all):
        return torch.softmax(self(x_all, dropout_active=False), dim=1)


class Ensemble(nn.Module):
    """Average of member class probabilities."""

    def __init__(self, members: Sequence[nn.Module]):
        super().__init__()
        self.members = nn.ModuleList(members)

    @torch.no_grad()
    def predict_proba(self, x_all):
        return torch.stack([m.predict_proba(x_all) for m in self.members]).mean(dim=0)


# ---------------------------------------------------------------- data feeding


def _cropped(cases: Sequence[Case], cfg: TrainConfig) -> list:
    if cfg.crop_depth is None:
        return list(cases)
    return [
        Case(c.case_id, [crop_depth(v, cfg.crop_depth) for v in c.volumes], c.label, c.meta) for c in cases
    ]


def _to_input(arr: np.ndarray) -> torch.Tensor:
    # channels-last roughly halves 3D convolution backward time on CPU
    return torch.from_numpy(arr).contiguous(memory_format=torch.channels_last_3d)


def eval_tensor(cases: Sequence[Case], cfg: TrainConfig) -> torch.Tensor:
    return _to_input(np.stack([preprocess(c, cfg.augment).stacked() for c in _cropped(cases, cfg)]))


def _batches(cases, cfg: TrainConfig, rng: np.random.Generator, augmented: bool, channels=None):
    order = rng.permutation(len(cases))
    for start in range(0, len(order), cfg.batch_size):
        batch = [cases[i] for i in order[start:start + cfg.batch_size]]
        if augmented:
            arrs = [augment_array(c.stacked(), cfg.augment, rng, channels) for c in batch]
        else:
            arrs = [preprocess(c, cfg.augment).stacked() for c in batch]
        y = torch.tensor([c.label for c in batch], dtype=torch.long)
        yield _to_input(np.stack(arrs)), y


def training_weights(cases: Sequence[Case], cfg: TrainConfig) -> np.ndarray:
    if cfg.class_weight_override is not None:
        return np.asarray(cfg.class_weight_override, dtype=np.float64)
    labels = [c.label for c in cases]
    return class_weights([labels.count(0), labels.count(1)])


LossFn = Callable[[nn.Module, torch.Tensor, torch.Tensor, np.ndarray, torch.Generator], torch.Tensor]


@torch.no_grad()
def recalibrate_norms(model: nn.Module, params: Sequence[nn.Parameter], cases: Sequence[Case],
                      cfg: TrainConfig) -> None:
    """Replace running statistics of the trained normalisation layers by their average
    over the un-augmented training set, batched as in training. Layers whose affine
    parameters are not in ``params`` (frozen ones) are left alone."""
    trained = {id(p) for p in params}
    norms = [m for m in model.modules()
             if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats and id(m.weight) in trained]
    if not norms:
        return
    cases = _cropped(cases, cfg)
    model.eval()
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
        m.train()
    for start in range(0, len(cases), cfg.batch_size):
        batch = cases[start:start + cfg.batch_size]
        model(_to_input(np.stack([preprocess(c, cfg.augment).stacked() for c in batch])), False)
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    model.eval()


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss ({loss.item()}) during {where}")


def fit(
    model: nn.Module,
    params: Sequence[nn.Parameter],
    cases: Sequence[Case],
    cfg: TrainConfig,
    epochs: int,
    seed: int,
    loss_fn: LossFn,
    augmented: bool = True,
    on_train: Optional[Callable[[nn.Module], None]] = None,
    label: str = "training",
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> list:
    """Adam loop over shuffled (augmented) batches; returns per-epoch mean loss."""
    cases = _cropped(cases, cfg)
    weights = training_weights(cases, cfg)
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        model.train()
        if on_train is not None:
            on_train(model)
        total, count = 0.0, 0
        for x, y in _batches(cases, cfg, rng, augmented, getattr(model, "input_modalities", None)):
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model, x, y, weights, gen)
            _check_finite(loss, f"{label} epoch {epoch}")
            if cfg.lr > 0:
                loss.backward()
                opt.step()
            total += loss.item() * len(y)
            count += len(y)
        history.append(total / count)
        log.debug("%s epoch %d loss %.5f", label, epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    if cfg.norm_recalibration and epochs > 0:
        recalibrate_norms(model, params, cases, cfg)
    model.eval()
    return history


def _unimodal_loss(model, x, y, weights, gen):
    return weighted_ce_logits(model(x, True, gen), y, weights)


# ---------------------------------------------------------------- two-stage training


@dataclass
class StageResult:
    model: nn.Module
    loss_log: list


def build_stage1_model(cfg: TrainConfig, roles: ModalityRoles, seed: int) -> BackboneClassifier:
    return BackboneClassifier(build_backbone(cfg.backbone(), seed, attention=True), [roles.primary])


def train_stage1(dataset: Dataset, cfg: TrainConfig, roles: ModalityRoles, seed: Optional[int] = None) -> StageResult:
    """Backbone with attention and classifier, trained on the primary modality alone."""
    seed = cfg.seed if seed is None else seed
    model = build_stage1_model(cfg, roles, derive_seed(seed, "stage1-init"))
    history = fit(model, list(model.parameters()), dataset.cases, cfg, cfg.epochs_stage1,
                  derive_seed(seed, "stage1-data"), _unimodal_loss, label="stage 1")
    return StageResult(model, history)


def build_stage2_model(primary: RMC, roles: ModalityRoles, seed: int) -> GuidanceModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GuidanceModel(primary, roles)
    model.primary.requires_grad_(False)
    return model


def _freeze_primary(model: GuidanceModel) -> None:
    model.primary.eval()


def _stage2_loss(model: GuidanceModel, x, y, weights, gen):
    primary_logits, fused_logits = model(x, True, gen)
    loss = weighted_ce_logits(primary_logits, y, weights)
    for logits in fused_logits:
        loss = loss + weighted_ce_logits(logits, y, weights)
    return loss


def train_stage2(
    dataset: Dataset,
    cfg: TrainConfig,
    roles: ModalityRoles,
    stage1_model: BackboneClassifier,
    seed: Optional[int] = None,
) -> StageResult:
    """Secondary paths initialised from the primary blocks; the primary extractor
    and the shared classifier stay frozen (weights and normalisation statistics)."""
    seed = cfg.seed if seed is None else seed
    if stage1_model.modalities != (roles.primary,):
        raise ValueError("stage-1 model was trained on a different primary modality")
    model = build_stage2_model(stage1_model.backbone, roles, derive_seed(seed, "stage2-init"))
    if cfg.lr_stage2 is not None:
        cfg = replace(cfg, lr=cfg.lr_stage2)
    data_seed = derive_seed(seed, "stage2-data")
    if cfg.stage2_update == "accumulate" or roles.num_secondaries == 0:
        history = fit(model, list(model.secondary_parameters()), dataset.cases, cfg, cfg.epochs_stage2,
                      data_seed, _stage2_loss, augmented=cfg.augment_stage2, on_train=_freeze_primary,
                      label="stage 2")
    else:
        history = _fit_per_secondary(model, dataset, cfg, data_seed)
    return StageResult(model, history)


def _fit_per_secondary(model: GuidanceModel, dataset: Dataset, cfg: TrainConfig, seed: int) -> list:
    cases = _cropped(dataset.cases, cfg)
    weights = training_weights(cases, cfg)
    opt = torch.optim.Adam(list(model.secondary_parameters()), lr=cfg.lr, betas=(0.9, 0.999),
                           weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(cfg.epochs_stage2):
        model.train()
        model.primary.eval()
        total, count = 0.0, 0
        for x, y in _batches(cases, cfg, rng, cfg.augment_stage2):
            for i in range(model.roles.num_secondaries):
                opt.zero_grad(set_to_none=True)
                primary_logits, fused_logits = model(x, True, gen)
                loss = weighted_ce_logits(primary_logits, y, weights) + weighted_ce_logits(fused_logits[i], y, weights)
                _check_finite(loss, f"stage 2 epoch {epoch}")
                if cfg.lr > 0:
                    loss.backward()
                    opt.step()
                total += loss.item() * len(y)
                count += len(y)
        history.append(total / count)
    if cfg.norm_recalibration and cfg.epochs_stage2 > 0:
        recalibrate_norms(model, list(model.secondary_parameters()), cases, cfg)
    model.eval()
    return history


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict_scores(model: nn.Module, cases: Sequence[Case], cfg: TrainConfig, chunk: int = 8) -> np.ndarray:
    """Probability of class 1 for each case (eval mode, no augmentation)."""
    model.eval()
    scores = []
    for start in range(0, len(cases), chunk):
        x = eval_tensor(cases[start:start + chunk], cfg)
        scores.append(model.predict_proba(x)[:, 1].double().numpy())
    return np.concatenate(scores)


def evaluate(model: nn.Module, cases: Sequence[Case], cfg: TrainConfig) -> dict:
    labels = np.array([c.label for c in cases])
    scores = predict_scores(model, cases, cfg)
    metrics = binary_metrics(labels, scores)
    if math.isnan(metrics["auc"]):
        log.warning("AUC undefined: evaluation set holds a single class")
    return metrics


# ---------------------------------------------------------------- cross-validation

BASELINE_KINDS = ("ensemble", "pixel", "feature", "decision")


def parse_kind(kind: str) -> str:
    kind = kind.strip().lower()
    if kind in ("full", "stage1") or kind in BASELINE_KINDS:
        return kind
    if kind.startswith("uni:") and kind[4:].isdigit():
        return kind
    raise ValueError(f"unknown method {kind!r}; expected full, stage1, uni:<m>, {', '.join(BASELINE_KINDS)}")


@dataclass
class FoldOutcome:
    fold: int
    metrics: dict
    models: dict
    loss_logs: dict


def train_unimodal(train: Dataset, cfg: TrainConfig, m: int, seed: int) -> StageResult:
    model = BackboneClassifier(build_backbone(cfg.backbone(), derive_seed(seed, "uni-init", m)), [m])
    history = fit(model, list(model.parameters()), train.cases, cfg, cfg.epochs_stage1,
                  derive_seed(seed, "uni-data", m), _unimodal_loss, label=f"uni-modal {m}")
    return StageResult(model, history)


def train_baseline(kind: str, train: Dataset, cfg: TrainConfig, seed: int) -> StageResult:
    n_mod = len(train.cases[0].volumes)
    if kind == "pixel":
        model = BackboneClassifier(build_backbone(cfg.backbone(n_mod), derive_seed(seed, "pixel-init")),
                                   range(n_mod))
    elif kind == "feature":
        model = FeatureFusion(cfg.backbone(), n_mod, seed)
    elif kind == "decision":
        model = DecisionFusion(cfg.backbone(), n_mod, seed)
    else:
        raise ValueError(f"{kind!r} is not a trainable fusion baseline")
    history = fit(model, list(model.parameters()), train.cases, cfg, cfg.epochs_stage1,
                  derive_seed(seed, kind, "data"), _unimodal_loss, label=f"{kind} fusion")
    return StageResult(model, history)


def run_fold(
    dataset: Dataset,
    split,
    fold: int,
    cfg: TrainConfig,
    roles: ModalityRoles,
    kinds: Sequence[str],
    stage1: Optional[BackboneClassifier] = None,
) -> FoldOutcome:
    """Train everything ``kinds`` needs on the other folds, evaluate on ``fold``."""
    kinds = [parse_kind(k) for k in kinds]
    train_idx, test_idx = split.indices(dataset, fold)
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    seed = derive_seed(cfg.seed, "fold", fold)
    models, logs, metrics = {}, {}, {}

    uni_needed = {int(k[4:]) for k in kinds if k.startswith("uni:")}
    if "ensemble" in kinds:
        uni_needed |= set(range(len(dataset.cases[0].volumes)))
    for m in sorted(uni_needed):
        res = train_unimodal(train, cfg, m, seed)
        models[f"uni:{m}"], logs[f"uni:{m}"] = res.model, res.loss_log
    if "full" in kinds or "stage1" in kinds:
        if stage1 is None:
            res = train_stage1(train, cfg, roles, seed)
            stage1, logs["stage1"] = res.model, res.loss_log
        models["stage1"] = stage1
    if "full" in kinds:
        res = train_stage2(train, cfg, roles, stage1, seed)
        models["full"], logs["full"] = res.model, res.loss_log
    if "ensemble" in kinds:
        models["ensemble"] = Ensemble([models[f"uni:{m}"] for m in sorted(uni_needed)])
    for k in kinds:
        if k in ("pixel", "feature", "decision"):
            res = train_baseline(k, train, cfg, seed)
            models[k], logs[k] = res.model, res.loss_log
    for k in kinds:
        metrics[k] = evaluate(models[k], test.cases, cfg)
    return FoldOutcome(fold, metrics, models, logs)


def _run_fold_safe(*args, **kwargs) -> FoldOutcome:
    fold = args[2]
    try:
        return run_fold(*args, **kwargs)
    except FoldError:
        raise
    except Exception as exc:
        raise FoldError(fold, exc) from exc


def cross_validate(
    dataset: Dataset,
    cfg: TrainConfig,
    roles: ModalityRoles,
    kinds: Sequence[str] = ("full",),
    k: int = 3,
    jobs: int = 1,
    on_fold: Optional[Callable[[FoldOutcome], None]] = None,
) -> dict:
    """Per-fold and mean/std metrics for each requested method."""
    kinds = [parse_kind(x) for x in kinds]
    split = split_folds(dataset, k, cfg.seed)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold_safe, dataset, split, f, cfg, roles, kinds) for f in range(k)]
            outcomes = [fut.result() for fut in futures]
    else:
        outcomes = [_run_fold_safe(dataset, split, f, cfg, roles, kinds) for f in range(k)]
    reports = {kind: MetricsReport(kind) for kind in kinds}
    for out in outcomes:
        if on_fold is not None:
            on_fold(out)
        for kind in kinds:
            reports[kind].add(out.metrics[kind])
    return reports


def run_baseline(kind: str, dataset: Dataset, cfg: TrainConfig, roles: ModalityRoles, k: int = 3) -> MetricsReport:
    return cross_validate(dataset, cfg, roles, [kind], k)[parse_kind(kind)]


# ---------------------------------------------------------------- ablation over modality subsets


def secondary_subsets(roles: ModalityRoles) -> list:
    """All subsets of the secondaries (priority order kept), smallest first."""
    out = []
    for size in range(roles.num_secondaries + 1):
        out.extend(combinations(roles.secondaries, size))
    return out


def ablate_fold(
    dataset: Dataset,
    split,
    fold: int,
    cfg: TrainConfig,
    roles: ModalityRoles,
    stage1: BackboneClassifier,
) -> dict:
    """Metrics on the held-out fold for every secondary subset, keyed by subset tuple."""
    train_idx, test_idx = split.indices(dataset, fold)
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    seed = derive_seed(cfg.seed, "fold", fold)
    results = {}
    for subset in secondary_subsets(roles):
        if not subset:
            model = stage1
        else:
            # each subset starts from the untouched stage-1 weights
            primary = copy.deepcopy(stage1)
            model = train_stage2(train, cfg, ModalityRoles(roles.primary, subset), primary, seed).model
        results[subset] = evaluate(model, test.cases, cfg)
    return results
