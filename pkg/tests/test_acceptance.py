"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run under pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py [numbers...]``.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from fd import check_module_grads, randomize_norms  # noqa: E402

from mmguide.attention import DualAttention  # noqa: E402
from mmguide.backbone import BackboneConfig, build_backbone, init_weights  # noqa: E402
from mmguide.checkpoint import decode_state  # noqa: E402
from mmguide.cli import main as cli_main  # noqa: E402
from mmguide.guidance import (  # noqa: E402
    GuidanceModel,
    ModalityRoles,
    class_weights,
    cumulative_fuse,
    total_loss,
    upsample_to,
    weighted_ce_logits,
)
from mmguide.metrics import auc_score, reports_from_csv, threshold_metrics  # noqa: E402
from mmguide.training import TrainConfig, cross_validate, evaluate, train_stage1  # noqa: E402
from mmguide.volume import AugmentConfig, synth_dataset  # noqa: E402

ROLES = ModalityRoles(0, (3, 1, 2))
GRAD_TOL = 1e-3

# desk-scale settings for the two training experiments
BENCH = dict(cases=120, shape=(32, 64, 64), noise=0.1, seed=7)
BENCH_TRAIN = dict(lr=1e-3, batch_size=4, base_width=8, epochs_stage1=10, epochs_stage2=8, seed=1)
ABLATION_BENCH = ["--cases", "60", "--shape", "16x32x32", "--noise", "0.1", "--seed", "7"]
ABLATION_TRAIN = ["--folds", "3", "--base-width", "4", "--epochs1", "12", "--epochs2", "8",
                  "--lr", "1e-3", "--batch-size", "4", "--seed", "1"]


def report(number: int, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def run_cli(*argv) -> int:
    return cli_main([str(a) for a in argv])


# ---------------------------------------------------------------- 1: gradients


def _grad_backbone():
    model = build_backbone(BackboneConfig(base_width=2), seed=11).double()
    randomize_norms(model, seed=1)
    model.eval()
    x = torch.randn(1, 1, 4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1), requires_grad=True)
    y = torch.tensor([1])

    def loss():
        return weighted_ce_logits(model(x, dropout_active=False), y, [0.7, 0.3])

    counts = {}
    worst = check_module_grads(loss, [("input", x)] + list(model.named_parameters()), report=counts)
    return worst, counts


def _grad_attention():
    gen = torch.Generator().manual_seed(2)
    block = DualAttention(16).double()
    init_weights(block)
    with torch.no_grad():
        block.gamma.fill_(0.7)
        block.beta.fill_(-0.4)
    x = torch.randn(1, 16, 4, 2, 2, dtype=torch.float64, generator=gen, requires_grad=True)
    probe = torch.randn(1, 16, 4, 2, 2, dtype=torch.float64, generator=gen)
    worst, counts = {}, {}
    for branch in ("spatial_attention", "slice_attention"):
        fn = getattr(block, branch)
        named = [(f"{branch}.input", x)] + [(f"{branch}.{n}", p) for n, p in block.named_parameters()]
        worst.update(check_module_grads(lambda: (fn(x) * probe).sum(), named, report=counts))
    return worst, counts


def _grad_total_loss():
    """d(total loss)/d(every secondary parameter), primary held fixed."""
    primary = build_backbone(BackboneConfig(base_width=2), seed=12, attention=True).double()
    randomize_norms(primary, seed=2)
    model = GuidanceModel(primary, ROLES).double()
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        # move off the selector / zero-gate start so every term carries gradient
        for i, path in enumerate(model.guidance.values()):
            randomize_norms(path, seed=10 + i)
            path.reducer.weight.add_(0.3 * torch.randn(path.reducer.weight.shape, generator=gen, dtype=torch.float64))
            path.reducer.bias.add_(0.1 * torch.randn(path.reducer.bias.shape, generator=gen, dtype=torch.float64))
            path.attention.gamma.fill_(0.5)
            path.attention.beta.fill_(0.3)
        primary.attention.gamma.fill_(0.4)
        primary.attention.beta.fill_(0.2)
        for t in model.fusion.values():
            t.weight.add_(0.3 * torch.randn(t.weight.shape, generator=gen, dtype=torch.float64))
            t.bias.add_(0.1 * torch.randn(t.bias.shape, generator=gen, dtype=torch.float64))
    model.eval()
    x = torch.randn(1, 4, 4, 8, 8, dtype=torch.float64, generator=gen)
    y = torch.tensor([1])
    weights = class_weights([75, 210])
    head = model.primary.head
    with torch.no_grad():
        f_p = model.primary_features(x)
    paths = list(model.guidance.values())
    reducers = list(model.fusion.values())
    lows = [p.lfe(x[:, m:m + 1]) for p, m in zip(paths, ROLES.secondaries)]
    f_p_hat = upsample_to(f_p, lows[0].shape[2:])

    def loss_with(recompute=None):
        # only the path whose tensor is being probed needs a fresh forward
        f_s = []
        for i, (path, m) in enumerate(zip(paths, ROLES.secondaries)):
            if recompute is None or recompute == i:
                f_s.append(path.guided_high(path.lfe(x[:, m:m + 1]), f_p_hat))
            else:
                f_s.append(cache[i])
        fused = cumulative_fuse(reducers, f_p, f_s)
        probs = [torch.softmax(head(t), dim=1) for t in [f_p] + fused]
        return total_loss(probs[0], probs[1:], y, weights)

    with torch.no_grad():
        cache = [p.guided_high(lo, f_p_hat) for p, lo in zip(paths, lows)]
    worst, counts = {}, {}
    for i, path in enumerate(paths):
        named = [(f"sec{i + 1}.{n}", p) for n, p in path.named_parameters()]
        worst.update(check_module_grads(lambda i=i: loss_with(i), named, report=counts))
    named = [(f"fusion.{n}", p) for n, p in model.fusion.named_parameters()]
    worst.update(check_module_grads(lambda: loss_with(-1), named, report=counts))
    # the full forward must agree with the cached evaluation used for probing
    with torch.no_grad():
        p_logits, fused_logits = model(x, dropout_active=False)
        full = total_loss(torch.softmax(p_logits, 1), [torch.softmax(t, 1) for t in fused_logits], y, weights)
        assert torch.allclose(full, loss_with(None))
    return worst, counts


def criterion_1() -> bool:
    start = time.time()
    parts = {"backbone": _grad_backbone(), "attention": _grad_attention(), "total loss": _grad_total_loss()}
    elapsed = time.time() - start
    worst = {k: max(w.values()) for k, (w, _) in parts.items()}
    n = sum(c["checked"] for _, counts in parts.values() for c in counts.values())
    rechecked = sum(c["rechecked"] for _, counts in parts.values() for c in counts.values())
    skipped = sum(c["skipped"] for _, counts in parts.values() for c in counts.values())
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items())
    return report(1, ok, f"{detail}; {n} coordinates, {rechecked} re-probed at a ReLU kink, "
                         f"{skipped} left out; {elapsed:.0f}s")


# ---------------------------------------------------------------- 2: attention invariants


@torch.no_grad()
def criterion_2() -> bool:
    rng = np.random.default_rng(2)
    worst_row, identity_ok = 0.0, True
    for i in range(100):
        c = int(rng.choice([2, 4, 8, 16, 32]))
        n, d, h, w = (int(v) for v in rng.integers(1, [3, 7, 7, 7]))
        torch.manual_seed(i)
        block = DualAttention(c)
        init_weights(block)
        x = torch.randn(n, c, d, h, w) * float(rng.uniform(0.1, 3.0))
        identity_ok &= torch.equal(block(x), x)
        for a in (block.spatial_weights(x), block.slice_weights(x)):
            if (a < 0).any():
                worst_row = float("inf")
            worst_row = max(worst_row, float((a.sum(-1) - 1).abs().max()))
    ok = identity_ok and worst_row <= 1e-6
    return report(2, ok, f"100 shapes, identity at zero gates {'exact' if identity_ok else 'VIOLATED'}, "
                         f"max row-sum deviation {worst_row:.1e}")


# ---------------------------------------------------------------- 3: class weights


def criterion_3() -> bool:
    ratios = []
    for counts in ((75, 210), (76, 259)):
        w = class_weights(counts)
        ratios.append(w[0] / w[1])
    two_sig = [float(f"{r:.2g}") for r in ratios]
    ok = [round(r, 2) for r in ratios] == [2.80, 3.41] and two_sig == [2.8, 3.4]
    return report(3, ok, f"weight ratios {ratios[0]:.4f}:1 and {ratios[1]:.4f}:1")


# ---------------------------------------------------------------- 4: metric oracle


def brute_force_auc(labels, scores) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() * 2 + (pos[:, None] == neg[None, :]).sum()
    return float(wins / 2 / (len(pos) * len(neg)))


def criterion_4() -> bool:
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        rng.shuffle(labels)
        scores = rng.random(n)
        if rng.random() < 0.5:
            scores = np.round(scores, int(rng.integers(0, 3)))  # heavy ties
        if auc_score(labels, scores) != brute_force_auc(labels, scores):
            mismatches += 1
    # imbalanced reference cohort: 75 positives, 210 negatives
    labels = np.array([1] * 75 + [0] * 210)
    tp, tn = round(0.627 * 75), round(0.886 * 210)
    scores = np.concatenate([np.r_[np.ones(tp), np.zeros(75 - tp)], np.r_[np.zeros(tn), np.ones(210 - tn)]])
    m = threshold_metrics(labels, scores)
    identity = (m["sensitivity"] * 75 + m["specificity"] * 210) / 285
    row_ok = abs(m["accuracy"] - identity) < 1e-12 and abs(identity - 0.818) <= 0.001
    ok = mismatches == 0 and row_ok
    return report(4, ok, f"{mismatches} mismatches over 1000 sets; reconstructed accuracy {identity:.4f} (target 0.818)")


# ---------------------------------------------------------------- 5: overfit


def criterion_5() -> bool:
    start = time.time()
    seed = next(s for s in range(50) if synth_dataset(8, (16, 32, 32), 0.1, s).class_counts[1] >= 2)
    ds = synth_dataset(8, (16, 32, 32), 0.1, seed)
    cfg = TrainConfig(lr=1e-3, epochs_stage1=200, batch_size=4, base_width=4, seed=0,
                      augment=AugmentConfig(flip_prob=0.0, affine_degrees=(0.0, 0.0), affine_scale=(1.0, 1.0)))
    res = train_stage1(ds, cfg, ROLES)
    acc = evaluate(res.model, ds.cases, cfg)["accuracy"]
    first, last = res.loss_log[0], res.loss_log[-1]
    ok = acc == 1.0 and last < first
    return report(5, ok, f"train accuracy {acc:.3f}, loss {first:.4f} -> {last:.4f}, {time.time() - start:.0f}s")


# ---------------------------------------------------------------- 6: method separation


def criterion_6() -> bool:
    start = time.time()
    ds = synth_dataset(BENCH["cases"], BENCH["shape"], BENCH["noise"], BENCH["seed"])
    cfg = TrainConfig(**BENCH_TRAIN)
    kinds = ["full", "uni:0", "uni:1", "uni:2", "uni:3", "ensemble"]
    reports = cross_validate(ds, cfg, ROLES, kinds, k=3)
    auc = {k: reports[k].mean("auc") for k in kinds}
    best_uni = max(auc[k] for k in kinds if k.startswith("uni:"))
    ok = auc["full"] >= best_uni + 0.08 and auc["ensemble"] <= auc["full"]
    table = ", ".join(f"{k} {v:.3f}" for k, v in auc.items())
    return report(6, ok, f"mean AUC {table}; margin {auc['full'] - best_uni:+.3f}; {(time.time() - start) / 60:.0f} min")


# ---------------------------------------------------------------- 7: freeze + ablation


def criterion_7() -> bool:
    import csv

    with tempfile.TemporaryDirectory() as tmp:
        data, run = Path(tmp) / "data", Path(tmp) / "run"
        assert run_cli("synth", "--out", data, *ABLATION_BENCH) == 0
        common = ["--data", data, "--out", run, *ABLATION_TRAIN]
        assert run_cli("train", *common, "--stage", "1") == 0
        assert run_cli("train", *common, "--stage", "2") == 0
        frozen = True
        for fold in range(3):
            before = decode_state((run / f"fold{fold}" / "stage1.ckpt").read_bytes())
            after = decode_state((run / f"fold{fold}" / "stage2.ckpt").read_bytes())
            for key, arr in before.items():
                frozen &= after[f"primary.{key}"].tobytes() == arr.tobytes()
        assert run_cli("ablate", *common) == 0
        with open(run / "ablation.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        folds = reports_from_csv((run / "ablation-folds.csv").read_text())
    aucs = {r.method: r.mean("auc") for r in folds}
    full = aucs["0+3+1+2"]
    best_other = max(v for k, v in aucs.items() if k != "0+3+1+2")
    ok = frozen and len(rows) == 8 and full >= best_other - 0.01
    table = ", ".join(f"{k} {v:.3f}" for k, v in aucs.items())
    return report(7, ok, f"primary and classifier {'byte-identical' if frozen else 'CHANGED'}; "
                         f"{len(rows)} subset rows; AUC {table}")


# ---------------------------------------------------------------- 8: determinism


def criterion_8() -> bool:
    args = ["--folds", "2", "--base-width", "2", "--epochs1", "2", "--epochs2", "2", "--lr", "1e-3",
            "--batch-size", "4", "--seed", "5"]
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        assert run_cli("synth", "--out", data, "--cases", "12", "--shape", "8x16x16", "--seed", "4") == 0
        trees = []
        for name in ("a", "b"):
            out = Path(tmp) / name
            assert run_cli("train", "--data", data, "--out", out, "--stage", "all", *args) == 0
            assert run_cli("train", "--data", data, "--out", out, "--baseline", "uni:3,decision", *args) == 0
            trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
                          if p.is_file() and not p.name.startswith("manifest")})
    same = trees[0] == trees[1]
    kinds = sorted({Path(k).suffix for k in trees[0]})
    return report(8, same and len(trees[0]) >= 10,
                  f"{len(trees[0])} output files ({', '.join(kinds)}) {'identical' if same else 'DIFFER'} across runs")


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 9)}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    assert CRITERIA[number]()


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    results = [CRITERIA[i]() for i in chosen]
    sys.exit(0 if all(results) else 1)
