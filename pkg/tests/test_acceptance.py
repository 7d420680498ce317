"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Lines are printed as the tests run (visible with ``-s``) and repeated in the
terminal summary.
"""
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import ACCEPTANCE_RESULTS
from timesiam import autograd as ag
from timesiam.checkpoint import decode_checkpoint, load_checkpoint, load_model, save_checkpoint
from timesiam.cli import main
from timesiam.config import FinetuneConfig, ModelConfig, PretrainConfig
from timesiam.data import sample_siamese_pair, synthetic_seasonal_ar
from timesiam.embedding import lineage_matching
from timesiam.errors import TruncatedCheckpointError, VersionMismatchError
from timesiam.finetune import finetune, fuse_extended, fuse_fixed
from timesiam.gradcheck import end_to_end_check
from timesiam.masking import MASK_RULES, SHARED_RULES, MaskSpec, make_mask, masked_count
from timesiam.metrics import MetricsReport, classification_metrics, precision_recall_f1, roc_auc
from timesiam.model import SiameseModel, count_parameters
from timesiam.training import pretrain



def record(key, name, checks: dict):
    """Print and store one PASS/FAIL line, then fail the test on any false check."""
    failed = [k for k, ok in checks.items() if not ok]
    line = f"criterion {key} {name}: {'PASS' if not failed else 'FAIL'}"
    if failed:
        line += " (" + "; ".join(failed) + ")"
    ACCEPTANCE_RESULTS[key] = line
    print(line)
    assert not failed, line


def desk_config():
    return ModelConfig(seq_len=48, n_channels=3, d_model=32, d_ff=64, n_heads=4, e_layers=2, d_layers=1,
                       n_lineages=3, sampling_ratio=6, patch_len=8, dropout=0.0)


def test_1_gradient_correctness():
    start = time.perf_counter()
    result = end_to_end_check(seed=0, n_samples=120)
    elapsed = time.perf_counter() - start
    cfg = ModelConfig.tiny()
    record("1", "gradient correctness", {
        "tiny preset T=8 patch=4 D=8 1+1 layers N=2": (cfg.seq_len, cfg.patch_len, cfg.d_model, cfg.e_layers,
                                                        cfg.d_layers, cfg.n_lineages) == (8, 4, 8, 1, 1, 2),
        f"checked {result.n_checked} >= 100": result.n_checked >= 100,
        f"max relative error {result.max_relative_error:.2e} < 1e-3": result.max_relative_error < 1e-3,
        f"runtime {elapsed:.1f}s < 60s": elapsed < 60,
    })


def test_2_masking_exactness():
    rng = np.random.default_rng(0)
    checks = {}
    for rule in MASK_RULES:
        for ratio in (0.15, 0.25, 0.5, 0.75):
            for t in (48, 96):
                n = masked_count(ratio, t)
                masks = [make_mask(t, 3, MaskSpec(rule, ratio, 4), rng) for _ in range(20)]
                exact = all((m.sum(axis=0) == n).all() for m in masks)
                checks[f"{rule} ratio={ratio} T={t} count=={n}"] = exact and n == round(ratio * t)
                if rule in SHARED_RULES:
                    checks[f"{rule} shared across channels"] = all((m == m[:, :1]).all() for m in masks)
    for rule in ("channel_binomial", "channel_continuous"):
        masks = np.array([make_mask(48, 2, MaskSpec(rule, 0.25, 4), rng) for _ in range(4000)])
        p = masks.mean(axis=(0, 2))
        overlap = (masks[:, :, 0] & masks[:, :, 1]).sum(axis=1)
        expected = float(np.sum(p * p))
        se = overlap.std() / np.sqrt(len(overlap))
        checks[f"{rule} overlap {overlap.mean():.3f} ~ independent {expected:.3f}"] = \
            abs(overlap.mean() - expected) < 5 * se
        checks[f"{rule} channels differ"] = np.mean([(m[:, 0] != m[:, 1]).any() for m in masks]) > 0.9
    for rule in ("binomial", "channel_binomial"):
        counts = np.zeros(96)
        for _ in range(10_000):
            counts += make_mask(96, 1, MaskSpec(rule, 0.25), rng)[:, 0]
        pv = chisquare(counts).pvalue
        checks[f"{rule} positions chi2 p={pv:.3f} > 0.01"] = pv > 0.01
    record("2", "masking exactness", checks)


def test_3_sampling_range_law():
    rng = np.random.default_rng(11)
    values = np.zeros((2000, 1))
    # the current window starts late enough that the full range is feasible
    d = np.array([sample_siamese_pair(values, 96, 6, rng, int(rng.integers(576, 1905))).d for _ in range(10_000)])
    pv = chisquare(np.bincount(d, minlength=577)).pvalue
    d0 = {sample_siamese_pair(values, 96, 0, rng).d for _ in range(1000)}
    record("3", "sampling-range law", {
        f"chi2 p={pv:.3f} > 0.01": pv > 0.01,
        f"max d {d.max()} == 576": d.max() == 576 and d.min() == 0,
        "r=0 gives d == 0": d0 == {0},
    })


def test_4_lineage_mechanics():
    t, r, n = 96, 6, 3
    mapped = [lineage_matching(d, t, r, n) for d in range(t * r + 1)]
    checks = {
        "d=0 maps to 0 only": mapped[0] == 0 and 0 not in mapped[1:],
        "monotone": all(a <= b for a, b in zip(mapped, mapped[1:])),
        "covers 1..N": set(mapped[1:]) == {1, 2, 3},
        "boundaries {1,192,193,576} -> {1,1,2,3}":
            [lineage_matching(d, t, r, n) for d in (1, 192, 193, 576)] == [1, 1, 2, 3],
    }
    cfg = ModelConfig.tiny()
    window = synthetic_seasonal_ar(cfg.seq_len, cfg.n_channels, seed=5).values[None]
    model = SiameseModel(cfg, seed=0).eval()
    model.lineage.weight.data[:] = 0
    with ag.no_grad():
        enc = [model.represent(window, i).tokens.data for i in range(cfg.n_lineages + 1)]
    checks["zero rows give identical encodings"] = all(np.array_equal(enc[0], e) for e in enc[1:])

    frame = synthetic_seasonal_ar(400, cfg.n_channels, seed=0)
    ckpt = pretrain(frame, cfg, PretrainConfig(learning_rate=1e-3, batch_size=16, epochs=1,
                                               steps_per_epoch=200, seed=0))
    trained = ckpt.model.eval()
    x = frame.values[:cfg.seq_len][None]
    with ag.no_grad():
        enc = [trained.represent(x, i).tokens.data for i in range(cfg.n_lineages + 1)]
    dists = [np.linalg.norm(enc[i] - enc[j]) for i in range(len(enc)) for j in range(i + 1, len(enc))]
    checks[f"trained min pairwise L2 {min(dists):.2e} > 1e-4 after {ckpt.meta['steps']} steps"] = \
        min(dists) > 1e-4 and ckpt.meta["steps"] == 200
    record("4", "lineage mechanics", checks)


def test_5_weight_sharing_and_fusion_shapes():
    rng = np.random.default_rng(0)
    cfg = ModelConfig.tiny()
    model = SiameseModel(cfg).eval()
    x = rng.normal(size=(2, cfg.seq_len, cfg.n_channels))
    with ag.no_grad():
        # the past and current branches are the same encoder called on different tokens
        past = model.encode(model.embed(x, 0)).tokens.data
        curr = model.encode(model.embed(x, 0)).tokens.data
        e0 = model.represent(x, 0).tokens.data
        fixed = fuse_fixed(model, x, 1).tokens.data
    checks = {
        "branches bitwise equal": np.array_equal(past, curr),
        "fuse_fixed(n=1) == e0 encoding": np.array_equal(fixed, e0),
    }
    big = SiameseModel(ModelConfig(seq_len=96, n_channels=2, d_model=8, d_ff=16, n_heads=2, e_layers=1,
                                   d_layers=1, n_lineages=3, sampling_ratio=6, patch_len=12)).eval()
    counts = []
    with ag.no_grad():
        for length in (96, 192, 288, 384, 576):
            counts.append(fuse_extended(big, rng.normal(size=(1, length, 2))).n_tokens)
    checks[f"extended token counts {counts} == [8, 16, 24, 32, 48]"] = counts == [8, 16, 24, 32, 48]
    record("5", "weight sharing and fusion shapes", checks)


@pytest.fixture(scope="module")
def efficacy_runs():
    start = time.perf_counter()
    runs = []
    for seed in range(3):
        frame = synthetic_seasonal_ar(3000, 3, seed=seed)
        mc = desk_config()
        ckpt = pretrain(frame, mc, PretrainConfig(learning_rate=1e-3, batch_size=32, epochs=10,
                                                  steps_per_epoch=20, seed=seed))
        fc = FinetuneConfig(horizons=(24,), fusion="fixed", learning_rate=1e-3, epochs=3, batch_size=32,
                            max_steps_per_epoch=30, seed=seed, eval_stride=4)
        _, pre = finetune(ckpt, frame, fc)
        _, rand = finetune(SiameseModel(mc, seed=seed), frame, fc)
        runs.append({"losses": ckpt.meta["epoch_losses"], "steps": ckpt.meta["steps"],
                     "pretrained": pre.avg_mse, "random": rand.avg_mse})
    return runs, time.perf_counter() - start


def test_6a_pretraining_loss_drop(efficacy_runs):
    runs, _ = efficacy_runs
    checks = {}
    for seed, run in enumerate(runs):
        first, last = run["losses"][0], run["losses"][-1]
        checks[f"seed {seed}: {first:.4f} -> {last:.4f} in {run['steps']} steps"] = \
            last <= 0.5 * first and run["steps"] <= 500
    record("6a", "pre-training loss drop", checks)


def test_6b_pretrained_beats_random_init(efficacy_runs):
    runs, elapsed = efficacy_runs
    pre = float(np.mean([r["pretrained"] for r in runs]))
    rand = float(np.mean([r["random"] for r in runs]))
    record("6b", "fine-tuning from pre-training", {
        f"mean test MSE pretrained {pre:.4f} <= random init {rand:.4f}": pre <= rand,
        f"runtime {elapsed:.0f}s < 600s": elapsed < 600,
    })


def test_7_model_size():
    base = count_parameters(SiameseModel(ModelConfig.base()))
    large = count_parameters(SiameseModel(ModelConfig.large()))
    record("7", "model size", {
        f"base {base} within 20% of 709344": abs(base / 709_344 - 1) <= 0.2,
        f"large {large} within 20% of 2554720": abs(large / 2_554_720 - 1) <= 0.2,
        "large > base": large > base,
    })


TINY_TOML = """\
model.seq_len = 16
model.n_channels = 2
model.d_model = 16
model.d_ff = 32
model.n_heads = 2
model.e_layers = 1
model.d_layers = 1
model.patch_len = 4
model.n_lineages = 2
model.sampling_ratio = 2
model.dropout = 0.1
pretrain.epochs = 1
pretrain.steps_per_epoch = 5
finetune.epochs = 2
finetune.max_steps_per_epoch = 5
finetune.horizons = [8]
data.synthetic_length = 400
"""


def test_8_linear_probe_contract(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("TIMESIAM_SEED", raising=False)
    (tmp_path / "c.toml").write_text(TINY_TOML)
    pre, out = tmp_path / "pre.ckpt", tmp_path / "probe.ckpt"
    codes = [
        main(["pretrain", "--config", str(tmp_path / "c.toml"), "--synthetic", "sine", "--out", str(pre)]),
        main(["finetune", "--config", str(tmp_path / "c.toml"), "--checkpoint", str(pre), "--synthetic", "sine",
              "--mode", "linear-probe", "--out", str(out)]),
    ]
    capsys.readouterr()
    before, after = load_checkpoint(pre).state, load_checkpoint(out).state
    changed = [n for n, v in before.items() if after[n].tobytes() != v.tobytes()]
    head = [n for n in after if n.startswith("head.")]
    init_head = {n: v for n, v in load_model(out).state_dict().items() if n.startswith("head.")}
    record("8", "linear-probe contract", {
        "commands exit 0": codes == [0, 0],
        f"non-head parameters unchanged ({len(before)} checked, changed: {changed[:3]})": not changed,
        "head present": bool(head) and bool(init_head),
    })


def test_9_serialization(tmp_path):
    model = SiameseModel(ModelConfig.tiny(), seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    buf = path.read_bytes()
    back = load_model(path)
    same = all(a.data.tobytes() == b.data.tobytes() and na == nb
               for (na, a), (nb, b) in zip(model.named_parameters(), back.named_parameters()))
    try:
        decode_checkpoint(buf[: len(buf) // 2])
        truncated = None
    except Exception as exc:
        truncated = exc
    bad = bytearray(buf)
    bad[4:8] = (99).to_bytes(4, "little")
    try:
        decode_checkpoint(bytes(bad))
        version = None
    except Exception as exc:
        version = exc
    record("9", "serialization", {
        "save -> load bitwise identity": same and load_checkpoint(path).to_bytes() == buf,
        "truncated rejected": isinstance(truncated, TruncatedCheckpointError),
        "version mismatch rejected": isinstance(version, VersionMismatchError),
        "distinct error types": type(truncated) is not type(version),
    })


def test_10_metric_oracles():
    y_true = np.array([1] * 4 + [0] * 6)
    y_pred = np.array([1, 1, 1, 0] + [1, 0, 0, 0, 0, 0])  # TP=3 FN=1 FP=1 TN=5
    p, r, f = precision_recall_f1(y_true, y_pred, 2)
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05, 0.0])
    auc = roc_auc(y_true, scores)
    full = classification_metrics(y_true, np.stack([1 - scores, scores], axis=1), 2)
    report = MetricsReport("forecast", {96: {"mse": 0.1, "mae": 0.2}, 192: {"mse": 0.3, "mae": 0.4},
                                        336: {"mse": 0.7, "mae": 0.5}})
    record("10", "metric oracles", {
        f"precision/recall/F1 {p:.4f}/{r:.4f}/{f:.4f} == 0.75": max(abs(v - 0.75) for v in (p, r, f)) < 1e-12,
        f"AUROC {auc} == 1.0 on separated scores": auc == 1.0 and full["auroc"] == 1.0,
        "Avg MSE == mean of horizons": abs(report.avg_mse - (0.1 + 0.3 + 0.7) / 3) < 1e-6,
    })
