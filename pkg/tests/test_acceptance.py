"""One test per acceptance criterion, each printing a single pass/fail line.

The ablation and five-seed criteria share one module-scoped training sweep;
the full file takes roughly twelve minutes on one CPU core.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from hia import gop
from hia import tensor as tn
from hia.cli import main
from hia.data import SynthConfig, UTT_ASPECTS, collate, synth_generate
from hia.gop import AlignmentSegment, PosteriorGram
from hia.metrics import format_table, mse, pcc, pcc_properties_suite, report_from_predictions, summarize
from hia.model import HIAModel, ModelConfig
from hia.train import TrainConfig, dataset_loss, fit, lr_at, run_seeds, total_loss

# ---------------------------------------------------------------------------
# 1. gradient correctness


def six_phone_batch():
    """Two generated utterances padded to T=6: one with six phones, one shorter."""
    samples = synth_generate(SynthConfig(n_utterances=40, seed=0, max_words=3))
    six = next(x for x in samples if len(x) == 6)
    short = next(x for x in samples if 3 <= len(x) < 6)
    return collate([six, short])


def test_criterion_1_gradient_check(criterion):
    cfg = ModelConfig(embed_dim=8, enc_layers=1, dec_layers=1, dropout=0.0)
    model = HIAModel(cfg, seed=3)
    batch = six_phone_batch()
    assert batch.gop.shape[:2] == (2, 6)
    start = time.perf_counter()
    err = tn.grad_check(lambda: total_loss(model.forward(batch), batch).tensor,
                        model.parameters().values(), h=1e-4)
    elapsed = time.perf_counter() - start
    n_params = sum(p.data.size for p in model.parameters().values())
    passed = err < 1e-4 and elapsed < 60.0
    criterion.record(1, "full-model gradient check", passed,
                     f"max rel err {err:.2e} over {n_params} params in {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# 2. GOP oracle


def brute_force_vector(frames, s2p, seg):
    """Direct summation over frames and states, no vectorisation."""
    def log_post(phone, t):
        total = 0.0
        for s, p in enumerate(s2p):
            if p == phone:
                total += frames[t][s]
        return math.log(max(total, 1e-10))

    span = range(seg.t_s, seg.t_e + 1)
    lpp = [sum(log_post(p, t) for t in span) / len(span) for p in range(42)]
    lpr = [sum(log_post(p, t) - log_post(seg.phone, t) for t in span) for p in range(42)]
    return lpp, lpr


def test_criterion_2_gop_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n_frames = int(rng.integers(1, 11))
        n_states = int(rng.integers(42, 100))
        s2p = np.concatenate([np.arange(42), rng.integers(0, 42, n_states - 42)])
        rng.shuffle(s2p)
        frames = rng.dirichlet(np.full(n_states, 0.5), size=n_frames)
        frames[rng.random(frames.shape) < 0.1] = 0.0
        frames /= frames.sum(axis=1, keepdims=True)
        pg = PosteriorGram(frames, s2p)
        t_s = int(rng.integers(0, n_frames))
        seg = AlignmentSegment(int(rng.integers(0, 42)), t_s, int(rng.integers(t_s, n_frames)))
        want_lpp, want_lpr = brute_force_vector(frames, s2p.tolist(), seg)
        feat = gop.gop_vector(pg, seg)
        got = [feat.lpp, feat.lpr, feat.vector()[:42], feat.vector()[42:],
               [gop.lpp(pg, seg, p) for p in range(42)], [gop.lpr(pg, seg, p, seg.phone) for p in range(42)]]
        want = [want_lpp, want_lpr, want_lpp, want_lpr, want_lpp, want_lpr]
        for g, w in zip(got, want):
            worst = max(worst, float(np.max(np.abs(np.asarray(g) - np.asarray(w)))))
    passed = worst <= 1e-9
    criterion.record(2, "GOP matches brute force", passed, f"max abs diff {worst:.1e} over 100 posteriorgrams")
    assert passed


# ---------------------------------------------------------------------------
# 3. overfit


@pytest.mark.slow
def test_criterion_3_overfit(criterion):
    samples = synth_generate(SynthConfig(n_utterances=8, seed=0))
    model = HIAModel(ModelConfig(), seed=0)
    # constant learning rate: the default halving would leave the last 400 epochs below 2e-8
    cfg = TrainConfig(epochs=500, halve_after=500, batch_size=8, seed=0)
    fit(model, samples, samples, cfg)
    loss, _ = dataset_loss(model, samples)
    passed = loss < 0.01
    criterion.record(3, "overfit 8 utterances", passed, f"train total loss {loss:.2e} after 500 epochs")
    assert passed


# ---------------------------------------------------------------------------
# 4 and 9. five-seed ablation sweep

SEEDS = [0, 1, 2, 3, 4]
# desk-scale setting: a narrow model with no encoder blocks, so the word branch
# can only see utterance context through the interaction heads
SWEEP_MODEL = ModelConfig(embed_dim=32, enc_layers=0, dec_layers=1)
SWEEP_TRAIN = TrainConfig(epochs=12)
SWEEP_DATA = SynthConfig(n_utterances=2500, seed=11, noise_std={"phone": 0.6})
ABLATIONS = {"no-iam-word": {"use_iam_word": False}, "no-residual": {"use_residual": False},
             "no-hierarchy": {"use_hierarchy": False}}


@pytest.fixture(scope="module")
def sweep():
    data = synth_generate(SWEEP_DATA)
    train, dev = data[:2000], data[2000:]
    start = time.perf_counter()
    reports = {"full": run_seeds(train, dev, SWEEP_MODEL, SWEEP_TRAIN, SEEDS)}
    for name, flags in ABLATIONS.items():
        reports[name] = run_seeds(train, dev, replace(SWEEP_MODEL, **flags), SWEEP_TRAIN, SEEDS)
    return reports, time.perf_counter() - start


def stress(reports):
    return np.array([r.pcc["word"]["stress"] for r in reports])


@pytest.mark.slow
def test_criterion_4_directional_ablation(criterion, sweep):
    reports, elapsed = sweep
    full = stress(reports["full"])
    verdicts = []
    for name in ABLATIONS:
        other = stress(reports[name])
        pooled = math.sqrt((full.var(ddof=1) + other.var(ddof=1)) / 2.0)
        margin = full.mean() - other.mean()
        verdicts.append((name, margin > pooled, f"{name} {other.mean():.4f} (margin {margin:+.4f}, sd {pooled:.4f})"))
    passed = all(ok for _, ok, _ in verdicts) and elapsed < 30 * 60
    detail = f"full {full.mean():.4f}; " + "; ".join(d for _, _, d in verdicts) + f"; {elapsed / 60:.1f} min"
    criterion.record(4, "word-stress ablation ordering", passed, detail)
    for name, ok, d in verdicts:
        assert ok, d
    assert elapsed < 30 * 60


@pytest.mark.slow
def test_criterion_9_five_seed_table(criterion, sweep):
    reports, _ = sweep
    summary = summarize(reports["full"])
    table = format_table({"HIA": summary})
    print(table)
    header = table.splitlines()[0].split()
    layout_ok = header == ["Model", "P-MSE", "P-PCC", "W-Acc", "W-Stress", "W-Total",
                           "U-Acc", "U-Comp", "U-Fluency", "U-Prosodic", "U-Total"]
    cells = table.splitlines()[2].split()[1:]
    layout_ok &= len(cells) == 10 and all("±" in c for c in cells)
    stds = {a: summary[f"utterance.{a}"][1] for a in UTT_ASPECTS}
    widest = max(stds, key=stds.get)
    passed = layout_ok and widest == "completeness"
    criterion.record(9, "five-seed mean ± std table", passed,
                     "utterance stds " + ", ".join(f"{a} {s:.4f}" for a, s in stds.items()))
    assert layout_ok
    assert widest == "completeness", stds


# ---------------------------------------------------------------------------
# 5. metric algebra


def test_criterion_5_metric_algebra(criterion):
    rng = np.random.default_rng(17)
    tol = 1e-12
    failures = []
    for case in range(1000):
        n = int(rng.integers(2, 60))
        x = rng.standard_normal(n) * rng.uniform(0.1, 10.0)
        y = rng.uniform(-1, 1) * x + rng.standard_normal(n)
        a = rng.uniform(0.1, 10.0) * rng.choice([-1.0, 1.0])
        b = rng.uniform(-100.0, 100.0)
        r = pcc(x, y)
        checks = {"symmetry": abs(r - pcc(y, x)) <= tol,
                  "affine": abs(pcc(a * x + b, y) - math.copysign(1.0, a) * r) <= tol,
                  "bounds": -1.0 <= r <= 1.0,
                  "self": abs(pcc(x, x) - 1.0) <= tol,
                  "mse_self": mse(x, x) == 0.0}
        failures += [f"{k}@{case}" for k, ok in checks.items() if not ok]
    suite = pcc_properties_suite(1000, seed=17, tol=tol)
    failures += [k for k, ok in suite.items() if not ok]
    passed = not failures
    criterion.record(5, "PCC and MSE algebra", passed, "1000 cases" if passed else ", ".join(failures[:5]))
    assert passed, failures[:10]


# ---------------------------------------------------------------------------
# 6. learning-rate schedule


def test_criterion_6_lr_schedule(criterion):
    want = {1: 1e-3, 20: 1e-3, 25: 5e-4, 30: 2.5e-4, 100: 1e-3 * 0.5 ** 16}
    got = {e: lr_at(e, TrainConfig()) for e in want}
    passed = got == want
    criterion.record(6, "learning-rate schedule", passed, ", ".join(f"{e}:{v:.6g}" for e, v in got.items()))
    assert passed, got


# ---------------------------------------------------------------------------
# 7. mask soundness


def test_criterion_7_mask_soundness(criterion):
    samples = synth_generate(SynthConfig(n_utterances=6, seed=4))
    batch = collate(samples)
    pad = batch.phone_mask == 0
    assert pad.any()
    noisy = replace(batch, gop=batch.gop.copy())
    noisy.gop[pad] = np.random.default_rng(0).normal(0.0, 100.0, (int(pad.sum()), 84))
    model = HIAModel(ModelConfig(), seed=6)

    def run(b):
        model.zero_grad()
        scores = model.forward(b, training=False)
        rep = total_loss(scores, b)
        tn.backward(rep.tensor)
        pm, wm = b.phone_mask > 0, b.word_mask > 0
        metrics = report_from_predictions(scores.s_phn.data[pm], b.phone_targets[pm], scores.s_word.data[wm],
                                          b.word_targets[wm], scores.s_utt.data, b.utt_targets)
        grads = {k: p.grad.copy() for k, p in model.parameters().items() if p.grad is not None}
        return rep.total, metrics.to_dict(), grads

    (la, ma, ga), (lb, mb, gb) = run(batch), run(noisy)
    grads_equal = ga.keys() == gb.keys() and all(np.array_equal(ga[k], gb[k]) for k in ga)
    passed = la == lb and ma == mb and grads_equal
    criterion.record(7, "pad inputs are invisible", passed, f"{int(pad.sum())} pad positions perturbed")
    assert la == lb
    assert ma == mb
    assert grads_equal


# ---------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(criterion, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"embed_dim": 16, "enc_layers": 1, "dec_layers": 1},
                               "train": {"epochs": 3, "batch_size": 10},
                               "synth": {"n_utterances": 60}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "train.json"), "--seed", "1"]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "dev.json"), "--seed", "2",
                 "--n", "20"]) == 0
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "train.json"),
                     "--dev", str(tmp_path / "dev.json"), "--out-ckpt", str(tmp_path / f"{run}.json"),
                     "--seed", "7"]) == 0
    same_ckpt = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    same_hist = (tmp_path / "a.history.csv").read_bytes() == (tmp_path / "b.history.csv").read_bytes()
    passed = same_ckpt and same_hist
    criterion.record(8, "bit-identical reruns", passed, f"checkpoint {same_ckpt}, history {same_hist}")
    assert passed
