"""Losses, Adam, the step learning-rate schedule and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import UTT_ASPECTS, WORD_ASPECTS, Batch, UtteranceSample, make_batches
from .metrics import COLUMNS, MetricReport, evaluate
from .model import HIAModel, ModelConfig, ScoreSet
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 100
    halve_after: int = 20
    halve_every: int = 5
    batch_size: int = 25
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch_size: int = 100
    bucket: bool = True

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.halve_every < 1 or self.halve_after < 0:
            raise ValueError("halve_every must be >= 1 and halve_after >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean of squared errors over positions where ``mask`` is 1.

    Errors are multiplied by the mask before squaring, so padded predictions
    contribute neither value nor gradient.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape or target.shape != mask.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape}, {target.shape}, {mask.shape}")
    n = mask.sum()
    if n <= 0:
        raise ValueError("mse_loss with an empty mask")
    diff = tn.mul(pred - Tensor(target), Tensor(mask))
    return tn.scale(tn.tsum(tn.square(diff)), 1.0 / n)


@dataclass
class LossReport:
    phone: float
    word: dict[str, float]
    utt: dict[str, float]
    granularity: dict[str, float]
    total: float
    tensor: Tensor | None = field(default=None, repr=False)


def _aspect_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-aspect masked MSE for (..., A) predictions, returned as an (A,) tensor."""
    lead = tuple(range(pred.ndim - 1))
    counts = mask.sum(axis=lead)
    if np.any(counts <= 0):
        raise ValueError("an aspect has no labelled targets in this batch")
    diff = tn.mul(pred - Tensor(target), Tensor(mask))
    return tn.mul(tn.tsum(tn.square(diff), axis=lead), Tensor(1.0 / counts))


def total_loss(scores: ScoreSet, batch: Batch) -> LossReport:
    """Sum over granularities of the mean aspect MSE at that granularity."""
    phone = mse_loss(scores.s_phn, batch.phone_targets, batch.phone_mask)
    word = _aspect_mse(scores.s_word, batch.word_targets, batch.word_target_mask)
    utt = _aspect_mse(scores.s_utt, batch.utt_targets, batch.utt_target_mask)
    word_mean = tn.mean(word)
    utt_mean = tn.mean(utt)
    total = phone + word_mean + utt_mean
    return LossReport(
        phone=phone.item(),
        word=dict(zip(WORD_ASPECTS, word.data.tolist())),
        utt=dict(zip(UTT_ASPECTS, utt.data.tolist())),
        granularity={"phoneme": phone.item(), "word": word_mean.item(), "utterance": utt_mean.item()},
        total=total.item(),
        tensor=total,
    )


# ---------------------------------------------------------------------------
# optimisation


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based epoch: constant, then halved every ``halve_every`` epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    halvings = max(0, (epoch - cfg.halve_after) // cfg.halve_every)
    return cfg.lr0 * 0.5 ** halvings


class Adam:
    """Adam with bias correction over one flat buffer.

    On construction every parameter's storage is moved into a single
    contiguous vector (each ``Tensor.data`` becomes a view into it), so an
    update is a handful of vector operations regardless of parameter count.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        sizes = [p.data.size for p in params.values()]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.flat = np.empty(int(self.offsets[-1]))
        for (lo, hi), p in zip(zip(self.offsets[:-1], self.offsets[1:]), params.values()):
            self.flat[lo:hi] = p.data.reshape(-1)
            p.data = self.flat[lo:hi].reshape(p.data.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)

    def flat_grad(self) -> np.ndarray:
        g = np.zeros_like(self.flat)
        for (lo, hi), p in zip(zip(self.offsets[:-1], self.offsets[1:]), self.params.values()):
            if p.grad is not None:
                g[lo:hi] = p.grad.reshape(-1)
        return g

    def step(self, lr: float) -> None:
        g = self.flat_grad()
        if not math.isfinite(g.sum()):
            bad = [n for n, p in self.params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
            raise NumericError(f"non-finite gradient for parameter(s) {bad} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        self.m *= self.b1
        self.m += (1.0 - self.b1) * g
        self.v *= self.b2
        self.v += (1.0 - self.b2) * (g * g)
        self.flat -= lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)


def adam_step(opt: Adam, lr: float) -> None:
    """One update of every parameter registered with ``opt`` from its current ``.grad``."""
    opt.step(lr)


# ---------------------------------------------------------------------------
# epoch loop


HISTORY_FIELDS = (
    ["epoch", "lr", "train_loss", "dev_loss", "dev_phone_mse"]
    + [f"dev_mse_{lvl}_{a}" for lvl, a in COLUMNS]
    + [f"dev_pcc_{lvl}_{a}" for lvl, a in COLUMNS]
)


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_dev_phone_mse: float
    history: list[dict]
    diverged: bool = False

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.history:
            writer.writerow({k: _fmt(row[k]) for k in HISTORY_FIELDS})
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dataset_loss(model: HIAModel, samples: Sequence[UtteranceSample], batch_size: int = 100) -> tuple[float, dict]:
    """Sample-weighted eval-mode total loss and per-aspect MSE over a dataset."""
    per = {f"{lvl}_{a}": [0.0, 0.0] for lvl, a in COLUMNS}
    for batch in make_batches(samples, batch_size, model.cfg.max_len, shuffle=False):
        s = model.forward(batch, training=False)
        sq_p = (s.s_phn.data - batch.phone_targets) ** 2 * batch.phone_mask
        per["phoneme_accuracy"][0] += sq_p.sum()
        per["phoneme_accuracy"][1] += batch.phone_mask.sum()
        sq_w = (s.s_word.data - batch.word_targets) ** 2 * batch.word_target_mask
        for i, a in enumerate(WORD_ASPECTS):
            per[f"word_{a}"][0] += sq_w[..., i].sum()
            per[f"word_{a}"][1] += batch.word_target_mask[..., i].sum()
        sq_u = (s.s_utt.data - batch.utt_targets) ** 2 * batch.utt_target_mask
        for i, a in enumerate(UTT_ASPECTS):
            per[f"utterance_{a}"][0] += sq_u[:, i].sum()
            per[f"utterance_{a}"][1] += batch.utt_target_mask[:, i].sum()
    mses = {k: s / n for k, (s, n) in per.items()}
    total = (mses["phoneme_accuracy"]
             + np.mean([mses[f"word_{a}"] for a in WORD_ASPECTS])
             + np.mean([mses[f"utterance_{a}"] for a in UTT_ASPECTS]))
    return float(total), mses


def fit(model: HIAModel, train_set: Sequence[UtteranceSample], dev_set: Sequence[UtteranceSample],
        cfg: TrainConfig) -> FitResult:
    """Train with Adam, keeping the parameters with the lowest dev phoneme MSE."""
    cfg.validate()
    if not train_set or not dev_set:
        raise ValueError("fit needs non-empty train and dev sets")
    params = model.parameters()
    opt = Adam(params, cfg.betas, cfg.adam_eps)
    drop_rng = np.random.default_rng([cfg.seed, 2])
    best_state = model.state_dict()
    best_mse, best_epoch = math.inf, 0
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        batches = make_batches(train_set, cfg.batch_size, model.cfg.max_len,
                               seed=[cfg.seed, 1, epoch], bucket=cfg.bucket)
        running, seen = 0.0, 0
        try:
            for batch in batches:
                model.zero_grad()
                report = total_loss(model.forward(batch, training=True, rng=drop_rng), batch)
                if not math.isfinite(report.total):
                    raise NumericError(f"loss is {report.total}")
                tn.backward(report.tensor)
                opt.step(lr)
                running += report.total * batch.size
                seen += batch.size
        except NumericError as exc:
            log.error("training diverged at epoch %d: %s; keeping epoch %d", epoch, exc, best_epoch)
            model.load_state_dict(best_state)
            return FitResult(best_state, best_epoch, best_mse, history, diverged=True)

        dev_report = evaluate(model, dev_set, cfg.eval_batch_size)
        dev_total, dev_mses = dataset_loss(model, dev_set, cfg.eval_batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": running / seen, "dev_loss": dev_total,
               "dev_phone_mse": dev_report.phone_mse}
        for lvl, a in COLUMNS:
            row[f"dev_mse_{lvl}_{a}"] = dev_mses[f"{lvl}_{a}"]
            row[f"dev_pcc_{lvl}_{a}"] = dev_report.pcc[lvl][a]
        history.append(row)
        log.info("epoch %d lr %.2e train %.4f dev phone mse %.4f", epoch, lr, row["train_loss"],
                 dev_report.phone_mse)
        if dev_report.phone_mse < best_mse:
            best_mse, best_epoch = dev_report.phone_mse, epoch
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return FitResult(best_state, best_epoch, best_mse, history)


def run_seeds(train_set, dev_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
              seeds: Sequence[int], eval_set=None) -> list[MetricReport]:
    """Train one model per seed and evaluate its best checkpoint on ``eval_set`` (default: dev)."""
    from dataclasses import replace

    reports = []
    for seed in seeds:
        model = HIAModel(model_cfg, seed=seed)
        fit(model, train_set, dev_set, replace(train_cfg, seed=seed))
        rep = evaluate(model, eval_set if eval_set is not None else dev_set, train_cfg.eval_batch_size)
        rep.extra["seed"] = seed
        reports.append(rep)
    return reports
