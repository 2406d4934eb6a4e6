"""Corpus-level evaluation: phoneme MSE and per-aspect Pearson correlation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import UTT_ASPECTS, WORD_ASPECTS

# Table column order: phoneme, word x3, utterance x5
COLUMNS = (
    ("phoneme", "accuracy"),
    *(("word", a) for a in WORD_ASPECTS),
    *(("utterance", a) for a in UTT_ASPECTS),
)
_SHORT = {"accuracy": "Acc", "stress": "Stress", "total": "Total", "completeness": "Comp",
          "fluency": "Fluency", "prosodic": "Prosodic"}


def pcc(pred, truth) -> float | None:
    """Pearson correlation of two equal-length vectors; None when either is constant."""
    s = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"pcc length mismatch: {s.size} vs {y.size}")
    if s.size < 2:
        raise ValueError("pcc needs at least two points")
    ds = s - s.mean()
    dy = y - y.mean()
    sss = float(ds @ ds)
    syy = float(dy @ dy)
    if sss == 0.0 or syy == 0.0:
        return None
    r = float(ds @ dy) / math.sqrt(sss * syy)
    return min(1.0, max(-1.0, r))


def mse(pred, truth) -> float:
    s = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("mse needs two non-empty vectors of equal length")
    d = s - y
    return float(d @ d) / d.size


@dataclass
class MetricReport:
    phone_mse: float
    pcc: dict[str, dict[str, float | None]]
    n: dict[str, int]
    extra: dict = field(default_factory=dict)

    def undefined(self) -> list[str]:
        return [f"{lvl}.{a}" for lvl, a in COLUMNS if self.pcc[lvl][a] is None]

    def row(self) -> list[float]:
        """MSE followed by the nine PCC columns; NaN marks undefined."""
        vals = [self.phone_mse]
        for lvl, a in COLUMNS:
            v = self.pcc[lvl][a]
            vals.append(float("nan") if v is None else v)
        return vals

    def to_dict(self) -> dict:
        return {"phoneme": {"mse": self.phone_mse, "pcc": self.pcc["phoneme"]["accuracy"]},
                "word": dict(self.pcc["word"]), "utterance": dict(self.pcc["utterance"]),
                "n": dict(self.n), "undefined": self.undefined(), **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_predictions(phone_pred, phone_true, word_pred, word_true, utt_pred, utt_true) -> MetricReport:
    """Pool flat prediction arrays (phones,), (words, 3), (utts, 5) into a report."""
    phone_pred, phone_true = np.asarray(phone_pred), np.asarray(phone_true)
    word_pred, word_true = np.asarray(word_pred).reshape(-1, 3), np.asarray(word_true).reshape(-1, 3)
    utt_pred, utt_true = np.asarray(utt_pred).reshape(-1, 5), np.asarray(utt_true).reshape(-1, 5)
    if phone_true.size == 0 or len(utt_true) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    table = {
        "phoneme": {"accuracy": pcc(phone_pred, phone_true)},
        "word": {a: pcc(word_pred[:, i], word_true[:, i]) for i, a in enumerate(WORD_ASPECTS)},
        "utterance": {a: pcc(utt_pred[:, i], utt_true[:, i]) for i, a in enumerate(UTT_ASPECTS)},
    }
    n = {"phoneme": int(phone_true.size), "word": int(len(word_true)), "utterance": int(len(utt_true))}
    return MetricReport(mse(phone_pred, phone_true), table, n)


def evaluate(model, samples, batch_size: int = 50) -> MetricReport:
    """Score every sample with ``model`` in eval mode and pool per aspect."""
    from .data import make_batches

    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pp, pt, wp, wt, up, ut = [], [], [], [], [], []
    for batch in make_batches(samples, batch_size, max_len=model.cfg.max_len, shuffle=False):
        scores = model.forward(batch, training=False)
        pm = batch.phone_mask > 0
        wm = batch.word_mask > 0
        pp.append(scores.s_phn.data[pm])
        pt.append(batch.phone_targets[pm])
        wp.append(scores.s_word.data[wm])
        wt.append(batch.word_targets[wm])
        up.append(scores.s_utt.data)
        ut.append(batch.utt_targets)
    return report_from_predictions(np.concatenate(pp), np.concatenate(pt), np.concatenate(wp),
                                   np.concatenate(wt), np.concatenate(up), np.concatenate(ut))


def pcc_properties_suite(n_cases: int = 1000, seed: int = 0, tol: float = 1e-12) -> dict[str, bool]:
    """Randomised checks of symmetry, affine equivariance, bounds and pcc(x, x) = 1."""
    rng = np.random.default_rng(seed)
    ok = {"symmetry": True, "affine": True, "bounds": True, "self": True, "sign_flip": True}
    for _ in range(n_cases):
        n = int(rng.integers(2, 40))
        x = rng.standard_normal(n)
        y = 0.5 * x + rng.standard_normal(n)
        a = rng.uniform(0.2, 5.0) * rng.choice([-1.0, 1.0])
        b = rng.uniform(-10.0, 10.0)
        r = pcc(x, y)
        if r is None:
            continue
        ok["symmetry"] &= abs(r - pcc(y, x)) <= tol
        ok["affine"] &= abs(pcc(a * x + b, y) - math.copysign(1.0, a) * r) <= tol
        ok["bounds"] &= -1.0 - tol <= r <= 1.0 + tol
        ok["self"] &= abs(pcc(x, x) - 1.0) <= tol
        ok["sign_flip"] &= abs(pcc(-x, y) + r) <= tol
    return ok


# ---------------------------------------------------------------------------
# multi-run summaries


def summarize(reports: Sequence[MetricReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample std (ddof=1) per column across runs, ignoring undefined runs."""
    names = ["phoneme.mse"] + [f"{lvl}.{a}" for lvl, a in COLUMNS]
    rows = np.array([r.row() for r in reports], dtype=np.float64)
    out = {}
    for j, name in enumerate(names):
        col = rows[:, j][~np.isnan(rows[:, j])]
        if col.size == 0:
            out[name] = (float("nan"), float("nan"))
        else:
            out[name] = (float(col.mean()), float(col.std(ddof=1)) if col.size > 1 else 0.0)
    return out


def format_table(rows: dict[str, dict[str, tuple[float, float]] | MetricReport]) -> str:
    """Aligned text table: model name, phoneme MSE/PCC, word PCC x3, utterance PCC x5."""
    head = ["Model", "P-MSE", "P-PCC"] + [f"W-{_SHORT[a]}" for a in WORD_ASPECTS] + \
           [f"U-{_SHORT[a]}" for a in UTT_ASPECTS]
    names = ["phoneme.mse"] + [f"{lvl}.{a}" for lvl, a in COLUMNS]
    lines = []
    for label, val in rows.items():
        if isinstance(val, MetricReport):
            cells = ["-" if math.isnan(v) else f"{v:.3f}" for v in val.row()]
        else:
            cells = []
            for nm in names:
                m, s = val[nm]
                cells.append("-" if math.isnan(m) else f"{m:.3f}±{s:.3f}")
        lines.append([label] + cells)
    widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines])
