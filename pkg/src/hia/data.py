"""Dataset schema, batching and the synthetic corpus generator.

Files follow a speechocean762-shaped JSON layout with native score ranges
(phoneme 0-2, word and utterance 0-10).  Word and utterance scores are mapped
to 0-2 on load so every granularity shares one scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gop import GOP_DIM, N_PHONES

WORD_ASPECTS = ("accuracy", "stress", "total")
UTT_ASPECTS = ("accuracy", "completeness", "fluency", "prosodic", "total")
PAD_PHONE = N_PHONES
NATIVE_MAX = 10.0


class DatasetError(ValueError):
    def __init__(self, index: int, field_name: str, message: str):
        super().__init__(f"record {index}, field {field_name!r}: {message}")
        self.index = index
        self.field = field_name


def rescale(raw: float) -> float:
    """Map a 0-10 word/utterance score onto the 0-2 phoneme scale."""
    if not 0.0 <= raw <= NATIVE_MAX:
        raise ValueError(f"score {raw} outside [0, {NATIVE_MAX}]")
    return raw / 5.0


@dataclass
class UtteranceSample:
    phones: np.ndarray        # (T,) int
    gop: np.ndarray           # (T, 84)
    word_id: np.ndarray       # (T,) int, 0-based contiguous
    phone_scores: np.ndarray  # (T,)
    word_scores: np.ndarray   # (W, 3) accuracy, stress, total on 0-2
    utt_scores: np.ndarray    # (5,) accuracy, completeness, fluency, prosodic, total on 0-2

    def __len__(self) -> int:
        return len(self.phones)

    @property
    def n_words(self) -> int:
        return len(self.word_scores)

    def validate(self, index: int = 0) -> "UtteranceSample":
        T = len(self.phones)
        if T == 0:
            raise DatasetError(index, "phones", "empty utterance")
        if self.phones.min() < 0 or self.phones.max() >= N_PHONES:
            raise DatasetError(index, "phones", f"phone id outside [0, {N_PHONES})")
        if self.gop.shape != (T, GOP_DIM):
            raise DatasetError(index, "gop", f"expected shape ({T}, {GOP_DIM}), got {self.gop.shape}")
        if not np.all(np.isfinite(self.gop)):
            raise DatasetError(index, "gop", "non-finite value")
        if self.word_id.shape != (T,):
            raise DatasetError(index, "word_id", f"length {len(self.word_id)} != {T} phones")
        if self.phone_scores.shape != (T,):
            raise DatasetError(index, "phone_scores", f"length {len(self.phone_scores)} != {T} phones")
        steps = np.diff(self.word_id)
        if self.word_id[0] != 0 or np.any((steps != 0) & (steps != 1)):
            raise DatasetError(index, "word_id", "must start at 0 and grow in unit steps")
        n_words = int(self.word_id[-1]) + 1
        if self.word_scores.shape != (n_words, len(WORD_ASPECTS)):
            raise DatasetError(index, "word_scores", f"expected {n_words} words, got {len(self.word_scores)}")
        if self.utt_scores.shape != (len(UTT_ASPECTS),):
            raise DatasetError(index, "utt_scores", "expected five aspects")
        for name in ("phone_scores", "word_scores", "utt_scores"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 2.0:
                raise DatasetError(index, name, "scores must lie in [0, 2]")
        return self


# ---------------------------------------------------------------------------
# JSON io


def _record_to_sample(rec: dict, index: int) -> UtteranceSample:
    if not isinstance(rec, dict):
        raise DatasetError(index, "<record>", "expected an object")
    for key in ("phones", "gop", "word_id", "phone_scores", "word_scores", "utt_scores"):
        if key not in rec:
            raise DatasetError(index, key, "missing")
    try:
        phones = np.asarray(rec["phones"], dtype=np.int64).reshape(-1)
        gop = np.asarray(rec["gop"], dtype=np.float64)
        if gop.size == 0:
            gop = gop.reshape(0, GOP_DIM)
        word_id = np.asarray(rec["word_id"], dtype=np.int64).reshape(-1)
        phone_scores = np.asarray(rec["phone_scores"], dtype=np.float64).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise DatasetError(index, "<arrays>", str(exc)) from None
    words = []
    for w, ws in enumerate(rec["word_scores"]):
        try:
            words.append([rescale(float(ws[a])) for a in WORD_ASPECTS])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(index, "word_scores", f"word {w}: {exc}") from None
    try:
        utt = [rescale(float(rec["utt_scores"][a])) for a in UTT_ASPECTS]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(index, "utt_scores", str(exc)) from None
    sample = UtteranceSample(phones, gop, word_id, phone_scores,
                             np.asarray(words, dtype=np.float64).reshape(-1, len(WORD_ASPECTS)),
                             np.asarray(utt, dtype=np.float64))
    return sample.validate(index)


def sample_to_record(s: UtteranceSample) -> dict:
    return {
        "phones": s.phones.tolist(),
        "gop": s.gop.tolist(),
        "word_id": s.word_id.tolist(),
        "phone_scores": s.phone_scores.tolist(),
        "word_scores": [dict(zip(WORD_ASPECTS, (row * 5.0).tolist())) for row in s.word_scores],
        "utt_scores": dict(zip(UTT_ASPECTS, (s.utt_scores * 5.0).tolist())),
    }


def load_dataset(path) -> list[UtteranceSample]:
    text = Path(path).read_text()
    if not text.strip():
        return []
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(-1, "<file>", f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("utts"), list):
        raise DatasetError(-1, "utts", "top level must be {\"utts\": [...]}")
    return [_record_to_sample(rec, i) for i, rec in enumerate(obj["utts"])]


def save_dataset(samples: Sequence[UtteranceSample], path) -> None:
    payload = {"utts": [sample_to_record(s) for s in samples]}
    Path(path).write_text(json.dumps(payload))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    phones: np.ndarray         # (B, T) int, PAD_PHONE at padding
    gop: np.ndarray            # (B, T, 84), zero at padding
    phone_mask: np.ndarray     # (B, T) 1.0 for real phonemes
    word_id: np.ndarray        # (B, T) int, -1 at padding
    word_mask: np.ndarray      # (B, W)
    word_pool: np.ndarray      # (B, W, T) rows average a word's phonemes
    word_expand: np.ndarray    # (B, T, W) one-hot phoneme -> word
    phone_targets: np.ndarray  # (B, T)
    word_targets: np.ndarray   # (B, W, 3)
    word_target_mask: np.ndarray  # (B, W, 3)
    utt_targets: np.ndarray    # (B, 5)
    utt_target_mask: np.ndarray   # (B, 5)
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.phones.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.phone_mask.sum(axis=1).astype(np.int64)


def collate(samples: Sequence[UtteranceSample], index: Sequence[int] | None = None) -> Batch:
    """Pad ``samples`` to the longest one and build masks and span tables."""
    B = len(samples)
    T = max(len(s) for s in samples)
    W = max(s.n_words for s in samples)
    phones = np.full((B, T), PAD_PHONE, dtype=np.int64)
    gop = np.zeros((B, T, GOP_DIM))
    phone_mask = np.zeros((B, T))
    word_id = np.full((B, T), -1, dtype=np.int64)
    word_mask = np.zeros((B, W))
    pool = np.zeros((B, W, T))
    expand = np.zeros((B, T, W))
    phone_t = np.zeros((B, T))
    word_t = np.zeros((B, W, len(WORD_ASPECTS)))
    utt_t = np.zeros((B, len(UTT_ASPECTS)))
    for b, s in enumerate(samples):
        n = len(s)
        phones[b, :n] = s.phones
        gop[b, :n] = s.gop
        phone_mask[b, :n] = 1.0
        word_id[b, :n] = s.word_id
        word_mask[b, :s.n_words] = 1.0
        expand[b, np.arange(n), s.word_id] = 1.0
        counts = np.bincount(s.word_id, minlength=s.n_words)
        pool[b, :s.n_words, :n] = expand[b, :n, :s.n_words].T / counts[:, None]
        phone_t[b, :n] = s.phone_scores
        word_t[b, :s.n_words] = s.word_scores
        utt_t[b] = s.utt_scores
    idx = np.arange(B) if index is None else np.asarray(index, dtype=np.int64)
    return Batch(phones, gop, phone_mask, word_id, word_mask, pool, expand, phone_t, word_t,
                 np.repeat(word_mask[:, :, None], len(WORD_ASPECTS), axis=2), utt_t,
                 np.ones((B, len(UTT_ASPECTS))), idx)


def make_batches(samples: Sequence[UtteranceSample], batch_size: int, max_len: int = 50,
                 seed=0, shuffle: bool = True, bucket: bool = False) -> list[Batch]:
    """Split ``samples`` into padded batches, shuffled deterministically by ``seed``.

    With ``bucket`` the shuffled order is cut into windows of eight batches,
    each window is sorted by length before batching, and the batch order is
    shuffled again.  This keeps padding low without a fixed batch order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    too_long = [i for i, s in enumerate(samples) if len(s) > max_len]
    if too_long:
        raise ValueError(f"samples longer than max_len={max_len}: {too_long}")
    order = np.arange(len(samples))
    rng = np.random.default_rng(seed)
    if shuffle:
        order = rng.permutation(len(samples))
    chunks = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    if bucket:
        window = 8 * batch_size
        chunks = []
        for k in range(0, len(order), window):
            part = order[k:k + window]
            part = part[np.argsort([len(samples[i]) for i in part], kind="stable")]
            chunks.extend(part[j:j + batch_size] for j in range(0, len(part), batch_size))
        if shuffle:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [collate([samples[i] for i in idx], idx) for idx in chunks]


# ---------------------------------------------------------------------------
# synthetic corpus


DEFAULT_NOISE = {"phone": 0.25, "word": 0.1, "utt": 0.1, "gop": 0.3}
DEFAULT_COUPLING = {
    "word_acc_from_phone": 1.0,   # word accuracy = weight * mean phone score
    "stress_base": 1.0,
    "stress_utt": 0.45,           # utterance proficiency (2u - 1) term
    "stress_word": 0.35,          # word-level stress latent term
    "stress_interact": 0.25,      # latent x proficiency: context-dependent stress
    "gop_stress_cue": 1.0,        # strength of the stress latent in the GOP features
}


@dataclass
class SynthConfig:
    n_utterances: int = 5000
    min_words: int = 2
    max_words: int = 6
    phones_per_word: tuple[int, int] = (1, 4)
    noise_std: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    coupling: dict = field(default_factory=lambda: dict(DEFAULT_COUPLING))
    complete_rate: float = 0.995
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_utterances < 0:
            raise ValueError("n_utterances must be >= 0")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        lo, hi = self.phones_per_word
        if not 1 <= lo <= hi:
            raise ValueError("phones_per_word must be an increasing pair of positive ints")
        unknown = set(self.noise_std) - set(DEFAULT_NOISE)
        if unknown:
            raise ValueError(f"unknown noise_std keys {sorted(unknown)}")
        if any(v < 0 for v in self.noise_std.values()):
            raise ValueError("noise_std must be >= 0")
        unknown = set(self.coupling) - set(DEFAULT_COUPLING)
        if unknown:
            raise ValueError(f"unknown coupling keys {sorted(unknown)}")
        if not 0.0 <= self.complete_rate <= 1.0:
            raise ValueError("complete_rate must be in [0, 1]")
        return self


def _phone_profiles() -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-phone confusion distributions and a stress-cue direction.

    Seeded by a constant so the feature embedding is identical for every corpus.
    """
    rng = np.random.default_rng(762)
    conf = rng.dirichlet(np.full(N_PHONES, 0.3), size=N_PHONES)
    np.fill_diagonal(conf, 0.0)
    conf /= conf.sum(axis=1, keepdims=True)
    cue = rng.standard_normal(GOP_DIM)
    cue /= np.linalg.norm(cue) / math.sqrt(8.0)
    return conf, cue


_CONFUSION, _STRESS_CUE = _phone_profiles()


def gop_embedding(phone: int, score: float) -> np.ndarray:
    """Noise-free 84-dim GOP-like vector for a phone pronounced with ``score`` in [0, 2].

    Good pronunciations put most posterior mass on the canonical phone; poor
    ones leak it to that phone's confusion set.
    """
    p_canon = 0.02 + 0.96 * (score / 2.0)
    post = (1.0 - p_canon) * _CONFUSION[phone]
    post[phone] = p_canon
    logp = np.log(np.maximum(post, 1e-6))
    return np.concatenate([logp, logp - logp[phone]])


def synth_generate(cfg: SynthConfig) -> list[UtteranceSample]:
    """Draw a corpus with planted cross-granularity structure.

    Every utterance has a proficiency ``u`` that drives its phone scores, and
    every word a stress latent ``z`` visible only in that word's features.
    Word stress mixes both, including a ``z * (2u - 1)`` interaction, so the
    same word context scores differently across utterances.  Utterance aspects
    are affine in the word-score means.
    """
    cfg.validate()
    noise = {**DEFAULT_NOISE, **cfg.noise_std}
    c = {**DEFAULT_COUPLING, **cfg.coupling}
    out = []
    for i in range(cfg.n_utterances):
        rng = np.random.default_rng([cfg.seed, i])
        u = rng.uniform()
        n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        lengths = rng.integers(cfg.phones_per_word[0], cfg.phones_per_word[1] + 1, size=n_words)
        word_id = np.repeat(np.arange(n_words), lengths)
        T = len(word_id)
        phones = rng.integers(0, N_PHONES - 2, size=T)  # no SIL/SPN inside words
        phone_scores = np.clip(2.0 * u + noise["phone"] * rng.standard_normal(T), 0.0, 2.0)
        z = rng.uniform(-1.0, 1.0, size=n_words)
        eps_w = rng.standard_normal((n_words, 3))
        counts = np.bincount(word_id, minlength=n_words)
        phone_mean = np.bincount(word_id, weights=phone_scores, minlength=n_words) / counts
        acc = np.clip(c["word_acc_from_phone"] * phone_mean + noise["word"] * eps_w[:, 0], 0.0, 2.0)
        centred = 2.0 * u - 1.0
        stress = np.clip(c["stress_base"] + c["stress_utt"] * centred + c["stress_word"] * z
                         + c["stress_interact"] * z * centred + noise["word"] * eps_w[:, 1], 0.0, 2.0)
        total = np.clip(0.5 * (acc + stress) + noise["word"] * eps_w[:, 2], 0.0, 2.0)
        word_scores = np.stack([acc, stress, total], axis=1)

        w_avg = word_scores.mean()
        m_acc, m_str = acc.mean(), stress.mean()
        eps_u = noise["utt"] * rng.standard_normal(4)
        u_acc = w_avg + eps_u[0]
        u_flu = 0.6 * m_acc + 0.4 * m_str + eps_u[1]
        u_pros = 0.3 * m_acc + 0.7 * m_str + eps_u[2]
        u_tot = (u_acc + u_flu + u_pros) / 3.0 + eps_u[3]
        complete = rng.uniform() < cfg.complete_rate
        u_com = 2.0 if complete else float(np.clip(0.4 + 1.2 * u + 0.2 * rng.standard_normal(), 0.0, 1.8))
        utt = np.clip([u_acc, u_com, u_flu, u_pros, u_tot], 0.0, 2.0)

        gop = np.stack([gop_embedding(p, s) for p, s in zip(phones, phone_scores)])
        gop += c["gop_stress_cue"] * z[word_id][:, None] * _STRESS_CUE
        gop += noise["gop"] * rng.standard_normal(gop.shape)
        out.append(UtteranceSample(phones, gop, word_id, phone_scores, word_scores, np.asarray(utt)))
    return out


# ---------------------------------------------------------------------------
# correlation analysis

CORR_FIELDS = ("p_acc", "w_avg", "u_com", "u_acc", "u_flu", "u_pros", "u_tot", "w_str")


def utterance_aggregates(samples: Sequence[UtteranceSample]) -> np.ndarray:
    """(N, 8) per-utterance aggregates in ``CORR_FIELDS`` order."""
    rows = []
    for s in samples:
        u = s.utt_scores
        rows.append([s.phone_scores.mean(), s.word_scores.mean(), u[1], u[0], u[2], u[3], u[4],
                     s.word_scores[:, 1].mean()])
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(CORR_FIELDS))


def correlation_matrix(samples: Sequence[UtteranceSample]) -> tuple[tuple[str, ...], np.ndarray]:
    """Pairwise PCC of per-utterance aggregates; NaN marks zero-variance fields."""
    from .metrics import pcc

    if len(samples) < 2:
        raise ValueError("correlation_matrix needs at least two samples")
    agg = utterance_aggregates(samples)
    k = len(CORR_FIELDS)
    mat = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            r = pcc(agg[:, i], agg[:, j])
            if r is not None:
                mat[i, j] = mat[j, i] = r
    return CORR_FIELDS, mat
