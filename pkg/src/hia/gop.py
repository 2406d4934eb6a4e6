"""Goodness-of-pronunciation features from frame-level state posteriors.

A posteriorgram holds P(s|o_t) for every frame t and acoustic state s.  States
are summed into phone posteriors, which give a segment-averaged log phone
posterior (LPP) for each of the 42 phones and the log posterior ratio (LPR) of
each phone against the canonical one.  The GOP vector of a segment is the 42
LPPs followed by the 42 LPRs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_PHONES = 42
GOP_DIM = 2 * N_PHONES
POSTERIOR_FLOOR = 1e-10

# ARPAbet without stress marks: the pure-phone inventory of a Librispeech
# recipe.  Index order fixes the GOP vector layout.
PHONES = (
    "AA", "AE", "AH", "AO", "AW", "AX", "AY", "B", "CH", "D", "DH", "EH", "ER",
    "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW",
    "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
    "SIL", "SPN",
)
assert len(PHONES) == N_PHONES


class GopFormatError(ValueError):
    """Malformed posteriorgram or alignment input."""


@dataclass(frozen=True)
class AlignmentSegment:
    phone: int
    t_s: int
    t_e: int


@dataclass(frozen=True)
class GopFeature:
    lpp: np.ndarray
    lpr: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.lpp, self.lpr])


class PosteriorGram:
    """State posteriors (T_f x S) plus the state -> phone map."""

    def __init__(self, frames, state_to_phone, n_phones: int = N_PHONES, atol: float = 1e-9):
        frames = np.asarray(frames, dtype=np.float64)
        state_to_phone = np.asarray(state_to_phone, dtype=np.int64)
        if frames.ndim != 2:
            raise GopFormatError(f"frames must be a 2-d matrix, got shape {frames.shape}")
        if state_to_phone.shape != (frames.shape[1],):
            raise GopFormatError(
                f"state_to_phone has {state_to_phone.size} entries for {frames.shape[1]} states")
        if np.any(frames < 0):
            raise GopFormatError("negative posterior")
        if frames.size and np.any(np.abs(frames.sum(axis=1) - 1.0) > atol):
            raise GopFormatError("posterior rows must sum to 1")
        if state_to_phone.size and (state_to_phone.min() < 0 or state_to_phone.max() >= n_phones):
            raise GopFormatError(f"state mapped outside phone range [0, {n_phones})")
        self.frames = frames
        self.state_to_phone = state_to_phone
        self.n_phones = n_phones
        # frame x phone posterior table, the summation over states
        onehot = np.zeros((state_to_phone.size, n_phones))
        onehot[np.arange(state_to_phone.size), state_to_phone] = 1.0
        self.phone_table = frames @ onehot

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def check_segment(self, seg: AlignmentSegment) -> None:
        if not 0 <= seg.t_s <= seg.t_e < self.n_frames:
            raise GopFormatError(f"segment {seg} outside frames [0, {self.n_frames})")
        self._check_phone(seg.phone)

    def _check_phone(self, phone: int) -> None:
        if not 0 <= phone < self.n_phones:
            raise KeyError(f"unknown phone id {phone}")

    def segment_log_posteriors(self, seg: AlignmentSegment) -> np.ndarray:
        """Floored log P(p|o_t) for every frame of ``seg`` and every phone."""
        self.check_segment(seg)
        block = self.phone_table[seg.t_s:seg.t_e + 1]
        return np.log(np.maximum(block, POSTERIOR_FLOOR))


def phone_posterior(pg: PosteriorGram, phone: int, t: int) -> float:
    pg._check_phone(phone)
    if not 0 <= t < pg.n_frames:
        raise IndexError(f"frame {t} outside [0, {pg.n_frames})")
    return float(pg.frames[t, pg.state_to_phone == phone].sum())


def lpp(pg: PosteriorGram, seg: AlignmentSegment, phone: int) -> float:
    pg._check_phone(phone)
    return float(pg.segment_log_posteriors(seg)[:, phone].mean())


def lpr(pg: PosteriorGram, seg: AlignmentSegment, phone_j: int, phone_i: int) -> float:
    """Summed log posterior of ``phone_j`` minus that of ``phone_i`` over the segment."""
    pg._check_phone(phone_j)
    pg._check_phone(phone_i)
    logs = pg.segment_log_posteriors(seg)
    return float(logs[:, phone_j].sum() - logs[:, phone_i].sum())


def gop_vector(pg: PosteriorGram, seg: AlignmentSegment) -> GopFeature:
    logs = pg.segment_log_posteriors(seg)
    sums = logs.sum(axis=0)
    lpr_vec = sums - sums[seg.phone]
    lpr_vec[seg.phone] = 0.0
    return GopFeature(lpp=logs.mean(axis=0), lpr=lpr_vec)


def extract(pg: PosteriorGram, segments) -> np.ndarray:
    """GOP matrix (n_segments x 84) for an alignment."""
    if not segments:
        return np.zeros((0, 2 * pg.n_phones))
    return np.stack([gop_vector(pg, s).vector() for s in segments])


# ---------------------------------------------------------------------------
# file formats


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GopFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise GopFormatError(f"{path}: expected a JSON object")
    return obj


def load_posteriorgram(path) -> PosteriorGram:
    obj = _read_json(path)
    try:
        frames, s2p = obj["frames"], obj["state_to_phone"]
    except KeyError as exc:
        raise GopFormatError(f"{path}: missing field {exc.args[0]!r}") from None
    if len(frames) == 0:
        frames = np.zeros((0, len(s2p)))
    return PosteriorGram(frames, s2p)


def load_alignment(path) -> list[AlignmentSegment]:
    obj = _read_json(path)
    if "segments" not in obj or not isinstance(obj["segments"], list):
        raise GopFormatError(f"{path}: missing 'segments' list")
    segs = []
    for i, rec in enumerate(obj["segments"]):
        try:
            segs.append(AlignmentSegment(int(rec["phone"]), int(rec["t_s"]), int(rec["t_e"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise GopFormatError(f"{path}: segment {i} malformed ({exc})") from None
    return segs


def run_file(posteriors_path, align_path, out_path) -> int:
    """Extract GOP vectors for an alignment file and write them as JSON."""
    pg = load_posteriorgram(posteriors_path)
    segs = load_alignment(align_path)
    try:
        feats = extract(pg, segs)
    except KeyError as exc:
        raise GopFormatError(str(exc)) from None
    Path(out_path).write_text(json.dumps(feats.tolist()))
    return len(segs)
