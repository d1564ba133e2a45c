"""Detection scores, EER and DET operating points.

Scores follow the "higher means more bonafide" convention. At threshold
``theta`` a spoof is falsely accepted when ``score >= theta`` and a bonafide
utterance is falsely rejected when ``score < theta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import BONAFIDE, SPOOF
from .distill import DegenerateEmbeddingError


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    label: str
    score: float

    def __post_init__(self):
        if self.label not in (BONAFIDE, SPOOF):
            raise ValueError(f"{self.utt_id}: label must be bonafide or spoof, got {self.label!r}")
        if not np.isfinite(self.score):
            raise ValueError(f"{self.utt_id}: non-finite score {self.score}")


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float
    num_bonafide: int
    num_spoof: int


def _split_scores(records):
    bona = np.array([r.score for r in records if r.label == BONAFIDE], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label == SPOOF], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise ValueError(
            f"EER needs both classes; got {bona.size} bonafide and {spoof.size} spoof scores"
        )
    return bona, spoof


def operating_points(bona, spoof):
    """FAR/FRR at every distinct score and at +inf; thresholds ascending."""
    thresholds = np.unique(np.concatenate([bona, spoof]))
    bona = np.sort(bona)
    spoof = np.sort(spoof)
    far = 1.0 - np.searchsorted(spoof, thresholds, side="left") / spoof.size
    frr = np.searchsorted(bona, thresholds, side="left") / bona.size
    thresholds = np.append(thresholds, np.inf)
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    return far, frr, thresholds


def eer_from_scores(bona, spoof):
    """``(eer, threshold)`` from raw score arrays."""
    far, frr, thr = operating_points(np.asarray(bona, float), np.asarray(spoof, float))
    diff = far - frr  # non-increasing in the threshold
    i = int(np.flatnonzero(diff <= 0)[0])
    if diff[i] == 0 or i == 0:
        return float(far[i]), float(thr[i])
    # FAR > FRR at i-1 and FAR < FRR at i: interpolate the crossing
    a = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + a * (far[i] - far[i - 1])
    if np.isfinite(thr[i]):
        theta = thr[i - 1] + a * (thr[i] - thr[i - 1])
    else:
        theta = thr[i - 1]
    return float(eer), float(theta)


def compute_eer(records):
    bona, spoof = _split_scores(records)
    eer, theta = eer_from_scores(bona, spoof)
    return EERResult(eer, theta, int(bona.size), int(spoof.size))


def det_points(records):
    """``(far, frr, threshold)`` staircase, one point per distinct score plus +inf."""
    bona, spoof = _split_scores(records)
    far, frr, thr = operating_points(bona, spoof)
    return list(zip(far.tolist(), frr.tolist(), thr.tolist()))


def pooled_eer(sets):
    """EER over the union of several record lists under one global threshold."""
    sets = list(sets)
    if not sets:
        raise ValueError("pooled_eer needs at least one record set")
    return compute_eer([r for s in sets for r in s])


# -- similarity scoring ------------------------------------------------------

def _rows(x):
    x = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x


def cosine_rows(a, b, utt_ids=None):
    a, b = _rows(a), _rows(b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    bad = np.flatnonzero((na < 1e-12) | (nb < 1e-12))
    if bad.size:
        i = int(bad[0])
        raise DegenerateEmbeddingError(i, utt_id=None if utt_ids is None else utt_ids[i])
    return np.sum(a * b, axis=1) / (na * nb)


def stack_similarity(stack_t, stack_s, lmap, utt_ids=None):
    """Mean cosine over every mapped pair (layers plus backend), one value per row."""
    pairs = lmap.all_pairs()
    total = 0.0
    for si, ti in pairs:
        total = total + cosine_rows(stack_t.get(ti), stack_s.get(si), utt_ids)
    return total / len(pairs)


def score_utterance(teacher, student, waveform, lmap=None, utt_id=None):
    """Teacher-student similarity of one waveform, in ``[-1, 1]``."""
    from .models import layer_map

    if not teacher.config.compatible_with(student.config):
        raise ValueError("teacher and student configs do not share frontend/d_model")
    lmap = lmap or layer_map(teacher.config.num_layers, student.config.num_layers)
    x = np.asarray(waveform, dtype=np.float64)[None, :]
    with ad.no_grad():
        st = teacher(x).numpy()
        ss = student(x).numpy()
    ids = None if utt_id is None else [utt_id]
    return float(stack_similarity(st, ss, lmap, ids)[0])


# -- score files -------------------------------------------------------------

class ScoreFileError(ValueError):
    pass


def format_scores(records):
    """``<utt_id> <label> <score:%.6f>`` per line."""
    return "".join(f"{r.utt_id} {r.label} {r.score:.6f}\n" for r in records)


def parse_scores(text, source="<scores>"):
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 fields, got {len(parts)}")
            records.append(ScoreRecord(parts[0], parts[1], float(parts[2])))
        except ValueError as exc:
            raise ScoreFileError(f"{source}:{lineno}: malformed score line {line!r} ({exc})") from None
    if not records:
        raise ScoreFileError(f"{source}: no scores")
    return records


def read_scores(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ScoreFileError(f"score file not found: {path}") from None
    return parse_scores(text, str(path))
