"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np

from .corpus import BONAFIDE, SPOOF

LABELS = (SPOOF, BONAFIDE)  # index 0 is spoof, index 1 is bonafide


def check_waveforms(X, min_samples=1, name="X"):
    """Return ``X`` as a list of contiguous float64 1-D arrays.

    Accepts a 2-D array (one row per utterance) or a sequence of 1-D arrays
    of varying length.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        rows = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        raise ValueError(
            f"{name} must be 2-D or a sequence of waveforms; got a single 1-D array. "
            "Wrap it in a list for one utterance."
        )
    else:
        rows = list(X)
    if not rows:
        raise ValueError(f"{name} holds no waveforms")
    out = []
    for i, row in enumerate(rows):
        x = np.ascontiguousarray(row, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"{name}[{i}] must be 1-D, got shape {x.shape}")
        if x.size < min_samples:
            raise ValueError(f"{name}[{i}] has {x.size} samples; need at least {min_samples}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{name}[{i}] contains NaN or inf")
        out.append(x)
    return out


def check_labels(y, n, name="y"):
    """Map labels to ints, 1 for bonafide and 0 for spoof.

    Accepts the strings ``"bonafide"``/``"spoof"`` or the ints 1/0.
    """
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"{name} must be 1-D with {n} entries, got shape {y.shape}")
    if y.dtype.kind in "US" or y.dtype == object:
        bad = sorted({str(v) for v in y} - set(LABELS))
        if bad:
            raise ValueError(f"{name} has unknown labels {bad}; expected {LABELS}")
        return (y == BONAFIDE).astype(int)
    if y.dtype.kind in "biu":
        bad = sorted(set(np.unique(y).tolist()) - {0, 1})
        if bad:
            raise ValueError(f"{name} has unknown labels {bad}; expected 0 (spoof) or 1 (bonafide)")
        return y.astype(int)
    raise ValueError(f"{name} must hold label strings or 0/1 ints, got dtype {y.dtype}")


def check_utt_ids(utt_ids, n):
    if utt_ids is None:
        return [f"#{i}" for i in range(n)]
    utt_ids = [str(u) for u in utt_ids]
    if len(utt_ids) != n:
        raise ValueError(f"got {len(utt_ids)} utt_ids for {n} waveforms")
    return utt_ids
