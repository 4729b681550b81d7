"""ROC AUC (Mann-Whitney) and per-video score pooling."""
from __future__ import annotations

from collections import defaultdict
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, UndefinedMetricError


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_fake > score_real) + 0.5 * P(tie), over all fake/real pairs.

    Uses average ranks, which count each tied pair as one half. Rank sums are
    multiples of 0.5, so the numerator is exact for any realistic n.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError("scores and labels must be 1-d and the same length")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def video_scores(frame_scores: Mapping[str, Sequence[float]]) -> dict[str, float]:
    out = {}
    for vid, frames in frame_scores.items():
        frames = list(frames)
        if not frames:
            raise InputError(f"video {vid!r} has no frames")
        out[vid] = float(np.mean(np.asarray(frames, dtype=np.float64)))
    return out


def video_level(scores: Sequence[float], labels: Sequence[int], video_ids: Sequence[str]):
    """Collapse frames to videos; returns (video_ids, scores, labels) sorted by id."""
    frames, vlabel = defaultdict(list), {}
    for s, y, v in zip(scores, labels, video_ids):
        frames[v].append(float(s))
        if vlabel.setdefault(v, int(y)) != int(y):
            raise InputError(f"video {v!r} mixes real and fake frames")
    pooled = video_scores(frames)
    ids = sorted(pooled)
    return ids, [pooled[v] for v in ids], [vlabel[v] for v in ids]
