"""Tagging and detection metrics: AT-F1, AT-mAP, SED-mAP, segment-F1, event-F1.

Frame-level inputs are ``[k, n]`` arrays per clip; references are lists of
``(class, onset_frame, offset_frame)`` with exclusive offsets.  F1 scores are
micro-averaged over every (clip, class, unit) pair, mAP is a macro average
over classes that have at least one positive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import median_filter

THRESHOLD = 0.5
MEDIAN_WIN = 5
SEGMENT_LEN = 25
COLLAR = 5
FRAMES_PER_SECOND = 25

CSV_FIELDS = ("model", "split", "metric", "value", "seed")


def binarize(m, threshold: float = THRESHOLD, median_win: int = MEDIAN_WIN) -> np.ndarray:
    """Threshold scores (``>= threshold``) then median-filter each class row."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if median_win < 1 or median_win % 2 == 0:
        raise ValueError(f"median window must be a positive odd number, got {median_win}")
    b = (np.asarray(m) >= threshold).astype(np.int8)
    if median_win == 1:
        return b
    size = (1,) * (b.ndim - 1) + (median_win,)
    return median_filter(b, size=size, mode="nearest")


def strong_to_roll(strong: Iterable[Sequence[int]], k: int, n: int) -> np.ndarray:
    roll = np.zeros((k, n), dtype=np.int8)
    for c, on, off in strong:
        roll[int(c), int(on):int(off)] = 1
    return roll


def decode_runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ones as ``(onset, offset)`` with exclusive offset."""
    row = np.asarray(row).astype(np.int8)
    d = np.diff(np.concatenate(([0], row, [0])))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def f1_from_counts(tp, fp, fn):
    """2tp / (2tp + fp + fn); an empty reference with an empty prediction scores 1."""
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    den = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, 2 * tp / np.where(den > 0, den, 1), 1.0)
    return float(out) if out.ndim == 0 else out


def _as_roll(ref, k: int, n: int) -> np.ndarray:
    if isinstance(ref, np.ndarray) and ref.shape == (k, n):
        return ref.astype(np.int8)
    return strong_to_roll(ref, k, n)


def segment_counts(pred_binary: Sequence[np.ndarray], refs: Sequence, segment_len: int = SEGMENT_LEN):
    """Per-class (tp, fp, fn) over fixed segments, summed across clips."""
    if segment_len < 1:
        raise ValueError(f"segment_len must be >= 1, got {segment_len}")
    tp = fp = fn = 0
    for pred, ref in zip(pred_binary, refs, strict=True):
        pred = np.asarray(pred)
        k, n = pred.shape
        ref = _as_roll(ref, k, n)
        n_seg = -(-n // segment_len)
        pad = n_seg * segment_len - n
        p = np.pad(pred, ((0, 0), (0, pad))).reshape(k, n_seg, segment_len).any(axis=2)
        r = np.pad(ref, ((0, 0), (0, pad))).reshape(k, n_seg, segment_len).any(axis=2)
        tp = tp + (p & r).sum(axis=1)
        fp = fp + (p & ~r).sum(axis=1)
        fn = fn + (~p & r).sum(axis=1)
    return tp, fp, fn


def segment_f1(pred_binary, refs, segment_len: int = SEGMENT_LEN, per_class: bool = False):
    tp, fp, fn = segment_counts(pred_binary, refs, segment_len)
    if per_class:
        return f1_from_counts(tp, fp, fn)
    return f1_from_counts(np.sum(tp), np.sum(fp), np.sum(fn))


def match_events(pred: list[tuple[int, int]], ref: list[tuple[int, int]], collar: int) -> int:
    """Greedy onset-ordered matching; returns the number of matched pairs.

    A prediction matches the first unmatched reference with onset within
    ``collar`` and offset within ``max(collar, 0.2 * reference duration)``.
    """
    ref = sorted(ref)
    used = [False] * len(ref)
    hits = 0
    for p_on, p_off in sorted(pred):
        for i, (r_on, r_off) in enumerate(ref):
            if used[i]:
                continue
            if abs(p_on - r_on) <= collar and abs(p_off - r_off) <= max(collar, 0.2 * (r_off - r_on)):
                used[i] = True
                hits += 1
                break
    return hits


def event_counts(pred_binary: Sequence[np.ndarray], refs: Sequence, collar: int = COLLAR):
    if collar < 0:
        raise ValueError(f"collar must be >= 0, got {collar}")
    tp = fp = fn = 0
    for pred, ref in zip(pred_binary, refs, strict=True):
        pred = np.asarray(pred)
        k, n = pred.shape
        ref = _as_roll(ref, k, n)
        hits = np.zeros(k, dtype=np.int64)
        n_pred = np.zeros(k, dtype=np.int64)
        n_ref = np.zeros(k, dtype=np.int64)
        for c in range(k):
            pe, re_ = decode_runs(pred[c]), decode_runs(ref[c])
            n_pred[c], n_ref[c] = len(pe), len(re_)
            if pe and re_:
                hits[c] = match_events(pe, re_, collar)
        tp = tp + hits
        fp = fp + n_pred - hits
        fn = fn + n_ref - hits
    return tp, fp, fn


def event_f1(pred_binary, refs, collar: int = COLLAR, per_class: bool = False):
    tp, fp, fn = event_counts(pred_binary, refs, collar)
    if per_class:
        return f1_from_counts(tp, fp, fn)
    return f1_from_counts(np.sum(tp), np.sum(fp), np.sum(fn))


def average_precision(scores, labels) -> float | None:
    """Mean of precision at the rank of each positive; ``None`` without positives.

    Ranks follow descending score with ties kept in input order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


def mean_average_precision(scores, labels) -> tuple[float, list[int]]:
    """Macro AP over the last axis; returns (mAP, excluded all-negative classes)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    k = scores.shape[-1]
    scores = scores.reshape(-1, k)
    labels = labels.reshape(-1, k)
    aps, excluded = [], []
    for c in range(k):
        ap = average_precision(scores[:, c], labels[:, c])
        if ap is None:
            excluded.append(c)
        else:
            aps.append(ap)
    return (float(np.mean(aps)) if aps else float("nan")), excluded


def at_f1(clip_scores, weak_labels, threshold: float = THRESHOLD) -> float:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred = np.asarray(clip_scores) >= threshold
    ref = np.asarray(weak_labels).astype(bool)
    tp = np.sum(pred & ref)
    fp = np.sum(pred & ~ref)
    fn = np.sum(~pred & ref)
    return f1_from_counts(tp, fp, fn)


@dataclass
class MetricsConfig:
    threshold: float = THRESHOLD
    median_win: int = MEDIAN_WIN
    segment_len: int = SEGMENT_LEN
    collar: int = COLLAR


@dataclass
class EvalResult:
    at_f1: float | None = None
    at_map: float | None = None
    sed_map: float | None = None
    seg_f1: float | None = None
    event_f1: float | None = None
    seg_f1_per_class: list[float] = field(default_factory=list)
    event_f1_per_class: list[float] = field(default_factory=list)
    excluded_classes: dict[str, list[int]] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        out = {}
        for name in ("at_f1", "at_map", "sed_map", "seg_f1", "event_f1"):
            v = getattr(self, name)
            if v is not None:
                out[name] = float(v)
        for c, v in enumerate(self.seg_f1_per_class):
            out[f"seg_f1_c{c}"] = float(v)
        for c, v in enumerate(self.event_f1_per_class):
            out[f"event_f1_c{c}"] = float(v)
        return out


def evaluate_predictions(clip_scores: np.ndarray, frame_scores: np.ndarray, weak: np.ndarray,
                         strong: Sequence | None, cfg: MetricsConfig = MetricsConfig()) -> EvalResult:
    """All metrics for one split.

    ``clip_scores [N, k]``, ``frame_scores [N, k, n]``, ``weak [N, k]``;
    detection metrics are skipped when ``strong`` is None.
    """
    res = EvalResult()
    res.at_f1 = at_f1(clip_scores, weak, cfg.threshold)
    res.at_map, res.excluded_classes["at_map"] = mean_average_precision(clip_scores, weak)
    if strong is None:
        return res
    N, k, n = frame_scores.shape
    rolls = np.stack([strong_to_roll(s, k, n) for s in strong])
    res.sed_map, res.excluded_classes["sed_map"] = mean_average_precision(
        frame_scores.transpose(0, 2, 1), rolls.transpose(0, 2, 1))
    binary = binarize(frame_scores, cfg.threshold, cfg.median_win)
    res.seg_f1 = segment_f1(binary, rolls, cfg.segment_len)
    res.event_f1 = event_f1(binary, rolls, cfg.collar)
    res.seg_f1_per_class = np.atleast_1d(segment_f1(binary, rolls, cfg.segment_len, per_class=True)).tolist()
    res.event_f1_per_class = np.atleast_1d(event_f1(binary, rolls, cfg.collar, per_class=True)).tolist()
    return res


def format_value(v: float) -> str:
    return repr(float(v))


def append_metrics_csv(path, rows: Iterable[dict]) -> None:
    """Append rows with columns (model, split, metric, value, seed)."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({**row, "value": format_value(row["value"])})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{**r, "value": float(r["value"]), "seed": int(r["seed"])} for r in csv.DictReader(fh)]
