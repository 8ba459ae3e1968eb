"""Threshold-independent sound event detection scoring.

PSDS follows the intersection-based definition: a detection is valid when
enough of it overlaps same-class ground truth (DTC), a ground-truth event is
found when enough of it is covered by valid detections (GTC). Cross-trigger
terms are not supported.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter as _nd_median
from scipy.stats import rankdata

from .errors import DomainError, ParameterError
from .frame import FRAME_RATE, EventTimeline
from .numeric import as_tensor


@dataclass
class ScoreTrack:
    clip: str
    cls: str
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.clip(as_tensor(self.scores), 0.0, 1.0)


def default_thresholds(n: int = 50) -> list:
    return list(np.linspace(0.0, 1.0, n + 2)[1:-1])


@dataclass
class PsdsParams:
    rho_dtc: float = 0.7
    rho_gtc: float = 0.7
    alpha_st: float = 1.0
    alpha_ct: float = 0.0
    e_max: float = 100.0
    thresholds: list = field(default_factory=default_thresholds)

    def __post_init__(self):
        if not (0 < self.rho_dtc <= 1 and 0 < self.rho_gtc <= 1):
            raise ParameterError("rho_dtc and rho_gtc must lie in (0, 1]")
        if self.alpha_st < 0 or self.alpha_ct < 0 or not self.e_max > 0:
            raise ParameterError("alpha_st, alpha_ct must be >= 0 and e_max > 0")
        th = list(self.thresholds)
        if not th or any(not 0 < t < 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ParameterError("thresholds must be strictly increasing inside (0, 1)")


def median_filter(scores, width: int = 9) -> np.ndarray:
    """Sliding median with edge replication."""
    if width < 1 or width % 2 == 0:
        raise ParameterError(f"median filter width must be odd and positive, got {width}")
    scores = as_tensor(scores)
    if width == 1 or scores.size == 0:
        return scores.copy()
    return _nd_median(scores, size=width, mode="nearest")


def decode_events(scores, threshold: float, rate_hz: float = FRAME_RATE) -> list[tuple[float, float]]:
    """Maximal runs of frames scoring >= threshold, as (onset_s, offset_s) frame edges."""
    if not 0 < threshold <= 1:
        raise ParameterError("threshold must lie in (0, 1]")
    active = as_tensor(scores) >= threshold
    if not active.any():
        return []
    padded = np.concatenate([[False], active, [False]]).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(s / rate_hz, e / rate_hz) for s, e in zip(starts, ends)]


def _as_intervals(events):
    on, off, lab = [], [], []
    for ev in events:
        if hasattr(ev, "onset_s"):
            on.append(ev.onset_s), off.append(ev.offset_s), lab.append(getattr(ev, "label", None))
        else:
            on.append(ev[0]), off.append(ev[1]), lab.append(ev[2] if len(ev) > 2 else None)
    return np.array(on, dtype=float), np.array(off, dtype=float), lab


@dataclass
class MatchResult:
    tp: list            # detected ground-truth indices
    fp: list            # predictions failing the detection tolerance
    misses: list        # undetected ground-truth indices
    pairs: list         # (pred index, gt index) with overlap, pred valid, gt detected

    @property
    def n_tp(self) -> int:
        return len(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.fp)


def intersection_matrix(pred, gt) -> np.ndarray:
    p_on, p_off, p_lab = _as_intervals(pred)
    g_on, g_off, g_lab = _as_intervals(gt)
    inter = np.minimum(p_off[:, None], g_off[None, :]) - np.maximum(p_on[:, None], g_on[None, :])
    inter = np.maximum(inter, 0.0)
    same = np.array([[a == b for b in g_lab] for a in p_lab], dtype=bool).reshape(inter.shape)
    return np.where(same, inter, 0.0)


def match_events(pred, gt, rho_dtc: float = 0.7, rho_gtc: float = 0.7) -> MatchResult:
    """Intersection-based matching of predicted against ground-truth events of the same class."""
    if len(pred) == 0:
        return MatchResult([], [], list(range(len(gt))), [])
    p_on, p_off, _ = _as_intervals(pred)
    inter = intersection_matrix(pred, gt)
    valid = inter.sum(axis=1) / (p_off - p_on) >= rho_dtc if len(gt) else np.zeros(len(pred), bool)
    fp = [int(i) for i in np.flatnonzero(~valid)]
    if len(gt) == 0:
        return MatchResult([], fp, [], [])
    g_on, g_off, _ = _as_intervals(gt)
    covered = inter[valid].sum(axis=0) / (g_off - g_on)
    detected = covered >= rho_gtc
    tp = [int(j) for j in np.flatnonzero(detected)]
    misses = [int(j) for j in np.flatnonzero(~detected)]
    pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(inter > 0)) if valid[i] and detected[j]]
    return MatchResult(tp, fp, misses, pairs)


def _scope(tracks, gt: dict, mode: str):
    if mode not in ("all_classes", "target_only"):
        raise ParameterError(f"unknown PSDS mode {mode!r}")
    out = []
    for t in tracks:
        if t.clip not in gt:
            raise DomainError(f"no ground truth for clip {t.clip}")
        if mode == "target_only" and t.cls not in gt[t.clip].labels():
            continue
        out.append(t)
    return out


def roc_points(tracks, gt: dict, params: PsdsParams, mode: str = "all_classes"):
    """Per-class ``(eFPR, TPR)`` arrays, one entry per threshold."""
    tracks = _scope(tracks, gt, mode)
    n_gt: dict = {}
    for tl in gt.values():
        for ev in tl.events:
            n_gt[ev.label] = n_gt.get(ev.label, 0) + 1
    classes = sorted(n_gt)
    if not classes:
        raise DomainError("no ground-truth events in scope")
    hours = sum(tl.duration_s for tl in gt.values()) / 3600.0
    th = list(params.thresholds)
    tp = {c: np.zeros(len(th)) for c in classes}
    fp = {c: np.zeros(len(th)) for c in classes}
    for t in tracks:
        if t.cls not in tp:
            continue
        events = [e for e in gt[t.clip].events if e.label == t.cls]
        for i, theta in enumerate(th):
            pred = decode_events(t.scores, theta)
            m = match_events(pred, [(e.onset_s, e.offset_s) for e in events],
                             params.rho_dtc, params.rho_gtc)
            tp[t.cls][i] += m.n_tp
            fp[t.cls][i] += m.n_fp
    return {c: (fp[c] / hours, tp[c] / n_gt[c]) for c in classes}


def psd_roc(points: dict, alpha_st: float, e_max: float):
    """Effective TPR step curve on the union eFPR grid; returns (grid, etpr)."""
    xs = {0.0, float(e_max)}
    for efpr, _ in points.values():
        xs.update(float(x) for x in efpr if x <= e_max)
    grid = np.array(sorted(xs))
    curves = []
    for efpr, tpr in points.values():
        order = np.argsort(efpr, kind="stable")
        e_sorted, t_sorted = efpr[order], np.maximum.accumulate(tpr[order])
        # running max of TPR over operating points with eFPR <= x
        pos = np.searchsorted(e_sorted, grid, side="right") - 1
        curves.append(np.where(pos >= 0, t_sorted[np.maximum(pos, 0)], 0.0))
    curves = np.array(curves)
    etpr = curves.mean(axis=0) - alpha_st * curves.std(axis=0)
    return grid, np.maximum(etpr, 0.0)


def psds1(tracks, gt: dict, params: PsdsParams | None = None, mode: str = "all_classes") -> float:
    """Normalised area under the PSD-ROC up to ``e_max`` false positives per hour.

    ``target_only`` keeps, for each clip, only the classes annotated in that clip.
    """
    params = params or PsdsParams()
    if params.alpha_ct != 0:
        raise NotImplementedError("cross-trigger penalty (alpha_ct != 0) is not implemented")
    gt = _gt_dict(gt)
    points = roc_points(tracks, gt, params, mode)
    grid, etpr = psd_roc(points, params.alpha_st, params.e_max)
    area = float(np.sum(etpr[:-1] * np.diff(grid)))
    return min(max(area / params.e_max, 0.0), 1.0)


def _gt_dict(gt) -> dict:
    if isinstance(gt, dict):
        return gt
    return {t.clip_id: t for t in gt}


def auroc(scores, labels) -> float:
    """Area under the ROC via the rank-sum statistic; ties count one half."""
    scores = as_tensor(scores)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUROC needs both positive and negative segments")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def segment_table(tracks, gt, segment_s: float = 1.0, open_vocab: bool = False,
                  rate_hz: float = FRAME_RATE):
    """(scores, labels) over every (clip, class, segment) triple in scope."""
    if not segment_s > 0:
        raise ParameterError("segment length must be positive")
    gt = _gt_dict(gt)
    scores, labels = [], []
    for t in tracks:
        tl = gt[t.clip]
        if open_vocab and t.cls not in tl.labels():
            continue
        events = [e for e in tl.events if e.label == t.cls]
        n_seg = max(1, math.ceil(tl.duration_s / segment_s - 1e-9))
        centres = (np.arange(t.scores.size) + 0.5) / rate_hz
        for j in range(n_seg):
            a, b = j * segment_s, min((j + 1) * segment_s, tl.duration_s)
            sel = (centres >= a) & (centres < b)
            if sel.any():
                s = float(t.scores[sel].max())
            else:
                s = float(t.scores[min(int(a * rate_hz), t.scores.size - 1)])
            scores.append(s)
            labels.append(any(min(e.offset_s, b) - max(e.onset_s, a) > 0 for e in events))
    return np.array(scores), np.array(labels, dtype=bool)


def segment_auroc(tracks, gt, segment_s: float = 1.0, open_vocab: bool = False) -> float:
    """Segment-based AUROC; with ``open_vocab`` only classes annotated in a clip are scored there."""
    scores, labels = segment_table(tracks, gt, segment_s, open_vocab)
    return auroc(scores, labels)
