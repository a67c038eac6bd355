"""
Segment-level and event-level F-scores for audio, visual and audio-visual events.

Scores are computed from true/false positive counts gathered per video. Micro averaging pools the
counts over the whole corpus before forming F; macro averaging forms F per video and averages.
"""

import json
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import Config
from utils.errors import DimensionError, UsageError

Counts = Tuple[int, int, int]
MODALITY_CODES = ("A", "V", "AV")
AVERAGING_MODES = ("micro", "macro")


@dataclass(frozen=True)
class EventInstance:
    """Contiguous run of positive snippets of one class; start and end are inclusive"""

    modality: str
    class_id: int
    start: int
    end: int

    def __post_init__(self):
        if self.modality not in MODALITY_CODES:
            raise UsageError(f"unknown event modality {self.modality!r}")
        if self.start < 0 or self.start > self.end:
            raise UsageError(f"invalid event interval [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class MetricsReport:
    segment_a: float
    segment_v: float
    segment_av: float
    segment_type_av: float
    segment_event_av: float
    event_a: float
    event_v: float
    event_av: float
    event_type_av: float
    event_event_av: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "MetricsReport":
        return cls(**{f.name: float(data[f.name]) for f in fields(cls)})


def f_score(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN); 1.0 when there is nothing to find and nothing predicted"""
    denominator = 2 * tp + fp + fn
    if denominator == 0:
        return 1.0
    return 2.0 * tp / denominator


def binarize(P: np.ndarray, threshold: float = Config.THRESHOLD) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(P) >= threshold).astype(np.int8)


def _check_shapes(pred: np.ndarray, truth: np.ndarray):
    if pred.shape != truth.shape:
        raise DimensionError("prediction and truth shapes differ", pred.shape, truth.shape)


def segment_counts(pred: np.ndarray, truth: np.ndarray) -> Counts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    _check_shapes(pred, truth)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, fp, fn


def segment_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    return f_score(*segment_counts(pred, truth))


def extract_events(labels: np.ndarray, modality: str = "A") -> List[EventInstance]:
    """Maximal runs of 1s per class of a T x C label matrix, ordered by class then start"""
    labels = np.asarray(labels).astype(np.int8)
    if labels.ndim != 2:
        raise DimensionError("snippet labels must be T x C", labels.shape, ("T", "C"))
    events = []
    for c in range(labels.shape[1]):
        padded = np.concatenate([[0], labels[:, c], [0]])
        edges = np.diff(padded)
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1) - 1
        events.extend(EventInstance(modality, c, int(s), int(e)) for s, e in zip(starts, ends))
    return events


def temporal_iou(a: EventInstance, b: EventInstance) -> float:
    overlap = max(0, min(a.end, b.end) - max(a.start, b.start) + 1)
    union = a.length + b.length - overlap
    return overlap / union


def match_events(pred: Sequence[EventInstance], truth: Sequence[EventInstance],
                 miou: float = Config.EVENT_IOU) -> List[Tuple[int, int]]:
    """
    Greedy one-to-one matching: candidate pairs share a class and reach `miou`; they are taken in
    descending IoU order, ties broken by prediction index then truth index.
    """
    if not 0.0 < miou <= 1.0:
        raise UsageError(f"IoU threshold must be in (0, 1], got {miou}")
    candidates = []
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            if p.class_id != t.class_id:
                continue
            iou = temporal_iou(p, t)
            if iou >= miou:
                candidates.append((-iou, i, j))
    candidates.sort()

    used_pred, used_truth, matches = set(), set(), []
    for _, i, j in candidates:
        if i in used_pred or j in used_truth:
            continue
        used_pred.add(i)
        used_truth.add(j)
        matches.append((i, j))
    return matches


def event_counts(pred: Sequence[EventInstance], truth: Sequence[EventInstance],
                 miou: float = Config.EVENT_IOU) -> Counts:
    tp = len(match_events(pred, truth, miou))
    return tp, len(pred) - tp, len(truth) - tp


def event_f1(pred: Sequence[EventInstance], truth: Sequence[EventInstance],
             miou: float = Config.EVENT_IOU) -> float:
    return f_score(*event_counts(pred, truth, miou))


def audiovisual_truth(y_a: np.ndarray, y_v: np.ndarray) -> np.ndarray:
    y_a = np.asarray(y_a)
    y_v = np.asarray(y_v)
    _check_shapes(y_a, y_v)
    return np.logical_and(y_a.astype(bool), y_v.astype(bool)).astype(np.int8)


def gate_predictions(pred: np.ndarray, P_video: np.ndarray, threshold: float = Config.THRESHOLD) -> np.ndarray:
    """Keep snippet positives only for classes the video-level prediction accepts"""
    pred = np.asarray(pred)
    video = binarize(P_video, threshold)
    if pred.ndim != 3 or video.shape != (pred.shape[0], pred.shape[2]):
        raise DimensionError("video predictions must be N x C for N x T x C snippets", video.shape, pred.shape)
    return (pred.astype(bool) & video[:, None, :].astype(bool)).astype(np.int8)


def video_accuracy(P_video: np.ndarray, Y: np.ndarray, threshold: float = Config.THRESHOLD) -> Dict[str, float]:
    pred = binarize(P_video, threshold).astype(bool)
    Y = np.asarray(Y).astype(bool)
    _check_shapes(pred, Y)
    return {
        "exact_match": float(np.mean(np.all(pred == Y, axis=1))),
        "per_class": float(np.mean(pred == Y)),
    }


def _per_video_counts(pred_a: np.ndarray, pred_v: np.ndarray, truth_a: np.ndarray,
                      truth_v: np.ndarray, miou: float) -> Dict[str, np.ndarray]:
    """(N, 3) arrays of tp/fp/fn per video for every modality code at both levels"""
    pred_av = audiovisual_truth(pred_a, pred_v)
    true_av = audiovisual_truth(truth_a, truth_v)
    streams = {"A": (pred_a, truth_a), "V": (pred_v, truth_v), "AV": (pred_av, true_av)}

    counts = {}
    for code, (pred, truth) in streams.items():
        segment_rows, event_rows = [], []
        for n in range(pred.shape[0]):
            segment_rows.append(segment_counts(pred[n], truth[n]))
            event_rows.append(event_counts(extract_events(pred[n], code), extract_events(truth[n], code), miou))
        counts[f"segment_{code}"] = np.asarray(segment_rows, dtype=np.int64).reshape(-1, 3)
        counts[f"event_{code}"] = np.asarray(event_rows, dtype=np.int64).reshape(-1, 3)
    return counts


def _level_scores(counts: Dict[str, np.ndarray], level: str, averaging: str) -> Tuple[float, ...]:
    a, v, av = (counts[f"{level}_{code}"] for code in MODALITY_CODES)
    pooled = a + v
    if averaging == "micro":
        scores = [f_score(*rows.sum(axis=0)) for rows in (a, v, av, pooled)]
    else:
        scores = [float(np.mean([f_score(*row) for row in rows])) if len(rows) else 1.0
                  for rows in (a, v, av, pooled)]
    f_a, f_v, f_av, f_event = scores
    return f_a, f_v, f_av, (f_a + f_v + f_av) / 3.0, f_event


def full_report(pred_a: np.ndarray, pred_v: np.ndarray, truth_a: np.ndarray, truth_v: np.ndarray,
                miou: float = Config.EVENT_IOU, averaging: str = "micro") -> MetricsReport:
    """
    All ten scores from binary N x T x C prediction and truth streams.

    AV streams are the AND of the audio and visual streams; Type@AV is the mean of A, V and AV;
    Event@AV pools every audio and visual cell (or event) into one F-score.
    """
    if averaging not in AVERAGING_MODES:
        raise UsageError(f"averaging must be one of {AVERAGING_MODES}, got {averaging!r}")
    arrays = [np.asarray(x).astype(np.int8) for x in (pred_a, pred_v, truth_a, truth_v)]
    for x in arrays[1:]:
        _check_shapes(arrays[0], x)
    if arrays[0].ndim != 3:
        raise DimensionError("streams must be N x T x C", arrays[0].shape, ("N", "T", "C"))

    counts = _per_video_counts(*arrays, miou=miou)
    segment = _level_scores(counts, "segment", averaging)
    event = _level_scores(counts, "event", averaging)
    return MetricsReport(*segment, *event)
