"""Slide-level metrics, the image-level MIL baseline, and report files."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .scorer import SlideClassifier, slide_loss_and_grad, train, SGDConfig
from .seeding import derive_rng

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("mode", "round", "sensitivity", "specificity", "auc", "threshold", "seed")


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    slide_ids: list
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.slide_ids = list(self.slide_ids)
        self.scores = np.asarray(self.scores, np.float64)
        self.labels = np.asarray(self.labels, np.int64)
        if not (len(self.slide_ids) == len(self.scores) == len(self.labels)):
            raise MetricError("slide_ids, scores and labels differ in length")
        if len(set(self.slide_ids)) != len(self.slide_ids):
            raise MetricError("duplicate slide ids in score set")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise MetricError("labels must be 0 or 1")

    @property
    def positives(self):
        return self.scores[self.labels == 1]

    @property
    def negatives(self):
        return self.scores[self.labels == 0]


@dataclass
class Metrics:
    sensitivity: float
    specificity: float
    auc: float
    threshold: float


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray   # first entry is +inf for the (0, 0) point

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def _both_classes(scores):
    pos, neg = scores.positives, scores.negatives
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("score set needs at least one positive and one negative slide")
    return pos, neg


def auc(scores):
    """P(random positive outscores random negative), ties counting one half."""
    pos, neg = _both_classes(scores)
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    twice_wins = int(2 * below.sum() + ties.sum())
    return twice_wins / (2 * len(pos) * len(neg))


def roc_curve(scores):
    """ROC points for the rule score >= t, one per distinct score, from (0, 0) to (1, 1)."""
    pos, neg = _both_classes(scores)
    thresholds = np.unique(scores.scores)[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / len(neg)])
    tpr = np.concatenate([[0.0], tp / len(pos)])
    return RocCurve(fpr, tpr, np.concatenate([[np.inf], thresholds]))


def operating_point(scores):
    """Largest threshold keeping every positive at score >= t, and the specificity there."""
    pos = scores.positives
    if len(pos) == 0:
        raise MetricError("operating point needs at least one positive slide")
    t = float(pos.min())
    neg = scores.negatives
    specificity = float(np.count_nonzero(neg < t) / len(neg)) if len(neg) else float("nan")
    return t, specificity


def compute_metrics(scores):
    t, specificity = operating_point(scores)
    sensitivity = float(np.count_nonzero(scores.positives >= t) / len(scores.positives))
    return Metrics(sensitivity, specificity, auc(scores), t)


# --- image-level MIL baseline -------------------------------------------------

def train_mil_baseline(index, config, rng=None):
    """Top-1 multiple-instance training of a patch classifier from slide labels only.

    Each epoch rescores every tissue patch with the current classifier, keeps
    the single best patch per slide, and runs one balanced SGD epoch on those
    (patch, slide label) pairs.
    """
    from .pipeline import balanced_epoch, select_top_k

    pooled = index.pooled()
    keep = [i for i, e in enumerate(index) if len(e.refs)]
    labels = np.array([index.entries[i].slide.label for i in keep], np.float64)
    if rng is None:
        rng = derive_rng(config.seed, "mil")
    classifier = SlideClassifier().with_scaling(np.concatenate([pooled[i] for i in keep]))
    trace = []
    sgd = SGDConfig(lr=config.stage2_lr, batch_size=config.stage2_batch, epochs=1)
    for epoch in range(config.stage2_epochs):
        picks = []
        for i in keep:
            probs = expit(classifier.logits(pooled[i]))
            (_, _, j), = select_top_k(probs, index.entries[i].refs, 1)
            picks.append(pooled[i][j:j + 1])

        def batches(_epoch, rng):
            order = balanced_epoch(labels, config.stage2_pos_neg_ratio, rng)
            for start in range(0, len(order), config.stage2_batch):
                chunk = order[start:start + config.stage2_batch]
                yield [picks[c] for c in chunk], labels[chunk]

        classifier, epoch_trace = train(classifier, batches,
                                        lambda params, b: slide_loss_and_grad(params, *b, classifier.center,
                                                                              classifier.scale), sgd, rng)
        trace.extend(epoch_trace)
        log.debug("mil epoch %d loss %.6f", epoch, trace[-1])
    return classifier, trace


def mil_scores(classifier, index):
    """Slide score = maximum patch probability over all tissue patches."""
    pooled = index.pooled()
    scores = [float(expit(classifier.logits(p)).max()) if len(p) else 0.0 for p in pooled]
    return ScoreSet([e.slide.slide_id for e in index], scores, [e.slide.label for e in index])


def train_image_baseline(dataset, config, pipeline=None):
    """Train the MIL baseline; returns a RunResult whose single round has no patch scorer."""
    from .pipeline import Pipeline, RoundState, RunResult, write_history

    pipeline = pipeline or Pipeline(dataset, config)
    classifier, trace = train_mil_baseline(pipeline.index("train"), config)
    state = RoundState(0, None, classifier, trace[-1], {}, [], trace)
    if pipeline.out_dir is not None:
        rdir = pipeline.out_dir / "round_0"
        rdir.mkdir(parents=True, exist_ok=True)
        classifier.save(rdir / "classifier.ckpt")
        state.checkpoints = {"classifier": "round_0/classifier.ckpt"}
        write_history(pipeline.out_dir / "history.jsonl", [state])
    return RunResult("image_only", state, [state])


def mil_image_baseline(dataset, config, pipeline=None):
    """Test-split scores of the MIL baseline trained from slide labels only."""
    from .pipeline import Pipeline

    pipeline = pipeline or Pipeline(dataset, config)
    result = train_image_baseline(dataset, config, pipeline)
    return mil_scores(result.best.classifier, pipeline.index("test"))


def pixel_baseline(dataset, config, pipeline=None):
    """Test-split scores of the round-0-only (fine labels only) pipeline."""
    from .pipeline import Pipeline

    pipeline = pipeline or Pipeline(dataset, config)
    result = pipeline.run("pixel_only")
    return pipeline.score_split(result.best, "test")


# --- reports ------------------------------------------------------------------

def report_row(mode, round_index, metrics, seed):
    return {"mode": mode, "round": int(round_index), "sensitivity": metrics.sensitivity,
            "specificity": metrics.specificity, "auc": metrics.auc,
            "threshold": metrics.threshold, "seed": int(seed)}


def emit_report(rows, path, curves=None, svg_path=None):
    """Write the metrics CSV (floats in round-trip repr) and optionally an SVG ROC plot."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c]
                             for c in REPORT_COLUMNS])
    if svg_path is not None:
        write_roc_svg(curves or {}, svg_path)


def read_report(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            metrics = Metrics(float(rec["sensitivity"]), float(rec["specificity"]),
                              float(rec["auc"]), float(rec["threshold"]))
            rows.append((rec["mode"], int(rec["round"]), metrics, int(rec["seed"])))
    return rows


_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_roc_svg(curves, path, size=400, margin=40):
    """One polyline per named ROC curve; SVG 1.1, no external assets."""
    span = size - 2 * margin
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{margin}" '
        'stroke="#bbbbbb" stroke-dasharray="4,4"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">false positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">true positive rate</text>',
    ]
    for k, (name, curve) in enumerate(sorted(curves.items())):
        pts = " ".join(f"{margin + fx * span:.3f},{size - margin - ty * span:.3f}"
                       for fx, ty in curve.points)
        color = _COLORS[k % len(_COLORS)]
        parts.append(f'<polyline data-mode="{name}" fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{pts}"/>')
        parts.append(f'<text x="{margin + 8}" y="{margin + 16 + 14 * k}" font-size="12" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
