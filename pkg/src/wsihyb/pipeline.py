"""Two-stage hybrid supervision training loop.

Stage 1 alternates pseudo-label creation on training slides (E-step) with
retraining the per-pixel patch scorer on a fixed fine : pseudo-positive :
hard-negative batch mix (M-step). Stage 2 trains a slide classifier on the
mean probability of each slide's top-K patches. The round with the lowest
stage-2 training loss is kept.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .config import PipelineConfig
from .engine import Dataset, PatchIndex
from .labels import (
    HARD_NEGATIVE,
    POSITIVE_REWEIGHTED,
    LabelRepository,
    filter_patch_by_max,
    make_hard_negative,
    reweight_positive,
    save_repository,
)
from .scorer import (
    PatchScorer,
    SGDConfig,
    SlideClassifier,
    patch_features,
    predict_pixel_probs,
    scorer_loss_and_grad,
    slide_loss_and_grad,
    train,
)
from .seeding import derive_rng
from .slides import read_patch

log = logging.getLogger(__name__)

MODES = ("hybrid", "pixel_only", "image_only")
POOL_TAGS = ("fine", "pseudo_pos", "hard_neg")


class PoolExhausted(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass
class TrainBatch:
    items: list       # (pool tag, entry) pairs
    counts: tuple     # items drawn from each pool


def apportion(batch_size, ratio):
    """Largest-remainder split of ``batch_size`` over ``ratio``; ties go to the earlier pool."""
    total = sum(ratio)
    quotas = [batch_size * r / total for r in ratio]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:batch_size - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def sample_batch(fine_pool, pseudo_pos_pool, hard_neg_pool, ratio, batch_size, rng):
    """Draw one stage-1 batch, uniformly with replacement inside each pool."""
    pools = (fine_pool, pseudo_pos_pool, hard_neg_pool)
    for tag, pool, share in zip(POOL_TAGS, pools, ratio):
        if share > 0 and len(pool) == 0:
            raise PoolExhausted(f"pool exhausted: {tag} pool is empty but has ratio share {share}")
    counts = apportion(batch_size, ratio)
    items = []
    for tag, pool, n in zip(POOL_TAGS, pools, counts):
        if n:
            items.extend((tag, pool[i]) for i in rng.integers(0, len(pool), size=n))
    return TrainBatch(items, counts)


def select_top_k(scores, refs, k):
    """Indices and scores of the ``k`` highest patch maxima; ties by row-major (y, x)."""
    order = sorted(range(len(refs)), key=lambda i: (-scores[i], refs[i].y, refs[i].x))[:k]
    return [(refs[i], float(scores[i]), i) for i in order]


def top_k_for_slide(scorer, slide, refs, k):
    if not refs:
        return []
    scores = [float(predict_pixel_probs(scorer, read_patch(slide, r)).max()) for r in refs]
    return select_top_k(scores, refs, k)


def slide_confidence(classifier, pooled_topk):
    """Mean patch probability over the supplied patches; 0.0 for an empty set."""
    pooled_topk = np.asarray(pooled_topk, np.float64)
    if pooled_topk.size == 0:
        log.warning("slide without tissue patches scored as 0.0")
        return 0.0
    return float(expit(classifier.logits(pooled_topk)).mean())


def check_repository_invariants(repo, threshold, reweight):
    """Raise InvariantViolation unless the pseudo pools satisfy the E-step contract."""
    for m in repo.hard_negatives():
        if not m.is_zero():
            raise InvariantViolation(f"hard negative {m.key} is not all zero")
    for m in repo.pseudo_positive():
        pre = repo.source_max.get(m.key)
        if pre is not None and pre < threshold:
            raise InvariantViolation(f"stored patch {m.key} has pre-reweight max {pre} < {threshold}")
        if threshold * reweight >= 1 and m.values.max() != 1.0:
            raise InvariantViolation(f"positive map {m.key} never reaches 1.0")
    return True


def e_step(scorer, index, config, round_index, maxima=None):
    """Pseudo labels for every tissue patch of the training slides in ``index``.

    ``maxima`` may carry the per-patch maxima of ``scorer`` from an earlier
    scan; only patches that pass the removal threshold are re-scored in full.
    """
    if maxima is None:
        maxima = index.scan(scorer, want_pooled=False)
    delta = LabelRepository()
    for entry, slide_max in zip(index, maxima):
        slide = entry.slide
        if slide.label not in (0, 1):
            raise PipelineError(f"slide {slide.slide_id!r} has no binary label")
        for ref, mx in zip(entry.refs, slide_max):
            if mx < config.threshold:
                continue
            if slide.label == 1:
                probs = predict_pixel_probs(scorer, read_patch(slide, ref))
                if not filter_patch_by_max(probs, config.threshold):
                    continue
                label_map = reweight_positive(probs, config.reweight, ref, round_index)
                delta.source_max[label_map.key] = float(probs.max())
            else:
                label_map = make_hard_negative(ref, round_index, slide.label)
                delta.source_max[label_map.key] = float(mx)
            delta.add(label_map)
    log.info("e-step round %d: %d pseudo positive, %d hard negative patches", round_index,
             len(delta.pseudo_pos_pool), len(delta.hard_neg_pool))
    return delta


class _PatchSource:
    """Materialize stage-1 training pairs (feature planes, target map)."""

    def __init__(self, slides, fine):
        self.slides = {s.slide_id: s for s in slides}
        self.fine = fine
        self._fine_planes = {}

    def fine_planes(self, i):
        if i not in self._fine_planes:
            self._fine_planes[i] = patch_features(self.fine[i].pixels)
        return self._fine_planes[i]

    def __call__(self, tag, entry):
        if tag == "fine":
            return self.fine_planes(entry), self.fine[entry].mask.mask.astype(np.float64)
        planes = patch_features(read_patch(self.slides[entry.patch_ref.slide_id], entry.patch_ref))
        if entry.provenance == HARD_NEGATIVE:
            return planes, np.zeros(planes.shape[1:])
        return planes, entry.values


def steps_per_epoch(pool_sizes, ratio, batch_size):
    """Batches per epoch: one expected pass over the first pool with a nonzero share."""
    for size, share in zip(pool_sizes, ratio):
        if share > 0:
            return max(1, math.ceil(size * sum(ratio) / (share * batch_size)))
    raise ValueError("ratio is all zero")


def m_step(scorer, repo, config, source, rng, ratio=None, epochs=None):
    """Retrain ``scorer`` (warm start) on batches mixed at ``ratio``."""
    ratio = tuple(config.ratio if ratio is None else ratio)
    fine_ids = list(range(len(repo.fine_pool)))
    pos, neg = repo.pseudo_positive(), repo.hard_negatives()
    n_steps = steps_per_epoch((len(fine_ids), len(pos), len(neg)), ratio, config.stage1_batch)

    def batches(epoch, rng):
        for _ in range(n_steps):
            batch = sample_batch(fine_ids, pos, neg, ratio, config.stage1_batch, rng)
            pairs = [source(tag, entry) for tag, entry in batch.items]
            yield [p for p, _ in pairs], [t for _, t in pairs]

    sgd = SGDConfig(lr=config.stage1_lr, batch_size=config.stage1_batch,
                    epochs=config.stage1_epochs if epochs is None else epochs)
    return train(scorer, batches,
                 lambda params, b: scorer_loss_and_grad(params, *b, scorer.center, scorer.scale), sgd, rng)


def balanced_epoch(labels, pos_neg_ratio, rng):
    """Slide indices for one stage-2 epoch at the requested positive:negative ratio.

    The class that needs fewer copies is used once each; the other is
    topped up by sampling with replacement. Order is shuffled.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise PipelineError("stage-2 training needs both positive and negative slides")
    a, b = pos_neg_ratio
    scale = max(len(pos) / a, len(neg) / b)
    picks = []
    for members, share in ((pos, a), (neg, b)):
        target = int(math.ceil(scale * share - 1e-9))
        extra = rng.choice(members, size=target - len(members), replace=True) if target > len(members) else []
        picks.append(np.concatenate([members, np.asarray(extra, dtype=members.dtype)]))
    order = np.concatenate(picks)
    rng.shuffle(order)
    return order


def stage2_train(classifier, topk_pooled, labels, config, rng):
    """Train the slide classifier; returns (classifier, final-epoch mean loss, trace)."""
    labels = np.asarray(labels, np.float64)

    def batches(epoch, rng):
        order = balanced_epoch(labels, config.stage2_pos_neg_ratio, rng)
        for start in range(0, len(order), config.stage2_batch):
            chunk = order[start:start + config.stage2_batch]
            yield [topk_pooled[i] for i in chunk], labels[chunk]

    sgd = SGDConfig(lr=config.stage2_lr, batch_size=config.stage2_batch, epochs=config.stage2_epochs)
    model, trace = train(classifier, batches,
                         lambda params, b: slide_loss_and_grad(params, *b, classifier.center, classifier.scale),
                         sgd, rng)
    return model, trace[-1], trace


@dataclass
class RoundState:
    round: int
    scorer: PatchScorer
    classifier: SlideClassifier
    stage2_loss: float
    counts: dict = field(default_factory=dict)
    stage1_trace: list = field(default_factory=list)
    stage2_trace: list = field(default_factory=list)
    invariants_ok: bool | None = None
    checkpoints: dict = field(default_factory=dict)

    def record(self):
        return {"round": self.round, "stage2_loss": self.stage2_loss, "counts": self.counts,
                "stage1_trace": self.stage1_trace, "stage2_trace": self.stage2_trace,
                "invariants_ok": self.invariants_ok, "checkpoints": self.checkpoints,
                "scorer_checksum": self.scorer.checksum() if self.scorer is not None else None,
                "classifier_checksum": self.classifier.checksum()}


@dataclass
class RunResult:
    mode: str
    best: RoundState
    history: list

    @property
    def selected_round(self):
        return self.best.round


def select_round(losses):
    """Index of the lowest loss, earliest on ties."""
    if not losses:
        raise ValueError("no rounds to select from")
    return min(range(len(losses)), key=lambda i: (losses[i], i))


class Pipeline:
    """Holds the dataset indexes so repeated scans reuse cached patch features."""

    def __init__(self, dataset, config=None, out_dir=None):
        self.dataset = dataset if isinstance(dataset, Dataset) else Dataset.load(dataset)
        self.config = config or PipelineConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._indexes = {}

    def index(self, split):
        if split not in self._indexes:
            c = self.config
            self._indexes[split] = PatchIndex(self.dataset.split(split), c.patch_size, c.overlap,
                                              c.downsample, c.workers)
        return self._indexes[split]

    def fine_repository(self):
        repo = LabelRepository(fine_pool=[f.mask for f in self.dataset.fine])
        for mask in repo.fine_pool:
            if mask.patch_ref.size != self.config.patch_size:
                raise PipelineError(f"fine patch size {mask.patch_ref.size} != patch size {self.config.patch_size}")
        return repo

    def topk_pooled(self, index, maxima):
        pooled = index.pooled()
        out = []
        for entry, mx, pl in zip(index, maxima, pooled):
            picks = select_top_k(mx, entry.refs, self.config.top_k)
            out.append(pl[[i for _, _, i in picks]])
        return out

    def stage2(self, scorer, round_index):
        index = self.index("train")
        maxima = index.scan(scorer)
        topk = self.topk_pooled(index, maxima)
        labels = [e.slide.label for e in index]
        rng = derive_rng(self.config.seed, "stage2", round_index)
        start = SlideClassifier().with_scaling(np.concatenate([t for t in topk if len(t)]))
        classifier, loss, trace = stage2_train(start, topk, labels, self.config, rng)
        return classifier, loss, trace, maxima

    def _save_round(self, state, repo=None):
        if self.out_dir is None:
            return
        rdir = self.out_dir / f"round_{state.round}"
        rdir.mkdir(parents=True, exist_ok=True)
        state.scorer.save(rdir / "scorer.ckpt")
        state.classifier.save(rdir / "classifier.ckpt")
        state.checkpoints = {"scorer": f"round_{state.round}/scorer.ckpt",
                             "classifier": f"round_{state.round}/classifier.ckpt"}
        if repo is not None:
            save_repository(repo, rdir / "labels.wsil")
            state.checkpoints["labels"] = f"round_{state.round}/labels.wsil"

    def run(self, mode="hybrid"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == "image_only":
            from .evaluation import train_image_baseline
            return train_image_baseline(self.dataset, self.config, pipeline=self)
        cfg = self.config
        repo = self.fine_repository()
        if not repo.fine_pool:
            raise PipelineError(f"mode {mode} needs fine-labeled patches but the fine pool is empty")
        source = _PatchSource(self.dataset.train, self.dataset.fine)
        rounds = cfg.max_rounds if mode == "hybrid" else 0

        start = PatchScorer().with_scaling([source.fine_planes(i) for i in range(len(repo.fine_pool))])
        scorer, trace1 = m_step(start, repo, cfg, source, derive_rng(cfg.seed, "stage1", 0),
                                ratio=(1, 0, 0))
        classifier, loss, trace2, maxima = self.stage2(scorer, 0)
        history = [RoundState(0, scorer, classifier, loss, repo.counts(), trace1, trace2)]
        self._save_round(history[-1])
        log.info("round 0: stage-2 loss %.6f", loss)

        for r in range(1, rounds + 1):
            delta = e_step(scorer, self.index("train"), cfg, r, maxima)
            repo.replace_pseudo(delta)
            ok = check_repository_invariants(repo, cfg.threshold, cfg.reweight)
            scorer, trace1 = m_step(scorer, repo, cfg, source, derive_rng(cfg.seed, "stage1", r))
            classifier, loss, trace2, maxima = self.stage2(scorer, r)
            history.append(RoundState(r, scorer, classifier, loss, repo.counts(), trace1, trace2, ok))
            self._save_round(history[-1], repo)
            log.info("round %d: stage-2 loss %.6f, pools %s", r, loss, repo.counts())

        best = history[select_round([h.stage2_loss for h in history])]
        result = RunResult(mode, best, history)
        if self.out_dir is not None:
            write_history(self.out_dir / "history.jsonl", history)
        return result

    def score_split(self, state, split="test"):
        """Slide scores for ``split`` with a round's scorer and classifier."""
        from .evaluation import ScoreSet, mil_scores
        index = self.index(split)
        if state.scorer is None:
            return mil_scores(state.classifier, index)
        maxima = index.scan(state.scorer)
        topk = self.topk_pooled(index, maxima)
        return ScoreSet([e.slide.slide_id for e in index],
                        [slide_confidence(state.classifier, t) for t in topk],
                        [e.slide.label for e in index])


def write_history(path, history):
    with open(path, "w") as fh:
        for state in history:
            fh.write(json.dumps(state.record(), sort_keys=True) + "\n")


def run(dataset, config=None, mode="hybrid", out_dir=None):
    return Pipeline(dataset, config, out_dir).run(mode)
