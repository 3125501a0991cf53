"""Dataset access and batched patch scanning.

A scan reads every tissue patch of a set of slides once and returns, per
patch, the maximum pixel probability under a patch scorer and (optionally)
the model-independent pooled features used by the slide classifier. Scans
fan out over a process pool per slide and merge in slide order, so results
do not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .labels import PixelMask
from .scorer import N_POOLED_FEATURES, patch_features, pooled_features
from .slides import PatchRef, SlideFormatError, SlideImage, read_patch
from .synth import MANIFEST_NAME, manifest_digest
from .tissue import compute_tissue_mask, enumerate_patches

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class FinePatch:
    mask: PixelMask
    pixels: np.ndarray


@dataclass
class Dataset:
    root: Path
    slides: list
    fine: list
    digest: str
    manifest: dict = field(repr=False, default_factory=dict)

    @classmethod
    def load(cls, root, load_fine=True):
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            manifest = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        slides, seen = [], set()
        for rec in manifest.get("slides", []):
            sid = rec.get("slide_id")
            if sid in seen:
                raise DataError(f"duplicate slide id {sid!r}")
            seen.add(sid)
            if rec.get("label") not in (0, 1) or rec.get("split") not in ("train", "test"):
                raise DataError(f"slide {sid!r}: bad label/split {rec.get('label')}/{rec.get('split')}")
            try:
                slide = SlideImage(root / rec["file"], sid, rec["label"])
            except (OSError, SlideFormatError, KeyError) as exc:
                raise DataError(f"slide {sid!r}: {exc}") from exc
            slide.split = rec["split"]
            slides.append(slide)
        fine = []
        if load_fine:
            for rec in manifest.get("fine_patches", []):
                try:
                    container = SlideImage(root / rec["file"])
                except (OSError, SlideFormatError, KeyError) as exc:
                    raise DataError(f"fine patch {rec.get('file')!r}: {exc}") from exc
                if container.channels != 4 or container.width != rec["size"] or container.height != rec["size"]:
                    raise DataError(f"fine patch {rec['file']!r} is not a {rec['size']}px RGB+mask patch")
                block = container.read_all()
                ref = PatchRef(rec["source_slide"], rec["x"], rec["y"], rec["size"])
                fine.append(FinePatch(PixelMask(ref, block[..., 3]), np.ascontiguousarray(block[..., :3])))
        return cls(root, slides, fine, manifest_digest(root), manifest)

    def split(self, name):
        return [s for s in self.slides if s.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")


@dataclass
class SlidePatches:
    slide: SlideImage
    refs: list
    pooled: np.ndarray | None = None


def _tissue_refs(args):
    slide, patch_size, overlap, factor = args
    mask = compute_tissue_mask(slide, factor)
    return enumerate_patches(slide, mask, patch_size, overlap)


def _scan_slide(args):
    slide, refs, weights, want_pooled = args
    maxima = np.empty(len(refs))
    pooled = np.empty((len(refs), N_POOLED_FEATURES)) if want_pooled else None
    for i, ref in enumerate(refs):
        planes = patch_features(read_patch(slide, ref))
        if weights is not None:
            maxima[i] = expit(np.tensordot(weights, planes, axes=1)).max()
        if want_pooled:
            pooled[i] = pooled_features(planes)
    return (maxima if weights is not None else None), pooled


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ctx.Pool(min(workers, len(jobs))) as pool:
        return pool.map(fn, jobs, chunksize=1)


class PatchIndex:
    """Tissue patches of a slide list plus cached pooled features and per-model maxima."""

    def __init__(self, slides, patch_size=512, overlap=128, downsample=32, workers=1):
        self.workers = workers
        jobs = [(s, patch_size, overlap, downsample) for s in slides]
        self.entries = [SlidePatches(s, refs) for s, refs in zip(slides, _map(_tissue_refs, jobs, workers))]
        self._maxima = {}

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def n_patches(self):
        return sum(len(e.refs) for e in self.entries)

    def scan(self, scorer=None, want_pooled=None):
        """Per-slide arrays of max pixel probability under ``scorer`` (cached by checksum)."""
        if want_pooled is None:
            want_pooled = any(e.pooled is None for e in self.entries)
        key = scorer.checksum() if scorer is not None else None
        if key is not None and key in self._maxima and not want_pooled:
            return self._maxima[key]
        weights = scorer.effective() if scorer is not None else None
        jobs = [(e.slide, e.refs, weights, want_pooled and e.pooled is None) for e in self.entries]
        results = _map(_scan_slide, jobs, self.workers)
        maxima = []
        for entry, (mx, pooled) in zip(self.entries, results):
            if pooled is not None:
                entry.pooled = pooled
            maxima.append(mx)
        if key is not None:
            self._maxima[key] = maxima
        return maxima if key is not None else None

    def pooled(self):
        if any(e.pooled is None for e in self.entries):
            self.scan(None, want_pooled=True)
        return [e.pooled for e in self.entries]
