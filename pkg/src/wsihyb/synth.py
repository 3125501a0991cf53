"""Synthetic brightfield-like slides with benign tissue, distractor and lesion blobs."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfinv

from .seeding import derive_rng
from .slides import write_slide

BACKGROUND, BENIGN, DISTRACTOR, LESION = 0, 1, 2, 3
MANIFEST_NAME = "manifest.json"

# mid-point quantiles of N(0, 1) on a 2^16 grid
_NORMAL_QUANTILES = np.sqrt(2.0) * erfinv((np.arange(1 << 16) + 0.5) / (1 << 16) * 2.0 - 1.0)


class GenerationError(RuntimeError):
    pass


@dataclass
class Texture:
    color: tuple
    noise_std: float


@dataclass
class GenConfig:
    n_slides: int = 250
    test_fraction: float = 0.4
    positive_fraction: float = 0.1
    extent: int = 4096
    tile_size: int = 512
    n_fine_patches: int = 20
    fine_per_source: int = 2
    patch_size: int = 512
    tissue_ellipses: tuple = (3, 6)
    tissue_radius: tuple = (400, 800)
    distractor_count: tuple = (10, 30)
    lesion_count: tuple = (1, 4)
    blob_radius: tuple = (64, 256)
    max_retries: int = 200
    background: Texture = field(default_factory=lambda: Texture((242, 238, 244), 3.0))
    benign: Texture = field(default_factory=lambda: Texture((222, 168, 200), 10.0))
    distractor: Texture = field(default_factory=lambda: Texture((196, 132, 186), 20.0))
    lesion: Texture = field(default_factory=lambda: Texture((168, 100, 182), 30.0))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for name in ("background", "benign", "distractor", "lesion"):
            if name in data and isinstance(data[name], dict):
                data[name] = Texture(tuple(data[name]["color"]), float(data[name]["noise_std"]))
        for key, value in list(data.items()):
            if isinstance(value, list):
                data[key] = tuple(value)
        return cls(**data)


@dataclass
class Blob:
    kind: str
    cx: int
    cy: int
    radius: int
    wobble: float
    phase: float
    lobes: int

    def radius_at(self, angle):
        return self.radius * (1.0 + self.wobble * np.sin(self.lobes * angle + self.phase))

    def inside(self, xs, ys):
        dx = np.asarray(xs - self.cx, np.float32)
        dy = np.asarray(ys - self.cy, np.float32)
        return np.hypot(dx, dy) <= self.radius_at(np.arctan2(dy, dx))

    def bbox(self, width, height):
        reach = int(math.ceil(self.radius * (1.0 + self.wobble))) + 1
        return (max(0, self.cx - reach), max(0, self.cy - reach),
                min(width, self.cx + reach + 1), min(height, self.cy + reach + 1))


def _split_counts(cfg):
    n_test = int(round(cfg.n_slides * cfg.test_fraction))
    n_train = cfg.n_slides - n_test
    n_pos = int(round(cfg.n_slides * cfg.positive_fraction))
    if n_pos > cfg.n_slides:
        raise GenerationError("positive fraction exceeds 1")
    pos_test = int(round(n_pos * n_test / cfg.n_slides)) if cfg.n_slides else 0
    pos_test = min(pos_test, n_test)
    pos_train = n_pos - pos_test
    if pos_train > n_train:
        pos_train, pos_test = n_train, n_pos - n_train
    return n_train, n_test, pos_train, pos_test


def _tissue_mask(cfg, rng, scale=8):
    n = cfg.extent // scale
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float32)
    tissue = np.zeros((n, n), bool)
    lo, hi = cfg.tissue_radius
    for _ in range(int(rng.integers(cfg.tissue_ellipses[0], cfg.tissue_ellipses[1] + 1))):
        cx, cy = rng.uniform(0.2, 0.8, size=2) * n
        a, b = rng.uniform(lo, hi, size=2) / scale
        theta = rng.uniform(0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xs - cx) * c + (ys - cy) * s
        v = -(xs - cx) * s + (ys - cy) * c
        tissue |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    full = np.repeat(np.repeat(tissue, scale, 0), scale, 1)
    return full[:cfg.extent, :cfg.extent]


def _random_blob(kind, cfg, rng, tissue):
    lo, hi = cfg.blob_radius
    for _ in range(cfg.max_retries):
        cx, cy = (int(v) for v in rng.integers(0, cfg.extent, size=2))
        if not tissue[cy, cx]:
            continue
        blob = Blob(kind, cx, cy, int(rng.integers(lo, hi + 1)), float(rng.uniform(0.0, 0.2)),
                    float(rng.uniform(0, 2 * math.pi)), int(rng.integers(2, 6)))
        if kind != "lesion":
            return blob
        x0, y0, x1, y1 = blob.bbox(cfg.extent, cfg.extent)
        ys, xs = np.ogrid[y0:y1, x0:x1]
        inside = blob.inside(xs, ys)
        reach = int(math.ceil(blob.radius * (1.0 + blob.wobble))) + 1
        fully_on_slide = (blob.cx - reach >= 0 and blob.cy - reach >= 0
                          and blob.cx + reach < cfg.extent and blob.cy + reach < cfg.extent)
        if fully_on_slide and tissue[y0:y1, x0:x1][inside].all():
            return blob
    raise GenerationError(f"could not place a {kind} blob after {cfg.max_retries} retries")


def render_slide(cfg, rng, positive):
    """Return (pixels, label map, blobs) for one synthetic slide."""
    tissue = _tissue_mask(cfg, rng)
    labels = np.where(tissue, BENIGN, BACKGROUND).astype(np.uint8)
    blobs = []
    for _ in range(int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))):
        blobs.append(_random_blob("distractor", cfg, rng, tissue))
    if positive:
        for _ in range(int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))):
            blobs.append(_random_blob("lesion", cfg, rng, tissue))
    for blob in blobs:
        x0, y0, x1, y1 = blob.bbox(cfg.extent, cfg.extent)
        ys, xs = np.ogrid[y0:y1, x0:x1]
        region = blob.inside(xs, ys) & tissue[y0:y1, x0:x1]
        labels[y0:y1, x0:x1][region] = LESION if blob.kind == "lesion" else DISTRACTOR

    textures = [cfg.background, cfg.benign, cfg.distractor, cfg.lesion]
    # shared luma noise: per-class normal quantiles indexed by uniform uint16, color folded in
    index = rng.integers(0, 1 << 16, size=labels.shape, dtype=np.uint32)
    index |= labels.astype(np.uint32) << 16
    chroma = np.frombuffer(rng.bytes(labels.size), np.uint8).reshape(labels.shape)
    pixels = np.empty(labels.shape + (3,), np.uint8)
    for c in range(3):
        table = np.concatenate([np.rint(t.color[c] + _NORMAL_QUANTILES * t.noise_std) for t in textures])
        channel = table.astype(np.int16)[index]
        channel += ((chroma >> (2 * c)) & 3).astype(np.int16) - 1
        np.clip(channel, 0, 255, out=channel)
        pixels[..., c] = channel
    return pixels, labels, blobs


def _blob_dict(blob):
    return {"kind": blob.kind, "cx": blob.cx, "cy": blob.cy, "radius": blob.radius,
            "wobble": blob.wobble, "phase": blob.phase, "lobes": blob.lobes}


def _fine_patches(cfg, rng, pixels, labels, blobs, source_id, count):
    out = []
    lesions = [b for b in blobs if b.kind == "lesion"]
    size = cfg.patch_size
    for i in range(count):
        blob = lesions[i % len(lesions)]
        x = int(np.clip(blob.cx - size // 2 + rng.integers(-size // 4, size // 4 + 1), 0, cfg.extent - size))
        y = int(np.clip(blob.cy - size // 2 + rng.integers(-size // 4, size // 4 + 1), 0, cfg.extent - size))
        crop = pixels[y:y + size, x:x + size]
        mask = (labels[y:y + size, x:x + size] == LESION).astype(np.uint8)
        out.append((x, y, np.concatenate([crop, mask[..., None]], axis=2)))
    return out


def generate_synthetic_dataset(cfg, seed, out_dir):
    """Write slides, fine-label patches and ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    (out_dir / "fine").mkdir(parents=True, exist_ok=True)
    if cfg.patch_size > cfg.extent:
        raise GenerationError("patch size exceeds slide extent")
    n_train, n_test, pos_train, pos_test = _split_counts(cfg)
    split_rng = derive_rng(seed, "synth", "labels")
    train_pos = set(split_rng.choice(n_train, size=pos_train, replace=False).tolist()) if n_train else set()
    test_pos = set(split_rng.choice(n_test, size=pos_test, replace=False).tolist()) if n_test else set()

    records = []
    for i in range(cfg.n_slides):
        split = "train" if i < n_train else "test"
        j = i if split == "train" else i - n_train
        positive = j in (train_pos if split == "train" else test_pos)
        slide_id = f"{split}_{j:04d}"
        rng = derive_rng(seed, "synth", "slide", i)
        pixels, _, blobs = render_slide(cfg, rng, positive)
        rel = f"slides/{slide_id}.wsih"
        digest = write_slide(out_dir / rel, pixels, cfg.tile_size)
        records.append({"slide_id": slide_id, "file": rel, "label": int(positive), "split": split,
                        "sha256": digest, "blobs": [_blob_dict(b) for b in blobs]})

    fine = []
    n_sources = -(-cfg.n_fine_patches // cfg.fine_per_source) if cfg.n_fine_patches else 0
    remaining = cfg.n_fine_patches
    for s in range(n_sources):
        rng = derive_rng(seed, "synth", "fine", s)
        source_id = f"fine_src_{s:04d}"
        pixels, labels, blobs = render_slide(cfg, rng, True)
        count = min(cfg.fine_per_source, remaining)
        remaining -= count
        for k, (x, y, block) in enumerate(_fine_patches(cfg, rng, pixels, labels, blobs, source_id, count)):
            rel = f"fine/{source_id}_{k}.wsih"
            digest = write_slide(out_dir / rel, block, cfg.patch_size)
            fine.append({"file": rel, "source_slide": source_id, "x": x, "y": y,
                         "size": cfg.patch_size, "sha256": digest})

    manifest = {"format": "wsihyb-dataset", "version": 1, "seed": int(seed),
                "gen_config": cfg.to_dict(), "slides": records, "fine_patches": fine}
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out_dir / MANIFEST_NAME).write_text(text)
    return manifest


def manifest_digest(path):
    """sha256 of the manifest text; it embeds every data file's sha256."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return hashlib.sha256(path.read_bytes()).hexdigest()
