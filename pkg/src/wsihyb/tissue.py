"""Otsu tissue masking and overlapping patch enumeration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .slides import PatchRef


class EmptyHistogramError(ValueError):
    pass


def luma(rgb):
    """Integer luma 0.299R + 0.587G + 0.114B, rounded half up."""
    rgb = np.asarray(rgb).astype(np.int32)
    return (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000


def otsu_threshold(histogram):
    """Smallest bin t maximizing between-class variance, class 0 = bins [0..t].

    Uses exact integer arithmetic: w0*w1*(mu0-mu1)^2 is proportional to
    (S0*n1 - S1*n0)^2 / (n0*n1), compared by cross multiplication.
    A histogram with one occupied bin returns that bin.
    """
    counts = [int(c) for c in np.asarray(histogram).ravel()]
    if len(counts) != 256:
        raise ValueError(f"expected 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError("negative histogram count")
    total = sum(counts)
    if total == 0:
        raise EmptyHistogramError("empty histogram")
    weighted_total = sum(i * c for i, c in enumerate(counts))

    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t, c in enumerate(counts):
        n0 += c
        s0 += t * c
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * n1 - (weighted_total - s0) * n0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None or best_num == 0:
        return next(i for i, c in enumerate(counts) if c)
    return best_t


@dataclass
class TissueMask:
    downsample_factor: int
    mask: np.ndarray
    threshold: int | None = None

    @property
    def shape(self):
        return self.mask.shape


def downsampled_rgb(slide, factor):
    """Block mean (rounded half up) over factor x factor cells, partial edge cells included."""
    rows = -(-slide.height // factor)
    cols = -(-slide.width // factor)
    out = np.empty((rows, cols, 3), np.int64)
    col_starts = np.arange(0, slide.width, factor)
    col_sizes = np.diff(np.append(col_starts, slide.width))
    band = slide.tile_size
    for y in range(0, slide.height, band):
        h = min(band, slide.height - y)
        block = slide.read_region(0, y, slide.width, h)[..., :3]
        row_starts = np.arange(0, h, factor)
        row_sizes = np.diff(np.append(row_starts, h))
        sums = np.add.reduceat(block, row_starts, axis=0, dtype=np.int64)
        sums = np.add.reduceat(sums, col_starts, axis=1, dtype=np.int64)
        n = row_sizes[:, None, None] * col_sizes[None, :, None]
        out[y // factor:y // factor + len(row_starts)] = (2 * sums + n) // (2 * n)
    return out


def compute_tissue_mask(slide, downsample_factor=32):
    if downsample_factor < 1 or slide.tile_size % downsample_factor:
        raise ValueError(
            f"downsample factor {downsample_factor} must be >= 1 and divide tile size {slide.tile_size}"
        )
    gray = luma(downsampled_rgb(slide, downsample_factor))
    hist = np.bincount(gray.ravel(), minlength=256)
    if np.count_nonzero(hist) <= 1:
        # nothing to separate: a uniform slide has no foreground
        return TissueMask(downsample_factor, np.zeros(gray.shape, bool), None)
    t = otsu_threshold(hist)
    return TissueMask(downsample_factor, gray <= t, t)


def axis_positions(extent, patch_size, overlap):
    stride = patch_size - overlap
    positions = list(range(0, extent - patch_size + 1, stride))
    if positions[-1] != extent - patch_size:
        positions.append(extent - patch_size)
    return positions


def enumerate_patches(slide, mask, patch_size=512, overlap=128):
    """Row-major PatchRefs on the clamped stride grid that touch >= 1 tissue cell."""
    if not 0 <= overlap < patch_size:
        raise ValueError(f"overlap {overlap} must be in [0, patch_size={patch_size})")
    if patch_size > min(slide.width, slide.height):
        raise ValueError(f"patch size {patch_size} exceeds slide extent {slide.width}x{slide.height}")
    f = mask.downsample_factor
    expected = (-(-slide.height // f), -(-slide.width // f))
    if mask.mask.shape != expected:
        raise ValueError(f"mask shape {mask.mask.shape} != {expected} for factor {f}")
    integral = np.zeros((expected[0] + 1, expected[1] + 1), np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.mask, 0, dtype=np.int64), 1)
    refs = []
    xs = axis_positions(slide.width, patch_size, overlap)
    for y in axis_positions(slide.height, patch_size, overlap):
        r0, r1 = y // f, (y + patch_size - 1) // f + 1
        for x in xs:
            c0, c1 = x // f, (x + patch_size - 1) // f + 1
            hits = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
            if hits:
                refs.append(PatchRef(slide.slide_id, x, y, patch_size))
    return refs
