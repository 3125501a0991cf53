"""Fine masks, pseudo-label maps and the label transformations applied in the E-step."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .slides import PatchRef

FIXED_SCALE = 65535
LOWER_CLIP = 0.01

POSITIVE_REWEIGHTED = "positive_reweighted"
HARD_NEGATIVE = "hard_negative"
FINE = "fine"
_PROVENANCE_CODES = {FINE: 0, POSITIVE_REWEIGHTED: 1, HARD_NEGATIVE: 2}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE_CODES.items()}

_REPO_MAGIC = b"WSIL"
_REPO_VERSION = 1
_REPO_HEADER = struct.Struct("<4sHI")
_RECORD_HEAD = struct.Struct("<IIIIBBH")  # x, y, size, round, provenance, zero-plane flag, id length


class LabelError(ValueError):
    pass


class RepositoryFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def quantize(values):
    """Map [0, 1] floats to 16-bit fixed point codes."""
    return np.rint(np.asarray(values, np.float64) * FIXED_SCALE).astype(np.uint16)


def dequantize(codes):
    return np.asarray(codes, np.float64) / FIXED_SCALE


@dataclass
class PixelMask:
    patch_ref: PatchRef
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, np.uint8)
        size = self.patch_ref.size
        if self.mask.shape != (size, size):
            raise LabelError(f"mask shape {self.mask.shape} != ({size}, {size})")
        if self.mask.max(initial=0) > 1:
            raise LabelError("fine mask values must be 0 or 1")


@dataclass
class PseudoLabelMap:
    """Soft per-pixel label stored as 16-bit fixed point codes."""

    patch_ref: PatchRef
    codes: np.ndarray
    provenance: str
    round: int

    def __post_init__(self):
        size = self.patch_ref.size
        if self.codes.shape != (size, size):
            raise LabelError(f"label shape {self.codes.shape} != ({size}, {size})")
        if self.provenance not in (POSITIVE_REWEIGHTED, HARD_NEGATIVE):
            raise LabelError(f"unknown provenance {self.provenance!r}")

    @property
    def values(self):
        return dequantize(self.codes)

    @property
    def key(self):
        return (self.patch_ref.slide_id, self.patch_ref.x, self.patch_ref.y, self.round)

    def is_zero(self):
        return not self.codes.any()


def filter_patch_by_max(prob_map, threshold):
    """Keep a patch unless its maximum pixel probability is strictly below ``threshold``."""
    prob_map = np.asarray(prob_map)
    if prob_map.size == 0:
        raise LabelError("empty probability map")
    return bool(prob_map.max() >= threshold)


def reweight_values(prob_map, scale):
    """Scaled labels: 0 where v*scale < 0.01, else min(v*scale, 1)."""
    if scale < 1:
        raise LabelError(f"re-weighting constant must be >= 1, got {scale}")
    scaled = np.asarray(prob_map, np.float64) * scale
    out = np.minimum(scaled, 1.0)
    out[scaled < LOWER_CLIP] = 0.0
    return out


def reweight_positive(prob_map, scale, patch_ref, round_index=0):
    return PseudoLabelMap(patch_ref, quantize(reweight_values(prob_map, scale)),
                          POSITIVE_REWEIGHTED, round_index)


def make_hard_negative(patch_ref, round_index=0, slide_label=0):
    if slide_label != 0:
        raise LabelError(f"hard negative requested for patch of positive slide {patch_ref.slide_id!r}")
    # zero plane as a read-only broadcast view: no per-patch allocation
    codes = np.broadcast_to(np.uint16(0), (patch_ref.size, patch_ref.size))
    return PseudoLabelMap(patch_ref, codes, HARD_NEGATIVE, round_index)


@dataclass
class LabelRepository:
    fine_pool: list = field(default_factory=list)
    pseudo_pos_pool: dict = field(default_factory=dict)
    hard_neg_pool: dict = field(default_factory=dict)
    # pre-reweight maximum probability of each pseudo entry, keyed like the pools
    source_max: dict = field(default_factory=dict)

    def add(self, label_map):
        pool = self.pseudo_pos_pool if label_map.provenance == POSITIVE_REWEIGHTED else self.hard_neg_pool
        if label_map.key in self.pseudo_pos_pool or label_map.key in self.hard_neg_pool:
            raise LabelError(f"duplicate pseudo label key {label_map.key}")
        pool[label_map.key] = label_map

    def pseudo_positive(self):
        return [self.pseudo_pos_pool[k] for k in sorted(self.pseudo_pos_pool)]

    def hard_negatives(self):
        return [self.hard_neg_pool[k] for k in sorted(self.hard_neg_pool)]

    def replace_pseudo(self, delta):
        """Keep only ``delta``'s pseudo pools; the fine pool is untouched."""
        self.pseudo_pos_pool = dict(delta.pseudo_pos_pool)
        self.hard_neg_pool = dict(delta.hard_neg_pool)
        self.source_max = dict(delta.source_max)

    def counts(self):
        return {"fine": len(self.fine_pool), "pseudo_pos": len(self.pseudo_pos_pool),
                "hard_neg": len(self.hard_neg_pool)}


def _write_record(fh, ref, round_index, provenance, codes):
    ident = ref.slide_id.encode("utf-8")
    zero = not codes.any()
    head = _RECORD_HEAD.pack(ref.x, ref.y, ref.size, round_index, _PROVENANCE_CODES[provenance],
                             int(zero), len(ident))
    body = b"" if zero else np.ascontiguousarray(codes, "<u2").tobytes()
    crc = zlib.crc32(head + ident + body)
    fh.write(head + ident + body + struct.pack("<I", crc))


def save_repository(repo, path):
    entries = ([(m.patch_ref, -1, FINE, m.mask.astype(np.uint16) * FIXED_SCALE) for m in repo.fine_pool]
               + [(m.patch_ref, m.round, m.provenance, m.codes) for m in repo.pseudo_positive()]
               + [(m.patch_ref, m.round, m.provenance, m.codes) for m in repo.hard_negatives()])
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_REPO_HEADER.pack(_REPO_MAGIC, _REPO_VERSION, len(entries)))
        for ref, round_index, provenance, codes in entries:
            _write_record(fh, ref, round_index & 0xFFFFFFFF, provenance, codes)
    tmp.replace(path)


def load_repository(path):
    data = Path(path).read_bytes()
    if len(data) < _REPO_HEADER.size:
        raise RepositoryFormatError("truncated header", 0)
    magic, version, count = _REPO_HEADER.unpack_from(data, 0)
    if magic != _REPO_MAGIC:
        raise RepositoryFormatError(f"bad magic {magic!r}", 0)
    if version != _REPO_VERSION:
        raise RepositoryFormatError(f"unsupported version {version}", 4)
    repo = LabelRepository()
    offset = _REPO_HEADER.size
    for _ in range(count):
        start = offset
        if offset + _RECORD_HEAD.size > len(data):
            raise RepositoryFormatError("truncated record header", offset)
        x, y, size, round_index, prov, zero, id_len = _RECORD_HEAD.unpack_from(data, offset)
        offset += _RECORD_HEAD.size
        if prov not in _PROVENANCE_NAMES:
            raise RepositoryFormatError(f"unknown provenance code {prov}", start + 16)
        plane_bytes = 0 if zero else size * size * 2
        end = offset + id_len + plane_bytes + 4
        if end > len(data):
            raise RepositoryFormatError("truncated record", start)
        (crc,) = struct.unpack_from("<I", data, end - 4)
        if zlib.crc32(data[start:end - 4]) != crc:
            raise RepositoryFormatError("record checksum mismatch", start)
        slide_id = data[offset:offset + id_len].decode("utf-8")
        offset += id_len
        ref = PatchRef(slide_id, x, y, size)
        if zero:
            codes = np.broadcast_to(np.uint16(0), (size, size))
        else:
            codes = np.frombuffer(data, "<u2", size * size, offset).reshape(size, size).astype(np.uint16)
        offset = end
        provenance = _PROVENANCE_NAMES[prov]
        if provenance == FINE:
            repo.fine_pool.append(PixelMask(ref, (codes == FIXED_SCALE).astype(np.uint8)))
        else:
            if round_index == 0xFFFFFFFF:
                round_index = -1
            repo.add(PseudoLabelMap(ref, codes, provenance, round_index))
    if offset != len(data):
        raise RepositoryFormatError("trailing bytes after last record", offset)
    return repo
