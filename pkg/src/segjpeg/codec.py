"""Greyscale JPEG codec with reserved-shade mask stamping.

Encoding squeezes the background into ``[0, background_ceiling]``, paints
each class mask with its reserved shade and then searches the JPEG quality
for the largest frame that fits the per-frame byte budget. Decoding reads
the JPEG back, classifies every pixel against the palette tolerance bands
and paints recognised pixels in the class colour.

Frames are intra-coded and independent: nothing here keeps state between
calls, so both directions are safe to run from several threads at once.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .frame import (
    CLASS_PRIORITY,
    ClassId,
    ClassMask,
    GreyFrame,
    SemanticFrame,
    ShadePalette,
    validate_palette,
)

log = logging.getLogger(__name__)

MIN_QUALITY = 10
MAX_QUALITY = 95
MAX_PROBES = 7
MIN_FRAME_BUDGET = 1000


class CodecError(Exception):
    pass


class BudgetUnattainable(CodecError):
    """Even the lowest searched quality does not fit the byte budget."""

    def __init__(self, budget: int, min_size: int, quality: int = MIN_QUALITY):
        self.budget = budget
        self.min_size = min_size
        self.quality = quality
        super().__init__(
            f"frame needs {min_size} bytes at quality {quality}, budget is {budget} bytes"
        )


class JpegDecodeError(CodecError):
    """The byte stream is not a decodable JPEG."""


class JpegFormatError(CodecError):
    """The JPEG decodes but is not single-channel greyscale."""


@dataclass(frozen=True)
class RateBudget:
    target_bitrate: float  # bits/s
    framerate: float  # frames/s

    def __post_init__(self):
        if self.target_bitrate <= 0 or self.framerate <= 0:
            raise ValueError("bitrate and framerate must be positive")
        if self.max_bytes_per_frame < MIN_FRAME_BUDGET:
            raise ValueError(
                f"per-frame budget {self.max_bytes_per_frame} B is below {MIN_FRAME_BUDGET} B"
            )

    @classmethod
    def from_kbit(cls, kbit_per_s: float, framerate: float) -> "RateBudget":
        return cls(kbit_per_s * 1000.0, framerate)

    @property
    def max_bytes_per_frame(self) -> int:
        return int(self.target_bitrate / self.framerate / 8)


@dataclass(frozen=True)
class EncodedFrame:
    jpeg_bytes: bytes
    frame_id: int = 0
    capture_ts: int = 0
    quality_used: Optional[int] = None  # unknown for frames rebuilt from the wire

    def __len__(self):
        return len(self.jpeg_bytes)


@dataclass
class DecodedView:
    rgb: np.ndarray
    grey: np.ndarray
    recovered_masks: List[ClassMask] = field(default_factory=list)

    def mask_for(self, class_id: ClassId) -> Optional[ClassMask]:
        for m in self.recovered_masks:
            if m.class_id == class_id:
                return m
        return None


def remap_background(frame: GreyFrame, palette: ShadePalette) -> GreyFrame:
    """Linearly squeeze luminance into ``[0, palette.background_ceiling]``."""
    lut = remap_lut(palette.background_ceiling)
    return frame.with_pixels(lut[frame.pixels])


def remap_lut(ceiling: int) -> np.ndarray:
    # round-half-up; np.rint would round half to even
    x = np.arange(256, dtype=np.int64)
    return ((x * ceiling * 2 + 255) // 510).astype(np.uint8)


def effective_masks(masks: Iterable[ClassMask], shape: Tuple[int, int]) -> Dict[ClassId, np.ndarray]:
    """Per-class pixel sets after overlap resolution (Person > Bicycle > Vehicle)."""
    by_class = {m.class_id: m.bitmap for m in masks}
    taken = np.zeros(shape, dtype=bool)
    out = {}
    for cid in CLASS_PRIORITY:
        bm = by_class.get(cid)
        if bm is None:
            continue
        out[cid] = bm & ~taken
        taken |= bm
    return out


def stamp_masks(frame: GreyFrame, masks: Sequence[ClassMask], palette: ShadePalette) -> GreyFrame:
    """Paint every mask pixel with its class shade; higher-priority classes win overlaps."""
    for m in masks:
        if m.shape != frame.shape:
            raise ValueError(
                f"mask {m.class_id.name} has shape {m.shape}, frame is {frame.shape}"
            )
    if not masks:
        return frame
    px = frame.pixels.copy()
    by_class = {m.class_id: m.bitmap for m in masks}
    for cid in reversed(CLASS_PRIORITY):
        if cid in by_class:
            px[by_class[cid]] = palette.shade(cid)
    return frame.with_pixels(px)


def jpeg_compress(pixels: np.ndarray, quality: int) -> bytes:
    """Baseline greyscale JPEG with optimised Huffman tables."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(
        buf, format="JPEG", quality=int(quality), optimize=True, progressive=False
    )
    return buf.getvalue()


def search_quality(
    pixels: np.ndarray,
    max_bytes: int,
    lo: int = MIN_QUALITY,
    hi: int = MAX_QUALITY,
    max_probes: int = MAX_PROBES,
) -> Tuple[int, bytes]:
    """Highest quality in ``[lo, hi]`` whose JPEG fits in ``max_bytes``.

    Binary search with the midpoint rounded up; seven probes cover 10..95
    completely, including both endpoints.
    """
    best = None
    smallest = None
    probes = 0
    while lo <= hi and probes < max_probes:
        mid = (lo + hi + 1) // 2
        data = jpeg_compress(pixels, mid)
        probes += 1
        if len(data) <= max_bytes:
            best = (mid, data)
            lo = mid + 1
        else:
            if smallest is None or mid < smallest[0]:
                smallest = (mid, len(data))
            hi = mid - 1
    if best is None:
        if smallest is None or smallest[0] != MIN_QUALITY:
            smallest = (MIN_QUALITY, len(jpeg_compress(pixels, MIN_QUALITY)))
        raise BudgetUnattainable(max_bytes, smallest[1], smallest[0])
    return best


def prepare(sf: SemanticFrame, palette: ShadePalette) -> GreyFrame:
    """Background remap followed by mask stamping: the raster handed to JPEG."""
    return stamp_masks(remap_background(sf.frame, palette), sf.masks, palette)


def encode(sf: SemanticFrame, palette: ShadePalette, budget: RateBudget) -> EncodedFrame:
    validate_palette(palette)
    stamped = prepare(sf, palette)
    quality, data = search_quality(stamped.pixels, budget.max_bytes_per_frame)
    return EncodedFrame(data, sf.frame_id, sf.frame.capture_ts, quality)


def jpeg_decompress(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(bytes(data)))
        if img.format != "JPEG":
            raise JpegDecodeError(f"not a JPEG stream (detected {img.format})")
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise JpegDecodeError(f"malformed JPEG: {exc}") from exc
    if img.mode != "L":
        raise JpegFormatError(f"expected single-channel greyscale JPEG, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def classify_pixels(grey: np.ndarray, palette: ShadePalette) -> Dict[ClassId, np.ndarray]:
    """Band membership per class via a 256-entry lookup table."""
    lut = np.zeros(256, dtype=np.uint8)
    for cid, e in palette.entries.items():
        lo, hi = e.band
        band = slice(max(lo, 0), min(hi, 255) + 1)
        # bands are disjoint for a valid palette
        assert not lut[band].any(), "tolerance bands overlap"
        lut[band] = int(cid)
    labels = lut[grey]
    return {cid: labels == int(cid) for cid in palette.entries}


def decode(data, palette: ShadePalette) -> DecodedView:
    """Recolour a received SEG-JPEG frame and recover its class masks.

    ``data`` is either raw JPEG bytes or an :class:`EncodedFrame`.
    """
    if isinstance(data, EncodedFrame):
        data = data.jpeg_bytes
    grey = jpeg_decompress(data)
    hits = classify_pixels(grey, palette)
    rgb = np.repeat(grey[:, :, None], 3, axis=2)
    masks = []
    for cid in palette.entries:
        bm = hits[cid]
        rgb[bm] = palette.colour(cid)
        masks.append(ClassMask(cid, bm))
    return DecodedView(rgb=rgb, grey=grey, recovered_masks=masks)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mask_iou(
    original: Iterable[ClassMask],
    recovered: Iterable[ClassMask],
    shape: Tuple[int, int],
) -> Dict[ClassId, float]:
    """Per-class IoU between the stamped (overlap-resolved) masks and recovered ones."""
    truth = effective_masks(original, shape)
    got = {m.class_id: m.bitmap for m in recovered}
    empty = np.zeros(shape, dtype=bool)
    return {
        cid: iou(truth.get(cid, empty), got.get(cid, empty))
        for cid in ClassId
    }


def round_trip_iou(sf: SemanticFrame, palette: ShadePalette, budget: RateBudget) -> Dict[ClassId, float]:
    """Encode, decode and score recovered masks per class."""
    view = decode(encode(sf, palette, budget), palette)
    return mask_iou(sf.masks, view.recovered_masks, sf.frame.shape)
