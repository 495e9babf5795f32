"""Frame data types and the reserved-shade palette.

Every other module passes these around: a single-channel luminance frame,
per-class binary masks bound to it, and the palette that says which grey
level stands for which road-user class.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Tuple, Union

import numpy as np


class PaletteError(ValueError):
    """A palette violates one of its invariants."""


class ClassId(enum.IntEnum):
    """Road-user classes. Integer codes double as label-map values (0 is background)."""

    PERSON = 1
    BICYCLE = 2
    VEHICLE = 3

    @classmethod
    def from_name(cls, name: str) -> "ClassId":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None


# Overlapping masks resolve to the first class in this order.
CLASS_PRIORITY: Tuple[ClassId, ...] = (ClassId.PERSON, ClassId.BICYCLE, ClassId.VEHICLE)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GreyFrame:
    """Single-channel 8-bit luminance raster.

    ``pixels`` is a read-only ``(height, width)`` uint8 array, row-major.
    ``capture_ts`` is in microseconds since the stream epoch.
    """

    pixels: np.ndarray
    capture_ts: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("frame dimensions must be positive")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", _frozen(px))

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes, capture_ts: int = 0) -> "GreyFrame":
        if len(data) != width * height:
            raise ValueError(f"expected {width * height} bytes, got {len(data)}")
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(height, width), capture_ts)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    @property
    def nbytes(self) -> int:
        """Raw buffer size: one byte per pixel."""
        return self.pixels.nbytes

    def to_rgb(self) -> np.ndarray:
        return np.repeat(self.pixels[:, :, None], 3, axis=2)

    def with_pixels(self, pixels: np.ndarray) -> "GreyFrame":
        return GreyFrame(pixels, self.capture_ts)

    def __eq__(self, other):
        if not isinstance(other, GreyFrame):
            return NotImplemented
        return self.capture_ts == other.capture_ts and np.array_equal(self.pixels, other.pixels)


def rgb_nbytes(width: int, height: int) -> int:
    """Byte size of an 8-bit 3-channel raster of the given dimensions."""
    return width * height * 3


@dataclass(frozen=True, eq=False)
class ClassMask:
    class_id: ClassId
    bitmap: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "class_id", ClassId(self.class_id))
        bm = np.asarray(self.bitmap)
        if bm.ndim != 2:
            raise ValueError(f"mask bitmap must be 2-D, got shape {bm.shape}")
        object.__setattr__(self, "bitmap", _frozen(bm.astype(bool)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bitmap.shape

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())

    def __eq__(self, other):
        if not isinstance(other, ClassMask):
            return NotImplemented
        return self.class_id == other.class_id and np.array_equal(self.bitmap, other.bitmap)


@dataclass(frozen=True, eq=False)
class SemanticFrame:
    """A frame plus at most one mask per class."""

    frame: GreyFrame
    masks: Tuple[ClassMask, ...] = ()
    frame_id: int = 0

    def __post_init__(self):
        masks = tuple(self.masks)
        seen = set()
        for m in masks:
            if m.class_id in seen:
                raise ValueError(f"duplicate mask for class {m.class_id.name}")
            seen.add(m.class_id)
            if m.shape != self.frame.shape:
                raise ValueError(
                    f"mask {m.class_id.name} has shape {m.shape}, frame is {self.frame.shape}"
                )
        object.__setattr__(self, "masks", masks)

    def mask_for(self, class_id: ClassId) -> Optional[ClassMask]:
        for m in self.masks:
            if m.class_id == class_id:
                return m
        return None

    def __eq__(self, other):
        if not isinstance(other, SemanticFrame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.frame == other.frame
            and {m.class_id: m for m in self.masks} == {m.class_id: m for m in other.masks}
        )


@dataclass(frozen=True)
class PaletteEntry:
    shade: int
    colour: Tuple[int, int, int]
    tolerance: int

    @property
    def band(self) -> Tuple[int, int]:
        """Inclusive luminance interval attributed to this class."""
        return self.shade - self.tolerance, self.shade + self.tolerance


@dataclass(frozen=True)
class ShadePalette:
    entries: Mapping[ClassId, PaletteEntry] = field(default_factory=dict)
    background_ceiling: int = 140

    def __post_init__(self):
        object.__setattr__(
            self, "entries", {ClassId(k): v for k, v in dict(self.entries).items()}
        )

    def __hash__(self):
        return hash((tuple(sorted(self.entries.items())), self.background_ceiling))

    def shade(self, class_id: ClassId) -> int:
        return self.entries[class_id].shade

    def colour(self, class_id: ClassId) -> Tuple[int, int, int]:
        return self.entries[class_id].colour

    def classify(self, luminance: int) -> Optional[ClassId]:
        """Class whose tolerance band contains ``luminance``, or None."""
        for cid, e in self.entries.items():
            lo, hi = e.band
            if lo <= luminance <= hi:
                return cid
        return None

    def to_dict(self) -> dict:
        return {
            "classes": {
                cid.name.lower(): {
                    "shade": e.shade,
                    "rgb": list(e.colour),
                    "tolerance": e.tolerance,
                }
                for cid, e in self.entries.items()
            },
            "background_ceiling": self.background_ceiling,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ShadePalette":
        """Build from a JSON document; missing keys fall back to the defaults."""
        base = default_palette()
        entries = dict(base.entries)
        for name, rec in (doc.get("classes") or {}).items():
            cid = ClassId.from_name(name)
            old = entries[cid]
            entries[cid] = PaletteEntry(
                shade=int(rec.get("shade", old.shade)),
                colour=tuple(int(c) for c in rec.get("rgb", old.colour)),
                tolerance=int(rec.get("tolerance", old.tolerance)),
            )
        if "tolerance" in doc:
            entries = {
                k: PaletteEntry(v.shade, v.colour, int(doc["tolerance"])) for k, v in entries.items()
            }
        ceiling = int(doc.get("background_ceiling", base.background_ceiling))
        return cls(entries, ceiling)


DEFAULT_SHADES = {ClassId.PERSON: 240, ClassId.BICYCLE: 200, ClassId.VEHICLE: 160}
DEFAULT_COLOURS = {
    ClassId.PERSON: (255, 0, 0),
    ClassId.BICYCLE: (0, 255, 0),
    ClassId.VEHICLE: (0, 0, 255),
}
DEFAULT_TOLERANCE = 19
DEFAULT_BACKGROUND_CEILING = 140
MIN_SHADE_SPACING = 40


def default_palette() -> ShadePalette:
    entries = {
        cid: PaletteEntry(DEFAULT_SHADES[cid], DEFAULT_COLOURS[cid], DEFAULT_TOLERANCE)
        for cid in ClassId
    }
    return ShadePalette(entries, DEFAULT_BACKGROUND_CEILING)


def palette_violations(p: ShadePalette) -> List[str]:
    """Every invariant the palette breaks, as human-readable strings."""
    problems = []
    if set(p.entries) != set(ClassId):
        missing = sorted(c.name for c in set(ClassId) - set(p.entries))
        problems.append(f"palette must define every class (missing: {', '.join(missing)})")
        if not p.entries:
            return problems
    for cid, e in p.entries.items():
        if not 0 <= e.shade <= 255:
            problems.append(f"{cid.name} shade {e.shade} outside [0, 255]")
        if e.tolerance < 0:
            problems.append(f"{cid.name} tolerance {e.tolerance} is negative")
        if len(e.colour) != 3 or any(not 0 <= c <= 255 for c in e.colour):
            problems.append(f"{cid.name} colour {e.colour} is not an 8-bit RGB triple")
    items = sorted(p.entries.items(), key=lambda kv: kv[1].shade)
    min_gap = None
    for (ca, a), (cb, b) in zip(items, items[1:]):
        gap = b.shade - a.shade
        min_gap = gap if min_gap is None else min(min_gap, gap)
        if gap < MIN_SHADE_SPACING:
            problems.append(
                f"shade distance {ca.name}={a.shade} / {cb.name}={b.shade} is {gap} < {MIN_SHADE_SPACING}"
            )
    colours = [e.colour for e in p.entries.values()]
    if len(set(colours)) != len(colours):
        problems.append("class colours are not distinct")
    if min_gap is not None:
        for cid, e in p.entries.items():
            if 2 * e.tolerance >= min_gap:
                problems.append(
                    f"overlapping tolerance windows: {cid.name} tolerance {e.tolerance} "
                    f"is not below half the minimum shade distance {min_gap}"
                )
    lowest_cid, lowest = items[0]
    floor = lowest.shade - lowest.tolerance
    if p.background_ceiling >= floor:
        problems.append(
            f"background ceiling {p.background_ceiling} intrudes into the {lowest_cid.name} band "
            f"(must be < {lowest.shade} - {lowest.tolerance} = {floor})"
        )
    if p.background_ceiling < 0:
        problems.append("background ceiling is negative")
    return problems


def validate_palette(p: ShadePalette) -> ShadePalette:
    """Return ``p`` unchanged if it is valid, else raise :class:`PaletteError`."""
    problems = palette_violations(p)
    if problems:
        raise PaletteError("; ".join(problems))
    return p


def load_palette(path: Union[str, Path]) -> ShadePalette:
    with open(path) as fh:
        doc = json.load(fh)
    return validate_palette(ShadePalette.from_dict(doc))


def save_palette(p: ShadePalette, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(p.to_dict(), fh, indent=2)
        fh.write("\n")

