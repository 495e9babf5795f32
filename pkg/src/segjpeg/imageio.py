"""PNG/JPEG file helpers and label-map conversion.

Label maps are 8-bit single-channel PNGs: 0 background, 1 person,
2 bicycle, 3 vehicle.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .frame import CLASS_PRIORITY, ClassId, ClassMask, GreyFrame

PathLike = Union[str, Path]


class ImageFileError(Exception):
    """An input image is missing, unreadable or has the wrong layout."""


def _open(path: PathLike) -> Image.Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFileError(f"cannot decode {path}: {exc}") from exc
    return img


def read_grey(path: PathLike, capture_ts: int = 0) -> GreyFrame:
    """Load any raster as luminance (colour input is converted with ITU-R 601 weights)."""
    img = _open(path)
    if img.mode != "L":
        img = img.convert("L")
    return GreyFrame(np.asarray(img, dtype=np.uint8), capture_ts)


def write_grey(frame: Union[GreyFrame, np.ndarray], path: PathLike) -> None:
    px = frame.pixels if isinstance(frame, GreyFrame) else np.asarray(frame, dtype=np.uint8)
    Image.fromarray(np.ascontiguousarray(px)).save(path)


def write_rgb(rgb: np.ndarray, path: PathLike) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path)


def label_map_to_masks(labels: np.ndarray) -> List[ClassMask]:
    """One mask per class present in the label map, in class-code order."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, [0] + [int(c) for c in ClassId])
    if bad.any():
        raise ImageFileError(f"label map contains values outside 0..3: {sorted(set(labels[bad].tolist()))}")
    return [ClassMask(cid, labels == int(cid)) for cid in ClassId if (labels == int(cid)).any()]


def masks_to_label_map(masks: Iterable[ClassMask], shape) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.uint8)
    by_class: Dict[ClassId, np.ndarray] = {m.class_id: m.bitmap for m in masks}
    for cid in reversed(CLASS_PRIORITY):
        if cid in by_class:
            labels[by_class[cid]] = int(cid)
    return labels


def read_label_map(path: PathLike) -> Tuple[List[ClassMask], Tuple[int, int]]:
    img = _open(path)
    if img.mode not in ("L", "P"):
        raise ImageFileError(f"{path}: label map must be 8-bit single-channel, got mode {img.mode}")
    labels = np.asarray(img, dtype=np.uint8)
    masks = label_map_to_masks(labels)
    return masks, labels.shape


def write_label_map(masks: Iterable[ClassMask], shape, path: PathLike) -> None:
    Image.fromarray(masks_to_label_map(masks, shape)).save(path)


def read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_bytes()
