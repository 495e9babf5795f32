"""Providers of SemanticFrames.

Real detector inference is not part of this package. Instead there is a
seeded synthetic street-scene generator, a reader for frame/label-map PNG
sequences on disk, and a wrapper that holds each frame back by a sampled
inference delay so the rest of the pipeline sees realistic detector timing.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from .frame import ClassId, ClassMask, GreyFrame, SemanticFrame
from .imageio import read_grey, read_label_map, write_grey, write_label_map

# Field-system detector timings (ms): large and nano segmentation models.
YOLO_X_DELAY = (35.8, 3.1)
YOLO_N_DELAY = (7.3, 0.0)

FRAME_PATTERN = "frame_{:04d}.png"
MASK_PATTERN = "mask_{:04d}.png"
_FRAME_RE = re.compile(r"^frame_(\d{4,})\.png$")


class MaskSourceError(Exception):
    pass


class EndOfSequence(Exception):
    """The source has no more frames. Not an error."""


@dataclass(frozen=True)
class InferenceDelay:
    mean_ms: float
    stddev_ms: float = 0.0

    def __post_init__(self):
        if self.mean_ms < 0 or self.stddev_ms < 0:
            raise ValueError("inference delay mean and stddev must be non-negative")


@dataclass
class MaskSourceConfig:
    kind: str = "mock"  # "mock" | "files"
    path: Optional[str] = None
    inference_delay: Optional[InferenceDelay] = None
    seed: int = 0
    width: int = 640
    height: int = 360
    scenario: str = "street"
    fps: float = 10.0

    def __post_init__(self):
        if self.kind not in ("mock", "files"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "files" and not self.path:
            raise ValueError("files source needs a path")


class MaskSource:
    """Base class: iterate, or call :meth:`next_semantic_frame` directly."""

    def next_semantic_frame(self, capture_ts: Optional[int] = None) -> SemanticFrame:
        raise NotImplementedError

    def __iter__(self) -> Iterator[SemanticFrame]:
        while True:
            try:
                yield self.next_semantic_frame()
            except EndOfSequence:
                return


# -- synthetic scenes -------------------------------------------------------

@dataclass
class _Blob:
    class_id: ClassId
    ellipse: bool
    w: int
    h: int
    x: float
    y: int
    vx: float

    def position(self, k: int, width: int) -> int:
        # bounce between the left and right edges so the blob is always fully visible
        span = width - self.w
        if span <= 0:
            return 0
        p = (self.x + self.vx * k) % (2 * span)
        return int(round(p if p <= span else 2 * span - p))

    def raster(self, k: int, shape: Tuple[int, int]) -> np.ndarray:
        height, width = shape
        x0 = self.position(k, width)
        m = np.zeros(shape, dtype=bool)
        if not self.ellipse:
            m[self.y:self.y + self.h, x0:x0 + self.w] = True
            return m
        yy, xx = np.ogrid[self.y:self.y + self.h, x0:x0 + self.w]
        cy = self.y + (self.h - 1) / 2
        cx = x0 + (self.w - 1) / 2
        inside = ((yy - cy) / (self.h / 2)) ** 2 + ((xx - cx) / (self.w / 2)) ** 2 <= 1.0
        m[self.y:self.y + self.h, x0:x0 + self.w] = inside
        return m


SCENARIOS = ("street", "crossing", "empty")


class MockSource(MaskSource):
    """Deterministic moving-blob scenes over a gradient background.

    ``street`` puts one blob per class in its own horizontal lane, so masks
    never overlap and every class is always on screen. ``crossing`` sends
    two pedestrians across the frame in front of a slow vehicle. ``empty``
    has no road users at all.
    """

    min_size = 32
    max_width = 160
    lane_gap = 12

    def __init__(self, seed: int = 0, width: int = 640, height: int = 360,
                 scenario: str = "street", fps: float = 10.0):
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
        self.seed = seed
        self.shape = (height, width)
        self.scenario = scenario
        self.fps = fps
        self.index = 0
        rng = np.random.default_rng(seed)
        self._background = self._make_background(rng)
        self._blobs = self._make_blobs(rng)

    def _make_background(self, rng: np.random.Generator) -> np.ndarray:
        height, width = self.shape
        y, x = np.mgrid[0:height, 0:width].astype(np.float64)
        phase = rng.uniform(0, 2 * np.pi)
        bg = 40.0 + 150.0 * y / height
        bg += 5.0 * np.sin(x / 23.0 + phase) * np.cos(y / 17.0)
        return np.clip(np.rint(bg), 16, 208).astype(np.uint8)

    def _lane_blob(self, rng, cid: ClassId, lane: int, lane_h: int) -> _Blob:
        height, width = self.shape
        lo = min(self.min_size, max(1, lane_h - self.lane_gap))
        h = int(rng.integers(lo, max(lo, lane_h - self.lane_gap) + 1))
        w = int(rng.integers(lo, max(lo, min(self.max_width, width // 2)) + 1))
        y = lane * lane_h + int(rng.integers(0, lane_h - h + 1))
        x = float(rng.uniform(0, max(1, width - w)))
        vx = float(rng.uniform(2.0, 12.0)) * (1 if rng.random() < 0.5 else -1)
        return _Blob(cid, bool(rng.random() < 0.5), w, h, x, y, vx)

    def _make_blobs(self, rng: np.random.Generator) -> List[_Blob]:
        height, width = self.shape
        if self.scenario == "empty":
            return []
        lane_h = height // 3
        if self.scenario == "street":
            lanes = rng.permutation(3)
            return [self._lane_blob(rng, cid, int(lane), lane_h) for cid, lane in zip(ClassId, lanes)]
        # crossing: two pedestrians walking in opposite directions, a vehicle behind them
        ped_h = min(lane_h - self.lane_gap, max(self.min_size, height // 4))
        ped_w = max(self.min_size, ped_h // 2)
        walkers = [
            _Blob(ClassId.PERSON, True, ped_w, ped_h, 0.0, lane_h + 4, 9.0),
            _Blob(ClassId.PERSON, True, ped_w, ped_h, float(width - ped_w), 2 * lane_h + 4, -7.0),
        ]
        car = self._lane_blob(rng, ClassId.VEHICLE, 0, lane_h)
        car.ellipse = False
        car.vx = 2.0
        return walkers + [car]

    def scene(self, k: int) -> Tuple[np.ndarray, List[ClassMask]]:
        """Background raster and class masks for frame index ``k``."""
        per_class = {}
        for b in self._blobs:
            r = b.raster(k, self.shape)
            per_class[b.class_id] = per_class[b.class_id] | r if b.class_id in per_class else r
        masks = [ClassMask(cid, per_class[cid]) for cid in ClassId if cid in per_class]
        return self._background, masks

    def next_semantic_frame(self, capture_ts: Optional[int] = None) -> SemanticFrame:
        k = self.index
        self.index += 1
        if capture_ts is None:
            capture_ts = int(round(k * 1e6 / self.fps))
        bg, masks = self.scene(k)
        return SemanticFrame(GreyFrame(bg, capture_ts), tuple(masks), frame_id=k)


# -- file sequences ----------------------------------------------------------

class FileSource(MaskSource):
    """Reads ``frame_NNNN.png`` / ``mask_NNNN.png`` pairs in index order."""

    def __init__(self, path, fps: float = 10.0):
        self.path = Path(path)
        if not self.path.is_dir():
            raise MaskSourceError(f"{self.path} is not a directory")
        self.fps = fps
        self.indices = sorted(
            int(m.group(1)) for m in map(_FRAME_RE.match, (p.name for p in self.path.iterdir())) if m
        )
        self._pos = 0

    def __len__(self):
        return len(self.indices)

    def next_semantic_frame(self, capture_ts: Optional[int] = None) -> SemanticFrame:
        if self._pos >= len(self.indices):
            raise EndOfSequence(f"{self.path}: {len(self.indices)} frames consumed")
        n = self.indices[self._pos]
        self._pos += 1
        if capture_ts is None:
            capture_ts = int(round((self._pos - 1) * 1e6 / self.fps))
        frame = read_grey(self.path / FRAME_PATTERN.format(n), capture_ts)
        mask_path = self.path / MASK_PATTERN.format(n)
        if not mask_path.exists():
            raise MaskSourceError(f"missing mask file {mask_path}")
        masks, shape = read_label_map(mask_path)
        if shape != frame.shape:
            raise MaskSourceError(
                f"dimension mismatch for index {n}: frame {frame.shape}, mask {shape}"
            )
        return SemanticFrame(frame, tuple(masks), frame_id=n)


def write_sequence(path, frames) -> int:
    """Write SemanticFrames as a frame/mask PNG sequence; returns the count written."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, sf in enumerate(frames):
        write_grey(sf.frame, path / FRAME_PATTERN.format(i))
        write_label_map(sf.masks, sf.frame.shape, path / MASK_PATTERN.format(i))
        count += 1
    return count


# -- simulated inference delay ----------------------------------------------

class DelayedSource(MaskSource):
    """Holds each frame back by a Gaussian detector delay, clamped at zero."""

    def __init__(self, inner: MaskSource, delay: InferenceDelay, seed: int = 0,
                 sleep: Callable[[float], None] = time.sleep):
        self.inner = inner
        self.delay = delay
        self.rng = np.random.default_rng(seed)
        self.sleep = sleep
        self.last_delay_ms = 0.0

    def sample_delay_ms(self) -> float:
        return max(0.0, float(self.rng.normal(self.delay.mean_ms, self.delay.stddev_ms)))

    def next_semantic_frame(self, capture_ts: Optional[int] = None) -> SemanticFrame:
        d = self.sample_delay_ms()
        start = time.perf_counter()
        sf = self.inner.next_semantic_frame(capture_ts)
        remaining = d / 1000.0 - (time.perf_counter() - start)
        if remaining > 0:
            self.sleep(remaining)
        self.last_delay_ms = d
        return sf


def make_source(config: MaskSourceConfig) -> MaskSource:
    if config.kind == "mock":
        src: MaskSource = MockSource(config.seed, config.width, config.height,
                                     config.scenario, config.fps)
    else:
        src = FileSource(config.path, config.fps)
    if config.inference_delay is not None:
        src = DelayedSource(src, config.inference_delay, seed=config.seed + 1)
    return src
