"""Slow, obviously-correct reference implementations the tests compare against.

Nothing here imports from ``segjpeg`` beyond plain data types, so a bug in a
library routine cannot leak into its own oracle.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

PRIORITY = (1, 2, 3)  # person, bicycle, vehicle


def remap_pixel(value: int, ceiling: int) -> int:
    """round(value * ceiling / 255) with halves rounded up, in exact rational arithmetic."""
    from fractions import Fraction

    q = Fraction(value * ceiling, 255)
    return int(q + Fraction(1, 2)) if q.denominator != 1 else int(q)


def stamp_pixelwise(pixels: np.ndarray, masks: Dict[int, np.ndarray], shades: Dict[int, int]) -> np.ndarray:
    """Per-pixel stamping loop; the first class in priority order that covers a pixel wins."""
    out = pixels.copy()
    h, w = pixels.shape
    for y in range(h):
        for x in range(w):
            for cid in PRIORITY:
                if cid in masks and masks[cid][y, x]:
                    out[y, x] = shades[cid]
                    break
    return out


def lindley(arrivals: Sequence[float], sizes: Sequence[int], capacity_bps: float) -> List[Tuple[float, float]]:
    """FIFO single-server queue: (service start, service end) per packet.

    start_n = max(a_n, end_{n-1}); end_n = start_n + size_n * 8 / capacity.
    """
    out = []
    end = -np.inf
    for a, s in zip(arrivals, sizes):
        start = max(a, end)
        end = start + s * 8 / capacity_bps
        out.append((start, end))
    return out


def latest_frame_wins(events: Sequence[Tuple[int, int, int]]) -> Tuple[List[int], int]:
    """Reference receiver policy over (frame_id, frag_index, frag_count) events.

    Returns the completed frame ids in order and the incomplete-drop count.
    """
    current = None
    have: set = set()
    count = 0
    done = False
    completed: List[int] = []
    dropped = 0
    for fid, idx, n in events:
        if current is not None and fid < current:
            continue
        if current is None or fid > current:
            if have and not done:
                dropped += 1
            current, have, count, done = fid, set(), n, False
        if done or idx in have:
            continue
        have.add(idx)
        if len(have) == count:
            completed.append(fid)
            done = True
            have = set()
    return completed, dropped
