import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segjpeg.frame import (
    ClassId,
    ClassMask,
    GreyFrame,
    PaletteEntry,
    PaletteError,
    SemanticFrame,
    ShadePalette,
    default_palette,
    load_palette,
    palette_violations,
    rgb_nbytes,
    save_palette,
    validate_palette,
)


def test_default_palette_values():
    p = default_palette()
    assert p.shade(ClassId.PERSON) == 240
    assert p.shade(ClassId.BICYCLE) == 200
    assert p.shade(ClassId.VEHICLE) == 160
    assert p.colour(ClassId.PERSON) == (255, 0, 0)
    assert p.colour(ClassId.BICYCLE) == (0, 255, 0)
    assert p.colour(ClassId.VEHICLE) == (0, 0, 255)
    assert all(e.tolerance == 19 for e in p.entries.values())
    assert p.background_ceiling == 140
    assert validate_palette(p) is p


def test_default_palette_bands_disjoint_and_bijective():
    p = default_palette()
    intervals = [e.band for e in p.entries.values()] + [(0, p.background_ceiling)]
    for i, (a_lo, a_hi) in enumerate(intervals):
        for b_lo, b_hi in intervals[i + 1:]:
            assert a_hi < b_lo or b_hi < a_lo
    assert len({e.shade for e in p.entries.values()}) == 3
    assert len({e.colour for e in p.entries.values()}) == 3


def _with(p, **shades):
    entries = dict(p.entries)
    for name, shade in shades.items():
        cid = ClassId.from_name(name)
        entries[cid] = PaletteEntry(shade, entries[cid].colour, entries[cid].tolerance)
    return ShadePalette(entries, p.background_ceiling)


def test_rejects_close_shades():
    bad = _with(default_palette(), person=240, bicycle=230, vehicle=160)
    with pytest.raises(PaletteError, match="distance"):
        validate_palette(bad)


def test_rejects_ceiling_in_vehicle_band():
    bad = ShadePalette(default_palette().entries, background_ceiling=150)
    with pytest.raises(PaletteError, match="background ceiling 150 intrudes"):
        validate_palette(bad)


def test_ceiling_boundary():
    # 141 = 160 - 19 is the first value inside the band
    assert not palette_violations(ShadePalette(default_palette().entries, 140))
    assert palette_violations(ShadePalette(default_palette().entries, 141))


def test_rejects_overlapping_tolerance():
    entries = {
        cid: PaletteEntry(e.shade, e.colour, 20) for cid, e in default_palette().entries.items()
    }
    msgs = palette_violations(ShadePalette(entries, 100))
    assert any("overlapping tolerance windows" in m for m in msgs)


def test_rejects_missing_class():
    entries = dict(default_palette().entries)
    del entries[ClassId.BICYCLE]
    with pytest.raises(PaletteError, match="BICYCLE"):
        validate_palette(ShadePalette(entries, 140))


def test_palette_json_round_trip(tmp_path):
    p = default_palette()
    path = tmp_path / "palette.json"
    save_palette(p, path)
    doc = json.loads(path.read_text())
    assert doc["classes"]["person"] == {"shade": 240, "rgb": [255, 0, 0], "tolerance": 19}
    assert load_palette(path) == p


def test_palette_json_partial_override(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"classes": {"vehicle": {"shade": 150}}, "background_ceiling": 120}))
    p = load_palette(path)
    assert p.shade(ClassId.VEHICLE) == 150
    assert p.shade(ClassId.PERSON) == 240
    assert p.background_ceiling == 120


def test_invalid_palette_file_rejected(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"background_ceiling": 150}))
    with pytest.raises(PaletteError):
        load_palette(path)


def test_grey_frame_is_read_only():
    f = GreyFrame(np.zeros((4, 5), np.uint8))
    assert f.width == 5 and f.height == 4
    with pytest.raises(ValueError):
        f.pixels[0, 0] = 1


def test_grey_frame_rejects_wrong_dtype_or_rank():
    with pytest.raises(ValueError):
        GreyFrame(np.zeros((4, 5, 3), np.uint8))
    with pytest.raises(ValueError):
        GreyFrame(np.full((2, 2), 300))


def test_semantic_frame_checks_masks():
    f = GreyFrame(np.zeros((4, 4), np.uint8))
    m = ClassMask(ClassId.PERSON, np.ones((4, 4), bool))
    with pytest.raises(ValueError, match="duplicate"):
        SemanticFrame(f, (m, m))
    with pytest.raises(ValueError, match="shape"):
        SemanticFrame(f, (ClassMask(ClassId.VEHICLE, np.ones((3, 4), bool)),))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 4096))
def test_grey_is_one_third_of_rgb(w, h):
    assert 3 * w * h == rgb_nbytes(w, h)
    f = GreyFrame(np.zeros((min(h, 64), min(w, 64)), np.uint8))
    assert 3 * f.nbytes == f.to_rgb().nbytes
