import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsatrain.data import DatasetConfig, default_mask_library
from fsatrain.errors import ConfigurationError, ValidationError
from fsatrain.masks import (AttentionMask, GaussianPeak, MaskLibrary, composite, dumps, from_document, load,
                            loads, rasterize, save, to_document, validate)
from fsatrain.model import ModelConfig


def scalar_raster(peaks, hc, wc):
    """Brute-force oracle: one pixel, one peak at a time."""
    out = [[0.0] * wc for _ in range(hc)]
    for r in range(hc):
        for c in range(wc):
            x, y = (c + 0.5) / wc, (r + 0.5) / hc
            best = 0.0
            for p in peaks:
                # products, not ** 2: libm pow can be one ulp off a correctly rounded square
                dx, dy = x - p.cx, y - p.cy
                v = p.amplitude * math.exp(-(dx * dx / (2 * (p.sigma_x * p.sigma_x))
                                             + dy * dy / (2 * (p.sigma_y * p.sigma_y))))
                best = max(best, v)
            out[r][c] = best
    return np.array(out)


peak_st = st.builds(GaussianPeak, st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 2), st.floats(0.01, 2),
                    st.floats(0.01, 1))


def test_centre_peak_on_odd_raster():
    m = rasterize(AttentionMask((GaussianPeak(0.5, 0.5, 0.1, 0.1, 1.0),)), 9, 9)
    assert m[4, 4] == 1.0
    assert np.unravel_index(np.argmax(m), m.shape) == (4, 4)


def test_two_far_peaks_two_maxima_with_valley():
    # peaks sit on pixel centres of a 10x10 raster
    peaks = (GaussianPeak(0.25, 0.45, 0.05, 0.05, 0.8), GaussianPeak(0.75, 0.45, 0.05, 0.05, 0.8))
    m = rasterize(AttentionMask(peaks), 10, 10)
    np.testing.assert_array_equal(m, scalar_raster(peaks, 10, 10))
    row = m[4]
    assert row[2] == 0.8 and row[7] == 0.8
    assert np.argmax(row[:5]) == 2 and np.argmax(row[5:]) == 2
    assert row[4] < 0.8 and row[5] < 0.8


def test_huge_sigma_is_nearly_uniform():
    m = rasterize(AttentionMask((GaussianPeak(0.5, 0.5, 1e4, 1e4, 1.0),)), 8, 8)
    assert np.all(np.abs(m - 1.0) < 1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(peak_st, min_size=1, max_size=4), st.integers(1, 12), st.integers(1, 12))
def test_rasterize_matches_scalar_oracle_exactly(peaks, hc, wc):
    m = rasterize(AttentionMask(tuple(peaks)), hc, wc)
    np.testing.assert_array_equal(m, scalar_raster(peaks, hc, wc))
    assert np.all((m >= 0) & (m <= 1))


@settings(max_examples=40, deadline=None)
@given(peak_st, st.integers(3, 10), st.integers(3, 10))
def test_resolution_covariance(p, hc, wc):
    mask = AttentionMask((GaussianPeak(p.cx, p.cy, p.sigma_x, p.sigma_y, 1.0),))
    a, b = rasterize(mask, hc, wc), rasterize(mask, 2 * hc, 2 * wc)
    ra, ca = np.unravel_index(np.argmax(a), a.shape)
    rb, cb = np.unravel_index(np.argmax(b), b.shape)
    assert abs((ra + 0.5) / hc - (rb + 0.5) / (2 * hc)) <= 1 / hc + 1e-12
    assert abs((ca + 0.5) / wc - (cb + 0.5) / (2 * wc)) <= 1 / wc + 1e-12


def test_invalid_peak_lists_the_peak():
    with pytest.raises(ValidationError, match=r"peaks\[1\]"):
        rasterize(AttentionMask((GaussianPeak(0.5, 0.5, 0.1, 0.1), GaussianPeak(0.5, 0.5, -0.1, 0.1))), 4, 4)
    with pytest.raises(ValidationError):
        rasterize(AttentionMask((GaussianPeak(1.5, 0.5, 0.1, 0.1),)), 4, 4)
    with pytest.raises(ConfigurationError):
        rasterize(AttentionMask((GaussianPeak(0.5, 0.5, 0.1, 0.1),)), 0, 4)


def test_composite_singleton_is_identity():
    m = np.random.default_rng(0).uniform(size=(4, 5))
    np.testing.assert_array_equal(composite([m]), m)


def test_composite_disjoint_is_union():
    a = rasterize(AttentionMask((GaussianPeak(0.1, 0.1, 0.02, 0.02),)), 8, 8)
    b = rasterize(AttentionMask((GaussianPeak(0.9, 0.9, 0.02, 0.02),)), 8, 8)
    c = composite([a, b])
    assert c[0, 0] == a[0, 0] and c[7, 7] == b[7, 7]


def test_composite_matches_triple_loop_oracle():
    rng = np.random.default_rng(1)
    maps = [rng.uniform(size=(6, 7)) for _ in range(3)]
    ref = np.zeros((6, 7))
    for r in range(6):
        for c in range(7):
            best = maps[0][r, c]
            for m in maps[1:]:
                if m[r, c] > best:
                    best = m[r, c]
            ref[r, c] = best
    out = composite(maps)
    np.testing.assert_array_equal(out, ref)
    assert all(np.all(out >= m) for m in maps)


def test_composite_empty_is_error():
    with pytest.raises(ConfigurationError):
        composite([])


def test_library_save_load_save_is_byte_identical(tmp_path):
    lib = default_mask_library()
    p = save(lib, tmp_path / "lib.json")
    text = p.read_text()
    again = save(load(p), tmp_path / "lib2.json").read_text()
    assert text == again
    assert load(p).masks == lib.masks and load(p).class_names == lib.class_names


def test_library_validation_against_model():
    lib = default_mask_library()
    validate(lib, ModelConfig())
    four = MaskLibrary(lib.class_names[:4], lib.masks[:4], lib.raster)
    with pytest.raises(ValidationError):
        validate(four, ModelConfig())
    wrong_raster = MaskLibrary(lib.class_names, lib.masks, (4, 4))
    with pytest.raises(ValidationError, match="raster"):
        validate(wrong_raster, ModelConfig())


def test_schema_error_has_path():
    doc = to_document(default_mask_library())
    doc["classes"][3]["masks"][1]["peaks"][0]["sigma_x"] = -1
    with pytest.raises(ValidationError) as e:
        from_document(doc)
    assert e.value.path == "classes[3].masks[1].peaks[0].sigma_x"


def test_bad_json_is_validation_error():
    with pytest.raises(ValidationError):
        loads("{not json")


def test_default_library_counts_and_validity():
    lib = default_mask_library(DatasetConfig())
    assert lib.counts == [0, 1, 1, 3, 3]
    assert all(len(m.peaks) == 2 for m in lib.masks[1] + lib.masks[2])
    validate(lib, ModelConfig())
    assert dumps(lib).endswith("\n")
