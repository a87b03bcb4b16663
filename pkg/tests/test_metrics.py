import numpy as np
import pytest
from hypothesis import given, strategies as st

from edof.imaging import Image
from edof.metrics import (BinaryMask, DegenerateHistogramError, MetricError, SsimConfig,
                          area_bounds_px, connected_components, dark_foreground, dice,
                          otsu_threshold, segment_parasite_regions, ssim)
from oracles import exhaustive_otsu, flood_fill_labels, naive_ssim


def test_window_weights_sum_to_one():
    assert abs(SsimConfig().weights().sum() - 1) < 1e-15


def test_ssim_identity(rng):
    x = rng.random((24, 30))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_closed_form():
    a, b = np.full((16, 16), 0.5), np.full((16, 16), 0.25)
    expected = (2 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
    assert round(expected, 4) == 0.8001


def test_ssim_matches_windowed_oracle(rng):
    a, b = rng.random((20, 23)), rng.random((20, 23))
    assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-9


@given(st.integers(0, 2 ** 32 - 1))
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((16, 16)), r.random((16, 16))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert -1 <= ssim(a, b) <= 1


def test_ssim_below_one_for_different_images(rng):
    a = rng.random((16, 16))
    b = a.copy()
    b[8, 8] += 0.01
    assert ssim(a, b) < 1 - 1e-9


def test_ssim_errors():
    with pytest.raises(MetricError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)))
    with pytest.raises(MetricError):
        ssim(np.zeros((10, 16)), np.zeros((10, 16)))


def test_otsu_two_populations():
    x = np.full((10, 10), 0.8)
    x[:5] = 0.2
    t = otsu_threshold(x)
    fg = dark_foreground(x, t)
    assert np.array_equal(fg, x == 0.2)
    assert t == exhaustive_otsu(x)
    # lowest of the tied splits: just above the bin holding 0.2
    assert t == 52 / 256


def test_otsu_constant_is_degenerate():
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(np.full((5, 5), 0.3))


def test_otsu_matches_exhaustive_oracle():
    r = np.random.default_rng(7)
    for _ in range(100):
        kind = r.integers(3)
        if kind == 0:
            x = r.random((12, 12))
        elif kind == 1:
            x = np.clip(np.concatenate([r.normal(0.3, 0.05, 70), r.normal(0.75, 0.1, 74)]), 0, 1).reshape(12, 12)
        else:
            x = r.choice([0.1, 0.5, 0.9], size=(12, 12))
        assert otsu_threshold(x) == exhaustive_otsu(x)


@given(st.integers(0, 2 ** 32 - 1))
def test_otsu_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    x = r.random((9, 9))
    y = r.permutation(x.ravel()).reshape(9, 9)
    assert otsu_threshold(x) == otsu_threshold(y)


def test_components_basic():
    assert connected_components(np.zeros((4, 4), bool)).count == 0
    diag = np.zeros((3, 3), bool)
    diag[0, 0] = diag[1, 1] = True
    regions = connected_components(diag)
    assert regions.count == 1 and regions.areas.tolist() == [2]


@pytest.mark.parametrize("density", [0.2, 0.45, 0.6])
def test_components_match_flood_fill(density):
    mask = np.random.default_rng(int(density * 100)).random((32, 32)) < density
    regions = connected_components(BinaryMask(mask))
    count, labels = flood_fill_labels(mask)
    assert regions.count == count
    assert np.array_equal(regions.labels, labels)


def test_area_bounds_at_reference_pitch():
    pitch = 33.3 / 512
    assert round(pitch, 4) == 0.0650
    assert area_bounds_px(0.0650) == (119, 710)
    assert 0.5 / 0.065 ** 2 == pytest.approx(118.34, abs=0.01)
    assert 3.0 / 0.065 ** 2 == pytest.approx(710.06, abs=0.01)


def _disk_image(radius, size=64, pitch=0.065):
    yy, xx = np.mgrid[:size, :size]
    img = np.full((size, size), 0.85)
    img[(yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= radius ** 2] = 0.2
    return Image(img, pitch)


def test_segment_keeps_parasite_sized_disk():
    img = _disk_image(8)
    area = int((img.pixels < 0.5).sum())
    assert 119 <= area <= 710
    mask = segment_parasite_regions(img)
    assert mask.count() == area


def test_segment_removes_single_pixel_and_large_blobs():
    img = np.full((64, 64), 0.85)
    img[5, 5] = 0.2
    assert segment_parasite_regions(Image(img, 0.065)).count() == 0
    assert segment_parasite_regions(_disk_image(20)).count() == 0


def test_segment_bounds_are_inclusive():
    # squares of exactly 119 and 710 px are kept; 118 and 711 are dropped
    for area, kept in [(118, False), (119, True), (710, True), (711, False)]:
        img = np.full((40, 40), 0.9)
        flat = img.reshape(-1)
        idx = np.arange(area)
        img[idx // 30, idx % 30] = 0.1
        out = segment_parasite_regions(Image(img, 0.065))
        assert (out.count() == area) is kept


@given(st.integers(0, 2 ** 32 - 1))
def test_segment_output_regions_within_bounds(seed):
    r = np.random.default_rng(seed)
    from scipy import ndimage
    img = np.clip(ndimage.gaussian_filter(r.random((64, 64)), 3) * 3 - 1, 0, 1)
    try:
        mask = segment_parasite_regions(Image(img, 0.065))
    except DegenerateHistogramError:
        return
    regions = connected_components(mask)
    for a in regions.areas:
        assert 0.5 <= a * 0.065 ** 2 <= 3.0


def test_dice_cases():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    assert dice(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[3, :] = True
    assert dice(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[0, :2] = True
    c[1, :2] = True
    assert dice(a, c) == 0.5
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(MetricError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 2 ** 32 - 1))
def test_dice_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((8, 8)) < 0.3, r.random((8, 8)) < 0.5
    assert dice(a, b) == dice(b, a)
    assert 0 <= dice(a, b) <= 1
