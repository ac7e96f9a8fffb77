import math

import numpy as np
import pytest

from engines import NaiveTextureEngine
from errors import PrognosisError
from texture import (
    DIRECTIONS,
    GLCM_FEATURES,
    GLRLM_FEATURES,
    GLSZM_FEATURES,
    QuantizedRegion,
    TextureMatrix,
    average_statistics,
    directional_statistics,
    glcm,
    glrlm,
    glszm,
    mglszm,
    quantize,
    texture_statistics,
)
from volume import AnatomyMask, Volume


def _region(values, n_levels):
    levels = np.asarray(values, dtype=np.int32)
    return QuantizedRegion(levels=levels.reshape(levels.shape + (1,) * (3 - levels.ndim)), n_levels=n_levels)


def test_quantize_equal_width_bins():
    vol = Volume(np.array([0, 10, 20, 30, 40]).reshape(5, 1, 1))
    mask = AnatomyMask("heart", np.array([1, 1, 1, 1, 0]).reshape(5, 1, 1))
    region = quantize(vol, mask, n_levels=3)
    # width (30 - 0) / 3; the maximum lands in the top bin
    assert region.levels.ravel().tolist() == [1, 2, 3, 3, 0]


def test_quantize_window_clamps():
    vol = Volume(np.array([-500, 0, 50, 500]).reshape(4, 1, 1))
    mask = AnatomyMask("heart", np.ones((4, 1, 1), dtype=bool))
    region = quantize(vol, mask, n_levels=4, hu_window=(0, 100))
    assert region.levels.ravel().tolist() == [1, 1, 3, 4]


def test_quantize_constant_and_empty_regions():
    vol = Volume(np.full((3, 3, 1), 42))
    full = quantize(vol, AnatomyMask("heart", np.ones((3, 3, 1), dtype=bool)), 8)
    assert set(full.levels.ravel()) == {1}
    empty = quantize(vol, AnatomyMask("heart", np.zeros((3, 3, 1), dtype=bool)), 8)
    assert empty.is_empty and empty.voxel_count == 0


def test_quantize_rejects_bad_arguments():
    vol = Volume(np.zeros((2, 2, 2)))
    mask = AnatomyMask("heart", np.ones((2, 2, 2), dtype=bool))
    with pytest.raises(PrognosisError):
        quantize(vol, mask, n_levels=1)
    with pytest.raises(PrognosisError):
        quantize(vol, mask, 4, hu_window=(10, 10))


def test_glcm_statistics_for_two_levels():
    m = glcm(_region([1, 2, 1], 2), 1, (1, 0, 0))
    stats = texture_statistics(m)
    # p = [[0, .5], [.5, 0]]
    assert stats["energy"] == pytest.approx(0.5)
    assert stats["entropy"] == pytest.approx(1.0)
    assert stats["contrast"] == pytest.approx(1.0)
    assert stats["mean"] == pytest.approx(1.5)
    assert stats["variance"] == pytest.approx(0.25)
    assert stats["correlation"] == pytest.approx(-1.0)
    assert stats["skewness"] == pytest.approx(0.0)
    assert stats["kurtosis"] == pytest.approx(-2.0)
    assert stats["homogeneity"] == pytest.approx(0.5)


def test_glcm_statistics_constant_region_has_no_division_by_zero():
    stats = texture_statistics(glcm(_region([[1, 1], [1, 1]], 4), 1, (1, 0, 0)))
    assert stats["energy"] == pytest.approx(1.0)
    assert stats["variance"] == 0.0
    assert stats["correlation"] == 0.0
    assert stats["kurtosis"] == 0.0
    assert all(math.isfinite(v) for v in stats.values())


def test_glcm_rejects_non_positive_distance():
    region = _region([1, 2, 1], 2)
    for distance in (0, -1, 1.5):
        with pytest.raises(PrognosisError, match="distance"):
            glcm(region, distance, (1, 0, 0))


def test_glcm_distance_longer_than_region_is_empty():
    m = glcm(_region([1, 2, 1], 2), 5, (1, 0, 0))
    assert m.entries.sum() == 0
    assert all(math.isnan(v) for v in texture_statistics(m).values())


def test_glrlm_statistics():
    # runs: (level 1, length 2), (level 2, length 1)
    stats = texture_statistics(glrlm(_region([1, 1, 2], 2), (1, 0, 0)))
    assert stats["short_run_emphasis"] == pytest.approx(0.5 * 0.25 + 0.5)
    assert stats["long_run_emphasis"] == pytest.approx(0.5 * 4 + 0.5)
    assert stats["gray_level_nonuniformity"] == pytest.approx(0.5)
    assert stats["run_length_nonuniformity"] == pytest.approx(0.5)
    assert stats["run_percentage"] == pytest.approx(1 / 1.5)


def test_glszm_statistics_names_and_zone_percentage():
    region = _region([[1, 1, 2], [1, 2, 2]], 2)
    stats = texture_statistics(glszm(region, "slice8"))
    assert set(stats) == set(GLSZM_FEATURES)
    # two zones of size 3
    assert stats["zone_percentage"] == pytest.approx(1 / 3)
    assert stats["small_zone_emphasis"] == pytest.approx(1 / 9)


def test_empty_matrix_gives_sentinel():
    m = TextureMatrix("GLCM", np.zeros((4, 4), dtype=np.int64))
    stats = texture_statistics(m)
    assert set(stats) == set(GLCM_FEATURES)
    assert all(math.isnan(v) for v in stats.values())


def test_glszm_bad_connectivity_is_a_prognosis_error():
    with pytest.raises(PrognosisError):
        glszm(_region([1, 1], 1), "4")


def test_mglszm_single_level_equals_normalized_glszm():
    rng = np.random.default_rng(3)
    vol = Volume(rng.integers(-100, 100, size=(6, 6, 3)))
    mask = AnatomyMask("heart", rng.random((6, 6, 3)) < 0.7)
    single = mglszm(vol, mask, level_set=(8,), weights=(1.0,))
    reference = glszm(quantize(vol, mask, 8)).normalized()
    np.testing.assert_allclose(single.entries, reference)


def test_mglszm_sums_to_one_and_validates_weights():
    rng = np.random.default_rng(4)
    vol = Volume(rng.integers(-100, 100, size=(6, 6, 3)))
    mask = AnatomyMask("heart", np.ones((6, 6, 3), dtype=bool))
    m = mglszm(vol, mask, level_set=(4, 8, 16), weights=(0.2, 0.3, 0.5))
    assert m.entries.shape[0] == 16
    assert m.total == pytest.approx(1.0)
    with pytest.raises(PrognosisError):
        mglszm(vol, mask, level_set=(4, 8), weights=(0.7, 0.7))
    with pytest.raises(PrognosisError):
        mglszm(vol, mask, level_set=(4, 8), weights=(1.0,))


def test_direction_average_is_order_invariant():
    rng = np.random.default_rng(8)
    levels = rng.integers(0, 5, size=(5, 5, 4)).astype(np.int32)
    region = QuantizedRegion(levels=levels, n_levels=4)
    forward = average_statistics(directional_statistics(region, "GLRLM", DIRECTIONS))
    order = rng.permutation(len(DIRECTIONS))
    shuffled = average_statistics(directional_statistics(region, "GLRLM", [DIRECTIONS[i] for i in order]))
    assert forward == shuffled
    assert set(forward) == set(GLRLM_FEATURES)


def test_directional_statistics_engine_agnostic():
    rng = np.random.default_rng(9)
    region = QuantizedRegion(levels=rng.integers(1, 4, size=(4, 4, 3)).astype(np.int32), n_levels=3)
    fast = directional_statistics(region, "GLCM")
    slow = directional_statistics(region, "GLCM", engine=NaiveTextureEngine())
    assert fast == slow


def test_directional_statistics_rejects_zone_kinds():
    with pytest.raises(PrognosisError):
        directional_statistics(_region([1], 1), "GLSZM")


def test_average_propagates_sentinel():
    out = average_statistics([{"a": 1.0}, {"a": float("nan")}])
    assert math.isnan(out["a"])
