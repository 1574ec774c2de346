import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clpd.errors import ConfigurationError
from clpd.geometry import (
    EllipseSpec,
    ExperimentSetting,
    ScanGeometry,
    make_geometry,
    random_ellipse_phantom,
    sample_ellipse,
    shepp_logan,
)


def test_full_clinical_128():
    g = make_geometry("full_clinical", 128)
    assert g.num_angles == 180
    assert g.num_detectors == 182
    assert g.angle_start == 0.0 and g.angle_end == pytest.approx(math.pi)
    assert g.angles[0] == 0.0 and g.angles[-1] < math.pi


def test_limited_clinical_128():
    g = make_geometry("limited_clinical", 128)
    assert g.num_angles == 60
    assert g.angle_end == pytest.approx(math.pi / 3)
    assert g.angular_range < math.pi


def test_sparse_clinical_16():
    g = make_geometry("sparse_clinical", 16)
    assert (g.num_angles, g.num_detectors) == (45, 23)


def test_detector_spacing_matches_pixel_and_covers_diagonal():
    for setting in ExperimentSetting:
        for n in (16, 33, 64, 128):
            g = make_geometry(setting, n)
            assert g.detector_spacing == g.pixel_size
            assert g.num_detectors * g.detector_spacing >= n * g.pixel_size * math.sqrt(2)


def test_angles_equispaced_half_open():
    g = make_geometry("sparse_extreme", 32)
    step = np.diff(g.angles)
    np.testing.assert_allclose(step, math.pi / 45)
    assert g.angles[-1] + step[0] == pytest.approx(g.angle_end)


def test_geometry_is_pure_function_of_inputs():
    assert make_geometry("limited_extreme", 40) == make_geometry("limited_extreme", 40)
    g = make_geometry("full_extreme", 40)
    assert ScanGeometry.from_dict(g.to_dict()) == g


def test_geometry_errors():
    with pytest.raises(ConfigurationError):
        make_geometry("sideways_clinical", 64)
    with pytest.raises(ConfigurationError):
        make_geometry("full_clinical", 8)
    with pytest.raises(ConfigurationError):  # arc wider than pi
        ScanGeometry(10, 0.0, 4.0, 50, 0.1, 32, 0.1)
    with pytest.raises(ConfigurationError):  # detectors miss the corners
        ScanGeometry(10, 0.0, 1.0, 32, 0.1, 32, 0.1)


def test_setting_mapping_is_total():
    kinds = {(s.kind.value, s.dose_label) for s in ExperimentSetting}
    assert len(kinds) == 6
    assert ExperimentSetting.parse("SPARSE_EXTREME") is ExperimentSetting.SPARSE_EXTREME


def test_shepp_logan_examples():
    img = shepp_logan(64)
    assert img.shape == (64, 64)
    assert img[32, 32] > 0
    assert img[0, 0] == img[0, -1] == img[-1, 0] == img[-1, -1] == 0
    assert np.array_equal(img, shepp_logan(64))
    assert img.min() >= 0 and img.max() <= 1
    with pytest.raises(ValueError):
        shepp_logan(15)


def test_random_phantom_examples():
    a = random_ellipse_phantom(7, 64, (3, 8))
    assert np.array_equal(a, random_ellipse_phantom(7, 64, (3, 8)))
    assert not np.array_equal(a, random_ellipse_phantom(8, 64, (3, 8)))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(16, 48))
def test_random_phantom_in_unit_range(seed, n):
    img = random_ellipse_phantom(seed, n)
    assert img.shape == (n, n)
    assert np.all(np.isfinite(img))
    assert img.min() >= 0 and img.max() <= 1


@given(seed=st.integers(0, 2**32 - 1))
def test_sampled_ellipses_inside_unit_disk(seed):
    e = sample_ellipse(np.random.default_rng(seed))
    assert e.farthest_extent() <= 1.0 + 1e-9


def test_ellipse_orientation_row_zero_is_top():
    # a blob centred in the upper half lands in the upper rows
    e = EllipseSpec(0.0, 0.5, 0.2, 0.2, 0.0, 1.0)
    m = e.mask(32)
    rows = np.nonzero(m.any(axis=1))[0]
    assert rows.max() < 16
