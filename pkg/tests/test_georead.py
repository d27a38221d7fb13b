import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meterlab import dialgen, georead
from meterlab.dialgen import DialSpec

SPECS = dialgen.default_specs()


def test_angle_to_reading_linear_map():
    s = SPECS[0]
    assert georead.angle_to_reading(s, -3 * math.pi / 4) == pytest.approx(0.0)
    assert georead.angle_to_reading(s, 0.0) == pytest.approx(5.0)
    assert georead.angle_to_reading(s, 3 * math.pi / 4) == pytest.approx(10.0)


def test_angle_to_reading_wraps():
    s = DialSpec(5, 0.0, 6.0, 0.2, angle_start=math.pi, angle_end=2 * math.pi)
    # 1.2 pi is -0.8 pi after wrapping
    assert georead.angle_to_reading(s, -0.8 * math.pi) == pytest.approx(1.2)


def test_angle_outside_sweep_rejected():
    with pytest.raises(dialgen.OutOfRangeError):
        georead.angle_to_reading(SPECS[0], math.pi)


def test_angle_just_past_end_is_clamped():
    assert georead.angle_to_reading(SPECS[0], 3 * math.pi / 4 + 0.01) == pytest.approx(10.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 5), st.data())
def test_recovers_any_grid_reading(a, data):
    spec = SPECS[a]
    grid = spec.reading_grid()
    y = float(grid[data.draw(st.integers(0, len(grid) - 1))])
    seed = data.draw(st.integers(0, 2 ** 31 - 1))
    got = georead.read(dialgen.render_dial(spec, y, seed), spec)
    assert got is not None
    assert abs(got - y) <= 0.5 * spec.index_value


def test_estimate_confident_on_clean_dial():
    est = georead.detect_pointer_angle(dialgen.render_dial(SPECS[0], 7.3, 1))
    assert est.ok and est.confidence > 0.5
    assert est.angle == pytest.approx(dialgen.reading_to_angle(SPECS[0], 7.3), abs=math.radians(1))


def test_blank_image_returns_none():
    blank = np.full((64, 64, 3), 240, np.uint8)
    assert not georead.detect_pointer_angle(blank).ok
    assert georead.read(blank, SPECS[0]) is None


def test_larger_canvas():
    spec = SPECS[3]
    img = dialgen.render_dial(spec, 2.35, 4, size=128)
    assert abs(georead.read(img, spec) - 2.35) <= 0.5 * spec.index_value
