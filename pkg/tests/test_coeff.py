import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesms.coeff import (CoefficientField, ContrastLaw, FieldError, evaluate_at,
                           generate_channel_field, load_field, save_field, uniform_field)
from bayesms.mesh import build_hierarchy


def test_load_uniform(tmp_path):
    h = build_hierarchy(100, 100, 10, 10)
    p = tmp_path / "f.txt"
    np.savetxt(p, np.ones((100, 100)))
    f = load_field(p, h)
    assert np.all(f.values == 1.0)


def test_load_reports_zero_location(tmp_path):
    h = build_hierarchy(4, 3, 1, 1)
    grid = np.ones((3, 4))
    grid[1, 2] = 0.0
    p = tmp_path / "f.txt"
    np.savetxt(p, grid)
    with pytest.raises(FieldError, match="row 1, column 2"):
        load_field(p, h)


def test_load_dimension_mismatch(tmp_path):
    h = build_hierarchy(4, 4, 1, 1)
    p = tmp_path / "f.txt"
    np.savetxt(p, np.ones((3, 4)))
    with pytest.raises(FieldError, match="rows"):
        load_field(p, h)


def test_load_top_row_first(tmp_path):
    h = build_hierarchy(2, 2, 1, 1)
    p = tmp_path / "f.txt"
    p.write_text("1 2\n3 4\n")
    f = load_field(p, h)
    # bottom-left cell is the first value internally
    assert list(f.values) == [3.0, 4.0, 1.0, 2.0]
    q = tmp_path / "g.txt"
    save_field(q, f)
    assert np.array_equal(load_field(q, h).values, f.values)


def test_contrast_1000_file(tmp_path):
    h = build_hierarchy(100, 100, 10, 10)
    grid = np.ones((100, 100))
    grid[40:42, 10:90] = 1000.0
    p = tmp_path / "f.txt"
    np.savetxt(p, grid)
    assert load_field(p, h).contrast == pytest.approx(1000.0)


def test_field_rejects_nonpositive():
    with pytest.raises(FieldError):
        CoefficientField(np.array([1.0, -1.0, 1.0, 1.0]), 2, 2)
    with pytest.raises(FieldError):
        CoefficientField(np.ones(3), 2, 2)


def test_evaluate_identity_without_law(h8):
    f = uniform_field(h8)
    assert evaluate_at(f, 0.5) is f


def test_contrast_law_at_zero():
    f = CoefficientField(np.array([1.0, 1000.0, 1.0, 500.0]), 2, 2, ContrastLaw(1000.0, 250.0))
    assert evaluate_at(f, 0.0).contrast == pytest.approx(1000.0, rel=1e-14)


def test_contrast_law_growth():
    f = CoefficientField(np.array([1.0, 1000.0, 1.0, 1000.0]), 2, 2, ContrastLaw(1000.0, 250.0))
    g = evaluate_at(f, 0.01)
    # 1000 * e^2.5 evaluated independently
    assert g.contrast == pytest.approx(12182.493960703473, rel=1e-12)
    assert g.values.min() == 1.0


def test_contrast_law_degenerate():
    f = CoefficientField(np.ones(4), 2, 2, ContrastLaw(10.0, 1.0))
    with pytest.raises(FieldError):
        evaluate_at(f, 0.1)
    with pytest.raises(ValueError):
        evaluate_at(f, -1.0)


def test_channel_field_values(h12):
    f = generate_channel_field(h12, 2.0, 1000.0, 4, seed=1)
    assert set(np.unique(f.values)) == {2.0, 2000.0}
    g = generate_channel_field(h12, 2.0, 1000.0, 4, seed=1)
    assert np.array_equal(f.values, g.values)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1.0, 1e3), min_size=4, max_size=4),
       st.floats(0.0, 0.02), st.floats(0.0, 0.02))
def test_contrast_law_properties(vals, t1, t2):
    vals = np.array(vals)
    if vals.max() == vals.min():
        vals[0] += 1.0
    f = CoefficientField(vals, 2, 2, ContrastLaw(1000.0, 250.0))
    lo, hi = sorted((t1, t2))
    a, b = evaluate_at(f, lo).values, evaluate_at(f, hi).values
    assert np.argmin(a) == np.argmin(vals) and np.argmax(a) == np.argmax(vals)
    assert np.all(b >= a - 1e-9 * np.abs(a))
