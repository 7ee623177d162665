import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from blockflow import preprocess as pp
from blockflow.preprocess import EmptyCellError, ExpressionMatrix, PipelineOrderError


def em(values, stage="raw"):
    return ExpressionMatrix.from_array(np.atleast_2d(np.asarray(values, dtype=float)), stage)


def test_normalize_depth_examples():
    np.testing.assert_allclose(pp.normalize_depth(em([1, 1, 2])).values, [[2500, 2500, 5000]])
    np.testing.assert_allclose(pp.normalize_depth(em([1e4, 0])).values, [[1e4, 0]])


def test_normalize_depth_row_sums_random():
    counts = np.random.default_rng(0).poisson(5.0, size=(20, 10)) + 1
    out = pp.normalize_depth(em(counts))
    np.testing.assert_allclose(out.values.sum(axis=1), 1e4, atol=1e-6)


def test_empty_cell_rejected():
    with pytest.raises(EmptyCellError, match="cell1"):
        pp.normalize_depth(em([[1, 2], [0, 0]]))


def test_log_transform_examples():
    out = pp.log_transform(em([0.0, np.e - 1], "depth-normalized")).values
    np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-15)


def test_log_transform_round_trip():
    x = np.random.default_rng(1).uniform(0, 1e4, size=(5, 8))
    np.testing.assert_allclose(np.expm1(pp.log_transform(em(x, "depth-normalized")).values), x, rtol=1e-9)


def test_maxabs_examples():
    out = pp.maxabs_scale(em([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]], "logged"))
    np.testing.assert_allclose(out.values[:, 0], [0, 0.5, 1])
    np.testing.assert_array_equal(out.values[:, 1], 0.0)
    np.testing.assert_array_equal(out.scale_factors, [4.0, 1.0])


def test_held_out_scaling_clips():
    train = pp.maxabs_scale(em([[1.0, 2.0]], "logged"))
    held = pp.maxabs_scale(em([[3.0, 1.0]], "logged"), train.scale_factors)
    np.testing.assert_allclose(held.values, [[1.0, 0.5]])
    with pytest.raises(ValueError):
        pp.maxabs_scale(em([[3.0, 1.0]], "logged"), np.array([1.0, 0.0]))


def test_pipeline_order_enforced():
    m = em([[1.0, 2.0]])
    with pytest.raises(PipelineOrderError):
        pp.log_transform(m)
    with pytest.raises(PipelineOrderError):
        pp.maxabs_scale(pp.normalize_depth(m))
    with pytest.raises(PipelineOrderError):
        pp.normalize_depth(pp.normalize_depth(m))
    with pytest.raises(PipelineOrderError):
        pp.unscale(m)


def test_invalid_values_rejected():
    with pytest.raises(ValueError):
        em([[-1.0, 2.0]])
    with pytest.raises(ValueError):
        em([[np.nan, 2.0]])


counts = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                    elements=st.floats(0, 1e5, allow_subnormal=False))


@settings(max_examples=60, deadline=None)
@given(counts)
def test_scaled_stage_invariants_and_round_trip(values):
    values = values.copy()
    values[:, 0] += 1.0  # no empty cells
    m = em(values)
    scaled = pp.preprocess(m)
    assert np.all(scaled.values >= 0) and np.all(scaled.values <= 1)
    assert np.all(scaled.scale_factors > 0)
    np.testing.assert_allclose(pp.unscale(scaled, to="logged").values,
                               pp.log_transform(pp.normalize_depth(m)).values, rtol=1e-12, atol=1e-12)
    back = pp.unscale(scaled).values
    np.testing.assert_allclose(back, pp.normalize_depth(m).values, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(pp.normalize_depth(m).values.sum(axis=1), 1e4, rtol=1e-12)


def test_to_logged_from_every_stage():
    m = em([[1.0, 3.0], [2.0, 2.0]])
    ref = pp.log_transform(pp.normalize_depth(m)).values
    for stage_m in (m, pp.normalize_depth(m), pp.log_transform(pp.normalize_depth(m)), pp.preprocess(m)):
        np.testing.assert_allclose(pp.to_logged(stage_m).values, ref, rtol=1e-12)


@pytest.mark.parametrize("suffix", ["csv", "bfx"])
def test_matrix_file_round_trip(tmp_path, suffix):
    values = np.random.default_rng(2).uniform(0, 100, size=(4, 3))
    m = ExpressionMatrix(values, ("g1", "g2", "g3"), ("a", "b", "c", "d"))
    path = tmp_path / f"m.{suffix}"
    pp.write_matrix(m, path)
    back = pp.read_matrix(path)
    assert back.values.tobytes() == values.tobytes()
    if suffix == "csv":
        assert back.gene_ids == m.gene_ids and back.cell_ids == m.cell_ids


def test_bfx_rejects_truncated(tmp_path):
    path = tmp_path / "m.bfx"
    pp.write_bfx(em([[1.0, 2.0]]), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="payload"):
        pp.read_bfx(path)


def test_subset_keeps_ids():
    m = em([[1.0], [2.0], [3.0]])
    sub = m.subset(np.array([True, False, True]))
    assert sub.cell_ids == ("cell0", "cell2")
    np.testing.assert_array_equal(sub.values[:, 0], [1.0, 3.0])
