import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageflow.errors import TensorError
from stageflow.tensor import (BOOLEAN, MAX_RANK, Tensor, broadcast_shape,
                              elementwise, index, negate, reduce, select,
                              total_sum)

shapes = st.lists(st.integers(1, 4), min_size=0, max_size=MAX_RANK).map(tuple)


def arr(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestConstruction:
    def test_rank_limit(self):
        with pytest.raises(TensorError) as e:
            Tensor(np.zeros((2, 2, 2, 2)))
        assert e.value.code == "SHAPE_MISMATCH"

    def test_boolean_values_checked(self):
        with pytest.raises(TensorError):
            Tensor([0.0, 0.5], kind=BOOLEAN)
        assert Tensor.boolean([True, False]).tolist() == [1.0, 0.0]

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t._data[0] = 5.0

    def test_item_requires_scalar(self):
        assert Tensor.scalar(3.5).item() == 3.5
        with pytest.raises(TensorError):
            Tensor([1.0]).item()


class TestBroadcastShape:
    @given(shapes, shapes)
    def test_matches_numpy(self, a, b):
        try:
            expect = np.broadcast_shapes(a, b)
        except ValueError:
            with pytest.raises(TensorError):
                broadcast_shape(a, b)
        else:
            assert broadcast_shape(a, b) == expect

    def test_mismatch_code(self):
        with pytest.raises(TensorError) as e:
            broadcast_shape((2, 3), (4,))
        assert e.value.code == "SHAPE_MISMATCH"


class TestElementwise:
    @pytest.mark.parametrize("op,fn", [
        ("+", np.add), ("-", np.subtract), ("*", np.multiply),
    ])
    def test_arith(self, op, fn, rng):
        a, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
        out = elementwise(op, Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.to_numpy(), fn(a, b))

    def test_division_by_zero_is_error(self):
        with pytest.raises(TensorError) as e:
            elementwise("/", Tensor([1.0]), Tensor([2.0, 0.0]))
        assert e.value.code == "DIVISION_BY_ZERO"
        # zero only outside the broadcast result is still hit per numpy shape
        out = elementwise("/", Tensor([4.0, 9.0]), Tensor([2.0, 3.0]))
        assert out.tolist() == [2.0, 3.0]

    def test_comparisons_yield_boolean(self):
        out = elementwise("<", Tensor([1.0, 3.0]), Tensor.scalar(2.0))
        assert out.kind == BOOLEAN
        assert out.tolist() == [1.0, 0.0]

    def test_bool_ops_coerce_nonzero(self):
        out = elementwise("&", Tensor([0.0, 2.0]), Tensor([5.0, 3.0]))
        assert out.tolist() == [0.0, 1.0]
        out = elementwise("|", Tensor([0.0, 0.0]), Tensor([0.0, 7.0]))
        assert out.tolist() == [0.0, 1.0]


class TestIndex:
    def test_integer_removes_axis(self):
        t = Tensor(arr((3, 4)))
        assert index(t, 1).shape == (4,)
        assert index(t, (1, 2)).shape == ()

    def test_negative_and_bounds(self):
        t = Tensor([10.0, 20.0, 30.0])
        assert index(t, -1).item() == 30.0
        with pytest.raises(TensorError) as e:
            index(t, 3)
        assert e.value.code == "INDEX_OUT_OF_BOUNDS"

    def test_slices_clip_like_python(self):
        t = Tensor([1.0, 2.0, 3.0])
        assert index(t, slice(0, 100)).shape == (3,)
        assert index(t, slice(5, 9)).shape == (0,)

    def test_single_ellipsis(self):
        t = Tensor(arr((2, 3, 4)))
        assert index(t, (Ellipsis, 0)).shape == (2, 3)
        with pytest.raises(TensorError) as e:
            index(t, (Ellipsis, Ellipsis))
        assert e.value.code == "BAD_ELLIPSIS"

    def test_arity_limit(self):
        with pytest.raises(TensorError) as e:
            index(Tensor([1.0]), (0, 0))
        assert e.value.code == "INDEX_OUT_OF_BOUNDS"

    def test_kind_preserved(self):
        t = Tensor.boolean([[1, 0], [0, 1]])
        assert index(t, 0).kind == BOOLEAN


class TestReduce:
    def test_sum_and_sum_of_squares(self, rng):
        x = rng.standard_normal((2, 3))
        assert reduce(Tensor(x), "sum").item() == pytest.approx(x.sum(), rel=1e-15)
        assert reduce(Tensor(x), "sum_of_squares").item() == pytest.approx(
            (x * x).sum(), rel=1e-15)

    def test_norms_last_axis(self, rng):
        x = rng.standard_normal((2, 3))
        np.testing.assert_allclose(
            reduce(Tensor(x), "l2_last_axis").to_numpy(),
            np.linalg.norm(x, axis=-1))
        np.testing.assert_allclose(
            reduce(Tensor(x), "l1_last_axis").to_numpy(),
            np.abs(x).sum(axis=-1))

    def test_norm_of_scalar_is_abs(self):
        assert reduce(Tensor.scalar(-2.0), "l2_last_axis").item() == 2.0
        assert reduce(Tensor.scalar(-2.0), "l1_last_axis").item() == 2.0

    def test_total_sum(self, rng):
        x = rng.standard_normal((3, 2))
        assert total_sum(Tensor(x)) == pytest.approx(x.sum(), rel=1e-15)


class TestSelect:
    def test_broadcast_select(self):
        out = select(Tensor.boolean([1, 0]), Tensor.scalar(5.0), Tensor([1.0, 2.0]))
        assert out.tolist() == [5.0, 2.0]

    def test_negate(self):
        assert negate(Tensor([1.0, -2.0])).tolist() == [-1.0, 2.0]
