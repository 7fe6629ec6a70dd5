"""
SigTraj - Tensor core tests
Primitive values, tape sweeps, masking, dtype switch, and the finite-difference checker
"""

import threading

import numpy as np
import pytest

from tensor_core import (
    NonFiniteError, Tape, TapeError, Tensor, TensorError, add, backward, concat, embed, expand,
    get_default_dtype, grad_check, grad_check_tensors, l2norm, leaky_relu, matmul, mul, no_grad,
    reduce_mean, reduce_sum, reshape, scalar_mul, set_default_dtype, sigmoid, softmax, softplus,
    stack_cols, stack_rows, take_slice, tanh, transpose,
)


class TestPrimitives:
    def test_matmul_matrix_vector(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        v = Tensor([1.0, -1.0])
        np.testing.assert_array_equal(matmul(a, v).data, [-1.0, -1.0])

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(TensorError, match=r"\(2, 3\) vs \(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_add_rejects_different_shapes(self):
        with pytest.raises(TensorError):
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_concat_last_axis(self):
        out = concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))])
        assert out.shape == (2, 3)
        np.testing.assert_array_equal(out.data[:, 0], [1.0, 1.0])

    def test_softmax_rows_sum_to_one(self):
        y = softmax(Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(y.data.sum(axis=-1), [1.0, 1.0], rtol=0, atol=1e-15)
        np.testing.assert_allclose(y.data[1], [1 / 3] * 3)

    def test_masked_softmax_gives_exact_zero(self):
        mask = np.array([[True, False, True]])
        y = softmax(Tensor([[5.0, 100.0, 5.0]]), mask=mask)
        assert y.data[0, 1] == 0.0
        np.testing.assert_allclose(y.data[0], [0.5, 0.0, 0.5])

    def test_masked_softmax_gradient_zero_on_masked_entry(self):
        x = Tensor([[0.3, -1.2, 2.0]], requires_grad=True)
        mask = np.array([[True, False, True]])
        with Tape() as tape:
            loss = reduce_sum(mul(softmax(x, mask=mask), Tensor([[1.0, 7.0, -2.0]])))
            (g,) = tape.gradients(loss, [x])
        assert g[0, 1] == 0.0

    def test_fully_masked_row_rejected(self):
        with pytest.raises(TensorError, match="no unmasked entry"):
            softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    def test_softmax_empty_axis_rejected(self):
        with pytest.raises(TensorError):
            softmax(Tensor(np.zeros((2, 0))))

    def test_leaky_relu_slope(self):
        y = leaky_relu(Tensor([-10.0, 0.0, 3.0]), 0.2)
        np.testing.assert_array_equal(y.data, [-2.0, 0.0, 3.0])

    def test_sigmoid_is_stable_for_large_inputs(self):
        y = sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.5, 1.0])

    def test_softplus_matches_log1p_exp(self):
        x = np.array([-3.0, 0.0, 2.5])
        np.testing.assert_allclose(softplus(Tensor(x)).data, np.log1p(np.exp(x)))

    def test_l2norm_rows(self):
        np.testing.assert_array_equal(l2norm(Tensor([[3.0, 4.0], [0.0, 0.0]])).data, [5.0, 0.0])

    def test_take_slice_bounds(self):
        with pytest.raises(TensorError):
            take_slice(Tensor(np.ones(4)), 2, 6)

    def test_embed_gathers_rows(self):
        table = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(embed(table, [2, 0]).data, [[4.0, 5.0], [0.0, 1.0]])

    def test_embed_out_of_range(self):
        with pytest.raises(TensorError):
            embed(Tensor(np.ones((3, 2))), [3])

    def test_expand_and_reshape(self):
        x = reshape(Tensor([1.0, 2.0]), (2, 1))
        np.testing.assert_array_equal(expand(x, (2, 3)).data, [[1.0] * 3, [2.0] * 3])
        with pytest.raises(TensorError):
            expand(Tensor(np.ones((2, 2))), (2, 3))
        with pytest.raises(TensorError):
            reshape(Tensor(np.ones(4)), (3,))

    def test_stack_helpers(self):
        rows = stack_rows([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
        cols = stack_cols([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
        np.testing.assert_array_equal(rows.data, [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(cols.data, [[1.0, 3.0], [2.0, 4.0]])

    def test_non_finite_output_raises(self):
        with pytest.raises(NonFiniteError):
            mul(Tensor([1e200]), Tensor([1e200]))

    def test_scalar_mul_rejects_nan_factor(self):
        with pytest.raises(TensorError):
            scalar_mul(Tensor([1.0]), float("nan"))

    def test_mean_of_empty_rejected(self):
        with pytest.raises(TensorError):
            reduce_mean(Tensor(np.zeros(0)))


class TestTape:
    def test_gradient_of_sum_of_products(self):
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(mul(a, b))
            ga, gb = tape.gradients(loss, [a, b])
        np.testing.assert_array_equal(ga, b.data)
        np.testing.assert_array_equal(gb, a.data)

    def test_fan_out_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(add(mul(x, x), x))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [5.0])

    def test_unreached_tensor_gets_zero_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([[1.0]], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x)
            _, g = tape.gradients(loss, [x, unused])
        np.testing.assert_array_equal(g, [[0.0]])

    def test_gradients_do_not_touch_grad_slots(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            tape.gradients(reduce_sum(mul(x, x)), [x])
        assert x.grad is None

    def test_double_sweep_is_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x)
            tape.backward(loss)
            with pytest.raises(TapeError):
                tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = scalar_mul(x, 2.0)
            with pytest.raises(TensorError, match="scalar"):
                tape.backward(y)

    def test_loss_off_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = reduce_sum(x)
        with Tape() as other:
            with pytest.raises(TapeError):
                other.backward(loss)

    def test_module_backward_needs_recorded_loss(self):
        with pytest.raises(TapeError):
            backward(Tensor([1.0]))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = mul(x, x)
        assert len(tape) == 0
        assert not y.requires_grad

    def test_tapes_are_thread_local(self):
        lengths = {}

        def work(name, ops):
            x = Tensor([1.0], requires_grad=True)
            with Tape() as tape:
                for _ in range(ops):
                    x = mul(x, Tensor([1.0]))
                lengths[name] = len(tape)

        threads = [threading.Thread(target=work, args=(f"t{i}", i + 1)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert lengths == {"t0": 1, "t1": 2, "t2": 3, "t3": 4}

    def test_transpose_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        w = np.arange(6.0).reshape(3, 2)
        with Tape() as tape:
            loss = reduce_sum(mul(transpose(x), Tensor(w)))
            (g,) = tape.gradients(loss, [x])
        np.testing.assert_array_equal(g, w.T)


class TestDtype:
    def test_float32_switch(self):
        set_default_dtype("float32")
        assert Tensor([1.0]).data.dtype == np.float32
        set_default_dtype("float64")
        assert get_default_dtype() is np.float64

    def test_unknown_dtype(self):
        with pytest.raises(TensorError):
            set_default_dtype("float16")


class TestGradCheck:
    def test_tanh_passes(self):
        report = grad_check(lambda x: reduce_sum(tanh(x)), np.array([0.1, -0.4, 1.3]))
        assert report.ok
        assert report.checked == 3

    def test_wrong_gradient_is_detected(self, rng):
        from tensor_core import PrimitiveKind, _RULES

        original = _RULES[PrimitiveKind.TANH]

        def broken(x):
            y, _ = original(x)
            return y, lambda g: (g * 2.0,)

        _RULES[PrimitiveKind.TANH] = broken
        try:
            report = grad_check(lambda x: reduce_sum(tanh(x)), rng.normal(size=4))
        finally:
            _RULES[PrimitiveKind.TANH] = original
        assert not report.ok
        assert report.max_rel_err > 1e-2

    def test_probe_limit_and_restore(self, rng):
        w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        before = w.data.copy()
        report = grad_check_tensors(lambda: reduce_sum(mul(w, w)), [w], max_probes=7)
        assert report.checked == 7
        assert report.ok
        np.testing.assert_array_equal(w.data, before)

    def test_nan_probe_reported(self):
        def f(x):
            return reduce_sum(mul(x, Tensor([np.finfo(np.float64).max])))

        report = grad_check(f, np.array([1.0]), eps=1e-5)
        assert report.nan_probe == (0, 0)
        assert not report.ok

    def test_report_dict(self):
        report = grad_check(lambda x: reduce_sum(mul(x, x)), np.array([1.0, 2.0]), label="square")
        d = report.to_dict()
        assert d["label"] == "square"
        assert d["ok"] is True
