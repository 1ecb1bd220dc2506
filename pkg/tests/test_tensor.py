import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparse3d import tensor as T
from sparse3d.counter import count_ops, flop_tag
from sparse3d.rng import Rng
from sparse3d.tensor import Tape, Tensor, backward


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


class TestTensor:
    def test_rejects_zero_extent(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 3)))

    def test_storage_is_float32_row_major(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.size == 4 and t.shape == (2, 2)


class TestMatmul:
    def test_identity(self, rng):
        a = Tensor(rng.normal((3, 3)))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), a).data, a.data)

    def test_scalar_product(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal((4, 5)), rng.normal((5, 3))
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, triple_loop(a, b), atol=1e-5, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    @pytest.mark.parametrize("m,k,n", [(1, 1, 1), (4, 5, 3), (7, 16, 9)])
    def test_flops_exact(self, m, k, n):
        with count_ops() as c:
            T.matmul(Tensor(np.ones((m, k))), Tensor(np.ones((k, n))))
        assert c.flops == 2 * m * k * n

    def test_flops_tagged(self):
        with count_ops() as c, flop_tag("ffn"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        assert c.tag_flops("ffn") == 48


class TestSoftmax:
    def test_constant(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor(np.full(4, 3.0))).data, 0.25, atol=1e-7)

    def test_log2(self):
        got = T.softmax_lastdim(Tensor([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(got, [1 / 3, 2 / 3], atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        s = T.softmax_lastdim(Tensor(rng.normal((8, 8)))).data.astype(np.float64).sum(-1)
        assert np.all(np.abs(s - 1.0) <= 1e-6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 40), st.floats(0.1, 80.0))
    def test_rows_sum_to_one_bounded_inputs(self, seed, n, amp):
        x = Rng(seed).uniform((3, n), -amp, amp)
        p = T.softmax_lastdim(Tensor(x)).data.astype(np.float64)
        assert np.all(p >= 0)
        assert np.all(np.abs(p.sum(-1) - 1.0) <= 1e-6)


class TestLayernorm:
    def test_constant_slice(self):
        out = T.layernorm(Tensor(np.full((2, 5), 7.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.normal((6,))
        out = T.layernorm(Tensor(rng.normal((3, 6))), Tensor(np.zeros(6)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 6)))

    def test_float64_oracle(self, rng):
        x, g, b = rng.normal((4, 16)), rng.normal((16,)), rng.normal((16,))
        xd = x.astype(np.float64)
        mu = xd.mean(-1, keepdims=True)
        var = ((xd - mu) ** 2).mean(-1, keepdims=True)
        ref = (xd - mu) / np.sqrt(var + 1e-5) * g + b
        got = T.layernorm(Tensor(x), Tensor(g), Tensor(b)).data
        np.testing.assert_allclose(got, ref, atol=1e-5, rtol=0)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            T.layernorm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestGelu:
    def test_values(self):
        out = T.gelu(Tensor([0.0, 10.0, 1.0])).data
        assert out[0] == 0.0
        assert abs(out[1] - 10.0) <= 1e-6
        assert abs(out[2] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) <= 1e-6
        assert abs(out[2] - 0.8413) <= 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal((3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(x)
        np.testing.assert_array_equal(backward(tape, loss)[x], np.ones((3, 4)))

    def test_sumsq_gives_2x(self, rng):
        x = Tensor(rng.normal((5,)), requires_grad=True)
        with Tape() as tape:
            loss = T.sumsq(x)
        np.testing.assert_allclose(backward(tape, loss)[x], 2 * x.data, rtol=1e-6)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ValueError):
            backward(tape, y)

    def test_unreachable_loss_rejected(self):
        with Tape() as tape:
            loss = T.sum_all(Tensor(np.ones(3)))
        with pytest.raises(ValueError):
            backward(tape, loss)

    def test_reverse_visit_order(self, rng):
        x = Tensor(rng.normal((2, 3)), requires_grad=True)
        w = Tensor(rng.normal((3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = T.sumsq(T.gelu(T.matmul(x, w)))
        visited = []
        backward(tape, loss, on_visit=lambda node: visited.append(node))
        assert [n.name for n in visited] == [n.name for n in reversed(tape.nodes)]
        assert [id(n) for n in visited] == [id(n) for n in reversed(tape.nodes)]

    def test_unused_input_gets_zeros(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(a)
        grads = backward(tape, loss)
        assert b not in grads
        np.testing.assert_array_equal(grads.of(b), 0.0)

    def test_fan_out_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(x, x))
        np.testing.assert_array_equal(backward(tape, loss)[x], [2.0, 2.0])


def test_determinism_bitwise():
    def run():
        r = Rng(99)
        x = Tensor(r.normal((6, 8)))
        w = Tensor(r.normal((8, 8)))
        return T.softmax_lastdim(T.gelu(T.matmul(x, w))).data.tobytes()
    assert run() == run()


def test_ops_preserve_float64():
    x = Tensor(np.ones((2, 2)), dtype=np.float64)
    assert T.gelu(T.matmul(x, x)).dtype == np.float64
