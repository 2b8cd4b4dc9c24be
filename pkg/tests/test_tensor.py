import numpy as np
import pytest

from pct import tensor as T
from pct.errors import ConfigError, ContractError, NumericError, ShapeError
from pct.tensor import OptimizerConfig, Param, Tensor, backward, sgd_step

from gradcheck import max_rel_error


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        assert np.array_equal(out.data, [[2.0], [4.0]])

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        err = max_rel_error(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])
        assert err < 1e-5

    def test_batched_gradient(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 3))
        err = max_rel_error(lambda x, y: T.tsum(T.power(T.matmul(x, y), 2)), [a, b])
        assert err < 1e-4

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_associativity(self, rng):
        for _ in range(5):
            a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
            left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
            right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
            assert np.linalg.norm(left - right) / np.linalg.norm(left) < 1e-10


class TestSoftmaxRows:
    def test_uniform_logits(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0)

    @pytest.mark.parametrize("c", [0.0, -7.5, 123.0])
    def test_shift_invariance(self, c):
        out = T.softmax_rows(Tensor([[c, c + np.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = T.softmax_rows(Tensor(rng.normal(scale=10.0, size=(6, 9))))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-9
        assert out.data.min() >= 0.0

    def test_against_high_precision_oracle(self, rng):
        # exp-normalize at quad-like precision via mpmath
        import mpmath

        x = rng.normal(scale=3.0, size=(4, 4))
        ours = T.softmax_rows(Tensor(x)).data
        with mpmath.workprec(113):
            for i in range(4):
                exps = [mpmath.exp(mpmath.mpf(v)) for v in x[i]]
                total = mpmath.fsum(exps)
                ref = np.array([float(e / total) for e in exps])
                assert np.abs(ours[i] - ref).max() < 1e-12

    def test_nan_input_raises(self):
        with pytest.raises(NumericError):
            T.softmax_rows(Tensor([[0.0, np.nan]]))

    def test_rank_check(self):
        with pytest.raises(ShapeError):
            T.softmax_rows(Tensor(np.zeros(3)))

    def test_gradient(self, rng):
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        err = max_rel_error(lambda t: T.tsum(T.mul(T.softmax_rows(t), w)), [x])
        assert err < 1e-5


class TestConv2d:
    def test_scalar_kernel_doubles(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)), stride=1, padding=0)
        assert np.array_equal(out.data, 2.0 * x)

    def test_box_sum(self):
        x = np.ones((1, 1, 5, 5))
        k = np.ones((1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == 6.0

    def test_kernel_gradient(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(2, 3, 3, 3))
        err = max_rel_error(
            lambda a, b: T.tsum(T.power(T.conv2d(a, b, stride=2, padding=1), 2)), [x, k]
        )
        assert err < 1e-4

    def test_stride_validation(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_rect_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.array([4.0, 5.0, 6.0]), requires_grad=True)
        backward(T.tsum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(T.tsum(T.mul(x, x)))
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_composed_graph_matches_fd(self, rng):
        w = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1])

        def f(x, wt):
            logits = T.matmul(x, wt)
            return T.mul(T.tsum(T.take_rows(T.log_softmax(logits), labels)), -1.0 / 3)

        err = max_rel_error(f, [rng.normal(size=(3, 4)), w])
        assert err < 1e-4

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.zeros(3), requires_grad=True))

    def test_repeated_calls_accumulate(self):
        x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        loss = T.tsum(x)
        backward(loss)
        loss.grad = None
        backward(loss)
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_shared_subexpression(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = T.mul(x, 2.0)
        backward(T.add(T.tsum(y), T.tsum(T.mul(y, y))))
        # d/dx (2x + 4x^2) = 2 + 8x
        assert np.allclose(x.grad, 2.0 + 8.0 * 3.0)


class TestElementwiseOps:
    @pytest.mark.parametrize(
        "op",
        [
            lambda t: T.exp(t),
            lambda t: T.relu(t),
            lambda t: T.power(T.add(T.mul(t, t), 1.0), 0.5),
            lambda t: T.cos(t),
            lambda t: T.arccos(T.clip(t, -0.9, 0.9)),
            lambda t: T.log(T.add(T.mul(t, t), 0.5)),
        ],
    )
    def test_gradients(self, rng, op):
        x = rng.uniform(-0.8, 0.8, size=(3, 4))
        probe = rng.normal(size=(3, 4))
        err = max_rel_error(lambda t: T.tsum(T.mul(op(t), probe)), [x])
        assert err < 1e-4

    def test_concat_and_slicing_gradients(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))

        def f(x, y):
            joined = T.concat([x, y], axis=1)
            return T.tsum(T.power(joined, 2))

        assert max_rel_error(f, [a, b]) < 1e-5

    def test_transpose_reshape_gradients(self, rng):
        x = rng.normal(size=(2, 3, 4))

        def f(t):
            return T.tsum(T.power(T.reshape(T.transpose(t, (2, 0, 1)), (4, 6)), 2))

        assert max_rel_error(f, [x]) < 1e-5

    def test_table_rows_gradient(self, rng):
        table = rng.normal(size=(2, 7))
        idx = rng.integers(0, 7, size=(3, 3))

        def f(t):
            return T.tsum(T.power(T.table_rows(t, idx), 2))

        assert max_rel_error(f, [table]) < 1e-5


class TestSgdStep:
    def test_plain_step(self):
        p = Param(np.array([0.0]))
        p.value.grad = np.array([1.0])
        sgd_step([p], OptimizerConfig(0.1, momentum=0.0, weight_decay=0.0), epoch=0)
        assert np.allclose(p.value.data, [-0.1])
        assert p.value.grad is None

    def test_momentum_recurrence(self):
        # constant gradient g: second update has magnitude lr * 1.9 * g
        p = Param(np.array([0.0]))
        cfg = OptimizerConfig(0.1, momentum=0.9, weight_decay=0.0)
        p.value.grad = np.array([2.0])
        sgd_step([p], cfg, 0)
        first = p.value.data.copy()
        p.value.grad = np.array([2.0])
        sgd_step([p], cfg, 0)
        second_update = p.value.data - first
        assert np.allclose(second_update, -0.1 * 1.9 * 2.0)

    def test_schedule_scaling(self):
        cfg = OptimizerConfig(0.1, momentum=0.0, weight_decay=0.0, schedule=[(16, 0.1)])
        assert np.isclose(cfg.lr_at(15), 0.1)
        assert np.isclose(cfg.lr_at(16), 0.01)
        p = Param(np.array([0.0]))
        p.value.grad = np.array([1.0])
        sgd_step([p], cfg, epoch=16)
        assert np.allclose(p.value.data, [-0.01])

    def test_weight_decay_enters_velocity(self):
        p = Param(np.array([10.0]))
        p.value.grad = np.array([0.0])
        sgd_step([p], OptimizerConfig(0.1, momentum=0.0, weight_decay=0.5), 0)
        assert np.allclose(p.value.data, [10.0 - 0.1 * 0.5 * 10.0])

    def test_missing_grad_rejected(self):
        with pytest.raises(ContractError):
            sgd_step([Param(np.zeros(2))], OptimizerConfig(0.1), 0)

    def test_schedule_must_increase(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(0.1, schedule=[(20, 0.1), (10, 0.1)])


def test_determinism_bit_identical(rng):
    def run():
        r = np.random.default_rng(77)
        x = Tensor(r.normal(size=(4, 5)), requires_grad=True)
        w = Tensor(r.normal(size=(5, 3)), requires_grad=True)
        loss = T.tsum(T.power(T.softmax(T.matmul(x, w)), 2))
        backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)
