import math

import numpy as np
import pytest

from duetsql import numerics as nm

from helpers import analytic_gradients, assert_grads_match, finite_difference


class TestMatmul:
    def test_identity(self):
        b = nm.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(nm.Tensor(np.eye(2)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_zeros(self):
        out = nm.matmul(nm.Tensor(np.zeros((3, 4))), nm.Tensor(np.ones((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_hand_multiplication(self):
        out = nm.matmul(nm.Tensor([[1.0, 2.0], [3.0, 4.0]]), nm.Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            nm.matmul(nm.Tensor(np.ones((2, 3))), nm.Tensor(np.ones((2, 2))))


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax(nm.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_shift_symmetry(self):
        for c in (-7.3, 0.0, 11.0):
            out = nm.softmax(nm.Tensor([c, c]))
            np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_exponentiate_and_normalize(self):
        out = nm.softmax(nm.Tensor([0.0, math.log(2.0)]))
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            nm.softmax(nm.Tensor([0.0, np.inf]))

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            v = rng.normal(scale=5.0, size=rng.integers(2, 9))
            p = nm.softmax(nm.Tensor(v)).data
            assert abs(p.sum() - 1.0) < 1e-9
            assert (p > 0).all()
            shifted = nm.softmax(nm.Tensor(v + rng.normal())).data
            np.testing.assert_allclose(p, shifted, atol=1e-9)

    def test_mask_excluding_all_positions_rejected(self):
        x = nm.Tensor(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ValueError, match="excludes all positions"):
            nm.softmax(x, mask=mask)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = nm.layer_norm(nm.Tensor([3.0, 3.0, 3.0]), nm.Tensor(np.ones(3)), nm.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-9)

    def test_two_point_vector(self):
        out = nm.layer_norm(nm.Tensor([1.0, -1.0]), nm.Tensor(np.ones(2)), nm.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-4)

    def test_zero_gain_gives_bias(self):
        bias = np.array([5.0, -2.0, 0.5])
        out = nm.layer_norm(nm.Tensor([0.3, 9.0, -4.0]), nm.Tensor(np.zeros(3)), nm.Tensor(bias))
        np.testing.assert_array_equal(out.data, bias)

    def test_length_one_rejected(self):
        with pytest.raises(nm.ShapeError):
            nm.layer_norm(nm.Tensor([1.0]), nm.Tensor([1.0]), nm.Tensor([0.0]))

    def test_standardizes_before_affine(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(scale=3.0, size=rng.integers(2, 12))
            out = nm.layer_norm(nm.Tensor(v), nm.Tensor(np.ones(v.size)), nm.Tensor(np.zeros(v.size))).data
            assert abs(out.mean()) < 1e-9
            assert abs(out.var() - 1.0) < 1e-3


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = nm.param(np.array([[1.0, 2.0], [3.0, -1.0]]))
        nm.sum_all(p).backward()
        np.testing.assert_array_equal(p.grad, np.ones((2, 2)))

    def test_dot_quadratic_identity(self):
        p = nm.param(np.array([1.5, -2.0, 0.25]))
        nm.dot(p, p).backward()
        np.testing.assert_allclose(p.grad, 2 * p.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        p = nm.param(np.ones(3))
        with pytest.raises(nm.ShapeError):
            nm.add(p, p).backward()

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            params = {
                "w1": nm.param(rng.normal(size=(4, 5))),
                "b1": nm.param(rng.normal(size=5)),
                "w2": nm.param(rng.normal(size=(5, 2))),
            }
            x = rng.normal(size=(3, 4))

            def loss_fn():
                h = nm.relu(nm.add(nm.matmul(nm.Tensor(x), params["w1"]), params["b1"]))
                return nm.mean_all(nm.matmul(h, params["w2"])).item()

            h = nm.relu(nm.add(nm.matmul(nm.Tensor(x), params["w1"]), params["b1"]))
            loss = nm.mean_all(nm.matmul(h, params["w2"]))
            assert_grads_match(analytic_gradients(loss, params), finite_difference(loss_fn, params))

    def test_fused_primitives_match_finite_differences(self):
        rng = np.random.default_rng(13)
        params = {
            "x": nm.param(rng.normal(size=(3, 4))),
            "g": nm.param(rng.normal(size=4)),
            "b": nm.param(rng.normal(size=4)),
            "r": nm.param(rng.normal(size=(3, 3, 4))),
        }

        def forward():
            ln = nm.layer_norm(params["x"], params["g"], params["b"])
            sm = nm.softmax(ln)
            biased = nm.add(nm.pair_bias_scores(params["x"], params["r"]),
                            nm.matmul(sm, nm.transpose(params["x"])))
            vals = nm.pair_bias_values(nm.softmax(biased), params["r"])
            steps = nm.gather_rows(nm.log_softmax(vals), np.array([0, 2, 1]))
            return nm.sum_all(nm.mul(nm.sigmoid(steps), nm.tanh(steps)))

        assert_grads_match(analytic_gradients(forward(), params),
                           finite_difference(lambda: forward().item(), params))


class TestTape:
    def test_replay_reproduces_forward_bitwise(self):
        rng = np.random.default_rng(5)
        a = nm.param(rng.normal(size=(3, 3)))
        b = nm.param(rng.normal(size=(3, 3)))
        out = nm.mean_all(nm.relu(nm.matmul(a, nm.softmax(b))))
        tape = nm.Tape(out)
        before = out.data.copy()
        replayed = tape.replay()
        assert np.array_equal(before, replayed)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 4))

        def run():
            return nm.softmax(nm.layer_norm(nm.Tensor(x), nm.Tensor(np.ones(4)), nm.Tensor(np.zeros(4)))).data

        assert np.array_equal(run(), run())

    def test_no_grad_blocks_graph(self):
        p = nm.param(np.ones(3))
        with nm.no_grad():
            out = nm.mul(p, p)
        assert out._backward_fn is None and not out.requires_grad


class TestOptimizers:
    def test_sgd_step_zero_lr(self):
        p = nm.param(np.array([1.0, 2.0]))
        nm.sgd_step([p], [np.array([5.0, 5.0])], 0.0)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_sgd_step_arithmetic(self):
        p = nm.param(np.array([1.0]))
        nm.sgd_step([p], [np.array([2.0])], 0.5)
        np.testing.assert_array_equal(p.data, [0.0])

    def test_two_identical_steps(self):
        p = nm.param(np.array([1.0, -1.0]))
        g = np.array([2.0, 4.0])
        nm.sgd_step([p], [g], 0.1)
        nm.sgd_step([p], [g], 0.1)
        np.testing.assert_allclose(p.data, np.array([1.0, -1.0]) - 2 * 0.1 * g)

    def test_sgd_step_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            nm.sgd_step([nm.param(np.ones(2))], [np.ones(3)], 0.1)

    def test_adam_moves_toward_minimum(self):
        p = nm.param(np.array([4.0]))
        opt = nm.Adam({"p": p}, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            nm.mul(p, p).backward()
            opt.step()
        assert abs(p.data[0]) < 0.05

    def test_clip_grad_norm(self):
        p = nm.param(np.zeros(4))
        p.grad = np.full(4, 10.0)
        norm = nm.clip_grad_norm({"p": p}, 1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_outputs_stay_finite_under_random_compositions():
    rng = np.random.default_rng(21)
    for _ in range(100):
        x = nm.Tensor(rng.normal(scale=3.0, size=(3, 6)))
        w = nm.Tensor(rng.normal(size=(6, 6)))
        out = nm.softmax(nm.layer_norm(nm.matmul(x, w), nm.Tensor(np.ones(6)), nm.Tensor(np.zeros(6))))
        assert np.isfinite(out.data).all()
