import numpy as np
import pytest

from fedssl import autodiff as ad
from fedssl.autodiff import OptimizerState, Tape, Tensor, backward, sgd_step
from fedssl.errors import ContractError, DimensionError

from oracles import central_difference, conv2d_loops, matmul_loops, max_rel_err


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2)), Tensor(m))
        assert np.array_equal(out.data, m)

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_against_loop_oracle(self):
        a = rng(1).normal(size=(3, 4))
        b = rng(2).normal(size=(4, 2))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        # BLAS may reassociate the inner sum, hence the 1e-12 branch of the
        # oracle-agreement rule rather than bit equality.
        assert np.max(np.abs(got - matmul_loops(a, b))) <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


class TestConv2d:
    def test_zero_kernels_give_constant_bias(self):
        x = rng(0).uniform(size=(2, 5, 5))
        bias = np.array([0.3, -0.7, 1.5])
        out = ad.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(bias))
        for c in range(3):
            assert np.all(out.data[c] == bias[c])

    def test_delta_kernel_is_identity(self):
        x = rng(1).uniform(size=(1, 6, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        assert np.allclose(out.data, x, atol=0)

    def test_against_loop_oracle(self):
        x = rng(2).normal(size=(2, 5, 5))
        k = rng(3).normal(size=(3, 2, 3, 3))
        b = rng(4).normal(size=3)
        got = ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        assert np.max(np.abs(got - conv2d_loops(x, k, b))) <= 1e-12

    def test_batched_matches_per_image(self):
        x = rng(5).normal(size=(4, 2, 6, 6))
        k = rng(6).normal(size=(3, 2, 3, 3))
        b = rng(7).normal(size=3)
        batched = ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        for i in range(4):
            single = ad.conv2d(Tensor(x[i]), Tensor(k), Tensor(b)).data
            assert np.array_equal(batched[i], single)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channel mismatch"):
            ad.conv2d(Tensor(np.zeros((2, 4, 4))),
                      Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3)))


class TestRelu:
    def test_examples(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])
        assert np.array_equal(ad.relu(Tensor([-5.0, -0.1])).data, [0.0, 0.0])

    def test_gradient_indicator(self):
        x = ad.parameter([-1.0, 2.0])
        with Tape() as tape:
            loss = ad.tsum(ad.relu(x))
        grads = backward(tape, loss)
        assert np.array_equal(grads[x.tid], [0.0, 1.0])

    def test_subgradient_at_zero_is_zero(self):
        x = ad.parameter([0.0])
        with Tape() as tape:
            loss = ad.tsum(ad.relu(x))
        assert np.array_equal(backward(tape, loss)[x.tid], [0.0])


class TestGlobalAvgPool:
    def test_constant_channel(self):
        out = ad.global_avg_pool(Tensor(np.full((1, 4, 4), 5.0)))
        assert np.array_equal(out.data, [5.0])

    def test_hand_mean(self):
        out = ad.global_avg_pool(Tensor([[[1.0, 3.0], [5.0, 7.0]]]))
        assert np.array_equal(out.data, [4.0])

    def test_against_sum_oracle(self):
        x = rng(8).normal(size=(4, 8, 8))
        expected = np.array([x[c].sum() / 64 for c in range(4)])
        assert np.array_equal(ad.global_avg_pool(Tensor(x)).data, expected)


class TestL2Normalize:
    def test_three_four_five(self):
        out = ad.l2_normalize(Tensor([3.0, 4.0]))
        assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        assert np.allclose(ad.l2_normalize(Tensor(v)).data, v, atol=1e-15)

    def test_zero_vector_guard(self):
        out = ad.l2_normalize(Tensor(np.zeros(5)))
        assert np.array_equal(out.data, np.zeros(5))

    def test_output_norm(self):
        x = rng(9).normal(size=(6, 10))
        out = ad.l2_normalize(Tensor(x)).data
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.parameter(rng(0).normal(size=(3, 4, 2)))
        with Tape() as tape:
            loss = ad.tsum(x)
        assert np.array_equal(backward(tape, loss)[x.tid], np.ones((3, 4, 2)))

    def test_square_scalar(self):
        x = ad.parameter([3.0])
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, x))
        assert np.array_equal(backward(tape, loss)[x.tid], [6.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter([1.0, 2.0])
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ContractError, match="scalar"):
            backward(tape, y)

    def test_non_parameter_leaves_skipped(self):
        x = ad.parameter([2.0])
        c = ad.constant([5.0])
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, c))
        grads = backward(tape, loss)
        assert x.tid in grads and c.tid not in grads

    def test_linearity(self):
        x = ad.parameter(rng(1).normal(size=(4,)))
        a, b = 2.5, -1.25

        def grad_of(scale_1, scale_2):
            with Tape() as tape:
                l1 = ad.tsum(ad.mul(x, x))
                l2 = ad.tsum(ad.exp(ad.scale(x, 0.3)))
                loss = ad.add(ad.scale(l1, scale_1), ad.scale(l2, scale_2))
            return backward(tape, loss)[x.tid]

        combined = grad_of(a, b)
        separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        assert np.max(np.abs(combined - separate)) < 1e-10


class TestTape:
    def test_replay_bit_exact(self):
        x = ad.parameter(rng(2).normal(size=(3, 5)))
        w = ad.parameter(rng(3).normal(size=(5, 2)))
        with Tape() as tape:
            h = ad.relu(ad.matmul(x, w))
            z = ad.l2_normalize(h)
            ad.tmean(ad.mul(z, z))
        assert tape.replay_max_diff() == 0.0

    def test_topological_order(self):
        x = ad.parameter([1.0])
        with Tape() as tape:
            y = ad.mul(x, x)
            z = ad.add(y, x)
            ad.tsum(z)
        seen = {x.tid}
        for entry in tape.entries:
            for inp in entry.inputs:
                assert inp.tid in seen or not any(
                    e.output.tid == inp.tid for e in tape.entries)
            seen.add(entry.output.tid)

    def test_run_to_run_determinism(self):
        def run():
            x = ad.parameter(np.arange(6, dtype=float).reshape(2, 3) / 7.0)
            with Tape() as tape:
                z = ad.l2_normalize(ad.relu(x))
                loss = ad.tmean(ad.exp(z))
            return loss.data.tobytes(), backward(tape, loss)[x.tid].tobytes()

        assert run() == run()


GRAD_CASES = {
    "add": lambda t: ad.add(t["a"], t["b"]),
    "sub": lambda t: ad.sub(t["a"], t["b"]),
    "mul": lambda t: ad.mul(t["a"], t["b"]),
    "div": lambda t: ad.div(t["a"], t["shifted"]),
    "neg": lambda t: ad.neg(t["a"]),
    "exp": lambda t: ad.exp(t["a"]),
    "log": lambda t: ad.log(t["positive"]),
    "sqrt": lambda t: ad.sqrt(t["positive"]),
    "relu": lambda t: ad.relu(t["away_from_zero"]),
    "sigmoid": lambda t: ad.sigmoid(t["a"]),
    "clamp": lambda t: ad.clamp(t["away_from_clamp"], -0.5, 0.5),
    "scale": lambda t: ad.scale(t["a"], -1.7),
    "matmul": lambda t: ad.matmul(t["m1"], t["m2"]),
    "transpose": lambda t: ad.transpose(t["m1"]),
    "reshape": lambda t: ad.reshape(t["m1"], (2, 2, 3)),
    "conv2d": lambda t: ad.conv2d(t["img"], t["kern"], t["bias"]),
    "avg_pool2": lambda t: ad.avg_pool2(t["img"]),
    "global_avg_pool": lambda t: ad.global_avg_pool(t["img"]),
    "sum": lambda t: t["a"],  # scalarized below via weighted sum
    "mean": lambda t: ad.reshape(ad.tmean(t["a"]), (1,)),
    "sum_axis": lambda t: ad.sum_axis(t["m1"], axis=1),
    "l2_normalize": lambda t: ad.l2_normalize(t["m1"]),
}


def _grad_inputs(seed):
    g = rng(seed)
    t = {
        "a": ad.parameter(g.normal(size=(3, 4))),
        "b": ad.parameter(g.normal(size=(3, 4))),
        "shifted": ad.parameter(g.uniform(1.0, 2.0, size=(3, 4))),
        "positive": ad.parameter(g.uniform(0.5, 2.0, size=(3, 4))),
        "away_from_zero": ad.parameter(np.where(np.abs(z := g.normal(size=(3, 4))) < 0.05,
                                                z + 0.2, z)),
        "m1": ad.parameter(g.normal(size=(4, 3))),
        "m2": ad.parameter(g.normal(size=(3, 5))),
        "img": ad.parameter(g.normal(size=(2, 4, 4))),
        "kern": ad.parameter(g.normal(size=(3, 2, 3, 3))),
        "bias": ad.parameter(g.normal(size=(3,))),
    }
    clampable = g.normal(size=(3, 4))
    clampable[np.abs(np.abs(clampable) - 0.5) < 0.05] = 0.0
    t["away_from_clamp"] = ad.parameter(clampable)
    return t


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradient_check(name):
    """Central differences at h=1e-4 agree with taped gradients, rel err < 1e-4."""
    for trial in range(10):
        tensors = _grad_inputs(100 * trial + hash(name) % 97)

        def scalar_loss():
            out = GRAD_CASES[name](tensors)
            w = ad.constant(rng(trial + 7).normal(size=out.data.shape))
            return ad.tsum(ad.mul(out, w))

        with Tape() as tape:
            loss = scalar_loss()
        grads = backward(tape, loss)
        for key, t in tensors.items():
            if t.tid not in grads:
                continue
            fd = central_difference(lambda: scalar_loss().item(), t.data)
            assert max_rel_err(grads[t.tid], fd) < 1e-4, (name, key, trial)


class TestSgdStep:
    def test_plain_step(self):
        p = ad.parameter([1.0])
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step([p], [np.array([2.0])], state)
        assert np.allclose(p.data, [0.8], atol=0)

    def test_zero_grad_fixed_point(self):
        p = ad.parameter([1.5, -2.0])
        state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([p], [np.zeros(2)], state)
        assert np.array_equal(p.data, [1.5, -2.0])

    def test_two_steps_hand_unrolled(self):
        lr, mom, wd = 0.1, 0.9, 0.01
        p0, g1, g2 = 2.0, 0.5, -0.25
        v1 = g1 + wd * p0
        p1 = p0 - lr * v1
        v2 = mom * v1 + (g2 + wd * p1)
        p2 = p1 - lr * v2

        p = ad.parameter([p0])
        state = OptimizerState(lr=lr, momentum=mom, weight_decay=wd)
        sgd_step([p], [np.array([g1])], state)
        sgd_step([p], [np.array([g2])], state)
        assert np.allclose(p.data, [p2], atol=0)

    def test_shape_mismatch(self):
        p = ad.parameter([1.0, 2.0])
        state = OptimizerState(lr=0.1)
        with pytest.raises(DimensionError):
            sgd_step([p], [np.zeros(3)], state)
