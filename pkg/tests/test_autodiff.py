import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grutv import autodiff as ad
from grutv.errors import DimensionError, UsageError


def weighted_total(t, w):
    return ad.total(ad.hadamard(t, w))


class TestForward:
    def test_sigmoid_zero(self):
        assert ad.forward_primitive("sigmoid", [0.0]).data.tolist() == [0.5]

    def test_concat(self):
        assert ad.forward_primitive("concat", [1.0, 2.0], [3.0]).data.tolist() == [1.0, 2.0, 3.0]

    def test_tanh_one(self):
        assert ad.forward_primitive("tanh", [1.0]).data[0] == pytest.approx(0.7615941559557649, abs=1e-15)

    def test_affine(self):
        w = np.arange(6.0).reshape(2, 3)
        y = ad.forward_primitive("affine", [1.0, 2.0], w, [0.5, 0.5, 0.5])
        np.testing.assert_array_equal(y.data, np.array([1.0, 2.0]) @ w + 0.5)

    def test_scale_and_add(self):
        y = ad.forward_primitive("add", ad.forward_primitive("scale", 2.0, [1.0, -1.0]), [0.5, 0.5])
        assert y.data.tolist() == [2.5, -1.5]

    @pytest.mark.parametrize(
        "kind,args",
        [
            ("affine", (np.ones(3), np.ones((2, 4)), np.ones(4))),
            ("affine", (np.ones(2), np.ones((2, 4)), np.ones(3))),
            ("hadamard", (np.ones(3), np.ones(2))),
            ("add", (np.ones(3), np.ones(4))),
            ("concat", (np.ones(2), 1.0)),
        ],
    )
    def test_shape_mismatch(self, kind, args):
        with pytest.raises(DimensionError, match=kind):
            ad.forward_primitive(kind, *args)

    def test_unknown_primitive(self):
        with pytest.raises(UsageError):
            ad.forward_primitive("softmax", [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
    def test_open_interval_ranges(self, xs):
        s = ad.sigmoid(xs).data
        t = ad.tanh(xs).data
        assert np.all((s > 0) & (s < 1))
        assert np.all((t > -1) & (t < 1))

    def test_extreme_inputs_stay_open(self):
        x = np.array([-1e4, -50.0, 50.0, 1e4])
        assert np.all((ad.sigmoid(x).data > 0) & (ad.sigmoid(x).data < 1))
        assert np.all(np.abs(ad.tanh(x).data) < 1)

    def test_no_tape_means_no_recording(self):
        assert ad.active_tape() is None
        y = ad.sigmoid([0.0])
        assert y.node is None


class TestTape:
    def test_nodes_are_topological(self):
        with ad.Tape() as tape:
            x = tape.leaf([1.0, 2.0])
            w = tape.leaf(np.eye(2))
            y = ad.tanh(ad.affine(x, w, [0.0, 0.0]))
            ad.total(ad.hadamard(y, x))
        for i, node in enumerate(tape.nodes):
            assert all(j < i for j in node.inputs)

    def test_replay_bit_identical(self):
        rng = np.random.default_rng(0)
        with ad.Tape() as tape:
            x = tape.leaf(rng.normal(size=5))
            w = tape.leaf(rng.normal(size=(5, 3)))
            out = ad.total(ad.sigmoid(ad.affine(x, w, rng.normal(size=3))))
        first = tape.replay()
        second = tape.replay()
        for a, b, node in zip(first, second, tape.nodes):
            assert np.array_equal(a, b)
            assert np.array_equal(a[0], node.value)
        assert first[out.node][0] == out.data

    def test_leaves_not_mutated(self):
        x0 = np.array([0.3, -0.2])
        with ad.Tape() as tape:
            x = tape.leaf(x0)
            ad.total(ad.tanh(x))
        before = tape.nodes[x.node].value.copy()
        ad.backward(tape)
        assert np.array_equal(tape.nodes[x.node].value, before)
        assert np.array_equal(x0, [0.3, -0.2])


class TestBackward:
    def test_sigmoid_derivative(self):
        with ad.Tape() as tape:
            x = tape.leaf([0.0])
            ad.sigmoid(x)
        assert ad.backward(tape, np.ones(1))[x.node][0] == pytest.approx(0.25, abs=1e-15)

    def test_add_gradient_ones(self):
        with ad.Tape() as tape:
            x = tape.leaf([1.0, 2.0, 3.0])
            y = tape.leaf([4.0, 5.0, 6.0])
            ad.add(x, y)
        g = ad.backward(tape, np.ones(3))
        assert g[x.node].tolist() == [1.0, 1.0, 1.0]

    def test_tanh_derivative(self):
        with ad.Tape() as tape:
            x = tape.leaf([1.0])
            ad.tanh(x)
        expected = 1.0 - math.tanh(1.0) ** 2
        assert ad.backward(tape, np.ones(1))[x.node][0] == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(0.41997434, abs=1e-8)

    def test_empty_tape(self):
        with pytest.raises(UsageError):
            ad.backward(ad.Tape())

    def test_seed_shape_checked(self):
        with ad.Tape() as tape:
            ad.tanh(tape.leaf([1.0, 2.0]))
        with pytest.raises(DimensionError):
            ad.backward(tape, np.ones(3))

    def test_unused_leaf_gets_zero(self):
        with ad.Tape() as tape:
            x = tape.leaf([1.0])
            y = tape.leaf([2.0, 3.0])
            ad.tanh(x)
        assert ad.backward(tape)[y.node].tolist() == [0.0, 0.0]

    def test_fan_out_accumulates(self):
        with ad.Tape() as tape:
            x = tape.leaf([3.0])
            ad.hadamard(x, x)
        assert ad.backward(tape)[x.node][0] == 6.0


def _draw_primitive_case(kind, rng):
    """Random inputs for ``kind`` kept away from kinks and singularities."""
    n = int(rng.integers(1, 6))
    if kind == "affine":
        p, q = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        lead = () if rng.random() < 0.5 else (int(rng.integers(1, 4)),)
        return [rng.normal(size=lead + (p,)), rng.normal(size=(p, q)), rng.normal(size=q)]
    if kind == "concat":
        return [rng.normal(size=int(rng.integers(1, 4))) for _ in range(int(rng.integers(1, 4)))]
    if kind in ("hadamard", "add", "sub"):
        return [rng.normal(size=n), rng.normal(size=n)]
    if kind == "log":
        return [rng.uniform(0.5, 3.0, size=n)]
    if kind == "exp":
        return [rng.uniform(-2.0, 2.0, size=n)]
    if kind == "relu":
        x = rng.normal(size=n)
        return [np.where(np.abs(x) < 0.05, 0.5, x)]
    if kind == "clamp":
        x = rng.uniform(-2.0, 2.0, size=n)
        return [np.where(np.abs(np.abs(x) - 1.0) < 0.05, 0.0, x)]
    return [rng.normal(scale=2.0, size=n)]


PRIMITIVES = ["affine", "concat", "sigmoid", "tanh", "exp", "relu", "log", "clamp", "hadamard", "add", "sub", "scale"]


class TestGradCheck:
    @pytest.mark.parametrize("kind", PRIMITIVES)
    def test_primitive_matches_central_differences(self, kind):
        # 100 random shapes and seeds per primitive
        for seed in range(100):
            rng = np.random.default_rng([seed, PRIMITIVES.index(kind)])
            args = _draw_primitive_case(kind, rng)
            probe = {}

            def f(*leaves):
                if kind == "scale":
                    y = ad.scale(1.7, leaves[0])
                elif kind == "clamp":
                    y = ad.clamp(leaves[0], -1.0, 1.0)
                else:
                    y = ad.forward_primitive(kind, *leaves)
                if "w" not in probe:
                    probe["w"] = rng.normal(size=y.shape)
                return weighted_total(y, probe["w"])

            report = ad.grad_check(f, args, epsilon=1e-5, tolerance=1e-6)
            assert report.passed, (kind, seed, report.max_rel_error)

    def test_sigmoid_at_zero_tight(self):
        report = ad.grad_check(lambda x: ad.total(ad.sigmoid(x)), [np.zeros(1)], epsilon=1e-5, tolerance=1e-8)
        assert report.passed
        assert report.worst_rel_error <= 1e-8

    def test_constant_function(self):
        report = ad.grad_check(lambda x: ad.total(ad.scale(0.0, x)), [np.array([0.3, 0.7])])
        assert report.passed
        assert report.worst_rel_error == 0.0
        assert report.worst_abs_error == 0.0

    def test_scaled_gradient_fails(self):
        x = np.array([0.2, -0.4, 1.1])
        with ad.Tape() as tape:
            leaf = tape.leaf(x)
            out = ad.total(ad.tanh(leaf))
        analytic = {"x": 1.1 * ad.backward(tape)[leaf.node]}
        numeric = {"x": ad.numeric_gradient(tape, leaf.node, out.node, 1e-5)}
        assert not ad.compare_gradients(analytic, numeric, 1e-4).passed

    def test_pass_flag_iff_within_tolerance(self):
        a = {"p": np.array([1.0, 2.0])}
        n = {"p": np.array([1.0, 2.0 * (1 + 1e-5)])}
        r = ad.compare_gradients(a, n, tolerance=1e-5)
        assert r.passed == (r.worst_rel_error <= 1e-5)
        assert not ad.compare_gradients(a, n, tolerance=1e-6).passed

    def test_non_scalar_rejected(self):
        with pytest.raises(UsageError):
            ad.grad_check(lambda x: ad.tanh(x), [np.ones(2)])

    def test_bad_epsilon(self):
        with pytest.raises(UsageError):
            ad.grad_check(lambda x: ad.total(x), [np.ones(2)], epsilon=0.0)

    def test_named_point(self):
        report = ad.grad_check(lambda a, b: ad.total(ad.hadamard(ad.tanh(a), b)),
                               {"a": np.array([0.1, 0.2]), "b": np.array([1.0, -1.0])})
        assert set(report.max_rel_error) == {"a", "b"}
        assert report.passed

    def test_batched_leading_axis(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        report = ad.grad_check(lambda x, w, b: ad.total(ad.sigmoid(ad.affine(x, w, b))), [x, w, b])
        assert report.passed
