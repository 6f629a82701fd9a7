#!/usr/bin/env python3
"""
Tests for the tensor kernel: forward oracles, reverse pass and gradient checker
"""
import os
import sys

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from crowd_gramformer import numerics as nx
from crowd_gramformer.exceptions import ContractError, ShapeError


def naive_conv(x, kernel, bias):
    channels_out, channels_in = kernel.shape[:2]
    _, height, width = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((channels_out, height, width))
    for o in range(channels_out):
        for y in range(height):
            for x_ in range(width):
                total = bias[o]
                for c in range(channels_in):
                    for dy in range(3):
                        for dx in range(3):
                            total += kernel[o, c, dy, dx] * padded[c, y + dy, x_ + dx]
                out[o, y, x_] = total
    return out


def test_matmul_oracle():
    """matmul against a triple loop"""
    print("🧪 Testing matmul oracle...")
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    assert_allclose(nx.matmul(nx.constant(a), nx.constant(b)).data, expected, atol=1e-12)

    with pytest.raises(ShapeError, match=r"cannot multiply \(2, 3\) by \(2, 3\)"):
        nx.matmul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((2, 3))))
    print("  ✅ matmul matches")


def test_softmax_rows():
    print("🧪 Testing softmax rows...")
    rng = np.random.default_rng(1)
    y = nx.softmax_rows(nx.constant(rng.normal(size=(6, 9)) * 30)).data
    assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-12)
    assert np.all(y >= 0)

    # huge logits stay finite
    big = nx.softmax_rows(nx.constant(np.array([[1000.0, 1000.0, -1000.0]]))).data
    assert_allclose(big, [[0.5, 0.5, 0.0]], atol=1e-12)
    print("  ✅ rows sum to one")


def test_layer_norm_statistics():
    print("🧪 Testing layer norm...")
    rng = np.random.default_rng(2)
    x = nx.constant(rng.normal(3.0, 5.0, size=(7, 16)))
    y = nx.layer_norm(x, nx.constant(np.ones(16)), nx.constant(np.zeros(16))).data
    assert_allclose(y.mean(axis=1), np.zeros(7), atol=1e-12)
    assert_allclose(y.var(axis=1), np.ones(7), atol=1e-5)

    with pytest.raises(ContractError):
        nx.layer_norm(x, nx.constant(np.ones(16)), nx.constant(np.zeros(16)), eps=0.0)
    print("  ✅ zero mean, unit variance")


def test_conv_matches_naive_loops():
    print("🧪 Testing 3x3 convolution...")
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5, 6))
    kernel = rng.normal(size=(2, 3, 3, 3))
    bias = rng.normal(size=2)
    out = nx.conv2d_3x3(nx.constant(x), nx.constant(kernel), nx.constant(bias)).data
    assert_allclose(out, naive_conv(x, kernel, bias), atol=1e-12)

    with pytest.raises(ShapeError):
        nx.conv2d_3x3(nx.constant(x), nx.constant(rng.normal(size=(2, 4, 3, 3))), nx.constant(bias))
    print("  ✅ im2col matches loops")


def test_upsample_nearest():
    x = nx.constant(np.arange(4.0).reshape(1, 2, 2))
    y = nx.upsample2x(x).data
    assert y.shape == (1, 4, 4)
    assert_array_equal(y[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_pairwise_abs_diff_and_row_variance():
    f = nx.constant(np.array([0.1, 0.4, 0.9]))
    e = nx.pairwise_abs_diff(f).data
    assert_allclose(e, e.T)
    assert_array_equal(np.diag(e), np.zeros(3))
    assert_allclose(e[0, 2], 0.8)

    constant_rows = nx.constant(np.repeat([[0.2], [0.7]], 5, axis=1))
    assert nx.row_variance(constant_rows).item() == 0.0
    assert nx.row_variance(nx.constant(np.array([[0.0, 1.0]]))).item() == pytest.approx(0.25)


def test_no_tape_records_nothing():
    p = nx.parameter(np.ones((2, 2)), "p")
    out = nx.matmul(p, p)
    assert not out.requires_grad
    assert nx.active_tape() is None

    with nx.Tape() as tape:
        nx.matmul(nx.constant(np.ones((2, 2))), nx.constant(np.ones((2, 2))))
    assert len(tape) == 0


def test_backward_fan_out_accumulates():
    """x used twice: d(sum(x * x))/dx = 2x"""
    print("🧪 Testing backward fan-out...")
    x = nx.parameter(np.array([[1.0, -2.0], [3.0, 0.5]]), "x")
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.mul(x, x))
    nx.backward(loss, tape)
    assert_allclose(x.grad, 2 * x.data)
    assert tape.ops() == ["mul", "sum"]

    # a second backward accumulates into the leaf
    nx.backward(loss, tape)
    assert_allclose(x.grad, 4 * x.data)

    with pytest.raises(ContractError):
        with nx.Tape() as tape:
            y = nx.mul(x, x)
        nx.backward(y, tape)
    print("  ✅ gradients accumulate")


def test_op_gradients_match_finite_differences():
    """Every differentiable op through one composite expression"""
    print("🧪 Testing op gradients...")
    rng = np.random.default_rng(4)
    params = {
        "x": nx.parameter(rng.normal(size=(4, 4)), "x"),
        "w": nx.parameter(rng.normal(size=(4, 4)), "w"),
        "gain": nx.parameter(rng.uniform(0.5, 1.5, size=4), "gain"),
        "bias": nx.parameter(rng.normal(size=4), "bias"),
        "kernel": nx.parameter(rng.normal(size=(1, 1, 3, 3)), "kernel"),
        "kbias": nx.parameter(rng.normal(size=1), "kbias"),
        "bank": nx.parameter(rng.normal(size=(3, 4)), "bank"),
    }
    index = np.array([0, 2, 1, 2])

    def closure():
        p = params
        h = nx.embed_add(p["x"], index, p["bank"])
        h = nx.layer_norm(nx.matmul(h, p["w"]), p["gain"], p["bias"])
        a = nx.softmax_rows(nx.add(h, nx.transpose(h)))
        e = nx.pairwise_abs_diff(nx.sigmoid(nx.reshape(h, (16,))))
        image = nx.upsample2x(nx.reshape(a, (1, 4, 4)))
        conv = nx.conv2d_3x3(image, p["kernel"], p["kbias"])
        g = nx.gather_rows(h, np.array([3, 3, 0]))
        s = nx.scatter_matrix(nx.reshape(g, (12,)), np.repeat(np.arange(3), 4), np.tile(np.arange(4), 3), (4, 4))
        terms = [nx.mean_all(nx.mul(conv, conv)), nx.row_variance(e), nx.sum_all(nx.absolute(s)),
                 nx.scale(nx.sum_all(nx.concat([a, h], axis=0)), 0.1)]
        total = terms[0]
        for term in terms[1:]:
            total = nx.add(total, term)
        return total

    report = nx.grad_check(closure, params)
    for entry in report.entries:
        print(f"    {entry}")
    assert report.passed, [str(e) for e in report.failures]
    assert sorted(report.names()) == sorted(params)
    print(f"  ✅ worst relative error {report.worst:.2e}")


def test_grad_check_catches_injected_fault():
    """An off-by-two backward must fail the check"""
    print("🧪 Testing gradient checker sanity...")
    rng = np.random.default_rng(5)
    params = {"w": nx.parameter(rng.normal(size=(3, 3)), "w")}
    x = nx.constant(rng.normal(size=(2, 3)))

    def closure():
        return nx.sum_all(nx.matmul(x, params["w"]))

    assert nx.grad_check(closure, params).passed
    with nx.inject_backward_fault("matmul", 2.0):
        report = nx.grad_check(closure, params)
    assert not report.passed
    assert report.worst == pytest.approx(1.0, rel=1e-3)
    print("  ✅ fault detected")


def test_grad_check_rejects_nondeterministic_closure():
    params = {"w": nx.parameter(np.ones(2), "w")}
    calls = []

    def closure():
        calls.append(1)
        return nx.scale(nx.sum_all(params["w"]), float(len(calls)))

    with pytest.raises(ContractError, match="not deterministic"):
        nx.grad_check(closure, params)


def test_adam_first_step_moves_by_lr():
    """Bias correction makes the first step lr * sign(grad)"""
    p = nx.parameter(np.array([1.0, -1.0, 0.5]), "p")
    p.grad = np.array([0.3, -2.0, 1e-3])
    optimizer = nx.Adam(lr=0.01)
    optimizer.step({"p": p})
    assert_allclose(p.data, [0.99, -0.99, 0.49], atol=1e-6)
    assert optimizer.state.step == 1


def test_adam_minimizes_quadratic():
    p = nx.parameter(np.array([3.0, -4.0]), "p")
    optimizer = nx.Adam(lr=0.1)
    for _ in range(500):
        p.zero_grad()
        with nx.Tape() as tape:
            loss = nx.sum_all(nx.mul(p, p))
        nx.backward(loss, tape)
        optimizer.step({"p": p})
    assert np.all(np.abs(p.data) < 1e-2)


def test_embed_add_range():
    with pytest.raises(ContractError):
        nx.embed_add(nx.constant(np.zeros((2, 3))), np.array([0, 5]), nx.constant(np.zeros((3, 3))))


def test_elementwise_dispatch():
    print("🧪 Testing elementwise dispatch...")
    a = nx.constant(np.array([[-3.0, 0.0, 2.0]]))
    b = nx.constant(np.array([[0.5, -1.0, 4.0]]))
    assert_array_equal(nx.elementwise("relu", a).data, [[0.0, 0.0, 2.0]])
    assert_array_equal(nx.elementwise("add", a, b).data, [[-2.5, -1.0, 6.0]])
    assert_array_equal(nx.elementwise("mul", a, b).data, [[-1.5, -0.0, 8.0]])
    assert_array_equal(nx.elementwise("scale", a, 2.0).data, [[-6.0, 0.0, 4.0]])
    assert_array_equal(nx.elementwise("sigmoid", a).data, nx.sigmoid(a).data)
    assert sorted(nx.ELEMENTWISE) == ["add", "mul", "relu", "scale", "sigmoid"]

    with pytest.raises(ContractError, match="unknown elementwise op 'tanh'"):
        nx.elementwise("tanh", a)
    print("  ✅ every kind dispatches")


def test_activation_values():
    assert nx.sigmoid(nx.constant(np.zeros(1))).item() == 0.5
    assert abs(nx.sigmoid(nx.constant(np.array([40.0]))).item() - 1.0) < 1e-12
    assert nx.sigmoid(nx.constant(np.array([-40.0]))).item() > 0.0
    assert nx.relu(nx.constant(np.array([-3.0]))).item() == 0.0

    # subgradient 0 at the kink
    x = nx.parameter(np.array([-3.0, 0.0, 2.0]), "x")
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.relu(x))
    nx.backward(loss, tape)
    assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_softmax_shift_invariance():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 7)) * 3
    base = nx.softmax_rows(nx.constant(x)).data
    for shift in (-80.0, 1e-3, 50.0):
        shifted = nx.softmax_rows(nx.constant(x + shift)).data
        assert np.max(np.abs(shifted - base)) < 1e-12


def test_forward_ops_leave_inputs_untouched():
    """Forward ops never write into their operands"""
    print("🧪 Testing forward purity...")
    rng = np.random.default_rng(7)
    x = nx.constant(rng.normal(size=(4, 4)))
    w = nx.constant(rng.normal(size=(4, 4)))
    gain, bias = nx.constant(rng.normal(size=4)), nx.constant(rng.normal(size=4))
    image = nx.constant(rng.normal(size=(1, 4, 4)))
    kernel, kbias = nx.constant(rng.normal(size=(2, 1, 3, 3))), nx.constant(rng.normal(size=2))
    bank = nx.constant(rng.normal(size=(3, 4)))
    vector = nx.constant(rng.normal(size=4))
    operands = [x, w, gain, bias, image, kernel, kbias, bank, vector]
    before = [t.data.tobytes() for t in operands]

    nx.matmul(x, w)
    nx.transpose(x)
    nx.reshape(x, (16,))
    nx.concat([x, w], axis=0)
    nx.add(x, w)
    nx.sub(x, w)
    nx.mul(x, w)
    nx.scale(x, 3.0)
    nx.add_bias(x, bias)
    nx.relu(x)
    nx.sigmoid(x)
    nx.absolute(x)
    nx.sum_all(x)
    nx.mean_all(x)
    nx.row_variance(x)
    nx.softmax_rows(x)
    nx.layer_norm(x, gain, bias)
    nx.conv2d_3x3(image, kernel, kbias)
    nx.upsample2x(image)
    nx.pairwise_abs_diff(vector)
    nx.gather_rows(x, np.array([3, 0, 3]))
    nx.embed_add(x, np.array([0, 2, 1, 2]), bank)
    nx.scatter_matrix(vector, np.array([0, 1, 2, 3]), np.array([3, 2, 1, 0]), (4, 4))

    assert [t.data.tobytes() for t in operands] == before
    print("  ✅ inputs bitwise unchanged")


def test_upsample_backward_sums_blocks():
    x = nx.parameter(np.random.default_rng(8).normal(size=(2, 3, 5)), "x")
    with nx.Tape() as tape:
        y = nx.upsample2x(x)
        loss = nx.sum_all(y)
    assert y.data.sum() == pytest.approx(4 * x.data.sum(), rel=1e-12)
    nx.backward(loss, tape)
    assert_array_equal(x.grad, np.full((2, 3, 5), 4.0))


def test_numeric_gradient_restores_input():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4))
    snapshot = x.copy()
    grad = nx.numeric_gradient(lambda v: float(np.sum(v * v)), x)
    assert_allclose(grad, 2 * snapshot, atol=1e-6)
    assert x.tobytes() == snapshot.tobytes()


def run_all_tests():
    """Run the numerics test suite"""
    print("🧮 Numerics Test Suite")
    print("=" * 50)

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    results = []
    for test_name, test_func in tests:
        try:
            test_func()
            results.append((test_name, True))
        except Exception as e:
            print(f"❌ {test_name} failed: {e}")
            results.append((test_name, False))

    print(f"\n{'='*20} TEST SUMMARY {'='*20}")
    for test_name, success in results:
        print(f"{'✅ PASS' if success else '❌ FAIL'} {test_name}")
    passed = sum(1 for _, success in results if success)
    print(f"\nOverall Result: {passed}/{len(results)} tests passed")
    return passed == len(results)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Test the numerics kernel")
    parser.add_argument("--test", "-t", default="all", help="test name without the test_ prefix, or 'all'")
    args = parser.parse_args()

    if args.test == "all":
        success = run_all_tests()
    else:
        globals()[f"test_{args.test}"]()
        success = True
    exit(0 if success else 1)
