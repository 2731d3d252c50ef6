"""Smoke tests for the python bindings.

Run against an in-tree CMake build with
``PYTHONPATH=python pytest tests/python`` (the build drops ``_seibw`` into
``python/seibw/``), or against an installed wheel.
"""

import math

import numpy as np
import pytest

import seibw


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    eye = np.eye(2)
    np.testing.assert_allclose(seibw.matmul(a, eye), a)


def test_conv2d_unit_kernel_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
    k = np.ones((1, 1, 1, 1))
    np.testing.assert_allclose(seibw.conv2d(x, k), x)


def test_avg_pool_mean():
    x = np.array([[[[1.0, 3.0], [5.0, 7.0]]]])
    out = seibw.avg_pool2d(x, 2, 2)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(4.0)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).normal(size=(6, 9)) * 10
    s = seibw.softmax(x)
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(6), atol=1e-12)


def test_lif_forward_basic_dynamics():
    seq = np.array([[1.2], [0.0]])  # T=2, one neuron
    spikes, u, v = seibw.lif_forward(seq, threshold=1.0, leak=0.1)
    assert spikes[0, 0] == 1.0
    assert u[0, 0] == pytest.approx(1.2)
    assert v[1, 0] == pytest.approx(0.2)  # subtract reset
    assert u[1, 0] == pytest.approx(0.02)  # leaked remainder
    # membrane identity per step
    np.testing.assert_allclose(v[1:], u - 1.0 * spikes)


def test_triangle_surrogate_shape():
    u = np.array([1.0, 2.0, 1.5])
    g = seibw.triangle_surrogate(u, threshold=1.0, surrogate_width=1.0)
    np.testing.assert_allclose(g, [1.0, 0.0, 0.5])


def test_binarize_and_ste():
    w = np.array([[0.5, -1.5], [2.0, -1.0]])
    wb, a = seibw.binarize_weights(w)
    assert a == pytest.approx(1.25)
    np.testing.assert_allclose(np.abs(wb), a)
    grad = seibw.ste_weight_gradient(np.full_like(w, 2.0), w)
    np.testing.assert_allclose(grad, [[2.0, 0.0], [0.0, 0.0]])


def test_sws_standardize_row():
    w = np.array([[1.0, 2.0, 3.0]])
    out = seibw.sws_standardize(w, gamma=2.74)
    assert out[0, 1] == pytest.approx(0.0, abs=1e-9)
    assert out[0, 2] == pytest.approx(1.93747, rel=1e-4)


def test_losses_agree_with_closed_forms():
    logits = np.zeros((2, 3, 2))  # uniform
    loss, grad = seibw.tet_ce_loss(logits, [0, 1, 0])
    assert loss == pytest.approx(math.log(2.0))
    assert grad.shape == logits.shape

    teacher = np.full((3, 2), 0.5)
    kl, _ = seibw.kl_snn_loss(logits, teacher)
    assert kl == pytest.approx(0.0, abs=1e-12)

    reg, _ = seibw.membrane_regularizer(np.full((1, 1, 1), 2.0), 1.0)
    assert reg == pytest.approx(1.0)

    total, _ = seibw.combined_loss(logits, teacher, [0, 1, 0], lambda_reg=1.0)
    reg_only, _ = seibw.membrane_regularizer(logits, 1.0)
    assert total == pytest.approx(reg_only)


def test_cosine_lr_endpoints():
    assert seibw.cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert seibw.cosine_lr(0.1, 10, 10) == pytest.approx(0.0)


def test_binary_dot_matches_float_dot():
    rng = np.random.default_rng(7)
    w = rng.normal(size=257)
    spikes = (rng.random(257) < 0.4).astype(np.float64)
    wb, a = seibw.binarize_weights(w)
    want = float(wb @ spikes)
    got = seibw.binary_dot(w, spikes)
    assert got == pytest.approx(want, abs=1e-9)


def test_direct_encode_repeats():
    sample = np.arange(12.0).reshape(3, 4)
    enc = seibw.direct_encode(sample, 4)
    assert enc.shape == (4, 3, 4)
    for t in range(4):
        np.testing.assert_array_equal(enc[t], sample)


def test_container_round_trip(tmp_path):
    path = str(tmp_path / "t.seib")
    records = {"weights": np.arange(6, dtype=np.float32).reshape(2, 3)}
    seibw.write_container(path, records)
    loaded = seibw.read_container(path)
    np.testing.assert_array_equal(loaded["weights"], records["weights"])
