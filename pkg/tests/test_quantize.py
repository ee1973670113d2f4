import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnnvpr.quantize import (
    QuantizationError,
    clip_proxies,
    kbit_codes,
    kbit_quantize,
    levels,
    sign_quantize,
    ste_activation_grad,
    ste_weight_grad,
    uniform_quantize,
)
from bnnvpr.train import KBitWeight, SignActivation, SignWeight, kbit_codes_torch

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_sign_examples():
    np.testing.assert_array_equal(sign_quantize([0.5, -0.3, 0.0]), [1.0, -1.0, 1.0])


def test_sign_rejects_non_finite():
    with pytest.raises(QuantizationError):
        sign_quantize([1.0, np.nan])
    with pytest.raises(QuantizationError):
        sign_quantize([np.inf])


def test_kbit_unsupported():
    with pytest.raises(QuantizationError):
        kbit_quantize([0.1], 3)


def test_kbit_one_is_sign():
    w = np.array([-0.2, 0.0, 0.7])
    np.testing.assert_array_equal(kbit_quantize(w, 1), sign_quantize(w))


def test_two_bit_codebook_at_zero():
    # 4 levels: -1, -1/3, 1/3, 1. Zero sits halfway between +-1/3; ties round up.
    np.testing.assert_allclose(levels(2), [-1, -1 / 3, 1 / 3, 1])
    assert uniform_quantize([0.0], 2)[0] == pytest.approx(1 / 3)


def test_eight_bit_levels_and_endpoints():
    w = np.linspace(-1, 1, 4096)
    q = kbit_quantize(w, 8)
    assert len(np.unique(q)) == 256
    assert q.min() == -1.0 and q.max() == 1.0


@pytest.mark.parametrize("k", [2, 4, 8])
def test_uniform_error_bound(k):
    x = np.linspace(-1, 1, 10001)
    spacing = 2.0 / ((1 << k) - 1)
    assert np.max(np.abs(uniform_quantize(x, k) - x)) <= spacing / 2 + 1e-12


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 50), elements=finite), st.sampled_from([2, 4, 8]))
def test_kbit_values_on_grid(w, k):
    q = kbit_quantize(w, k)
    assert np.all(np.abs(q) <= 1.0)
    assert np.all(np.isin(np.round(q, 9), np.round(levels(k), 9)))


@settings(max_examples=50)
@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-3, 3, width=32)), st.sampled_from([2, 4, 8]))
def test_torch_and_numpy_kbit_codes_agree(w, k):
    got = kbit_codes_torch(torch.from_numpy(w.astype(np.float64)), k).numpy()
    np.testing.assert_array_equal(got, kbit_codes(w.astype(np.float64), k))


def test_weight_grad_identity():
    np.testing.assert_array_equal(ste_weight_grad([0.1, -2.0]), [0.1, -2.0])
    np.testing.assert_array_equal(ste_weight_grad(np.zeros(3)), np.zeros(3))


def test_activation_grad_examples():
    assert ste_activation_grad([3.0], [0.5])[0] == 3.0
    assert ste_activation_grad([3.0], [1.7])[0] == 0.0
    np.testing.assert_array_equal(ste_activation_grad([2.0, 2.0], [1.0, -1.0]), [2.0, 2.0])


def test_clip_after_update_keeps_proxy_at_bound():
    w = np.array([1.0, -1.0, 0.2])
    grad = np.array([-0.5, 0.5, 0.0])  # descent pushes the first two outward
    np.testing.assert_array_equal(clip_proxies(w - grad), [1.0, -1.0, 0.2])


def test_autograd_sign_matches_reference_rules():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(0, 1.5, (4, 7, 5))
        a.flat[:3] = [1.0, -1.0, 0.0]
        g = rng.normal(size=a.shape)
        x = torch.tensor(a, requires_grad=True)
        SignActivation.apply(x).backward(torch.tensor(g))
        np.testing.assert_array_equal(x.grad.numpy(), ste_activation_grad(g, a))
        np.testing.assert_array_equal(SignActivation.apply(torch.tensor(a)).numpy(), sign_quantize(a))

        w = torch.tensor(a, requires_grad=True)
        SignWeight.apply(w).backward(torch.tensor(g))
        np.testing.assert_array_equal(w.grad.numpy(), ste_weight_grad(g))

        wk = torch.tensor(a, requires_grad=True)
        KBitWeight.apply(wk, 4).backward(torch.tensor(g))
        np.testing.assert_array_equal(wk.grad.numpy(), ste_weight_grad(g))
