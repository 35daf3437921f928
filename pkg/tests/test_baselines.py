import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from faceanon.baselines import BaselineSpec, apply_in_box, blur, gaussian_kernel, mask_region, pixelize
from faceanon.errors import ConfigError

images = arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 20), st.just(3)),
                elements=st.floats(0, 1))


def test_pixelize_constant_unchanged():
    img = np.full((10, 13, 3), 0.4)
    np.testing.assert_allclose(pixelize(img, 4), img, rtol=1e-15)


def test_pixelize_hand_mean():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None].repeat(3, 2)
    np.testing.assert_allclose(pixelize(img, 2), 0.5)


def test_pixelize_partial_edge_tiles():
    img = np.arange(9.0).reshape(3, 3)[..., None].repeat(3, 2)
    out = pixelize(img, 2)
    assert out[0, 0, 0] == np.mean([0, 1, 3, 4])
    assert out[2, 2, 0] == 8.0
    assert out[0, 2, 0] == np.mean([2, 5])


@settings(max_examples=40)
@given(images, st.integers(1, 6))
def test_pixelize_idempotent_and_in_range(img, b):
    once = pixelize(img, b)
    np.testing.assert_allclose(pixelize(once, b), once, atol=1e-12)
    assert once.shape == img.shape
    assert once.min() >= img.min() - 1e-12 and once.max() <= img.max() + 1e-12


@settings(max_examples=20)
@given(images)
def test_pixelize_block_one_is_identity(img):
    np.testing.assert_array_equal(pixelize(img, 1), img)


def test_blur_constant_unchanged():
    img = np.full((20, 20, 3), 0.7)
    np.testing.assert_allclose(blur(img, 9), img, atol=1e-12)


def test_blur_impulse_gives_kernel():
    img = np.zeros((41, 41, 3))
    img[20, 20] = 1.0
    k = gaussian_kernel(17)
    out = blur(img, 17)
    np.testing.assert_allclose(out[12:29, 12:29, 0], np.outer(k, k), atol=1e-15)
    assert gaussian_kernel(9).sum() == pytest.approx(1.0, abs=1e-15)


def test_gaussian_kernel_sigma_default():
    k = gaussian_kernel(9)
    x = np.arange(-4, 5)
    ref = np.exp(-0.5 * (x / 1.5) ** 2)
    np.testing.assert_allclose(k, ref / ref.sum(), rtol=1e-14)


def test_blur_preserves_interior_mass():
    img = np.zeros((50, 50, 3))
    img[20:30, 22:27] = np.random.default_rng(0).random((10, 5, 3))
    assert blur(img, 17).sum() == pytest.approx(img.sum(), abs=1e-6)


@settings(max_examples=20)
@given(arrays(np.float64, (12, 15, 3), elements=st.floats(0, 1)), st.sampled_from([1, 3, 9, 17]))
def test_blur_commutes_with_flip(img, k):
    np.testing.assert_allclose(blur(img[:, ::-1], k), blur(img, k)[:, ::-1], atol=1e-9)


def test_blur_rejects_even_kernel():
    with pytest.raises(ConfigError):
        blur(np.zeros((5, 5, 3)), 4)


def test_mask_region():
    img = np.random.default_rng(1).random((8, 8, 3))
    np.testing.assert_array_equal(mask_region(img, np.zeros((8, 8), bool)), img)
    np.testing.assert_array_equal(mask_region(img, np.ones((8, 8), bool), 0.2), np.full_like(img, 0.2))
    m = np.zeros((8, 8), bool)
    m[2:5, 3:7] = True
    out = mask_region(img, m)
    assert np.all(out[m] == 0) and np.all(out[~m] == img[~m])


def test_spec_validation_and_box():
    with pytest.raises(ConfigError):
        BaselineSpec("sharpen", 3)
    with pytest.raises(ConfigError):
        BaselineSpec("blur", 8)
    img = np.random.default_rng(2).random((20, 20, 3))
    out = apply_in_box(img, BaselineSpec("pixelize", 4), (4, 4, 12, 12))
    np.testing.assert_array_equal(out[:4], img[:4])
    np.testing.assert_array_equal(out[:, 12:], img[:, 12:])
    assert not np.array_equal(out[4:12, 4:12], img[4:12, 4:12])
