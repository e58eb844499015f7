import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deyo_lab.errors import ConfigurationError, DimensionError
from deyo_lab.numerics import make_rng
from deyo_lab.transforms import (
    TransformSpec,
    apply_transform,
    center_occlusion,
    gaussian_noise,
    patch_shuffle,
    pixel_shuffle,
)

unit = st.floats(0, 1, allow_nan=False)


def images(h=8, w=8, c=3):
    return arrays(np.float64, (h, w, c), elements=unit)


def test_patch_shuffle_single_patch_is_identity():
    img = make_rng(0).random((6, 6, 2))
    np.testing.assert_array_equal(patch_shuffle(img, 1, make_rng(1)), img)


def test_patch_shuffle_identity_permutation():
    img = make_rng(0).random((8, 8, 3))
    np.testing.assert_array_equal(patch_shuffle(img, 4, perm=np.arange(16)), img)


def test_patch_shuffle_swap_corners_matches_hand_oracle():
    img = np.arange(16, dtype=float).reshape(4, 4)
    # patches (row-major): 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right
    out = patch_shuffle(img, 2, perm=[3, 1, 2, 0])[:, :, 0]
    expected = np.array(
        [
            [10, 11, 2, 3],
            [14, 15, 6, 7],
            [8, 9, 0, 1],
            [12, 13, 4, 5],
        ],
        dtype=float,
    )
    np.testing.assert_array_equal(out, expected)


def test_patch_shuffle_indivisible():
    with pytest.raises(DimensionError):
        patch_shuffle(np.zeros((28, 28, 3)), 5, make_rng(0))
    with pytest.raises(DimensionError):
        apply_transform(np.zeros((2, 28, 28, 3)), TransformSpec("patch_shuffle", patch_grid=3), make_rng(0))


def test_default_grid_divides_28():
    spec = TransformSpec()
    assert spec.kind == "patch_shuffle" and spec.patch_grid == 4 and 28 % spec.patch_grid == 0


def test_pixel_shuffle_constant_image():
    img = np.full((5, 5, 3), 0.3)
    np.testing.assert_array_equal(pixel_shuffle(img, make_rng(0)), img)


def test_pixel_shuffle_transposition_oracle():
    img = np.array([[[0.1, 0.2], [0.3, 0.4]], [[0.5, 0.6], [0.7, 0.8]]])
    # swap flat positions 0 and 3; channels travel together
    out = pixel_shuffle(img, perm=[3, 1, 2, 0])
    expected = np.array([[[0.7, 0.8], [0.3, 0.4]], [[0.5, 0.6], [0.1, 0.2]]])
    np.testing.assert_array_equal(out, expected)


def test_occlusion_center_block_4x4():
    img = np.arange(16, dtype=float).reshape(4, 4, 1)
    out = center_occlusion(img, 0.25)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    np.testing.assert_array_equal(out[~mask], img[~mask])
    np.testing.assert_array_equal(out[mask], 7.5)


def test_occlusion_near_full_coverage():
    img = make_rng(2).random((28, 28, 3))
    out = center_occlusion(img, 0.999)
    np.testing.assert_allclose(out, np.broadcast_to(img.mean(axis=(0, 1)), img.shape), atol=0)


def test_occlusion_border_untouched_quarter():
    img = make_rng(3).random((28, 28, 3))
    out = center_occlusion(img, 0.25)
    np.testing.assert_array_equal(out[:7], img[:7])
    np.testing.assert_array_equal(out[21:], img[21:])
    np.testing.assert_array_equal(out[:, :7], img[:, :7])
    np.testing.assert_array_equal(out[:, 21:], img[:, 21:])


def test_occlusion_fraction_range():
    with pytest.raises(ValueError):
        center_occlusion(np.zeros((4, 4, 1)), 1.0)
    with pytest.raises(ConfigurationError):
        TransformSpec("center_occlusion", occlusion_fraction=0.0)


def test_noise_sigma_zero():
    img = make_rng(0).random((4, 4, 3))
    np.testing.assert_array_equal(gaussian_noise(img, 0.0, make_rng(1)), img)


def test_noise_std_monte_carlo():
    img = np.full((100, 100, 1), 0.5)  # 10^4 draws
    out = gaussian_noise(img, 0.1, make_rng(9))
    assert abs(out.std() - 0.1) < 0.005


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        TransformSpec("augmix")


def test_kind_aliases():
    assert TransformSpec("pixel").kind == "pixel_shuffle"
    assert TransformSpec("occlusion").kind == "center_occlusion"
    assert TransformSpec("patch").kind == "patch_shuffle"


@settings(max_examples=40)
@given(images(), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**32 - 1))
def test_patch_shuffle_preserves_multiset(img, n, seed):
    out = patch_shuffle(img, n, make_rng(seed))
    np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(img, axis=None))


@settings(max_examples=40)
@given(images(), st.integers(0, 2**32 - 1))
def test_pixel_shuffle_preserves_pixels_and_means(img, seed):
    out = pixel_shuffle(img, make_rng(seed))
    rows = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    np.testing.assert_array_equal(
        rows(out)[np.lexsort(rows(out).T)], rows(img)[np.lexsort(rows(img).T)]
    )
    np.testing.assert_allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), rtol=0, atol=1e-15)


@settings(max_examples=40)
@given(
    arrays(np.float64, (3, 8, 8, 2), elements=unit),
    st.sampled_from(["patch_shuffle", "pixel_shuffle", "center_occlusion", "gaussian_noise", "identity"]),
    st.integers(0, 2**32 - 1),
)
def test_batch_transforms_stay_in_range_and_are_deterministic(batch, kind, seed):
    spec = TransformSpec(kind, patch_grid=2, occlusion_fraction=0.3, noise_sigma=0.5)
    a = apply_transform(batch, spec, make_rng(seed))
    b = apply_transform(batch, spec, make_rng(seed))
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    if kind in ("patch_shuffle", "pixel_shuffle", "identity"):
        for i in range(len(batch)):
            np.testing.assert_array_equal(np.sort(a[i], axis=None), np.sort(batch[i], axis=None))


def test_batch_draws_a_permutation_per_image():
    img = np.arange(64, dtype=float).reshape(8, 8, 1) / 64
    batch = np.repeat(img[None], 4, axis=0)
    out = apply_transform(batch, TransformSpec("patch_shuffle", patch_grid=4), make_rng(0))
    assert len({out[i].tobytes() for i in range(4)}) > 1


def test_batch_occlusion_matches_single_image():
    batch = make_rng(5).random((3, 28, 28, 3))
    out = apply_transform(batch, TransformSpec("center_occlusion", occlusion_fraction=0.5), make_rng(0))
    for i in range(3):
        np.testing.assert_array_equal(out[i], center_occlusion(batch[i], 0.5))
