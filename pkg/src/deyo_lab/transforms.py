"""Object-destructive and corruption transforms on (H, W, C) images in [0, 1].

Batch helpers draw a fresh permutation for every image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError

TRANSFORM_KINDS = ("patch_shuffle", "pixel_shuffle", "center_occlusion", "gaussian_noise", "identity")
KIND_ALIASES = {
    "patch": "patch_shuffle",
    "pixel": "pixel_shuffle",
    "occlusion": "center_occlusion",
    "occ": "center_occlusion",
    "noise": "gaussian_noise",
}


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "patch_shuffle"
    patch_grid: int = 4
    occlusion_fraction: float = 0.5
    noise_sigma: float = 0.1

    def __post_init__(self):
        kind = KIND_ALIASES.get(self.kind, self.kind)
        if kind not in TRANSFORM_KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.patch_grid < 1:
            raise ConfigurationError("patch_grid must be >= 1")
        if not 0.0 < self.occlusion_fraction < 1.0:
            raise ConfigurationError("occlusion_fraction must lie in (0, 1)")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DimensionError(f"expected an (H, W, C) image, got shape {img.shape}")
    return img


def _patches(images, n):
    """(N, H, W, C) -> (N, n*n, ph, pw, C) in row-major patch order."""
    N, H, W, C = images.shape
    if H % n or W % n:
        raise DimensionError(f"{H}x{W} image is not divisible into a {n}x{n} patch grid")
    ph, pw = H // n, W // n
    return images.reshape(N, n, ph, n, pw, C).transpose(0, 1, 3, 2, 4, 5).reshape(N, n * n, ph, pw, C)


def _unpatch(patches, n, shape):
    N, H, W, C = shape
    ph, pw = H // n, W // n
    return patches.reshape(N, n, n, ph, pw, C).transpose(0, 1, 3, 2, 4, 5).reshape(shape)


def _random_perms(rng, count, size):
    return np.argsort(rng.random((count, size)), axis=1, kind="stable")


def patch_shuffle(img, n, rng=None, perm=None):
    """Cut into an n x n grid and rearrange the patches.

    Output patch slot ``k`` receives input patch ``perm[k]``.  Without an
    explicit ``perm`` a uniform random permutation is drawn from ``rng``.
    """
    img = _as_image(img)
    patches = _patches(img[None], n)[0]
    if perm is None:
        perm = _random_perms(rng, 1, n * n)[0]
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(n * n)):
        raise ValueError("perm must be a permutation of range(n*n)")
    return _unpatch(patches[perm][None], n, (1,) + img.shape)[0]


def pixel_shuffle(img, rng=None, perm=None):
    """Permute pixel positions; the channels of a pixel move together."""
    img = _as_image(img)
    H, W, C = img.shape
    flat = img.reshape(H * W, C)
    if perm is None:
        perm = _random_perms(rng, 1, H * W)[0]
    return flat[np.asarray(perm)].reshape(H, W, C)


def _occlusion_box(H, W, fraction):
    side_h = int(round(np.sqrt(fraction) * H))
    side_w = int(round(np.sqrt(fraction) * W))
    top, left = (H - side_h) // 2, (W - side_w) // 2
    return top, top + side_h, left, left + side_w


def center_occlusion(img, fraction):
    """Fill the central square covering ``fraction`` of the area with the mean colour."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    img = _as_image(img)
    out = img.copy()
    r0, r1, c0, c1 = _occlusion_box(img.shape[0], img.shape[1], fraction)
    out[r0:r1, c0:c1, :] = img.mean(axis=(0, 1))
    return out


def gaussian_noise(img, sigma, rng):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = _as_image(img)
    if sigma == 0:
        return img.copy()
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def apply_transform(images, spec: TransformSpec, rng) -> np.ndarray:
    """Apply ``spec`` independently to every image of an (N, H, W, C) batch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    N, H, W, C = images.shape
    kind = spec.kind
    if kind == "identity":
        return images.copy()
    if kind == "patch_shuffle":
        n = spec.patch_grid
        patches = _patches(images, n)
        perms = _random_perms(rng, N, n * n)
        shuffled = np.take_along_axis(patches, perms[:, :, None, None, None], axis=1)
        return _unpatch(shuffled, n, images.shape)
    if kind == "pixel_shuffle":
        flat = images.reshape(N, H * W, C)
        perms = _random_perms(rng, N, H * W)
        return np.take_along_axis(flat, perms[:, :, None], axis=1).reshape(images.shape)
    if kind == "center_occlusion":
        out = images.copy()
        r0, r1, c0, c1 = _occlusion_box(H, W, spec.occlusion_fraction)
        out[:, r0:r1, c0:c1, :] = images.mean(axis=(1, 2))[:, None, None, :]
        return out
    if kind == "gaussian_noise":
        if spec.noise_sigma == 0:
            return images.copy()
        return np.clip(images + rng.normal(0.0, spec.noise_sigma, size=images.shape), 0.0, 1.0)
    raise ConfigurationError(f"unknown transform kind {kind!r}")
