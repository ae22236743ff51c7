"""2D real FFT of sagittal slices with Hermitian-symmetric packing.

A real H x W slice transforms to H x (W/2 + 1) complex coefficients; the
real and imaginary parts are stored as two separate planes. Both directions
use orthonormal scaling (1/sqrt(H*W)), so the transform is its own adjoint
up to conjugation and Parseval holds exactly.

The transform kernel is an iterative radix-2 Cooley-Tukey FFT for
power-of-two lengths with a direct DFT fallback for other (even) extents.
Correctness is pinned by the naive double-sum DFT oracle in the tests, not
by the algorithm choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, UnsupportedExtentError


@dataclass
class KSpacePlanes:
    """Packed half-spectra of the D sagittal slices of one volume.

    ``real`` and ``imag`` have shape (depth, height, packed_width) with
    packed_width = W/2 + 1. Columns 0 and packed_width-1 are the
    self-conjugate columns of the real FFT.
    """

    real: np.ndarray
    imag: np.ndarray
    norm: str = "ortho"

    @property
    def depth(self) -> int:
        return self.real.shape[0]

    @property
    def height(self) -> int:
        return self.real.shape[1]

    @property
    def packed_width(self) -> int:
        return self.real.shape[2]

    @property
    def width(self) -> int:
        return 2 * (self.packed_width - 1)


def _fft1d(x: np.ndarray, sign: int) -> np.ndarray:
    """Unscaled DFT along the last axis: sum_j x_j exp(sign*2i*pi*jk/n).

    Radix-2 when n is a power of two, otherwise a direct transform. The
    input may have arbitrary leading (batch) dimensions.
    """
    n = x.shape[-1]
    x = np.asarray(x, dtype=np.complex128)
    if n & (n - 1) == 0:
        return _fft_radix2(x, sign)
    k = np.arange(n)
    twiddle = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    return x @ twiddle


def _fft_radix2(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    levels = n.bit_length() - 1
    # bit-reversal permutation
    rev = np.zeros(n, dtype=np.intp)
    for i in range(n):
        rev[i] = int(format(i, f"0{levels}b")[::-1], 2) if levels else 0
    y = x[..., rev].copy()
    half = 1
    while half < n:
        theta = sign * np.pi / half
        w = np.exp(1j * theta * np.arange(half))
        y = y.reshape(x.shape[:-1] + (n // (2 * half), 2 * half))
        even = y[..., :half]
        odd = y[..., half:] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        y = y.reshape(x.shape)
        half *= 2
    return y


def _fft2(plane: np.ndarray, sign: int) -> np.ndarray:
    """Unscaled 2D DFT over the last two axes."""
    rows = _fft1d(plane, sign)
    return np.swapaxes(_fft1d(np.swapaxes(rows, -1, -2), sign), -1, -2)


def rfft2_pack(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward orthonormal 2D DFT of a real H x W plane, packed.

    Returns the (real, imag) H x (W/2+1) planes of the non-redundant
    half-spectrum. Batching over leading axes is supported.
    """
    h, w = plane.shape[-2], plane.shape[-1]
    if h < 2 or w < 2:
        raise UnsupportedExtentError(f"plane extents must be >= 2, got {h}x{w}")
    if w % 2:
        raise UnsupportedExtentError(
            f"packing requires an even width, got width {w}"
        )
    spectrum = _fft2(np.asarray(plane, dtype=np.float64), sign=-1)
    spectrum *= 1.0 / np.sqrt(h * w)
    packed = spectrum[..., : w // 2 + 1]
    return np.ascontiguousarray(packed.real), np.ascontiguousarray(packed.imag)


def irfft2_unpack(real: np.ndarray, imag: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`rfft2_pack` under orthonormal scaling.

    Planes that do not satisfy the self-conjugacy of a true real spectrum
    (e.g. model predictions) are decoded by taking the real part of the
    inverse transform, which is the orthogonal projection onto real images.
    """
    real = np.asarray(real, dtype=np.float64)
    imag = np.asarray(imag, dtype=np.float64)
    if real.shape != imag.shape:
        raise DimensionError(
            f"real/imag plane shapes differ: {real.shape} vs {imag.shape}"
        )
    h, wp = real.shape[-2], real.shape[-1]
    if wp < 2:
        raise DimensionError(f"packed width must be >= 2, got {wp}")
    w = 2 * (wp - 1)
    half = real + 1j * imag
    full = np.zeros(real.shape[:-1] + (w,), dtype=np.complex128)
    full[..., :wp] = half
    if wp > 2:
        # X[k1, k2] = conj(X[-k1 mod H, W - k2]) for the redundant columns
        rows = (-np.arange(h)) % h
        mirrored = np.conj(half[..., rows, :])
        full[..., wp:] = mirrored[..., w - np.arange(wp, w)]
    image = _fft2(full, sign=+1)
    image *= 1.0 / np.sqrt(h * w)
    return np.ascontiguousarray(image.real)


def volume_to_kspace(volume: np.ndarray) -> KSpacePlanes:
    """Apply :func:`rfft2_pack` independently to each sagittal slice."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise DimensionError(f"expected a D x H x W volume, got {volume.shape}")
    real, imag = rfft2_pack(volume)
    return KSpacePlanes(real=real, imag=imag)


def kspace_to_volume(planes: KSpacePlanes) -> np.ndarray:
    """Invert :func:`volume_to_kspace`."""
    return irfft2_unpack(planes.real, planes.imag)


def labels_to_kspace(labels: np.ndarray, num_classes: int) -> list[KSpacePlanes]:
    """One-hot encode labels per class, then transform each class channel."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError(f"expected a D x H x W label volume, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"label values must lie in [0, {num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    return [
        volume_to_kspace((labels == c).astype(np.float64))
        for c in range(num_classes)
    ]


def packed_feature_count(height: int, width: int) -> int:
    """Stored reals per slice: 2 * H * (W/2 + 1)."""
    return 2 * height * (width // 2 + 1)


def planes_to_features(planes: KSpacePlanes) -> np.ndarray:
    """Flatten packed planes to (D, 2*H*Wp) per-slice feature rows."""
    d = planes.depth
    return np.concatenate(
        [planes.real.reshape(d, -1), planes.imag.reshape(d, -1)], axis=1
    )


def features_to_planes(features: np.ndarray, height: int, width: int) -> KSpacePlanes:
    """Inverse of :func:`planes_to_features` for given slice extents."""
    wp = width // 2 + 1
    per_plane = height * wp
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2 * per_plane:
        raise DimensionError(
            f"expected (D, {2 * per_plane}) features for {height}x{width} slices, "
            f"got {features.shape}"
        )
    d = features.shape[0]
    real = features[:, :per_plane].reshape(d, height, wp)
    imag = features[:, per_plane:].reshape(d, height, wp)
    return KSpacePlanes(real=np.ascontiguousarray(real), imag=np.ascontiguousarray(imag))
