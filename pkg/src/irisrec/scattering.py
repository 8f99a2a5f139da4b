"""Two-order scattering cascade over a Morlet filter bank.

The bank holds J*L complex Morlet band-pass filters at dyadic scales 2^j
and orientations pi*t/L, plus one Gaussian low-pass at scale 2^J, all in
the frequency domain.  Convolutions are frequency-domain products, i.e.
circular boundary handling.  The cascade alternates wavelet convolution
and complex modulus:

    order0            = |x (*) phi|
    order1[j1,t1]     = ||x (*) psi_{j1,t1}| (*) phi|
    order2[j1,t1,j2,t2] = |||x (*) psi_{j1,t1}| (*) psi_{j2,t2}| (*) phi|,  j2 > j1

The psi family is rescaled so its Littlewood-Paley sum peaks at exactly 1,
which guarantees energy never grows from one order to the next; phi keeps
unit DC gain so the zeroth order preserves the image mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cnn import FeatureVector
from .dataset import ImageTensor

# Envelope width per unit dyadic scale and the mother-wavelet center
# frequency; the (0.8, 3pi/4) pairing tiles the half-plane with the usual
# one-octave spacing.
SIGMA0 = 0.8
XI0 = 3.0 * np.pi / 4.0
SLANT_NUMERATOR = 4.0


class ScatteringError(Exception):
    pass


class IndivisibleSizeError(ScatteringError):
    pass


class SizeMismatchError(ScatteringError):
    pass


def _gabor(h: int, w: int, sigma: float, theta: float, xi: float, slant: float):
    """Periodized complex Gabor on the (row, col) grid, centered at the origin."""
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    acc = np.zeros((h, w), dtype=np.complex128)
    for dy in (-h, 0, h):
        for dx in (-w, 0, w):
            u = rows + dy
            v = cols + dx
            along = u * cos_t + v * sin_t
            across = -u * sin_t + v * cos_t
            envelope = np.exp(-(along**2 + (slant * across) ** 2) / (2.0 * sigma**2))
            acc += envelope * np.exp(1j * xi * along)
    return acc / (2.0 * np.pi * sigma**2 / slant)


def _morlet(h: int, w: int, sigma: float, theta: float, xi: float, slant: float):
    # Subtracting the DC-matched envelope zeroes the mean exactly.
    wave = _gabor(h, w, sigma, theta, xi, slant)
    envelope = _gabor(h, w, sigma, theta, 0.0, slant).real
    return wave - (wave.sum() / envelope.sum()) * envelope


@dataclass(frozen=True)
class FilterBank:
    """Frequency-domain Morlet band-pass filters plus one Gaussian low-pass."""

    J: int
    L: int
    size: tuple  # (H, W)
    psi: dict  # (j, theta index) -> complex (H, W) frequency response
    phi: np.ndarray  # complex (H, W) frequency response, unit DC gain

    def psi_keys(self):
        return [(j, t) for j in range(self.J) for t in range(self.L)]

    def pair_keys(self):
        return [
            (j1, t1, j2, t2)
            for j1 in range(self.J)
            for t1 in range(self.L)
            for j2 in range(j1 + 1, self.J)
            for t2 in range(self.L)
        ]


def build_filter_bank(J: int, L: int, size) -> FilterBank:
    """Morlet filters at scales 2^0 .. 2^(J-1) and orientations pi*t/L."""
    if J < 1 or L < 1:
        raise ValueError("J and L must be >= 1")
    h, w = (int(v) for v in size)
    if h % (1 << J) or w % (1 << J):
        raise IndivisibleSizeError(f"size {h}x{w} not divisible by 2^J = {1 << J}")

    slant = SLANT_NUMERATOR / L
    psi = {}
    for j in range(J):
        for t in range(L):
            theta = np.pi * t / L
            spatial = _morlet(h, w, SIGMA0 * 2**j, theta, XI0 / 2**j, slant)
            psi[(j, t)] = np.fft.fft2(spatial)

    # Rescale so max_omega sum_lambda |psi_hat|^2 == 1 (energy bound).
    lp = np.zeros((h, w))
    for response in psi.values():
        lp += np.abs(response) ** 2
    scale = 1.0 / np.sqrt(lp.max())
    psi = {key: response * scale for key, response in psi.items()}
    for response in psi.values():
        response.setflags(write=False)

    envelope = _gabor(h, w, SIGMA0 * 2**J, 0.0, 0.0, 1.0).real
    phi = np.fft.fft2(envelope / envelope.sum())
    phi.setflags(write=False)
    return FilterBank(J=J, L=L, size=(h, w), psi=psi, phi=phi)


@dataclass(frozen=True)
class ScatteringMaps:
    """Nonnegative scattering images, keyed in canonical index order."""

    order0: np.ndarray
    order1: dict  # (j1, t1) -> map
    order2: dict  # (j1, t1, j2, t2), j2 > j1 -> map


def _lowpass(spectrum: np.ndarray, phi: np.ndarray) -> np.ndarray:
    # Clamp the ~1e-16 negatives that circular convolution roundoff leaves.
    return np.maximum(np.fft.ifft2(spectrum * phi).real, 0.0)


def scatter(img: ImageTensor, bank: FilterBank) -> ScatteringMaps:
    """Run the two-order cascade on a grayscale image matching the bank size."""
    if img.channels != 1:
        raise SizeMismatchError("scattering needs a single-channel image")
    if (img.height, img.width) != bank.size:
        raise SizeMismatchError(
            f"image {img.height}x{img.width} vs bank {bank.size[0]}x{bank.size[1]}"
        )
    x = img.data[:, :, 0].astype(np.float64)
    x_hat = np.fft.fft2(x)

    order0 = np.abs(np.fft.ifft2(x_hat * bank.phi).real)
    order1 = {}
    order1_hat = {}
    for key in bank.psi_keys():
        modulus = np.abs(np.fft.ifft2(x_hat * bank.psi[key]))
        modulus_hat = np.fft.fft2(modulus)
        order1[key] = _lowpass(modulus_hat, bank.phi)
        order1_hat[key] = modulus_hat

    order2 = {}
    for j1, t1, j2, t2 in bank.pair_keys():
        modulus = np.abs(np.fft.ifft2(order1_hat[(j1, t1)] * bank.psi[(j2, t2)]))
        order2[(j1, t1, j2, t2)] = _lowpass(np.fft.fft2(modulus), bank.phi)
    return ScatteringMaps(order0=order0, order1=order1, order2=order2)


def feature_dim(J: int, L: int) -> int:
    """Two statistics per map: 2 * (1 + J*L + L^2 * J*(J-1)/2)."""
    return 2 * (1 + J * L + L * L * J * (J - 1) // 2)


def scattering_features(maps: ScatteringMaps) -> FeatureVector:
    """Concatenate (mean, standard deviation) of every map in canonical order."""
    values = []
    for grid in [maps.order0, *maps.order1.values(), *maps.order2.values()]:
        values.append(grid.mean())
        values.append(grid.std())
    return FeatureVector(values=np.array(values, dtype=np.float64), source_layer="scattering")
