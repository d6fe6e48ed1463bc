"""Forward measurement operators and noisy measurement synthesis.

Every operator maps R^D -> R^d, evaluates batched over leading axes, and
supplies the vector-Jacobian product ``vjp(x, v) = v^T dA/dx`` needed by
guidance gradients. Linear operators additionally expose their dense
``matrix()`` so tests can cross-check ``apply`` and the adjoint identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ForwardOperator:
    """Base class; subclasses set ``in_dim``, ``out_dim`` and ``linear``."""

    in_dim: int
    out_dim: int
    linear: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrix(self) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no dense matrix")


class MaskOperator(ForwardOperator):
    """Coordinate selection: keep the listed indices, in order."""

    linear = True

    def __init__(self, dim: int, kept_indices):
        idx = np.asarray(kept_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("kept_indices must be a nonempty 1-D list")
        if np.unique(idx).size != idx.size:
            raise ValueError("kept_indices must be unique")
        if np.any(idx < 0) or np.any(idx >= dim):
            raise ValueError("kept_indices out of range")
        self.in_dim = dim
        self.out_dim = idx.size
        self.kept = idx

    def apply(self, x):
        return np.asarray(x, dtype=float)[..., self.kept]

    def vjp(self, x, v):
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape[:-1] + (self.in_dim,))
        out[..., self.kept] = v
        return out

    def matrix(self):
        m = np.zeros((self.out_dim, self.in_dim))
        m[np.arange(self.out_dim), self.kept] = 1.0
        return m


class DownsampleOperator(ForwardOperator):
    """Non-overlapping average pooling by an integer factor."""

    linear = True

    def __init__(self, dim: int, factor: int):
        if factor < 1 or dim % factor != 0:
            raise ValueError("factor must be >= 1 and divide the dimension")
        self.in_dim = dim
        self.factor = factor
        self.out_dim = dim // factor

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.out_dim, self.factor)).mean(axis=-1)

    def vjp(self, x, v):
        v = np.asarray(v, dtype=float)
        spread = np.repeat(v / self.factor, self.factor, axis=-1)
        return spread

    def matrix(self):
        m = np.zeros((self.out_dim, self.in_dim))
        for j in range(self.out_dim):
            m[j, j * self.factor : (j + 1) * self.factor] = 1.0 / self.factor
        return m


class BlurOperator(ForwardOperator):
    """Circular convolution with a normalized kernel."""

    linear = True

    def __init__(self, dim: int, kernel):
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim != 1 or kernel.size > dim:
            raise ValueError("kernel must be 1-D with length <= dim")
        if abs(kernel.sum() - 1.0) > 1e-12:
            raise ValueError("kernel must sum to 1 within 1e-12")
        self.in_dim = self.out_dim = dim
        padded = np.zeros(dim)
        padded[: kernel.size] = kernel
        self.kernel_fft = np.fft.rfft(padded)
        # correlation kernel: k reversed around index 0
        self.adj_fft = np.conj(self.kernel_fft)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return np.fft.irfft(np.fft.rfft(x, axis=-1) * self.kernel_fft, n=self.in_dim, axis=-1)

    def vjp(self, x, v):
        v = np.asarray(v, dtype=float)
        return np.fft.irfft(np.fft.rfft(v, axis=-1) * self.adj_fft, n=self.in_dim, axis=-1)

    def matrix(self):
        cols = [self.apply(e) for e in np.eye(self.in_dim)]
        return np.stack(cols, axis=1)


def gaussian_kernel(length: int, std: float) -> np.ndarray:
    """Truncated, normalized Gaussian kernel centered on index 0 (circularly)."""
    if length < 1 or std <= 0:
        raise ValueError("need length >= 1 and std > 0")
    offsets = np.arange(length) - (length - 1) / 2.0
    k = np.exp(-0.5 * (offsets / std) ** 2)
    return k / k.sum()


def motion_kernel(length: int) -> np.ndarray:
    """Uniform segment kernel of the given length."""
    if length < 1:
        raise ValueError("need length >= 1")
    return np.full(length, 1.0 / length)


class DenseOperator(ForwardOperator):
    linear = True

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or not np.all(np.isfinite(m)):
            raise ValueError("matrix must be 2-D and finite")
        self._m = m
        self.out_dim, self.in_dim = m.shape

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self._m.T

    def vjp(self, x, v):
        return np.asarray(v, dtype=float) @ self._m

    def matrix(self):
        return self._m.copy()


class PhaseRetrievalOperator(ForwardOperator):
    """Fourier magnitudes of the zero-padded signal (nonlinear).

    ``apply`` returns exact magnitudes; ``vjp`` differentiates the smoothed
    magnitude sqrt(re^2 + im^2 + delta^2) with delta = 1e-8, which removes the
    kink at zero while staying within 1e-5 of the true gradient elsewhere.
    """

    linear = False
    delta = 1e-8

    def __init__(self, dim: int, oversample: int = 2):
        if dim < 2 or oversample < 1:
            raise ValueError("need dim >= 2 and oversample >= 1")
        self.in_dim = dim
        self.oversample = oversample
        self.n_fft = oversample * dim
        self.out_dim = self.n_fft

    def _spectrum(self, x):
        x = np.asarray(x, dtype=float)
        return np.fft.fft(x, n=self.n_fft, axis=-1)

    def apply(self, x):
        return np.abs(self._spectrum(x))

    def vjp(self, x, v):
        z = self._spectrum(x)
        mag = np.sqrt(z.real**2 + z.imag**2 + self.delta**2)
        w = np.asarray(v, dtype=float) * np.conj(z) / mag
        # DFT matrix is symmetric, so M^T w = fft(w)
        return np.fft.fft(w, axis=-1).real[..., : self.in_dim]


def make_mask_operator(dim: int, kept_indices) -> MaskOperator:
    return MaskOperator(dim, kept_indices)


def make_downsample_operator(dim: int, factor: int) -> DownsampleOperator:
    return DownsampleOperator(dim, factor)


def make_blur_operator(dim: int, kernel) -> BlurOperator:
    return BlurOperator(dim, kernel)


def make_dense_operator(matrix) -> DenseOperator:
    return DenseOperator(matrix)


def make_phase_retrieval_operator(dim: int, oversample: int = 2) -> PhaseRetrievalOperator:
    return PhaseRetrievalOperator(dim, oversample)


@dataclass(frozen=True)
class Measurement:
    """Observed data ``y = A(x_true) + n`` with noise level sigma."""

    y: np.ndarray
    sigma: float
    operator: ForwardOperator
    rho: float = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != (self.operator.out_dim,):
            raise ValueError("y dimension must match the operator output")
        if not np.isfinite(self.sigma) or self.sigma <= 0.0:
            raise ValueError("sigma must be finite and positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "rho", 1.0 / self.sigma**2)


def make_measurement(
    x_true: np.ndarray,
    operator: ForwardOperator,
    sigma: float = 0.05,
    rng: Optional[np.random.Generator] = None,
) -> Measurement:
    """Synthesize a noisy measurement of ``x_true``."""
    if rng is None:
        raise ValueError("an rng is required to draw the measurement noise")
    clean = operator.apply(np.asarray(x_true, dtype=float))
    y = clean + sigma * rng.standard_normal(operator.out_dim)
    return Measurement(y=y, sigma=sigma, operator=operator)


def phase_retrieval_orbit(x: np.ndarray, oversample: int) -> np.ndarray:
    """All D-dim signals sharing x's Fourier magnitudes: sign, flip, shift.

    Enumerates +/- circular shifts of the (possibly flipped) zero-padded
    signal and keeps those whose support fits back in the first D samples.
    The original signal is always in the orbit.
    """
    x = np.asarray(x, dtype=float)
    D = x.size
    n = oversample * D
    padded = np.zeros(n)
    padded[:D] = x
    orbit = []
    for base in (padded, padded[::-1].copy()):
        # realign flips so index 0 stays in the window before shifting
        for s in range(n):
            cand = np.roll(base, s)
            if D < n and np.any(cand[D:] != 0.0):
                continue
            orbit.append(cand[:D])
            orbit.append(-cand[:D])
    return np.unique(np.array(orbit), axis=0)
