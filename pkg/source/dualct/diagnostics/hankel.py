"""
Wrap-around Hankel lifting, its rank / Fourier-support identity, the
framelet factorization check and singular value spectra of feature maps.

With wrap-around indexing and d = n the lifted matrix is circulant, so its
singular values are exactly the DFT magnitudes of the signal.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from ..dualct_error import DomainError, ShapeError

DEFAULT_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class HankelMatrix:
    n: int
    d: int
    matrix: np.ndarray


def _signal(signal) -> np.ndarray:
    x = np.asarray(signal)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"Expected a non-empty 1-D signal, got shape {x.shape}")
    if not np.iscomplexobj(x):
        x = x.astype(np.float64)
    return x


def hankel(signal, d: int) -> HankelMatrix:
    """H[i, j] = x[(i + j) mod n], shape (n, d)."""
    x = _signal(signal)
    n = x.size
    if not (1 <= d <= n):
        raise DomainError(f"Pencil parameter d must lie in [1, {n}], got {d}")
    index = (np.arange(n)[:, None] + np.arange(d)[None, :]) % n
    return HankelMatrix(n=n, d=d, matrix=x[index])


def _count_above(values: np.ndarray, rtol: float) -> int:
    top = float(np.max(values)) if values.size else 0.0
    if top == 0.0:
        return 0
    return int(np.sum(values > rtol * top))


def singular_values(signal, d: Optional[int] = None) -> np.ndarray:
    x = _signal(signal)
    return scipy.linalg.svd(hankel(x, d or x.size).matrix, compute_uv=False)


def hankel_rank(signal, d: Optional[int] = None, rtol: float = DEFAULT_RTOL) -> int:
    return _count_above(singular_values(signal, d), rtol)


def fourier_support(signal, rtol: float = DEFAULT_RTOL) -> int:
    """Number of DFT coefficients above rtol times the largest one."""
    return _count_above(np.abs(np.fft.fft(_signal(signal))), rtol)


@dataclass(frozen=True, eq=False)
class FrameletBases:
    """Non-local bases phi / phi_tilde (n x n) and local bases psi / psi_tilde (d x r)."""

    phi: np.ndarray
    phi_tilde: np.ndarray
    psi: np.ndarray
    psi_tilde: np.ndarray
    rank: int

    def nonlocal_error(self) -> float:
        n = self.phi.shape[0]
        return float(np.max(np.abs(self.phi_tilde @ self.phi.conj().T - np.eye(n))))

    def local_projector(self) -> np.ndarray:
        return self.psi @ self.psi_tilde.conj().T

    def local_projector_error(self) -> float:
        """Distance of psi psi_tilde^H from an orthogonal projector (idempotent, Hermitian)."""
        P = self.local_projector()
        return float(max(np.max(np.abs(P @ P - P)), np.max(np.abs(P - P.conj().T))))

    def reconstruct(self, H: np.ndarray) -> np.ndarray:
        return self.phi_tilde @ self.phi.conj().T @ H @ self.psi @ self.psi_tilde.conj().T


def framelet_bases(signal, d: int, rank: Optional[int] = None) -> FrameletBases:
    """Identity non-local bases and the leading right singular vectors as local bases."""
    H = hankel(signal, d).matrix
    _, s, vh = scipy.linalg.svd(H, full_matrices=False)
    if rank is None:
        rank = _count_above(s, DEFAULT_RTOL) or 1
    if not (1 <= rank <= d):
        raise DomainError(f"Rank must lie in [1, {d}], got {rank}")
    v = vh.conj().T[:, :rank]
    identity = np.eye(H.shape[0])
    return FrameletBases(phi=identity, phi_tilde=identity, psi=v, psi_tilde=v, rank=rank)


def framelet_identity_check(signal, d: int, rank: Optional[int] = None) -> float:
    """max |H - phi_tilde phi^H H psi psi_tilde^H|; zero up to rounding when rank covers H."""
    H = hankel(signal, d).matrix
    if not np.any(H):
        return 0.0
    bases = framelet_bases(signal, d, rank if rank is not None else d)
    return float(np.max(np.abs(H - bases.reconstruct(H))))


def _channel_signals(feature_maps: np.ndarray):
    maps = np.asarray(feature_maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ShapeError(f"Feature maps must be (C, H, W) or (H, W), got {maps.shape}")
    return [m.ravel() for m in maps]


def singular_spectrum(feature_maps, d: Optional[int] = None, aggregate: str = "mean") -> np.ndarray:
    """
    Normalized, descending Hankel singular values of row-flattened feature maps.

    "mean" averages the per-channel normalized spectra (all-zero channels are
    skipped); "concat" lifts the concatenation of all channels at once.
    """
    signals = _channel_signals(feature_maps)
    if aggregate == "concat":
        signals = [np.concatenate(signals)]
    elif aggregate != "mean":
        raise DomainError(f"Unknown spectrum aggregation '{aggregate}'")
    n = signals[0].size
    d = d or n
    if not (1 <= d <= n):
        raise DomainError(f"Pencil parameter d must lie in [1, {n}], got {d}")

    spectra = []
    for x in signals:
        s = singular_values(x, d)
        if s[0] > 0:
            spectra.append(s / s[0])
    if not spectra:
        spectrum = np.zeros(d)
        spectrum[0] = 1.0
        return spectrum
    spectrum = np.mean(spectra, axis=0)
    return np.sort(spectrum / spectrum[0])[::-1]


def spectrum_area(spectrum) -> float:
    """Mean of a normalized spectrum; smaller means faster singular value decay."""
    return float(np.mean(np.asarray(spectrum, dtype=np.float64)))


def count_above(spectrum, threshold: float = 1e-2) -> int:
    return _count_above(np.asarray(spectrum, dtype=np.float64), threshold)


def _band_signal(n: int, bins, amplitude: float, rng) -> np.ndarray:
    """Real signal whose DFT is non-zero exactly on `bins` and their mirrors."""
    spectrum = np.zeros(n, dtype=np.complex128)
    for k in bins:
        value = amplitude * rng.uniform(0.5, 1.0) * np.exp(2j * np.pi * rng.uniform())
        if k == 0 or 2 * k == n:
            value = value.real if value.real != 0 else amplitude
        spectrum[k] = value
        spectrum[(n - k) % n] = np.conj(value)
    return np.fft.ifft(spectrum).real * n


@dataclass(frozen=True)
class RankExperiment:
    cupping_rank: float
    noise_rank: float
    coupled_rank: float
    trials: int
    threshold: float

    def reduction(self, part: str) -> float:
        """Fraction fewer significant singular values than the coupled signal."""
        rank = {"cupping": self.cupping_rank, "noise": self.noise_rank}[part]
        return 1.0 - rank / self.coupled_rank


def coupled_artifact_rank_experiment(rng, n: int = 64, trials: int = 10, low_bins: int = 6, high_pairs: int = 7,
                                     noise_amplitude: float = 0.3, threshold: float = 1e-2) -> RankExperiment:
    """
    Low-rank comparison of a smooth cupping-like signal (DC plus the lowest
    `low_bins` frequency pairs), a high-band noise-like signal
    (`high_pairs` random pairs in the upper half band) and their sum.
    """
    if not (0 < low_bins < n // 4 and 0 < high_pairs <= n // 4):
        raise DomainError(f"Band sizes low={low_bins} high={high_pairs} do not fit n={n}")
    counts = np.zeros((trials, 3))
    for t in range(trials):
        cupping = _band_signal(n, range(0, low_bins + 1), 1.0, rng)
        high_band = np.arange(n // 4, n // 2)
        noise = _band_signal(n, rng.choice(high_band, size=high_pairs, replace=False), noise_amplitude, rng)
        for j, x in enumerate((cupping, noise, cupping + noise)):
            counts[t, j] = count_above(singular_values(x, n), threshold)
    mean = counts.mean(axis=0)
    return RankExperiment(cupping_rank=mean[0], noise_rank=mean[1], coupled_rank=mean[2], trials=trials, threshold=threshold)
