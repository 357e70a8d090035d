"""Linear precoders and the SINR / sum-rate metrics.

Channel convention: ``H`` is M x K (APs x users), user ``k`` receives
``g_k^T w_l s_l`` from stream ``l`` where ``g_k = H[:, k]`` and ``w_l = W[:, l]``.
All metric functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

from .numkit import RngStream, solve_hermitian

__all__ = [
    "ZeroChannel",
    "mrt",
    "rzf",
    "rps",
    "normalize_power",
    "default_alpha",
    "effective_gains",
    "sinr",
    "sinr_all",
    "sum_rate",
    "noise_for_snr",
]


class ZeroChannel(ValueError):
    """Precoder input (channel or raw weights) is identically zero."""


def _as_array(H) -> np.ndarray:
    return np.asarray(getattr(H, "H", H), dtype=complex)


def normalize_power(W_raw, P: float = 1.0) -> np.ndarray:
    """Scale ``W_raw`` so that its squared Frobenius norm equals ``P``."""
    W_raw = np.asarray(W_raw, dtype=complex)
    norm = np.sqrt(np.sum(np.abs(W_raw) ** 2, axis=(-2, -1), keepdims=True))
    if np.any(norm == 0):
        raise ZeroChannel("cannot normalize an all-zero precoder")
    return W_raw * (np.sqrt(P) / norm)


def mrt(H, P: float = 1.0) -> np.ndarray:
    """Maximum-ratio (conjugate) beamforming, ``W ∝ conj(H)``."""
    H = _as_array(H)
    if not np.any(H):
        raise ZeroChannel("channel is identically zero")
    return normalize_power(H.conj(), P)


def default_alpha(K: int, sigma2: float, P: float) -> float:
    return K * sigma2 / P


def rzf(H, alpha: float, P: float = 1.0) -> np.ndarray:
    """Regularized zero-forcing.

    ``W ∝ conj(H) (H^T conj(H) + alpha I_K)^{-1}``, i.e. the transpose-domain
    form that matches the ``g_k^T w`` signal model. With ``alpha = 0`` this
    is zero-forcing: ``H^T W`` is diagonal.
    """
    H = _as_array(H)
    if not np.isfinite(alpha) or alpha < 0:
        raise ValueError("alpha must be finite and >= 0")
    if not np.any(H):
        raise ZeroChannel("channel is identically zero")
    K = H.shape[1]
    gram = H.T @ H.conj()
    gram = 0.5 * (gram + gram.conj().T)
    X = solve_hermitian(gram + alpha * np.eye(K), np.eye(K))
    return normalize_power(H.conj() @ X, P)


def rps(M: int, P: float, rng: RngStream, slots: int | None = None) -> np.ndarray:
    """Random phase sweeping: equal amplitudes, i.i.d. uniform phases.

    Returns an (M, 1) matrix, or (slots, M, 1) when ``slots`` is given.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    shape = (M, 1) if slots is None else (slots, M, 1)
    theta = rng.uniform(0.0, 2 * np.pi, shape)
    return np.sqrt(P / M) * np.exp(1j * theta)


def effective_gains(H, W) -> np.ndarray:
    """``G[k, l] = g_k^T w_l``; shape (..., K, K)."""
    H = _as_array(H)
    W = np.asarray(W, dtype=complex)
    if H.shape[-2:] != W.shape[-2:]:
        raise ValueError(f"H shape {H.shape} and W shape {W.shape} disagree")
    return np.swapaxes(H, -1, -2) @ W


def sinr_all(H, W, sigma2: float) -> np.ndarray:
    """Per-user SINR, shape (..., K)."""
    if not sigma2 > 0:
        raise ValueError("noise power must be positive")
    P = np.abs(effective_gains(H, W)) ** 2
    signal = np.diagonal(P, axis1=-2, axis2=-1)
    interference = P.sum(axis=-1) - signal
    return signal / (interference + sigma2)


def sinr(H, W, sigma2: float, k: int) -> float:
    H = _as_array(H)
    K = H.shape[-1]
    if not 0 <= k < K:
        raise IndexError(f"user index {k} out of range for K={K}")
    return sinr_all(H, W, sigma2)[..., k]


def sum_rate(H, W, sigma2: float) -> np.ndarray:
    """Sum rate in bits per channel use."""
    return np.sum(np.log2(1.0 + sinr_all(H, W, sigma2)), axis=-1)


def noise_for_snr(H, snr_db: float, P: float = 1.0) -> float:
    """Noise power giving a median per-user SNR ``P ||g_k||^2 / sigma2`` of ``snr_db``.

    ``H`` is a stack of shape (N, M, K); the median runs over all samples and users.
    """
    H = _as_array(H)
    gains = P * np.sum(np.abs(H) ** 2, axis=-2)
    return float(np.median(gains) / 10.0 ** (snr_db / 10.0))
