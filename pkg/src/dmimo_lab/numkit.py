"""Small numerical toolkit shared by the rest of the package.

Holds the Hermitian solver used by RZF, the seeded random streams and
the Adam optimizer. Everything works in double precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "SingularMatrix",
    "RngStream",
    "AdamState",
    "solve_hermitian",
    "sample_complex_gaussian",
    "adam_step",
]


class SingularMatrix(np.linalg.LinAlgError):
    """Raised when a Hermitian system is singular or not positive definite."""


def solve_hermitian(A, B):
    """Solve ``A X = B`` for Hermitian positive-definite ``A``.

    Parameters
    ----------
    A : array_like, shape (K, K)
        Hermitian positive-definite matrix.
    B : array_like, shape (K,) or (K, n)
        Right-hand side.

    Returns
    -------
    X : ndarray
        Solution with the same shape as ``B``.

    Raises
    ------
    SingularMatrix
        If ``A`` is not (numerically) positive definite.
    ValueError
        If ``A`` is not square or not Hermitian within 1e-12.
    """
    A = np.asarray(A, dtype=complex)
    B = np.asarray(B, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"A must be a non-empty square matrix, got shape {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"B has {B.shape[0]} rows, expected {A.shape[0]}")
    scale = max(np.max(np.abs(A)), 1.0)
    if np.max(np.abs(A - A.conj().T)) > 1e-12 * scale:
        raise ValueError("A is not Hermitian")
    try:
        c, lower = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"matrix is not positive definite: {exc}") from None
    diag = np.abs(np.diag(c))
    # Cholesky can succeed on numerically rank-deficient input with a tiny pivot.
    if diag.min() <= np.sqrt(np.finfo(float).eps) * 1e-4 * diag.max():
        raise SingularMatrix("matrix is numerically singular")
    return scipy.linalg.cho_solve((c, lower), B, check_finite=False)


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class RngStream:
    """Seeded random stream with deterministic named substreams.

    ``RngStream(seed).child("channel")`` always yields the same sequence for a
    given seed, independent of how many draws the parent has made.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str | int) -> "RngStream":
        key = name if isinstance(name, int) else _name_key(str(name))
        return RngStream(self.seed, self._path + (key,))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self._path})"

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def complex_gaussian(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return sample_complex_gaussian(self, n).reshape(shape)


def sample_complex_gaussian(rng: RngStream, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. CN(0, 1) samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.generator.standard_normal((n, 2))
    return (z[:, 0] + 1j * z[:, 1]) * np.sqrt(0.5)


@dataclass
class AdamState:
    """Optimizer state for a flat parameter vector."""

    dim: int
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.dim)
        if self.v is None:
            self.v = np.zeros(self.dim)
        if self.m.shape != (self.dim,) or self.v.shape != (self.dim,):
            raise ValueError("moment vectors must match the parameter dimension")


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Apply one bias-corrected Adam update; ``state`` is updated in place.

    Returns the new parameter vector (``params`` itself is not modified).
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != (state.dim,) or grads.shape != (state.dim,):
        raise ValueError(
            f"dimension mismatch: state {state.dim}, params {params.shape}, grads {grads.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
