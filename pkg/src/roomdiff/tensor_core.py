"""Float64 array helpers and deterministic, splittable randomness.

The whole engine runs on plain numpy float64 arrays.  This module owns the
few kernels that need numerical care (stable row softmax, PSD matrix square
roots) and the counter-based RNG that every stochastic component derives its
streams from.  Streams are split by hashing a parent seed together with a
string tag, so parallel workers can draw independently while the overall run
stays reproducible from a single integer.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import DomainError, ShapeError

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *tags) -> int:
    """Derive a child seed from a parent seed and a sequence of tags.

    Stable across processes and platforms: uses blake2b over the parent
    seed's 8-byte little-endian encoding followed by the utf-8 tags.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed & _MASK64).to_bytes(8, "little"))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based random stream (Philox) with hash-derived splitting.

    ``spawn(*tags)`` returns an independent child stream; the child seed
    depends only on the parent seed and the tags, never on how much the
    parent has already drawn.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, *tags) -> "Rng":
        return Rng(derive_seed(self.seed, *tags))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        # half-open [low, high), matching numpy's Generator.integers
        return self._gen.integers(low, high, size=shape)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def shuffled(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return {"seed": self.seed, "bg_state": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng._gen.bit_generator.state = state["bg_state"]
        return rng


def gaussian(rng: Rng, shape) -> np.ndarray:
    """Standard normal samples of the given (non-empty, positive) shape."""
    shape = tuple(shape)
    if len(shape) == 0:
        raise ShapeError("gaussian: shape must have at least one dimension")
    for extent in shape:
        if not isinstance(extent, (int, np.integer)) or extent <= 0:
            raise ShapeError(f"gaussian: invalid extent {extent!r} in shape {shape}")
    return rng.normal(shape)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, stable under large logits.

    Subtracts each row's max before exponentiating, so shifting a row by a
    constant leaves its output unchanged.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D logits, got shape {logits.shape}")
    if logits.size == 0:
        raise ShapeError("softmax_rows: empty logits")
    if not np.all(np.isfinite(logits)):
        raise DomainError("softmax_rows: non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def psd_sqrt(m: np.ndarray, sym_tol: float = 1e-9, neg_tol: float = 1e-9) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    ``m`` must be symmetric within ``sym_tol`` (elementwise) and have
    eigenvalues no smaller than ``-neg_tol``; small negative eigenvalues from
    roundoff are clamped to zero.  Returns S with S @ S == m up to roundoff.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"psd_sqrt: expected a square matrix, got shape {m.shape}")
    asym = np.abs(m - m.T).max() if m.size else 0.0
    if asym > sym_tol:
        raise DomainError(f"psd_sqrt: matrix asymmetric by {asym:.3e} (tol {sym_tol:.1e})")
    sym = 0.5 * (m + m.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min(initial=0.0) < -neg_tol:
        raise DomainError(f"psd_sqrt: eigenvalue {eigvals.min():.3e} below -{neg_tol:.1e}")
    root = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return 0.5 * (root + root.T)


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: contains non-finite values")
