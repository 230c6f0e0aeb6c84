"""Dominant eigenpair of complex Hermitian PSD matrices via power iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERMITIAN_TOL = 1e-8
CONVERGENCE_TOL = 1e-10
MAX_ITERATIONS = 10_000


class ConvergenceError(RuntimeError):
    """Power iteration failed to converge; carries the last iterate."""

    def __init__(self, message: str, iterate: np.ndarray):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class EigenPair:
    value: float
    vector: np.ndarray  # complex, unit norm

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("eigenvalue must be nonnegative")
        if abs(np.linalg.norm(self.vector) - 1.0) > 1e-9:
            raise ValueError("eigenvector must be unit norm")


def normalize_phase(v: np.ndarray) -> np.ndarray:
    """Rotate a complex vector so its largest-magnitude entry is real >= 0.

    Fixes the intrinsic phase ambiguity for reproducible serialization; all
    quality metrics remain phase-invariant regardless.
    """
    k = int(np.argmax(np.abs(v)))
    pivot = v[k]
    if abs(pivot) == 0.0:
        return v.copy()
    return v * (np.conj(pivot) / abs(pivot))


def hermitian_top_eigpair(a: np.ndarray, tol: float = CONVERGENCE_TOL,
                          max_iter: int = MAX_ITERATIONS) -> EigenPair:
    """Dominant eigenpair of a Hermitian PSD matrix.

    The caller is expected to form a Gram-type matrix (e.g. H^H H), so the
    input is validated as Hermitian within ``HERMITIAN_TOL``. Convergence is
    declared when the eigen-residual ||A v - lam v|| drops below
    tol * max(lam, 1e-300).
    """
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("input must be a square matrix")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.conj().T).max() > HERMITIAN_TOL * scale:
        raise ValueError("input matrix is not Hermitian within tolerance")

    n = a.shape[0]
    rng = np.random.default_rng(0)  # fixed start vector: fully deterministic
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)

    lam = 0.0
    for _ in range(max_iter):
        av = a @ v
        lam = float(np.real(np.vdot(v, av)))
        residual = np.linalg.norm(av - lam * v)
        if residual <= tol * max(lam, 1e-300):
            vec = normalize_phase(v)
            return EigenPair(value=max(lam, 0.0), vector=vec)
        norm = np.linalg.norm(av)
        if norm == 0.0:
            # v lies in the null space; for PSD input the top eigenvalue of
            # the restriction is 0 only if A itself is 0 on this subspace.
            return EigenPair(value=0.0, vector=normalize_phase(v))
        v = av / norm
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", v
    )
