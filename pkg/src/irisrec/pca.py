"""Principal component analysis via a cyclic Jacobi symmetric eigensolver.

Fitting centers the data, builds the 1/(N-1)-normalized scatter matrix,
and diagonalizes whichever of the d x d covariance or the N x N Gram
matrix is smaller; the two routes give identical nonzero eigenpairs.
Component signs follow a fixed convention (the entry of largest
magnitude is positive) so serialized models are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_tensors, write_tensors

PCA_MAGIC = b"PCAM"


class PcaError(Exception):
    pass


class BadKError(PcaError):
    pass


class DegenerateInputError(PcaError):
    pass


class DimMismatchError(PcaError):
    pass


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rows in a fixed order, rotating away each off-diagonal entry,
    until the Frobenius norm of the off-diagonal part falls below
    ``tol`` times the Frobenius norm of the input.  Returns
    (eigenvalues, eigenvectors) with eigenvalues descending and
    eigenvectors as matching columns.
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise PcaError(f"matrix must be square, got shape {a.shape}")
    v = np.eye(n)
    fro = np.linalg.norm(a)
    if fro == 0.0 or n == 1:
        vals = np.diag(a).copy()
        order = np.argsort(-vals, kind="stable")
        return vals[order], v[:, order]
    # Rotations on entries this small cannot affect convergence at tol.
    skip = tol * fro / (2.0 * n)
    for _ in range(max_sweeps):
        off_part = a.copy()
        np.fill_diagonal(off_part, 0.0)
        if np.linalg.norm(off_part) <= tol * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise PcaError(f"Jacobi sweep cap ({max_sweeps}) hit before convergence")
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


@dataclass(frozen=True)
class PcaModel:
    """Mean, top-K orthonormal directions (rows), and the eigenvalue spectrum."""

    mean: np.ndarray
    components: np.ndarray  # (K, d), descending eigenvalue order
    eigenvalues: np.ndarray  # (K,), nonnegative, descending
    total_variance: float  # trace of the full scatter, fixed at fit time

    @property
    def d(self) -> int:
        return int(self.mean.shape[0])

    @property
    def k(self) -> int:
        return int(self.components.shape[0])


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for row in out:
        lead = int(np.argmax(np.abs(row)))
        if row[lead] < 0:
            row *= -1.0
    return out


def fit(
    features: np.ndarray,
    k: int,
    *,
    method: str = "auto",
    allow_degenerate: bool = False,
) -> PcaModel:
    """Fit the top-k principal directions of N x d feature rows.

    ``method`` chooses the diagonalized matrix: "covariance" (d x d),
    "gram" (N x N inner products, the right choice when d >> N), or
    "auto" to pick the smaller.  Requires 1 <= k <= min(d, N-1).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise PcaError(f"need a 2-D array with at least 2 samples, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(d, n - 1):
        raise BadKError(f"k={k} outside [1, min(d={d}, N-1={n - 1})]")
    if method not in ("auto", "covariance", "gram"):
        raise ValueError(f"unknown method {method!r}")
    mean = x.mean(axis=0)
    centered = x - mean
    total_variance = float(np.sum(centered * centered)) / (n - 1)
    if total_variance <= 0.0 and not allow_degenerate:
        raise DegenerateInputError("all samples identical: zero scatter")

    use_gram = d > n if method == "auto" else method == "gram"
    if total_variance <= 0.0:
        vals = np.zeros(k)
        components = np.zeros((k, d))
        components[np.arange(k), np.arange(k)] = 1.0
        return PcaModel(mean, components, vals, total_variance)

    if use_gram:
        gram = centered @ centered.T / (n - 1)
        vals, vecs = jacobi_eigh(gram)
        vals = np.maximum(vals[:k], 0.0)
        components = np.zeros((k, d))
        scale = np.max(vals) if k else 0.0
        for i in range(k):
            if vals[i] <= 1e-12 * scale:
                if not allow_degenerate:
                    raise DegenerateInputError(
                        f"component {i + 1} has (numerically) zero variance; "
                        f"reduce k or pass allow_degenerate"
                    )
                components[i] = _orthonormal_filler(components[:i], d)
                vals[i] = 0.0
                continue
            direction = centered.T @ vecs[:, i]
            components[i] = direction / np.sqrt(vals[i] * (n - 1))
    else:
        cov = centered.T @ centered / (n - 1)
        vals, vecs = jacobi_eigh(cov)
        vals = np.maximum(vals[:k], 0.0)
        scale = np.max(vals) if k else 0.0
        if not allow_degenerate and np.any(vals <= 1e-12 * scale):
            raise DegenerateInputError(
                "requested components with (numerically) zero variance; "
                "reduce k or pass allow_degenerate"
            )
        vals[vals <= 1e-12 * scale] = 0.0
        components = vecs[:, :k].T.copy()
    return PcaModel(mean, _fix_signs(components), vals, total_variance)


def _orthonormal_filler(existing: np.ndarray, d: int) -> np.ndarray:
    for basis in range(d):
        candidate = np.zeros(d)
        candidate[basis] = 1.0
        if existing.size:
            candidate -= existing.T @ (existing @ candidate)
        norm = np.linalg.norm(candidate)
        if norm > 1e-6:
            return candidate / norm
    raise DegenerateInputError("cannot complete an orthonormal basis")


def transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Project one d-vector (or an N x d batch) onto the components."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d:
        raise DimMismatchError(f"input dim {x.shape[-1]} != model dim {model.d}")
    return (x - model.mean) @ model.components.T


def retained_variance(model: PcaModel, k: int) -> float:
    """Fraction of the total scatter captured by the first k components."""
    if not 1 <= k <= model.k:
        raise BadKError(f"k={k} outside [1, {model.k}]")
    if model.total_variance <= 0.0:
        return 0.0
    return min(float(np.sum(model.eigenvalues[:k])) / model.total_variance, 1.0)


def truncate(model: PcaModel, k: int) -> PcaModel:
    """First-k sub-model; identical to refitting with the smaller k."""
    if not 1 <= k <= model.k:
        raise BadKError(f"k={k} outside [1, {model.k}]")
    return PcaModel(
        mean=model.mean,
        components=model.components[:k].copy(),
        eigenvalues=model.eigenvalues[:k].copy(),
        total_variance=model.total_variance,
    )


def save_pca(path, model: PcaModel) -> None:
    write_tensors(
        path,
        PCA_MAGIC,
        [
            ("mean", model.mean),
            ("components", model.components),
            ("eigenvalues", model.eigenvalues),
            ("total_variance", np.array([model.total_variance])),
        ],
    )


def load_pca(path) -> PcaModel:
    entries = dict(read_tensors(path, PCA_MAGIC))
    required = {"mean", "components", "eigenvalues", "total_variance"}
    if set(entries) != required:
        raise PcaError(f"PCA file has tensors {sorted(entries)}, expected {sorted(required)}")
    return PcaModel(
        mean=entries["mean"].astype(np.float64),
        components=entries["components"].astype(np.float64),
        eigenvalues=entries["eigenvalues"].astype(np.float64),
        total_variance=float(entries["total_variance"][0]),
    )
