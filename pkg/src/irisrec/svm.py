"""Soft-margin linear SVM: an SMO dual solver plus multi-class combination.

train_binary solves

    max  sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j <x_i, x_j>
    s.t. 0 <= alpha_i <= C,  sum_i alpha_i y_i = 0

by sequential minimal optimization with maximal-violating-pair working-set
selection, stopping at KKT gap <= tol.  The linear kernel lets the weight
vector be materialized, so prediction never touches training data.

Multi-class combination is one-vs-all (largest margin wins) or one-vs-one
(majority vote; vote ties broken by summed signed scores, then by the
lowest label in sort order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .container import read_tensors, write_tensors

SVM_MAGIC = b"SVMM"

_TAU = 1e-12


class SvmError(Exception):
    pass


class SingleClassInputError(SvmError):
    pass


class NoConvergenceError(SvmError):
    pass


class DimMismatchError(SvmError):
    pass


@dataclass(frozen=True)
class BinarySvm:
    """One maximum-margin hyperplane: w.x + b, with its dual certificate."""

    w: np.ndarray
    b: float
    C: float
    support_indices: np.ndarray  # training indices with alpha > 0
    alphas: np.ndarray  # the nonzero dual variables, aligned with support_indices


def train_binary(
    features: np.ndarray,
    labels: np.ndarray,
    C: float,
    *,
    tol: float = 1e-3,
    max_pair_updates: int = 10_000_000,
    kernel: np.ndarray | None = None,
) -> BinarySvm:
    """Solve the soft-margin dual for labels in {-1, +1}.

    ``kernel`` may carry a precomputed X @ X.T to share across the binary
    machines of a multi-class job.  b is the average of y_i - w.x_i over
    unbounded support vectors (0 < alpha < C); if none exist it is the
    midpoint of the feasible interval implied by the bounded points.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DimMismatchError(f"features {x.shape} and labels {y.shape} disagree")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be -1 or +1")
    if x.shape[0] < 2 or len(np.unique(y)) < 2:
        raise SingleClassInputError("need at least one sample of each class")
    if C <= 0:
        raise ValueError("C must be positive")

    n = x.shape[0]
    k = kernel if kernel is not None else x @ x.T
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the minimization form 1/2 a'Qa - e'a
    pos = y > 0

    updates = 0
    while True:
        viol = -y * grad
        up = (pos & (alpha < C)) | (~pos & (alpha > 0))
        low = (pos & (alpha > 0)) | (~pos & (alpha < C))
        m_up = np.where(up, viol, -np.inf)
        m_low = np.where(low, viol, np.inf)
        i = int(np.argmax(m_up))
        j = int(np.argmin(m_low))
        if m_up[i] - m_low[j] <= tol:
            break
        if updates >= max_pair_updates:
            raise NoConvergenceError(
                f"KKT gap {m_up[i] - m_low[j]:.3g} > {tol} after {updates} pair updates"
            )
        updates += 1

        ki, kj = k[i], k[j]
        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(ki[i] + kj[j] - 2.0 * ki[j], _TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = max(ki[i] + kj[j] - 2.0 * ki[j], _TAU)
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total
        d_i = alpha[i] - old_i
        d_j = alpha[j] - old_j
        grad += (y * ki) * (y[i] * d_i) + (y * kj) * (y[j] * d_j)

    # Clip the floating-point dust so support classification is exact.
    alpha[alpha < 1e-14 * C] = 0.0
    w = (alpha * y) @ x
    scores = x @ w
    unbounded = (alpha > 0) & (alpha < C)
    residual = y - scores
    if np.any(unbounded):
        b = float(residual[unbounded].mean())
    else:
        lower = residual[((alpha == 0) & pos) | ((alpha >= C) & ~pos)]
        upper = residual[((alpha == 0) & ~pos) | ((alpha >= C) & pos)]
        lo = lower.max() if lower.size else -np.inf
        hi = upper.min() if upper.size else np.inf
        b = float((lo + hi) / 2.0) if np.isfinite(lo) and np.isfinite(hi) else 0.0
    support = np.flatnonzero(alpha > 0)
    return BinarySvm(
        w=w,
        b=b,
        C=float(C),
        support_indices=support,
        alphas=alpha[support].copy(),
    )


def decision(svm: BinarySvm, x: np.ndarray) -> float:
    """Raw margin score w.x + b; the caller applies sign for a binary label."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != svm.w.shape:
        raise DimMismatchError(f"input dim {x.shape} != weight dim {svm.w.shape}")
    return float(svm.w @ x + svm.b)


@dataclass(frozen=True)
class MultiSvmModel:
    strategy: str  # "ova" or "ovo"
    classes: tuple
    machines: tuple
    pairs: tuple | None = None  # (class index a, class index b) per machine for ovo

    def __post_init__(self):
        expected = (
            len(self.classes)
            if self.strategy == "ova"
            else len(self.classes) * (len(self.classes) - 1) // 2
        )
        if len(self.machines) != expected:
            raise SvmError(
                f"{self.strategy} over {len(self.classes)} classes needs "
                f"{expected} machines, got {len(self.machines)}"
            )


def train_multiclass(
    features: np.ndarray,
    labels,
    C: float,
    strategy: str = "ova",
    *,
    tol: float = 1e-3,
) -> MultiSvmModel:
    """Train one machine per class (ova) or per unordered class pair (ovo)."""
    if strategy not in ("ova", "ovo"):
        raise ValueError(f"unknown strategy {strategy!r}")
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = tuple(sorted(set(labels.tolist())))
    if len(classes) < 2:
        raise SingleClassInputError("need at least 2 classes")

    kernel = x @ x.T
    machines = []
    if strategy == "ova":
        for cls in classes:
            y = np.where(labels == cls, 1.0, -1.0)
            try:
                machines.append(train_binary(x, y, C, tol=tol, kernel=kernel))
            except SvmError as exc:
                raise type(exc)(f"[ova machine for class {cls!r}] {exc}") from exc
        return MultiSvmModel(strategy="ova", classes=classes, machines=tuple(machines))

    pairs = []
    for ia in range(len(classes)):
        for ib in range(ia + 1, len(classes)):
            mask = (labels == classes[ia]) | (labels == classes[ib])
            idx = np.flatnonzero(mask)
            y = np.where(labels[idx] == classes[ia], 1.0, -1.0)
            sub_kernel = kernel[np.ix_(idx, idx)]
            try:
                machines.append(train_binary(x[idx], y, C, tol=tol, kernel=sub_kernel))
            except SvmError as exc:
                raise type(exc)(
                    f"[ovo machine {classes[ia]!r} vs {classes[ib]!r}] {exc}"
                ) from exc
            pairs.append((ia, ib))
    return MultiSvmModel(
        strategy="ovo", classes=classes, machines=tuple(machines), pairs=tuple(pairs)
    )


def _score_matrix(model: MultiSvmModel, x: np.ndarray) -> np.ndarray:
    w = np.stack([m.w for m in model.machines])
    b = np.array([m.b for m in model.machines])
    return x @ w.T + b


def predict(model: MultiSvmModel, x: np.ndarray):
    """Predict class labels for one d-vector or an N x d batch.

    ova: argmax margin score, ties to the lowest label in sort order.
    ovo: majority vote; exact-zero machine scores vote for the pair's
    lower label; vote ties break by summed signed scores, then lowest label.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.machines[0].w.shape[0]:
        raise DimMismatchError(
            f"input dim {batch.shape[1]} != model dim {model.machines[0].w.shape[0]}"
        )
    scores = _score_matrix(model, batch)
    if model.strategy == "ova":
        winners = np.argmax(scores, axis=1)
    else:
        n, n_classes = batch.shape[0], len(model.classes)
        votes = np.zeros((n, n_classes), dtype=np.int64)
        signed = np.zeros((n, n_classes))
        for col, (ia, ib) in enumerate(model.pairs):
            s = scores[:, col]
            toward_a = s >= 0
            votes[toward_a, ia] += 1
            votes[~toward_a, ib] += 1
            signed[:, ia] += s
            signed[:, ib] -= s
        winners = np.empty(n, dtype=np.int64)
        for row in range(n):
            best = np.flatnonzero(votes[row] == votes[row].max())
            if len(best) > 1:
                tied_scores = signed[row, best]
                best = best[tied_scores == tied_scores.max()]
            winners[row] = best[0]
    labels = [model.classes[i] for i in winners]
    return labels[0] if single else labels


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension z-scoring with statistics taken from the training set."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        x = np.asarray(features, dtype=np.float64)
        std = x.std(axis=0)
        return cls(mean=x.mean(axis=0), scale=np.where(std > 0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


def save_multiclass(path, model: MultiSvmModel) -> None:
    """Serialize in the shared container framing (magic SVMM, f32 tensors).

    The class table is JSON-encoded and stored as a tensor of its UTF-8
    byte values (each byte is exactly representable in f32).
    """
    meta = json.dumps(list(model.classes), ensure_ascii=False).encode("utf-8")
    entries = [
        ("strategy", np.array([0.0 if model.strategy == "ova" else 1.0])),
        ("classes_json", np.frombuffer(meta, dtype=np.uint8).astype(np.float32)),
    ]
    for idx, machine in enumerate(model.machines):
        prefix = f"machine.{idx:05d}"
        entries.append((f"{prefix}.w", machine.w))
        entries.append((f"{prefix}.b", np.array([machine.b])))
        entries.append((f"{prefix}.C", np.array([machine.C])))
        if model.pairs is not None:
            entries.append((f"{prefix}.pair", np.array(model.pairs[idx], dtype=np.float32)))
    write_tensors(path, SVM_MAGIC, entries)


def load_multiclass(path) -> MultiSvmModel:
    entries = dict(read_tensors(path, SVM_MAGIC))
    strategy = "ova" if entries["strategy"][0] == 0.0 else "ovo"
    classes = tuple(
        json.loads(entries["classes_json"].astype(np.uint8).tobytes().decode("utf-8"))
    )
    machines = []
    pairs = []
    idx = 0
    while f"machine.{idx:05d}.w" in entries:
        prefix = f"machine.{idx:05d}"
        machines.append(
            BinarySvm(
                w=entries[f"{prefix}.w"].astype(np.float64),
                b=float(entries[f"{prefix}.b"][0]),
                C=float(entries[f"{prefix}.C"][0]),
                support_indices=np.array([], dtype=np.intp),
                alphas=np.array([]),
            )
        )
        if f"{prefix}.pair" in entries:
            pairs.append(tuple(int(v) for v in entries[f"{prefix}.pair"]))
        idx += 1
    return MultiSvmModel(
        strategy=strategy,
        classes=classes,
        machines=tuple(machines),
        pairs=tuple(pairs) if strategy == "ovo" else None,
    )
