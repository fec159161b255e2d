"""Training losses and 3D pose evaluation metrics.

The two loss terms are differentiable through the tensor tape and drive
training; the evaluation metrics (mpjpe / p_mpjpe / pck / auc) are plain
numpy functions over (frames, joints, 3) arrays in millimeters.  The
Procrustes alignment solves the similarity registration problem with the
package's own 3x3 Jacobi SVD rather than a LAPACK call, so the numeric
path is fully inspectable and testable against numpy's SVD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (InvariantError, ShapeError, Tensor, _as_operand, add,
                     mean_all, mul, narrow, scale, sqrt, sub, sum_last)

# ---------------------------------------------------------------------------
# Losses (differentiable)
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    """Relative weight of the temporal-smoothness term."""

    lambda_t: float = 0.5

    def __post_init__(self):
        if not math.isfinite(self.lambda_t) or self.lambda_t < 0:
            raise ValueError(f"lambda_t must be finite and nonnegative, got {self.lambda_t}")


def loss_3d(y_hat, y) -> Tensor:
    """Mean Euclidean distance between predicted and target joints."""
    y_hat, y = _as_operand(y_hat), _as_operand(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"loss_3d: shapes differ: {y_hat.shape} vs {y.shape}")
    d = sub(y_hat, y)
    return mean_all(sqrt(sum_last(mul(d, d))))


def tc_loss(y_hat, y) -> Tensor:
    """Mean distance between predicted and target frame-to-frame deltas."""
    y_hat, y = _as_operand(y_hat), _as_operand(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"tc_loss: shapes differ: {y_hat.shape} vs {y.shape}")
    t = y_hat.shape[0]
    if t < 2:
        raise ValueError(f"tc_loss needs at least 2 frames, got {t}")
    dh = sub(narrow(y_hat, 0, 1, t - 1), narrow(y_hat, 0, 0, t - 1))
    dg = sub(narrow(y, 0, 1, t - 1), narrow(y, 0, 0, t - 1))
    e = sub(dh, dg)
    return mean_all(sqrt(sum_last(mul(e, e))))


def total_loss(y_hat, y, weights: LossWeights) -> Tensor:
    """Position loss plus lambda_t times the temporal-delta loss."""
    l3 = loss_3d(y_hat, y)
    if weights.lambda_t == 0.0:
        return l3
    return add(l3, scale(tc_loss(y_hat, y), weights.lambda_t))


# ---------------------------------------------------------------------------
# 3x3 singular value decomposition (one-sided cyclic Jacobi)
# ---------------------------------------------------------------------------

_JACOBI_TOL = 1e-12
_MAX_SWEEPS = 60


def svd_3x3(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD of a real 3x3 matrix: a = U @ diag(s) @ V.T.

    Cyclic Jacobi rotations are applied from the right until the columns
    of the working matrix W = a V are mutually orthogonal (relative
    off-diagonal of W'W below 1e-12), which implicitly diagonalizes a'a;
    U is then recovered by normalizing the columns of W.  Singular values
    come out nonnegative and sorted in nonincreasing order.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3, 3):
        raise ShapeError(f"svd_3x3 expects a 3x3 matrix, got {a.shape}")
    w = a.copy()
    v = np.eye(3)

    for _ in range(_MAX_SWEEPS):
        converged = True
        for p, q in ((0, 1), (0, 2), (1, 2)):
            app = w[:, p] @ w[:, p]
            aqq = w[:, q] @ w[:, q]
            apq = w[:, p] @ w[:, q]
            if abs(apq) <= _JACOBI_TOL * math.sqrt(app * aqq) or app * aqq == 0.0:
                continue
            converged = False
            tau = (aqq - app) / (2.0 * apq)
            if tau == 0.0:
                t = 1.0
            else:
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            wp, wq = w[:, p].copy(), w[:, q].copy()
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if converged:
            break
    else:
        raise InvariantError("svd_3x3: Jacobi sweep cap reached without convergence")

    sig = np.sqrt((w * w).sum(axis=0))
    order = np.argsort(-sig)
    sig = sig[order]
    w = w[:, order]
    v = v[:, order]

    u = np.zeros((3, 3))
    null_cols = []
    cutoff = sig[0] * 1e-250
    for i in range(3):
        if sig[i] > cutoff:
            u[:, i] = w[:, i] / sig[i]
        else:
            null_cols.append(i)
            sig[i] = 0.0
    _complete_orthonormal(u, null_cols)
    return u, sig, v


def _complete_orthonormal(u: np.ndarray, null_cols: list[int]) -> None:
    """Fill zero columns of `u` with unit vectors orthogonal to the rest."""
    if not null_cols:
        return
    have = [i for i in range(3) if i not in null_cols]
    for i in null_cols:
        if len(have) == 2:
            cand = np.cross(u[:, have[0]], u[:, have[1]])
        else:
            # pick the coordinate axis least aligned with the existing columns
            basis = u[:, have] if have else np.zeros((3, 0))
            residuals = np.eye(3) - basis @ basis.T @ np.eye(3)
            cand = residuals[:, np.argmax((residuals * residuals).sum(axis=0))]
        norm = np.linalg.norm(cand)
        u[:, i] = cand / norm
        have.append(i)


# ---------------------------------------------------------------------------
# Rigid / similarity alignment (Umeyama)
# ---------------------------------------------------------------------------

_DEGENERATE_REL = 1e-12


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(
    src: np.ndarray,
    dst: np.ndarray,
    allow_scale: bool = True,
) -> tuple[SimilarityTransform, np.ndarray]:
    """Least-squares similarity registration of `src` onto `dst`.

    Returns the optimal (rotation, scale, translation) in the sum-of-squares
    sense along with the transformed source points.  Reflections are
    excluded via the usual determinant correction.  Rank-deficient point
    clouds (all points collinear or coincident) are reported through the
    transform's `degenerate` flag and aligned by translation only.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"procrustes_align expects matching (J,3) arrays, got {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError(f"procrustes_align needs at least 3 points, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    var_s = (sc * sc).sum() / n
    cov = dc.T @ sc / n

    u, sig, v = svd_3x3(cov)
    if var_s <= 0.0 or sig[0] == 0.0 or sig[1] <= _DEGENERATE_REL * sig[0]:
        t = SimilarityTransform(np.eye(3), 1.0, mu_d - mu_s, degenerate=True)
        return t, t.apply(src)

    d = 1.0 if np.linalg.det(u) * np.linalg.det(v) >= 0 else -1.0
    rot = u @ np.diag([1.0, 1.0, d]) @ v.T
    s = (sig[0] + sig[1] + d * sig[2]) / var_s if allow_scale else 1.0
    translation = mu_d - s * rot @ mu_s
    transform = SimilarityTransform(rot, s, translation)
    return transform, transform.apply(src)


# ---------------------------------------------------------------------------
# Evaluation metrics (millimeters)
# ---------------------------------------------------------------------------


def _check_pose_pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or y_hat.ndim != 3 or y_hat.shape[2] != 3:
        raise ShapeError(f"expected matching (T,J,3) arrays, got {y_hat.shape} vs {y.shape}")
    return y_hat, y


def _root_center(y: np.ndarray, root_index: int) -> np.ndarray:
    return y - y[:, root_index : root_index + 1, :]


def mpjpe(y_hat, y, root_index: int = 0) -> float:
    """Mean per-joint position error after per-frame root alignment."""
    y_hat, y = _check_pose_pair(y_hat, y)
    d = _root_center(y_hat, root_index) - _root_center(y, root_index)
    return float(np.linalg.norm(d, axis=-1).mean())


def p_mpjpe(y_hat, y, allow_scale: bool = True) -> float:
    """MPJPE after per-frame optimal similarity alignment onto the target."""
    y_hat, y = _check_pose_pair(y_hat, y)
    total = 0.0
    for t in range(y.shape[0]):
        _, aligned = procrustes_align(y_hat[t], y[t], allow_scale=allow_scale)
        total += np.linalg.norm(aligned - y[t], axis=-1).mean()
    return float(total / y.shape[0])


def pck(y_hat, y, threshold_mm: float = 150.0, root_index: int = 0) -> float:
    """Percentage of joints with root-aligned error strictly below threshold."""
    if threshold_mm < 0:
        raise ValueError(f"pck threshold must be nonnegative, got {threshold_mm}")
    y_hat, y = _check_pose_pair(y_hat, y)
    err = np.linalg.norm(_root_center(y_hat, root_index) - _root_center(y, root_index), axis=-1)
    return float(100.0 * (err < threshold_mm).mean())


AUC_THRESHOLDS_MM = tuple(float(t) for t in range(0, 151, 5))


def auc(y_hat, y, root_index: int = 0) -> float:
    """Mean PCK over the 31-point threshold grid 0, 5, ..., 150 mm."""
    return float(np.mean([pck(y_hat, y, thr, root_index) for thr in AUC_THRESHOLDS_MM]))


def metric_report(y_hat, y, root_index: int = 0) -> dict:
    """The standard JSON-ready metric bundle for one evaluation pass."""
    y_hat, y = _check_pose_pair(y_hat, y)
    return {
        "mpjpe_mm": mpjpe(y_hat, y, root_index),
        "p_mpjpe_mm": p_mpjpe(y_hat, y),
        "pck_pct": pck(y_hat, y, root_index=root_index),
        "auc_pct": auc(y_hat, y, root_index),
        "n_frames": int(y.shape[0]),
        "n_joints": int(y.shape[1]),
    }
