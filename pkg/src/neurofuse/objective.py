"""Cross-view similarity, bidirectional InfoNCE, fusion and the joint loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    tau: float

    @property
    def batch_size(self) -> int:
        return self.S.shape[0]


@dataclass
class LossBreakdown:
    cls: float
    con: float
    lam: float
    total: float


def _unit_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where((norms > 0)[:, None], x / safe[:, None], 0.0)
    return unit, norms, safe


def similarity_matrix(p_img: np.ndarray, p_roi: np.ndarray, tau: float) -> SimilarityMatrix:
    """``S[i, j] = cos(p_img[i], p_roi[j]) / tau``; zero-norm rows give zero similarity."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    p_img = nx.as_tensor(p_img)
    p_roi = nx.as_tensor(p_roi)
    if p_img.ndim != 2 or p_img.shape != p_roi.shape or p_img.shape[0] < 1:
        raise DimensionError(f"projection batches must be matching [B, d]: {p_img.shape}, {p_roi.shape}")
    u, _, _ = _unit_rows(p_img)
    v, _, _ = _unit_rows(p_roi)
    return SimilarityMatrix(np.clip(u @ v.T, -1.0, 1.0) / tau, float(tau))


def similarity_backward(dS: np.ndarray, p_img: np.ndarray, p_roi: np.ndarray,
                        tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the similarity matrix with respect to both projection batches."""
    u, nu, su = _unit_rows(p_img)
    v, nv, sv = _unit_rows(p_roi)
    du_hat = dS @ v / tau
    dv_hat = dS.T @ u / tau

    def through_norm(dhat, unit, norms, safe):
        radial = np.sum(dhat * unit, axis=1, keepdims=True)
        g = (dhat - radial * unit) / safe[:, None]
        g[norms == 0] = 0.0
        return g

    return through_norm(du_hat, u, nu, su), through_norm(dv_hat, v, nv, sv)


def info_nce(S: Union[SimilarityMatrix, np.ndarray]) -> Tuple[float, np.ndarray]:
    """Bidirectional InfoNCE over a square similarity matrix.

    Returns the loss and its gradient with respect to ``S``.  Row terms treat
    imaging-to-ROI retrieval, column terms the reverse; the diagonal holds the
    same-subject positives.
    """
    S = S.S if isinstance(S, SimilarityMatrix) else nx.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise DimensionError(f"similarity matrix must be square and nonempty, got {S.shape}")
    b = S.shape[0]
    diag = np.diag(S)
    lse_rows = nx.logsumexp(S, axis=1)
    lse_cols = nx.logsumexp(S, axis=0)
    loss = -float(np.sum((diag - lse_rows) + (diag - lse_cols))) / (2 * b)
    soft_rows = np.exp(S - lse_rows[:, None])
    soft_cols = np.exp(S - lse_cols[None, :])
    grad = (soft_rows + soft_cols - 2.0 * np.eye(b)) / (2 * b)
    return loss, grad


def fuse_concat(z_img: np.ndarray, z_roi: np.ndarray) -> np.ndarray:
    """``[z_img ; z_roi]`` along the last axis, imaging block first."""
    return np.concatenate([np.asarray(z_img, dtype=np.float64),
                           np.asarray(z_roi, dtype=np.float64)], axis=-1)


def joint_loss(l_cls: float, l_con: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return LossBreakdown(float(l_cls), float(l_con), float(lam), float(l_cls + lam * l_con))
