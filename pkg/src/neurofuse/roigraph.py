"""Subject-specific ROI graphs: node features, descriptors, Pearson adjacency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import AtlasLabelMap, Volume
from .errors import DimensionError, InputError, ParcellationError

DEFAULT_QUANTILES = 8


@dataclass
class RoiGraph:
    node_features: np.ndarray   # [R, 1] mean intensity per ROI
    descriptors: np.ndarray     # [R, Q] within-ROI quantiles
    adjacency: np.ndarray       # [R, R] Pearson correlations, unit diagonal
    prop_matrix: np.ndarray     # [R, R] symmetric normalized propagation weights

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


def _sorted_roi_values(volume: Volume, atlas: AtlasLabelMap):
    if volume.dims != atlas.dims:
        raise DimensionError(f"volume dims {volume.dims} != atlas dims {atlas.dims}")
    flat = volume.data.ravel(order="F")
    out = []
    for roi in range(1, atlas.n_rois + 1):
        idx = atlas.roi_indices(roi)
        if idx.size == 0:
            raise ParcellationError(f"ROI {roi} has no voxels")
        # sorting first makes every statistic independent of voxel order
        out.append(np.sort(flat[idx]))
    return out


def roi_mean_features(volume: Volume, atlas: AtlasLabelMap) -> np.ndarray:
    """Mean voxel intensity inside each ROI, shape ``[R, 1]``."""
    vals = _sorted_roi_values(volume, atlas)
    return np.array([[v.sum() / v.size] for v in vals])


def _nearest_rank(sorted_vals: np.ndarray, q: int) -> np.ndarray:
    n = sorted_vals.size
    # 1-based rank ceil(p * n) with p = (2k - 1) / (2q), in exact integer arithmetic
    ranks = [max(1, -(-((2 * k - 1) * n) // (2 * q))) for k in range(1, q + 1)]
    return sorted_vals[np.array(ranks) - 1]


def roi_descriptor(volume: Volume, atlas: AtlasLabelMap, q: int = DEFAULT_QUANTILES) -> np.ndarray:
    """Nearest-rank quantiles of each ROI's intensities at levels ``(k - 0.5) / q``."""
    if q < 2:
        raise InputError(f"need at least 2 quantiles, got {q}")
    return np.stack([_nearest_rank(v, q) for v in _sorted_roi_values(volume, atlas)])


def pearson(u: np.ndarray, v: np.ndarray, return_flag: bool = False):
    """Pearson correlation; a constant argument yields 0 (flagged as degenerate)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape or u.size < 2:
        raise DimensionError(f"pearson needs equal-length vectors of size >= 2, got {u.shape}, {v.shape}")
    if np.ptp(u) == 0 or np.ptp(v) == 0:
        return (0.0, True) if return_flag else 0.0
    du, dv = u - u.mean(), v - v.mean()
    r = float(np.clip((du @ dv) / np.sqrt((du @ du) * (dv @ dv)), -1.0, 1.0))
    return (r, False) if return_flag else r


def correlation_matrix(rows: np.ndarray) -> np.ndarray:
    """All pairwise Pearson correlations between rows, unit diagonal."""
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - rows.mean(axis=1, keepdims=True)
    constant = np.ptp(rows, axis=1) == 0
    centered[constant] = 0.0
    norms = np.sqrt((centered ** 2).sum(axis=1))
    norms[constant] = 1.0
    z = centered / norms[:, None]
    c = z @ z.T
    c = np.clip((c + c.T) / 2, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Map correlations to ``[0, 1]`` and apply symmetric degree normalization.

    ``W = (A + 1) / 2`` keeps the unit diagonal as a self-loop; the result is
    ``D^-1/2 W D^-1/2`` with ``D`` the row sums of ``W``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got {a.shape}")
    w = (a + 1.0) / 2.0
    deg = w.sum(axis=1)
    if np.any(deg <= 0):
        raise ParcellationError("adjacency has a node with zero degree")
    s = 1.0 / np.sqrt(deg)
    return w * s[:, None] * s[None, :]


def build_graph(volume: Volume, atlas: AtlasLabelMap, q: int = DEFAULT_QUANTILES) -> RoiGraph:
    """The ROI graph of one volume."""
    feats = roi_mean_features(volume, atlas)
    desc = roi_descriptor(volume, atlas, q)
    adj = correlation_matrix(desc)
    return RoiGraph(feats, desc, adj, normalize_adjacency(adj))


def write_adjacency_csv(path, adjacency: np.ndarray) -> None:
    """Dump an adjacency matrix as CSV with 9 significant digits."""
    with open(path, "w") as fh:
        for row in np.asarray(adjacency):
            fh.write(",".join(f"{x:.9g}" for x in row) + "\n")


def read_adjacency_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
