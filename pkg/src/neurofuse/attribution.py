"""Region-level Grad-CAM contribution maps for the imaging and ROI branches.

Scores are always reported per ROI and min-max normalized to ``[0, 1]``.  A
constant raw map has no localized evidence and normalizes to all zeros.

The classifier sees ``[z_img, z_roi]`` for joint models, ``z_img`` for
imaging-only models and ``z_roi`` for ROI-only models, so the imaging slice
of the classifier weights is always the first ``d_img`` rows and the ROI
slice the last ``d_roi`` rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import encoders as enc
from . import numerics as nx
from .cohort import AtlasLabelMap, Cohort, Volume
from .config import TrainConfig
from .errors import ConfigError, InputError
from .roigraph import RoiGraph

BRANCH_TAGS = ("imaging", "roi", "joint")
CLASS_TAGS = ("control", "disorder")   # index = class label


@dataclass
class ContributionMap:
    scores: np.ndarray
    branch: str
    cls: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if self.branch not in BRANCH_TAGS:
            raise ConfigError(f"branch tag must be one of {BRANCH_TAGS}, got {self.branch!r}")
        if self.cls not in CLASS_TAGS:
            raise ConfigError(f"class tag must be one of {CLASS_TAGS}, got {self.cls!r}")

    @property
    def n_rois(self) -> int:
        return self.scores.size


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Rescale to ``[0, 1]``; constant (or empty-range) maps become zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        return np.zeros_like(raw)
    out = (raw - lo) / (hi - lo)
    # pin the extremes exactly; rounding can otherwise leave 1 - ulp
    out[raw == lo] = 0.0
    out[raw == hi] = 1.0
    return out


def _class_tag(target: int) -> str:
    if target not in (0, 1):
        raise ConfigError(f"target class must be 0 or 1, got {target}")
    return CLASS_TAGS[target]


def _cls_column(params: enc.Params, target: int, rows: slice) -> np.ndarray:
    return params["cls.w"][rows, target]


def _upsample_nearest(cam: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Repeat each CAM cell over the voxels it summarizes."""
    idx = [np.floor(np.arange(n) * m / n).astype(int) for n, m in zip(dims, cam.shape)]
    return cam[np.ix_(*idx)]


def roi_means(field: np.ndarray, atlas: AtlasLabelMap) -> np.ndarray:
    flat = np.asarray(field, dtype=np.float64).ravel(order="F")
    return np.array([flat[atlas.roi_indices(r)].mean() for r in range(1, atlas.n_rois + 1)])


def imaging_cam(params: enc.Params, volume, target: int) -> np.ndarray:
    """Grad-CAM at the last conv layer of the imaging encoder, before upsampling.

    Channel weights are the spatial mean of the target logit's gradient with
    respect to each activation map.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    _class_tag(target)
    _, cache = enc.image_forward(params, data[None])
    d_img = params["img.head.w"].shape[1]
    dz = _cls_column(params, target, slice(0, d_img))[None]
    _, dh2 = enc.image_backward(params, cache, dz, return_act_grad=True)
    h2 = cache[4][0]                              # [C, d, h, w]
    weights = dh2[0].mean(axis=(1, 2, 3))
    return nx.relu(np.tensordot(weights, h2, axes=1))


def gradcam_imaging(params: enc.Params, volume, atlas: AtlasLabelMap, target: int,
                    raw: bool = False) -> ContributionMap:
    """Per-ROI imaging relevance for class ``target`` (1 = disorder)."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    if tuple(data.shape) != tuple(atlas.dims):
        raise ConfigError(f"volume dims {data.shape} do not match atlas dims {atlas.dims}")
    cam = imaging_cam(params, data, target)
    scores = roi_means(_upsample_nearest(cam, data.shape), atlas)
    return ContributionMap(scores if raw else minmax_normalize(scores), "imaging",
                           _class_tag(target))


def roi_relevance(params: enc.Params, feats: np.ndarray, prop: Optional[np.ndarray],
                  target: int, encoder: str = "gcn") -> np.ndarray:
    """Raw node relevance of the ROI branch.

    For the GCN this is ``sum_c relu(grad * activation)`` over the hidden
    channels of the last propagation layer.  The MLP encoder has no node
    activations, so it uses ``relu(grad * input)`` on the node features.
    """
    _class_tag(target)
    feats = np.asarray(feats, dtype=np.float64).reshape(1, -1)
    d_roi = params["gcn.head.w" if encoder == "gcn" else "mlp.l2.w"].shape[1]
    dz = _cls_column(params, target, slice(-d_roi, None))[None]
    if encoder == "gcn":
        _, cache = enc.gcn_forward(params, feats[:, :, None], np.asarray(prop)[None])
        _, dh2 = enc.gcn_backward(params, cache, dz, return_act_grad=True)
        h2 = cache[7]
        return nx.relu(dh2[0] * h2[0]).sum(axis=1)
    if encoder == "mlp":
        _, cache = enc.mlp_forward(params, feats)
        _, dx = enc.mlp_backward(params, cache, dz, return_input_grad=True)
        return nx.relu(dx[0] * feats[0])
    raise ConfigError(f"unknown ROI encoder {encoder!r}")


def gradcam_roi(params: enc.Params, graph: RoiGraph, target: int, encoder: str = "gcn",
                raw: bool = False) -> ContributionMap:
    """Per-ROI relevance of the ROI branch for class ``target``."""
    if encoder == "gcn" and graph.prop_matrix.shape[0] != graph.n_nodes:
        raise ConfigError("graph propagation matrix does not match its node count")
    rel = roi_relevance(params, graph.node_features[:, 0], graph.prop_matrix, target, encoder)
    return ContributionMap(rel if raw else minmax_normalize(rel), "roi", _class_tag(target))


def joint_map(img_map: ContributionMap, roi_map: ContributionMap) -> ContributionMap:
    """Both branches of one joint model, averaged per ROI and renormalized."""
    if img_map.n_rois != roi_map.n_rois:
        raise InputError("imaging and ROI maps cover different ROI counts")
    if img_map.cls != roi_map.cls:
        raise InputError("imaging and ROI maps target different classes")
    mean = (minmax_normalize(img_map.scores) + minmax_normalize(roi_map.scores)) / 2
    return ContributionMap(minmax_normalize(mean), "joint", img_map.cls)


def class_average_map(maps: Sequence[ContributionMap], cls: str) -> ContributionMap:
    """Region-wise mean of the maps tagged ``cls``, renormalized."""
    chosen = [m for m in maps if m.cls == cls]
    if not chosen:
        raise InputError(f"no maps tagged {cls!r} to average")
    branch, r = chosen[0].branch, chosen[0].n_rois
    for m in chosen:
        if m.n_rois != r or m.branch != branch:
            raise InputError("maps to average must share ROI count and branch")
    mean = np.mean([m.scores for m in chosen], axis=0)
    return ContributionMap(minmax_normalize(mean), branch, cls)


def top_set(scores: np.ndarray, k: int) -> set:
    """Indices of the ``k`` largest scores; ties go to the lower ROI index."""
    order = np.lexsort((np.arange(scores.size), -np.asarray(scores)))
    return set(order[:k].tolist())


def branch_overlap(map_a: ContributionMap, map_b: ContributionMap,
                   top_fraction: float = 0.25) -> float:
    """Jaccard overlap of the top ``ceil(top_fraction * R)`` ROIs of two maps."""
    if map_a.n_rois != map_b.n_rois:
        raise InputError(f"maps cover {map_a.n_rois} and {map_b.n_rois} ROIs")
    if not 0 < top_fraction <= 1:
        raise ConfigError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    k = math.ceil(top_fraction * map_a.n_rois)
    a, b = top_set(map_a.scores, k), top_set(map_b.scores, k)
    return len(a & b) / len(a | b)


# ---------------------------------------------------------------------------
# maps over cross-validation test sets
# ---------------------------------------------------------------------------

def subject_maps(params: enc.Params, cfg: TrainConfig, vol: np.ndarray, feats: np.ndarray,
                 prop: np.ndarray, atlas: AtlasLabelMap, target: int) -> ContributionMap:
    """The map a trained model of kind ``cfg.branches`` assigns one subject."""
    if cfg.branches == "img":
        return gradcam_imaging(params, vol, atlas, target)
    rel = roi_relevance(params, feats, prop, target, cfg.roi_encoder)
    roi = ContributionMap(minmax_normalize(rel), "roi", _class_tag(target))
    if cfg.branches == "roi":
        return roi
    return joint_map(gradcam_imaging(params, vol, atlas, target), roi)


def cv_maps(cohort: Cohort, cfg: TrainConfig, inputs=None) -> Tuple[List[ContributionMap], object]:
    """Per-subject maps over every fold's test set, each for the subject's true class."""
    from .trainer import prepare_inputs, run_cv, mask_views

    if inputs is None:
        inputs = prepare_inputs(cohort, cfg.quantiles)
    result = run_cv(cohort, cfg, inputs=inputs, keep_params=True)
    masked, _ = mask_views(inputs, cfg.mask_branch, cfg.mask_rate, cfg.seed, cfg.mask_target)
    maps = []
    for report, params in zip(result.reports, result.params):
        for i in masked.index(report.test_ids):
            maps.append(subject_maps(params, cfg, masked.vols[i], masked.feats[i],
                                     masked.prop[i], cohort.atlas, int(masked.labels[i])))
    return maps, result


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def write_map_csv(path, cmap: ContributionMap) -> None:
    lines = ["roi_id,score"] + [f"{i + 1},{s:.4f}" for i, s in enumerate(cmap.scores)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_map_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = fh.read().strip().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


def write_summary_json(path, maps: Sequence[ContributionMap],
                       overlaps: Optional[Dict[str, float]] = None) -> None:
    """Class-average maps keyed ``branch -> class -> [scores]`` (4 decimals)."""
    out: Dict[str, Dict] = {}
    for m in maps:
        out.setdefault(m.branch, {})[m.cls] = [round(float(s), 4) for s in m.scores]
    if overlaps is not None:
        out["overlap"] = {k: round(float(v), 4) for k, v in overlaps.items()}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
