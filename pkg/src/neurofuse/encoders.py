"""Stand-in imaging and ROI encoders, projection heads, and checkpoints.

Parameters live in a flat ``dict`` of float64 arrays keyed by dotted layer
names (``img.conv1.w``, ``gcn.w2``, ``proj_roi.b1``, ``cls.w`` ...).  Each
encoder has a batched ``*_forward`` returning ``(output, cache)`` and a
matching ``*_backward`` that turns an upstream gradient into a gradient dict
with the same keys.
"""

from __future__ import annotations

import json
from typing import Dict, Optional, Tuple

import numpy as np

from . import numerics as nx
from .cohort import Volume
from .config import TrainConfig
from .errors import ConfigError, FormatError
from .roigraph import RoiGraph

Params = Dict[str, np.ndarray]

KERNEL = 3
STRIDE = 2


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(cfg: TrainConfig, n_rois: int, seed: int) -> Params:
    """Deterministic Glorot-uniform weights and zero biases for every component.

    All components are drawn in a fixed order regardless of which ones a
    configuration uses, so the imaging weights for a given seed are the same
    in imaging-only and joint runs.
    """
    rng = np.random.default_rng(seed)
    c1, c2 = cfg.img_channels
    k3 = KERNEL ** 3
    p: Params = {}

    def dense(name, n_in, n_out):
        p[f"{name}.w"] = _glorot(rng, (n_in, n_out), n_in, n_out)
        p[f"{name}.b"] = np.zeros(n_out)

    p["img.conv1.w"] = _glorot(rng, (c1, 1, KERNEL, KERNEL, KERNEL), k3, c1 * k3)
    p["img.conv1.b"] = np.zeros(c1)
    p["img.conv2.w"] = _glorot(rng, (c2, c1, KERNEL, KERNEL, KERNEL), c1 * k3, c2 * k3)
    p["img.conv2.b"] = np.zeros(c2)
    dense("img.head", c2, cfg.d_img)

    h = cfg.gcn_hidden
    dense("gcn.l1", 1, h)
    dense("gcn.l2", h, h)
    dense("gcn.head", h, cfg.d_roi)

    dense("mlp.l1", n_rois, cfg.mlp_hidden)
    dense("mlp.l2", cfg.mlp_hidden, cfg.d_roi)

    dense("proj_img.l1", cfg.d_img, cfg.proj_hidden)
    dense("proj_img.l2", cfg.proj_hidden, cfg.d_p)
    dense("proj_roi.l1", cfg.d_roi, cfg.proj_hidden)
    dense("proj_roi.l2", cfg.proj_hidden, cfg.d_p)

    dense("cls", cfg.d_fuse, 2)
    return p


# ---------------------------------------------------------------------------
# imaging encoder
# ---------------------------------------------------------------------------

def image_forward(p: Params, vols: np.ndarray):
    """``[N, X, Y, Z]`` volumes -> ``[N, d_img]`` embeddings."""
    vols = np.asarray(vols, dtype=np.float64)
    if vols.ndim != 4:
        raise ConfigError(f"expected a batch of 3D volumes, got shape {vols.shape}")
    x = vols[:, None]
    a1, cols1 = nx.conv3d(x, p["img.conv1.w"], STRIDE, p["img.conv1.b"], return_cols=True)
    h1 = nx.relu(a1)
    a2, cols2 = nx.conv3d(h1, p["img.conv2.w"], STRIDE, p["img.conv2.b"], return_cols=True)
    h2 = nx.relu(a2)
    pooled = nx.global_mean_pool(h2)
    if pooled.shape[1] != p["img.head.w"].shape[0]:
        raise ConfigError("imaging head does not match conv channel count")
    z = pooled @ p["img.head.w"] + p["img.head.b"]
    return z, (x, a1, h1, a2, h2, pooled, cols1, cols2)


def image_backward(p: Params, cache, dz: np.ndarray, return_act_grad: bool = False):
    x, a1, h1, a2, h2, pooled, cols1, cols2 = cache
    g = {"img.head.w": pooled.T @ dz, "img.head.b": dz.sum(axis=0)}
    dpooled = dz @ p["img.head.w"].T
    dh2 = nx.global_mean_pool_backward(dpooled, h2.shape)
    da2 = nx.relu_backward(dh2, a2)
    dh1, g["img.conv2.w"], g["img.conv2.b"] = nx.conv3d_backward(
        da2, h1, p["img.conv2.w"], STRIDE, cols=cols2)
    da1 = nx.relu_backward(dh1, a1)
    _, g["img.conv1.w"], g["img.conv1.b"] = nx.conv3d_backward(
        da1, x, p["img.conv1.w"], STRIDE, cols=cols1, need_input_grad=False)
    if return_act_grad:
        return g, dh2
    return g


def encode_image(volume, p: Params, dims: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    """Embedding of a single volume, shape ``[d_img]``."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    if dims is not None and tuple(data.shape) != tuple(dims):
        raise ConfigError(f"volume dims {data.shape} != configured {dims}")
    return image_forward(p, data[None])[0][0]


# ---------------------------------------------------------------------------
# ROI encoders
# ---------------------------------------------------------------------------

def gcn_forward(p: Params, feats: np.ndarray, prop: np.ndarray):
    """Two propagation layers, node-mean pooling, linear head.

    ``feats`` is ``[N, R, 1]`` and ``prop`` is ``[N, R, R]``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    prop = np.asarray(prop, dtype=np.float64)
    if feats.shape[-1] != p["gcn.l1.w"].shape[0] or prop.shape[-1] != feats.shape[1]:
        raise ConfigError(f"graph shapes {feats.shape}/{prop.shape} do not fit the GCN weights")
    px = nx.matmul(prop, feats)
    a1 = nx.matmul(px, p["gcn.l1.w"]) + p["gcn.l1.b"]
    h1 = nx.relu(a1)
    ph1 = nx.matmul(prop, h1)
    a2 = nx.matmul(ph1, p["gcn.l2.w"]) + p["gcn.l2.b"]
    h2 = nx.relu(a2)
    pooled = h2.mean(axis=1)
    z = pooled @ p["gcn.head.w"] + p["gcn.head.b"]
    return z, (feats, prop, px, a1, h1, ph1, a2, h2, pooled)


def gcn_backward(p: Params, cache, dz: np.ndarray, return_act_grad: bool = False):
    feats, prop, px, a1, h1, ph1, a2, h2, pooled = cache
    r = h2.shape[1]
    g = {"gcn.head.w": pooled.T @ dz, "gcn.head.b": dz.sum(axis=0)}
    dpooled = dz @ p["gcn.head.w"].T
    dh2 = np.repeat(dpooled[:, None, :] / r, r, axis=1)
    da2 = nx.relu_backward(dh2, a2)
    dph1, g["gcn.l2.w"] = nx.matmul_backward(da2, ph1, p["gcn.l2.w"])
    g["gcn.l2.b"] = da2.sum(axis=(0, 1))
    _, dh1 = nx.matmul_backward(dph1, prop, h1)
    da1 = nx.relu_backward(dh1, a1)
    _, g["gcn.l1.w"] = nx.matmul_backward(da1, px, p["gcn.l1.w"])
    g["gcn.l1.b"] = da1.sum(axis=(0, 1))
    if return_act_grad:
        return g, dh2
    return g


def mlp_forward(p: Params, feats: np.ndarray):
    """Flattened node features ``[N, R]`` -> dense -> relu -> dense."""
    feats = np.asarray(feats, dtype=np.float64).reshape(len(feats), -1)
    if feats.shape[1] != p["mlp.l1.w"].shape[0]:
        raise ConfigError(f"MLP expects {p['mlp.l1.w'].shape[0]} ROI features, got {feats.shape[1]}")
    a1 = feats @ p["mlp.l1.w"] + p["mlp.l1.b"]
    h1 = nx.relu(a1)
    z = h1 @ p["mlp.l2.w"] + p["mlp.l2.b"]
    return z, (feats, a1, h1)


def mlp_backward(p: Params, cache, dz: np.ndarray, return_input_grad: bool = False):
    feats, a1, h1 = cache
    g = {"mlp.l2.w": h1.T @ dz, "mlp.l2.b": dz.sum(axis=0)}
    da1 = nx.relu_backward(dz @ p["mlp.l2.w"].T, a1)
    g["mlp.l1.w"] = feats.T @ da1
    g["mlp.l1.b"] = da1.sum(axis=0)
    if return_input_grad:
        return g, da1 @ p["mlp.l1.w"].T
    return g


def encode_roi_gcn(graph: RoiGraph, p: Params) -> np.ndarray:
    return gcn_forward(p, graph.node_features[None], graph.prop_matrix[None])[0][0]


def encode_roi_mlp(graph: RoiGraph, p: Params) -> np.ndarray:
    return mlp_forward(p, graph.node_features.reshape(1, -1))[0][0]


# ---------------------------------------------------------------------------
# projection heads
# ---------------------------------------------------------------------------

def project_forward(p: Params, head: str, z: np.ndarray):
    """Dense -> relu -> dense into the shared space; ``head`` is ``proj_img`` or ``proj_roi``."""
    z = np.asarray(z, dtype=np.float64)
    w1 = p[f"{head}.l1.w"]
    if z.shape[-1] != w1.shape[0]:
        raise ConfigError(f"{head} expects inputs of width {w1.shape[0]}, got {z.shape[-1]}")
    a1 = z @ w1 + p[f"{head}.l1.b"]
    h1 = nx.relu(a1)
    out = h1 @ p[f"{head}.l2.w"] + p[f"{head}.l2.b"]
    return out, (z, a1, h1)


def project_backward(p: Params, head: str, cache, dout: np.ndarray):
    z, a1, h1 = cache
    g = {f"{head}.l2.w": h1.T @ dout, f"{head}.l2.b": dout.sum(axis=0)}
    da1 = nx.relu_backward(dout @ p[f"{head}.l2.w"].T, a1)
    g[f"{head}.l1.w"] = z.T @ da1
    g[f"{head}.l1.b"] = da1.sum(axis=0)
    return g, da1 @ p[f"{head}.l1.w"].T


def project(z: np.ndarray, p: Params, head: str = "proj_img") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out, _ = project_forward(p, head, z.reshape(1, -1))
    return out[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, params: Params) -> None:
    """JSON manifest line, then each layer as little-endian float64 in manifest order."""
    layers = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    with open(path, "wb") as fh:
        fh.write(json.dumps({"layers": layers}).encode("utf-8") + b"\n")
        for k in params:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def read_checkpoint(path) -> Params:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    try:
        layers = json.loads(raw[:nl].decode("utf-8"))["layers"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad checkpoint manifest ({exc})") from exc
    out: Params = {}
    offset = nl + 1
    for layer in layers:
        shape = tuple(layer["shape"])
        nbytes = int(np.prod(shape)) * 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated payload for layer {layer['name']}")
        out[layer["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return out
