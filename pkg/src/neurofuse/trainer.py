"""Optimization loop, missing-view masking and cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import encoders as enc
from . import numerics as nx
from .cohort import Cohort, stratified_folds
from .config import TrainConfig
from .errors import ConfigError
from .metrics import Prediction, accuracy_f1, aggregate, auc
from .objective import (fuse_concat, info_nce, joint_loss,
                        similarity_backward, similarity_matrix)
from .roigraph import build_graph, normalize_adjacency

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


# ---------------------------------------------------------------------------
# prepared inputs and masking
# ---------------------------------------------------------------------------

@dataclass
class ViewInputs:
    """Both views of a set of subjects as stacked arrays."""

    ids: List[str]
    labels: np.ndarray      # [n]
    vols: np.ndarray        # [n, X, Y, Z]
    feats: np.ndarray       # [n, R] ROI mean intensities
    prop: np.ndarray        # [n, R, R] propagation matrices
    mask: np.ndarray = None  # [n] bool, True where a branch is masked

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros(len(self.ids), dtype=bool)

    def __len__(self):
        return len(self.ids)

    def index(self, ids: Sequence[str]) -> np.ndarray:
        pos = {sid: i for i, sid in enumerate(self.ids)}
        try:
            return np.array([pos[s] for s in ids], dtype=int)
        except KeyError as exc:
            raise ConfigError(f"unknown subject id {exc.args[0]!r}") from exc

    def take(self, idx: np.ndarray) -> "ViewInputs":
        return ViewInputs([self.ids[i] for i in idx], self.labels[idx], self.vols[idx],
                          self.feats[idx], self.prop[idx], self.mask[idx])


def prepare_inputs(cohort: Cohort, q: int = 8) -> ViewInputs:
    """Stack volumes and build every subject's ROI graph."""
    graphs = [build_graph(s.volume, cohort.atlas, q) for s in cohort.subjects]
    return ViewInputs(
        ids=cohort.ids,
        labels=cohort.labels,
        vols=cohort.volumes(),
        feats=np.stack([g.node_features[:, 0] for g in graphs]),
        prop=np.stack([g.prop_matrix for g in graphs]),
    )


def mask_views(inputs: ViewInputs, branch: str, rate: float, seed: int,
               target: str = "input") -> Tuple[ViewInputs, np.ndarray]:
    """Zero one branch for ``round(rate * n)`` subjects chosen by ``seed``.

    With ``target="input"`` the masked subjects' volume (``img``) or ROI graph
    (``roi``, replaced by the graph of an all-zero volume) is zeroed here.
    With ``target="embedding"`` inputs are left alone and the returned mask
    tells the trainer which embeddings to zero.
    """
    if branch not in ("none", "img", "roi"):
        raise ConfigError(f"unknown branch {branch!r}; expected none, img or roi")
    if not 0 <= rate <= 1:
        raise ConfigError(f"mask rate must lie in [0, 1], got {rate}")
    n = len(inputs)
    count = 0 if branch == "none" else int(np.floor(rate * n + 0.5))
    mask = np.zeros(n, dtype=bool)
    if count == 0:
        return inputs, mask
    chosen = np.random.default_rng(seed).permutation(n)[:count]
    mask[chosen] = True
    vols, feats, prop = inputs.vols, inputs.feats, inputs.prop
    if target == "input":
        if branch == "img":
            vols = vols.copy()
            vols[mask] = 0.0
        else:
            r = feats.shape[1]
            feats = feats.copy()
            feats[mask] = 0.0
            prop = prop.copy()
            prop[mask] = normalize_adjacency(np.eye(r))
    out = ViewInputs(list(inputs.ids), inputs.labels.copy(), vols, feats, prop, mask.copy())
    return out, mask


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_adam_state(params: enc.Params) -> Dict:
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params: enc.Params, grads: enc.Params, state: Dict, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected adaptive-moment update; parameters without a gradient are untouched."""
    t = state["t"] + 1
    new_params = dict(params)
    m_all, v_all = dict(state["m"]), dict(state["v"])
    for k, g in grads.items():
        if k not in params:
            raise ConfigError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        m = beta1 * m_all.get(k, 0.0) + (1 - beta1) * g
        v = beta2 * v_all.get(k, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_all[k], v_all[k] = m, v
    return new_params, {"t": t, "m": m_all, "v": v_all}


# ---------------------------------------------------------------------------
# forward / backward of the full objective
# ---------------------------------------------------------------------------

def _embed(p, cfg: TrainConfig, batch: ViewInputs):
    caches = {}
    z_img = z_roi = None
    keep = (~batch.mask).astype(np.float64)[:, None]
    if cfg.uses_img:
        z_img, caches["img"] = enc.image_forward(p, batch.vols)
        if cfg.mask_target == "embedding" and cfg.mask_branch == "img":
            z_img = z_img * keep
    if cfg.uses_roi:
        if cfg.roi_encoder == "gcn":
            z_roi, caches["roi"] = enc.gcn_forward(p, batch.feats[:, :, None], batch.prop)
        else:
            z_roi, caches["roi"] = enc.mlp_forward(p, batch.feats)
        if cfg.mask_target == "embedding" and cfg.mask_branch == "roi":
            z_roi = z_roi * keep
    return z_img, z_roi, caches


def _fused(cfg, z_img, z_roi):
    if cfg.branches == "joint":
        return fuse_concat(z_img, z_roi)
    return z_img if cfg.branches == "img" else z_roi


def batch_objective(p: enc.Params, cfg: TrainConfig, batch: ViewInputs,
                    need_grad: bool = True):
    """Loss breakdown and gradients of ``L_cls + lambda * L_con`` on one batch."""
    z_img, z_roi, caches = _embed(p, cfg, batch)
    fused = _fused(cfg, z_img, z_roi)
    logits = fused @ p["cls.w"] + p["cls.b"]
    l_cls, dlogits = nx.softmax_xent_batch(logits, batch.labels)

    lam = cfg.effective_lam
    l_con = 0.0
    keep_idx = np.flatnonzero(~batch.mask)
    con = None
    if lam > 0 and keep_idx.size >= 2:
        pi, ci = enc.project_forward(p, "proj_img", z_img[keep_idx])
        pr, cr = enc.project_forward(p, "proj_roi", z_roi[keep_idx])
        sim = similarity_matrix(pi, pr, cfg.tau)
        l_con, dS = info_nce(sim)
        con = (pi, ci, pr, cr, dS)
    breakdown = joint_loss(l_cls, l_con, lam)
    if not need_grad:
        return breakdown, None

    g = {"cls.w": fused.T @ dlogits, "cls.b": dlogits.sum(axis=0)}
    dfused = dlogits @ p["cls.w"].T
    dz_img = dz_roi = None
    if cfg.branches == "joint":
        dz_img, dz_roi = dfused[:, :cfg.d_img].copy(), dfused[:, cfg.d_img:].copy()
    elif cfg.branches == "img":
        dz_img = dfused
    else:
        dz_roi = dfused

    if con is not None:
        pi, ci, pr, cr, dS = con
        dpi, dpr = similarity_backward(lam * dS, pi, pr, cfg.tau)
        gi, dzi = enc.project_backward(p, "proj_img", ci, dpi)
        gr, dzr = enc.project_backward(p, "proj_roi", cr, dpr)
        g.update(gi)
        g.update(gr)
        dz_img[keep_idx] += dzi
        dz_roi[keep_idx] += dzr

    keep = (~batch.mask).astype(np.float64)[:, None]
    if dz_img is not None:
        if cfg.mask_target == "embedding" and cfg.mask_branch == "img":
            dz_img = dz_img * keep
        g.update(enc.image_backward(p, caches["img"], dz_img))
    if dz_roi is not None:
        if cfg.mask_target == "embedding" and cfg.mask_branch == "roi":
            dz_roi = dz_roi * keep
        if cfg.roi_encoder == "gcn":
            g.update(enc.gcn_backward(p, caches["roi"], dz_roi))
        else:
            g.update(enc.mlp_backward(p, caches["roi"], dz_roi))
    return breakdown, g


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainTrace:
    cls: List[float] = field(default_factory=list)
    con: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)


def _as_inputs(data, cfg: TrainConfig) -> ViewInputs:
    if isinstance(data, ViewInputs):
        return data
    inputs = prepare_inputs(data, cfg.quantiles)
    return mask_views(inputs, cfg.mask_branch, cfg.mask_rate, cfg.seed, cfg.mask_target)[0]


def train_model(data, train_ids: Sequence[str], cfg: TrainConfig,
                seed: Optional[int] = None) -> Tuple[enc.Params, TrainTrace]:
    """Train from a fresh seeded initialization on ``train_ids``.

    ``data`` is a :class:`Cohort` or already-prepared :class:`ViewInputs`.
    Each epoch shuffles the training ids, batches them (keeping the last
    partial batch) and takes one Adam step per batch.
    """
    inputs = _as_inputs(data, cfg)
    idx = inputs.index(train_ids)
    if idx.size < max(cfg.batch_size, 2):
        raise ConfigError(f"{idx.size} training subjects is fewer than batch size {cfg.batch_size}")
    seed = cfg.seed if seed is None else seed
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    params = enc.init_params(cfg, inputs.feats.shape[1], int(init_seq.generate_state(1)[0]))
    state = init_adam_state(params)
    rng = np.random.default_rng(shuffle_seq)
    trace = TrainTrace()
    for _ in range(cfg.epochs):
        order = idx[rng.permutation(idx.size)]
        sums = np.zeros(3)
        nb = 0
        for start in range(0, order.size, cfg.batch_size):
            batch = inputs.take(order[start:start + cfg.batch_size])
            loss, grads = batch_objective(params, cfg, batch)
            params, state = adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            sums += (loss.cls, loss.con, loss.total)
            nb += 1
        trace.cls.append(sums[0] / nb)
        trace.con.append(sums[1] / nb)
        trace.total.append(sums[2] / nb)
    return params, trace


def forward_outputs(p: enc.Params, cfg: TrainConfig, inputs: ViewInputs):
    """Logits and (for joint models) projections, evaluated in chunks."""
    logits, proj_i, proj_r = [], [], []
    for start in range(0, len(inputs), EVAL_CHUNK):
        chunk = inputs.take(np.arange(start, min(start + EVAL_CHUNK, len(inputs))))
        z_img, z_roi, _ = _embed(p, cfg, chunk)
        logits.append(_fused(cfg, z_img, z_roi) @ p["cls.w"] + p["cls.b"])
        if cfg.branches == "joint":
            proj_i.append(enc.project_forward(p, "proj_img", z_img)[0])
            proj_r.append(enc.project_forward(p, "proj_roi", z_roi)[0])
    out = {"logits": np.concatenate(logits)}
    if proj_i:
        out["p_img"] = np.concatenate(proj_i)
        out["p_roi"] = np.concatenate(proj_r)
    return out


def predict(p: enc.Params, cfg: TrainConfig, inputs: ViewInputs) -> List[Prediction]:
    logits = forward_outputs(p, cfg, inputs)["logits"]
    probs = nx.softmax(logits, axis=1)
    return [Prediction(sid, float(pr[1]), int(np.argmax(lg)), int(y))
            for sid, pr, lg, y in zip(inputs.ids, probs, logits, inputs.labels)]


def alignment_gap(p_img: np.ndarray, p_roi: np.ndarray) -> float:
    """Mean same-subject cosine minus mean cross-subject cosine."""
    n = p_img.shape[0]
    if n < 2:
        return float("nan")
    c = similarity_matrix(p_img, p_roi, 1.0).S
    off = ~np.eye(n, dtype=bool)
    return float(np.mean(np.diag(c)) - np.mean(c[off]))


def heldout_gap(p: enc.Params, cfg: TrainConfig, inputs: ViewInputs) -> Optional[float]:
    if cfg.branches != "joint":
        return None
    keep = inputs.take(np.flatnonzero(~inputs.mask))
    if len(keep) < 2:
        return None
    out = forward_outputs(p, cfg, keep)
    return alignment_gap(out["p_img"], out["p_roi"])


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldReport:
    fold: int
    acc: float
    auc: float
    f1: float
    cls_trace: List[float]
    con_trace: List[float]
    alignment_gap: Optional[float]
    alignment_gap_init: Optional[float]
    train_ids: List[str]
    test_ids: List[str]
    predictions: List[Prediction] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        return {
            "fold": self.fold, "acc": self.acc, "auc": self.auc, "f1": self.f1,
            "alignment_gap": self.alignment_gap,
            "alignment_gap_init": self.alignment_gap_init,
            "cls_trace": list(self.cls_trace), "con_trace": list(self.con_trace),
            "test_ids": list(self.test_ids),
        }


@dataclass
class CVResult:
    reports: List[FoldReport]
    aggregate: Dict[str, Tuple[float, float]]
    params: List[enc.Params] = field(default_factory=list, repr=False)

    def mean(self, metric: str) -> float:
        return self.aggregate[metric][0]


def run_fold(inputs: ViewInputs, fold: int, train_ids, test_ids, cfg: TrainConfig):
    seed = cfg.seed + fold
    test = inputs.take(inputs.index(test_ids))
    init = enc.init_params(cfg, inputs.feats.shape[1],
                           int(np.random.SeedSequence(seed).spawn(2)[0].generate_state(1)[0]))
    gap0 = heldout_gap(init, cfg, test)
    params, trace = train_model(inputs, train_ids, cfg, seed=seed)
    preds = predict(params, cfg, test)
    acc, f1 = accuracy_f1(preds)
    report = FoldReport(fold, acc, auc(preds), f1, trace.cls, trace.con,
                        heldout_gap(params, cfg, test), gap0,
                        list(train_ids), list(test_ids), preds)
    return report, params


def run_cv(cohort: Cohort, cfg: TrainConfig, inputs: Optional[ViewInputs] = None,
           keep_params: bool = False) -> CVResult:
    """Stratified k-fold CV with a fresh seeded model per fold.

    Fold ``f`` trains with seed ``cfg.seed + f``; masking is drawn once for
    the whole cohort so a subject's mask is the same in training and test.
    """
    if inputs is None:
        inputs = prepare_inputs(cohort, cfg.quantiles)
    inputs, _ = mask_views(inputs, cfg.mask_branch, cfg.mask_rate, cfg.seed, cfg.mask_target)
    folds = stratified_folds(cohort, cfg.k_folds, cfg.seed)
    reports, params = [], []
    for f, (train_ids, test_ids) in enumerate(folds):
        report, p = run_fold(inputs, f, train_ids, test_ids, cfg)
        logger.info("fold %d: acc=%.3f auc=%.3f f1=%.3f", f, report.acc, report.auc, report.f1)
        reports.append(report)
        if keep_params:
            params.append(p)
    return CVResult(reports, aggregate(reports), params)
