import numpy as np
import pytest

from neurofuse.cohort import generate_cohort, stratified_folds
from neurofuse.config import TrainConfig
from neurofuse.errors import ConfigError
from neurofuse.metrics import aggregate
from neurofuse.trainer import (ViewInputs, adam_step, alignment_gap, init_adam_state,
                               mask_views, prepare_inputs, run_cv, run_fold, train_model)

SMALL = dict(d_img=8, d_roi=8, d_p=4, img_channels=(4, 4), gcn_hidden=8, mlp_hidden=8,
             proj_hidden=8, batch_size=8, epochs=4, lr=1e-2)


@pytest.fixture(scope="module")
def small():
    c = generate_cohort(20, r=4, dims=(8, 8, 8), mode="easy", seed=0)
    return c, prepare_inputs(c)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    state = init_adam_state(p)
    for _ in range(3):
        p2, state = adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(p2["w"], p["w"])


def test_adam_first_step():
    p = {"w": np.array(1.0)}
    p2, state = adam_step(p, {"w": np.array(2.0)}, init_adam_state(p), lr=0.1)
    assert p2["w"] == pytest.approx(0.9, abs=1e-7)
    assert state["t"] == 1


def test_adam_groups_independent():
    p = {"a": np.ones(2), "b": np.ones(3)}
    g = {"a": np.array([1.0, -1.0]), "b": np.zeros(3)}
    p2, _ = adam_step(p, g, init_adam_state(p), lr=0.1)
    assert np.allclose(p2["a"], [0.9, 1.1]) and np.array_equal(p2["b"], p["b"])
    with pytest.raises(ConfigError):
        adam_step(p, {"a": np.ones(3)}, init_adam_state(p))


def test_mask_rates(small):
    _, inputs = small
    same, mask = mask_views(inputs, "img", 0.0, 1)
    assert same is inputs and not mask.any()
    allm, mask = mask_views(inputs, "img", 1.0, 1)
    assert mask.all() and np.all(allm.vols == 0)
    ten = inputs.take(np.arange(10))
    a, ma = mask_views(ten, "roi", 0.5, 3)
    b, mb = mask_views(ten, "roi", 0.5, 3)
    assert ma.sum() == 5 and np.array_equal(ma, mb)
    assert np.all(a.feats[ma] == 0) and np.array_equal(a.vols, ten.vols)
    with pytest.raises(ConfigError):
        mask_views(ten, "both", 0.5, 3)


def test_training_is_deterministic(small):
    c, inputs = small
    cfg = TrainConfig(**SMALL)
    p1, t1 = train_model(inputs, c.ids[:16], cfg)
    p2, t2 = train_model(inputs, c.ids[:16], cfg)
    assert t1.total == t2.total and len(t1.cls) == cfg.epochs
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_training_needs_a_full_batch(small):
    c, inputs = small
    with pytest.raises(ConfigError):
        train_model(inputs, c.ids[:5], TrainConfig(**SMALL))


def test_concat_run_has_no_contrastive_term(small):
    c, inputs = small
    _, trace = train_model(inputs, c.ids[:16], TrainConfig(**SMALL, fusion="concat"))
    assert all(x == 0 for x in trace.con)
    assert trace.total == trace.cls


def test_loss_decreases_on_easy():
    c = generate_cohort(200, mode="easy", seed=0)
    _, trace = train_model(c, c.ids, TrainConfig(epochs=8))
    assert trace.total[-1] < trace.total[0]


def test_cv_reports_and_order_independence(small):
    c, inputs = small
    cfg = TrainConfig(**SMALL, k_folds=4)
    res = run_cv(c, cfg, inputs=inputs)
    assert len(res.reports) == 4
    for r in res.reports:
        assert not set(r.train_ids) & set(r.test_ids)
        assert all(0 <= getattr(r, m) <= 1 for m in ("acc", "auc", "f1"))
    folds = stratified_folds(c, 4, cfg.seed)
    rev = [run_fold(inputs, f, *folds[f], cfg)[0] for f in reversed(range(4))]
    assert aggregate(rev) == res.aggregate


def test_rate_zero_is_bitwise_unmasked(small):
    c, inputs = small
    base = TrainConfig(**SMALL, k_folds=4)
    a = run_cv(c, base, inputs=inputs, keep_params=True)
    b = run_cv(c, base.replace(mask_branch="img", mask_rate=0.0), inputs=inputs,
               keep_params=True)
    assert a.aggregate == b.aggregate
    assert all(np.array_equal(pa[k], pb[k]) for pa, pb in zip(a.params, b.params) for k in pa)


def test_test_data_never_reaches_training(small):
    c, inputs = small
    cfg = TrainConfig(**SMALL)
    train, test = c.ids[:16], c.ids[16:]
    ti = inputs.index(test)
    vols, feats = inputs.vols.copy(), inputs.feats.copy()
    vols[ti] = 99.0
    feats[ti] = -7.0
    corrupted = ViewInputs(list(inputs.ids), inputs.labels.copy(), vols, feats,
                           inputs.prop.copy())
    p1, _ = train_model(inputs, train, cfg)
    p2, _ = train_model(corrupted, train, cfg)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_alignment_gap_examples():
    e = np.eye(3)
    assert alignment_gap(e, e) == pytest.approx(1.0)
    assert alignment_gap(np.ones((3, 2)), np.ones((3, 2))) == pytest.approx(0.0)


def test_alignment_gap_grows_with_contrastive_training():
    c = generate_cohort(60, r=8, dims=(8, 8, 8), mode="easy", seed=1)
    cfg = TrainConfig(epochs=30, k_folds=3)
    res = run_cv(c, cfg)
    for r in res.reports:
        assert r.alignment_gap > r.alignment_gap_init
