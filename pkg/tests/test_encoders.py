import numpy as np
import pytest

from neurofuse import encoders as enc
from neurofuse.cohort import Volume, generate_cohort
from neurofuse.config import TrainConfig
from neurofuse.errors import ConfigError, FormatError
from neurofuse.roigraph import RoiGraph, build_graph, normalize_adjacency


@pytest.fixture(scope="module")
def cfg():
    return TrainConfig()


@pytest.fixture(scope="module")
def params(cfg):
    return enc.init_params(cfg, 16, seed=3)


def _zeros(p):
    return {k: np.zeros_like(v) for k, v in p.items()}


def _graph(feats, adj):
    feats = np.asarray(feats, float).reshape(-1, 1)
    return RoiGraph(feats, np.repeat(feats, 2, axis=1), adj, normalize_adjacency(adj))


def test_shapes(cfg, params):
    c = generate_cohort(2, seed=0)
    g = build_graph(c.subjects[0].volume, c.atlas)
    assert enc.encode_image(c.subjects[0].volume, params, (16, 16, 16)).shape == (cfg.d_img,)
    assert enc.encode_roi_gcn(g, params).shape == (cfg.d_roi,)
    assert enc.encode_roi_mlp(g, params).shape == (cfg.d_roi,)
    assert enc.project(np.ones(cfg.d_img), params, "proj_img").shape == (cfg.d_p,)
    assert enc.project(np.ones(cfg.d_roi), params, "proj_roi").shape == (cfg.d_p,)


def test_zero_params_give_zero_embeddings(params):
    z = _zeros(params)
    c = generate_cohort(2, seed=0)
    g = build_graph(c.subjects[0].volume, c.atlas)
    assert np.all(enc.encode_image(c.subjects[0].volume, z) == 0)
    assert np.all(enc.encode_roi_gcn(g, z) == 0)
    assert np.all(enc.encode_roi_mlp(g, z) == 0)


def test_zero_features_zero_biases_gcn(params):
    g = _graph(np.zeros(16), np.eye(16))
    assert np.all(enc.encode_roi_gcn(g, params) == 0)


def test_dims_mismatch(params):
    with pytest.raises(ConfigError):
        enc.encode_image(Volume(np.zeros((8, 8, 8))), params, (16, 16, 16))
    with pytest.raises(ConfigError):
        enc.encode_roi_mlp(_graph(np.ones(5), np.eye(5)), params)
    with pytest.raises(ConfigError):
        enc.project(np.ones(7), params, "proj_img")


@pytest.mark.parametrize("x", [-1.3, 0.0, 0.4, 2.0])
def test_single_node_gcn_is_an_mlp(cfg, x):
    p = {k: v + 0.05 for k, v in enc.init_params(cfg, 1, seed=1).items()}
    out = enc.encode_roi_gcn(_graph([x], np.eye(1)), p)
    h1 = np.maximum(0, x * p["gcn.l1.w"][0] + p["gcn.l1.b"])
    h2 = np.maximum(0, h1 @ p["gcn.l2.w"] + p["gcn.l2.b"])
    assert np.allclose(out, h2 @ p["gcn.head.w"] + p["gcn.head.b"], atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gcn_node_permutation_invariance(params, seed):
    c = generate_cohort(2, r=16, mode="roi_only", seed=seed)
    g = build_graph(c.subjects[0].volume, c.atlas)
    pi = np.random.default_rng(seed).permutation(16)
    gp = RoiGraph(g.node_features[pi], g.descriptors[pi], g.adjacency[np.ix_(pi, pi)],
                  g.prop_matrix[np.ix_(pi, pi)])
    assert np.allclose(enc.encode_roi_gcn(g, params), enc.encode_roi_gcn(gp, params),
                       atol=1e-12, rtol=0)


def test_mlp_ignores_adjacency(params):
    r = np.random.default_rng(0)
    feats = r.standard_normal(16)
    a = np.corrcoef(r.standard_normal((16, 8)))
    out1 = enc.encode_roi_mlp(_graph(feats, a), params)
    out2 = enc.encode_roi_mlp(_graph(feats, np.eye(16)), params)
    assert np.array_equal(out1, out2)


def test_projection_bias_only(params):
    z = _zeros(params)
    z["proj_roi.l2.b"] = np.arange(16.0)
    assert np.array_equal(enc.project(np.ones(32), z, "proj_roi"), np.arange(16.0))


def test_init_is_deterministic_and_glorot(cfg):
    a, b = enc.init_params(cfg, 16, 9), enc.init_params(cfg, 16, 9)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = enc.init_params(cfg, 16, 10)
    assert not np.array_equal(a["img.conv1.w"], c["img.conv1.w"])
    bound = np.sqrt(6 / (32 + 16))
    assert np.abs(a["proj_img.l2.w"]).max() <= bound
    assert all(np.all(a[k] == 0) for k in a if k.endswith(".b"))


def test_embeddings_finite(params):
    c = generate_cohort(4, mode="complementary", seed=2)
    for s in c.subjects:
        assert np.all(np.isfinite(enc.encode_image(s.volume, params)))
        assert np.all(np.isfinite(enc.encode_roi_gcn(build_graph(s.volume, c.atlas), params)))


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    enc.write_checkpoint(path, params)
    back = enc.read_checkpoint(path)
    assert list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        enc.read_checkpoint(path)
