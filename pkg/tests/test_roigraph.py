import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import pearsonr

from neurofuse.cohort import AtlasLabelMap, Volume, generate_cohort, tile_atlas
from neurofuse.errors import ParcellationError
from neurofuse.roigraph import (build_graph, correlation_matrix, normalize_adjacency, pearson, read_adjacency_csv,
                                roi_descriptor, roi_mean_features, write_adjacency_csv)


def _strip_atlas(values_per_roi):
    """A 1 x 1 x n volume whose ROIs are consecutive runs of voxels."""
    labels, data = [], []
    for r, vals in enumerate(values_per_roi, start=1):
        labels += [r] * len(vals)
        data += list(vals)
    shape = (len(data), 1, 1)
    return Volume(np.array(data, float).reshape(shape)), AtlasLabelMap(np.array(labels).reshape(shape))


def test_mean_features_examples():
    vol, atlas = _strip_atlas([[1, 2, 3, 6], [5], [7, 7]])
    assert roi_mean_features(vol, atlas)[:, 0].tolist() == [3.0, 5.0, 7.0]


def test_constant_volume_features():
    atlas = tile_atlas((8, 8, 8), 5)
    vol = Volume(np.full((8, 8, 8), 2.5))
    assert np.all(roi_mean_features(vol, atlas) == 2.5)
    assert np.all(roi_descriptor(vol, atlas, 4) == 2.5)


def test_descriptor_nearest_rank_example():
    vol, atlas = _strip_atlas([[4, 1, 3, 2], [9, 9]])
    assert roi_descriptor(vol, atlas, 2)[0].tolist() == [1.0, 3.0]


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(2, 10))
def test_descriptor_matches_definition(vals, q):
    vol, atlas = _strip_atlas([vals])
    s = np.sort(vals)
    expected = [s[max(1, int(np.ceil((k - 0.5) / q * len(s) - 1e-9))) - 1] for k in range(1, q + 1)]
    assert roi_descriptor(vol, atlas, q)[0].tolist() == expected


def test_empty_roi_names_it():
    # ids must be contiguous, so an empty ROI surfaces when the atlas is built
    labels = np.ones((2, 2, 2), int)
    labels[0, 0, 0] = 3
    with pytest.raises(ParcellationError, match=r"missing \[2\]"):
        AtlasLabelMap(labels)


def test_pearson_examples():
    u = np.array([1.0, 2.0, 3.0])
    assert pearson(u, u) == pytest.approx(1.0, abs=1e-15)
    assert pearson(u, -u) == pytest.approx(-1.0, abs=1e-15)
    assert pearson(u, [1, 2, 4]) == pytest.approx(0.98198, abs=5e-6)
    assert pearson(u, [1, 2, 4]) == pytest.approx(pearsonr(u, [1, 2, 4])[0], abs=1e-14)
    assert pearson(u, [5, 5, 5], return_flag=True) == (0.0, True)


@given(st.integers(0, 10_000), st.floats(-10, 10).filter(lambda a: abs(a) > 1e-3),
       st.floats(-10, 10))
def test_pearson_affine(seed, a, b):
    r = np.random.default_rng(seed)
    u, v = r.standard_normal(8), r.standard_normal(8)
    assert pearson(a * u + b, v) == pytest.approx(np.sign(a) * pearson(u, v), abs=1e-12)


def test_all_identical_descriptors_give_uniform_prop():
    vol, atlas = _strip_atlas([[1, 2, 3, 4]] * 5)
    g = build_graph(vol, atlas, 4)
    assert np.all(g.adjacency == 1.0)
    assert np.allclose(g.prop_matrix, 1 / 5, atol=1e-15)


def test_anticorrelated_pair():
    vol, atlas = _strip_atlas([[1, 2, 3, 4], [4, 3, 2, 1.5]])
    g = build_graph(vol, atlas, 4)
    assert g.adjacency[0, 1] == pytest.approx(pearson([1, 2, 3, 4], [1.5, 2, 3, 4]))
    # sorted quantile rows are similarly ordered, so a full graph never sees
    # negative correlation; the anticorrelated case is checked on raw rows
    a = correlation_matrix(np.array([[1.0, 2, 3, 4], [-1, -2, -3, -4]]))
    assert np.allclose(a, [[1, -1], [-1, 1]], atol=1e-15)
    assert np.allclose(normalize_adjacency(a), np.eye(2), atol=1e-15)


def test_normalize_identity_correlation():
    out = normalize_adjacency(np.eye(2))
    assert np.allclose(out, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)
    assert np.allclose(normalize_adjacency(np.ones((4, 4))), 0.25, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_graph_invariants(seed):
    c = generate_cohort(2, r=16, mode="roi_only", seed=seed)
    g = build_graph(c.subjects[0].volume, c.atlas)
    a, p = g.adjacency, g.prop_matrix
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 1)
    assert np.all((a >= -1) & (a <= 1))
    assert np.allclose(p, p.T, atol=1e-15) and np.all((p >= 0) & (p <= 1))


@pytest.mark.parametrize("seed", range(5))
def test_within_roi_permutation_invariance(seed):
    c = generate_cohort(2, r=16, mode="img_only", seed=seed)
    vol, atlas = c.subjects[0].volume, c.atlas
    flat = vol.data.ravel(order="F").copy()
    r = np.random.default_rng(seed)
    for roi in range(1, atlas.n_rois + 1):
        idx = atlas.roi_indices(roi)
        flat[idx] = flat[r.permutation(idx)]
    perm = Volume(flat.reshape(vol.dims, order="F"))
    assert not np.array_equal(perm.data, vol.data)
    a, b = build_graph(vol, atlas), build_graph(perm, atlas)
    for field in ("node_features", "descriptors", "adjacency", "prop_matrix"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


@pytest.mark.parametrize("seed", range(5))
def test_roi_relabeling_equivariance(seed):
    c = generate_cohort(2, r=8, dims=(8, 8, 8), mode="roi_only", seed=seed)
    vol, atlas = c.subjects[0].volume, c.atlas
    pi = np.random.default_rng(seed).permutation(8)     # new label of old ROI r+1 is pi[r]+1
    relabeled = AtlasLabelMap(pi[atlas.labels - 1] + 1)
    a, b = build_graph(vol, atlas), build_graph(vol, relabeled)
    perm = np.eye(8)[pi]                                # row r -> position pi[r]
    assert np.array_equal(b.node_features[pi], a.node_features)
    assert np.allclose(b.adjacency, perm.T @ a.adjacency @ perm, atol=1e-12)
    assert np.allclose(b.prop_matrix, perm.T @ a.prop_matrix @ perm, atol=1e-12)


def test_adjacency_csv(tmp_path):
    c = generate_cohort(2, r=6, dims=(8, 8, 8), mode="roi_only", seed=1)
    g = build_graph(c.subjects[0].volume, c.atlas)
    path = tmp_path / "adj.csv"
    write_adjacency_csv(path, g.adjacency)
    rows = path.read_text().splitlines()
    assert len(rows) == 6 and all(len(r.split(",")) == 6 for r in rows)
    assert np.allclose(read_adjacency_csv(path), g.adjacency, rtol=1e-8, atol=1e-9)
