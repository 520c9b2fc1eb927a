"""Graph and OD containers: invariants, log transform, feature masking."""
import numpy as np
import pytest

from odgen.city import (
    LOG_OVERFLOW_LIMIT,
    ODMatrix,
    UrbanGraph,
    inverse_transform,
    log_transform,
    mask_features,
)
from odgen.errors import ValidationError
from tests.conftest import tiny_graph, tiny_od


def test_graph_accepts_valid_inputs(graph4):
    assert graph4.n_regions == 4
    assert graph4.region_ids == tuple(range(4))


def test_graph_rejects_asymmetric_adjacency():
    g = tiny_graph()
    adj = np.array(g.adjacency)
    adj[0, 1] = 0
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=adj, distance=g.distance)


def test_graph_rejects_nonbinary_adjacency():
    g = tiny_graph()
    adj = np.array(g.adjacency, dtype=float)
    adj[0, 1] = adj[1, 0] = 0.5
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=adj, distance=g.distance)


def test_graph_rejects_self_loops():
    g = tiny_graph()
    adj = np.array(g.adjacency)
    np.fill_diagonal(adj, 1)
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=adj, distance=g.distance)


def test_graph_rejects_bad_distances():
    g = tiny_graph()
    d = np.array(g.distance)
    d[0, 1] = -1.0
    d[1, 0] = -1.0
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=g.adjacency, distance=d)
    d = np.array(g.distance)
    d[0, 1] = d[0, 1] * 2  # breaks symmetry
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=g.adjacency, distance=d)
    d = np.array(g.distance)
    np.fill_diagonal(d, 1.0)
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=g.adjacency, distance=d)


def test_graph_rejects_nonfinite_features():
    g = tiny_graph()
    feats = np.array(g.features)
    feats[0, 0] = np.nan
    with pytest.raises(ValidationError):
        UrbanGraph(features=feats, adjacency=g.adjacency, distance=g.distance)


def test_graph_shape_mismatch():
    g = tiny_graph()
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features[:3], adjacency=g.adjacency,
                   distance=g.distance)


def test_graph_region_id_count():
    g = tiny_graph()
    with pytest.raises(ValidationError):
        UrbanGraph(features=g.features, adjacency=g.adjacency,
                   distance=g.distance, region_ids=(0, 1))


def test_graph_arrays_are_readonly(graph4):
    with pytest.raises(ValueError):
        graph4.features[0, 0] = 99.0


def test_with_features_replaces_only_features(graph4):
    new = np.ones_like(graph4.features)
    g2 = graph4.with_features(new)
    assert g2.city_id == graph4.city_id
    np.testing.assert_array_equal(g2.features, new)
    np.testing.assert_array_equal(g2.adjacency, graph4.adjacency)


def test_od_rejects_negative_raw():
    f = np.full((3, 3), 2.0)
    f[0, 1] = -0.5
    with pytest.raises(ValidationError):
        ODMatrix(f, "raw")


def test_od_rejects_nonsquare_and_bad_tag():
    with pytest.raises(ValidationError):
        ODMatrix(np.zeros((2, 3)), "raw")
    with pytest.raises(ValidationError):
        ODMatrix(np.zeros((3, 3)), "linear")


def test_od_log_space_slack():
    # tiny negative round-off is tolerated in log space, larger is not
    ODMatrix(np.array([[-1e-12]]), "log")
    with pytest.raises(ValidationError):
        ODMatrix(np.array([[-1e-6]]), "log")


def test_log_transform_fixtures():
    f = np.array([[0.0, np.e - 1.0], [0.0, 0.0]])
    logged = log_transform(ODMatrix(f, "raw"))
    assert logged.space_tag == "log"
    np.testing.assert_allclose(logged.flows, [[0.0, 1.0], [0.0, 0.0]], atol=1e-12)


def test_log_round_trip():
    rng = np.random.default_rng(0)
    f = rng.uniform(0.0, 1000.0, size=(6, 6))
    np.fill_diagonal(f, 0.0)
    back = inverse_transform(log_transform(ODMatrix(f, "raw")))
    np.testing.assert_allclose(back.flows, f, rtol=1e-9)


def test_inverse_clamps_tiny_negative():
    od = ODMatrix(np.array([[-1e-12]]), "log")
    out = inverse_transform(od)
    assert out.flows[0, 0] == 0.0


def test_inverse_rejects_overflow():
    od = ODMatrix(np.array([[LOG_OVERFLOW_LIMIT]]), "log")
    with pytest.raises(ValidationError):
        inverse_transform(od)


def test_transform_direction_guards():
    raw = ODMatrix(np.ones((2, 2)), "raw")
    with pytest.raises(ValidationError):
        inverse_transform(raw)
    logged = log_transform(raw)
    with pytest.raises(ValidationError):
        log_transform(logged)


def test_mask_ratio_zero_identity(graph4):
    assert mask_features(graph4, 0.0, seed=1) is graph4


def test_mask_ratio_one_gives_column_means(graph4):
    g = mask_features(graph4, 1.0, seed=1)
    cols = graph4.features.mean(axis=0)
    np.testing.assert_allclose(g.features, np.tile(cols, (4, 1)), atol=1e-12)


def test_mask_cell_count_and_determinism():
    g = tiny_graph(n=6, d=3, seed=2)
    ratio = 0.3
    expect = int(np.floor(ratio * 6 * 3))
    a = mask_features(g, ratio, seed=7)
    b = mask_features(g, ratio, seed=7)
    np.testing.assert_array_equal(a.features, b.features)
    assert np.sum(a.features != g.features) == expect


def test_mask_imputes_from_unmasked_cells():
    # each partially masked column gets the mean of its surviving cells
    g = tiny_graph(n=6, d=3, seed=2)
    masked = mask_features(g, 0.3, seed=7)
    changed = masked.features != g.features
    for j in range(3):
        idx = np.where(changed[:, j])[0]
        keep = np.where(~changed[:, j])[0]
        if idx.size and keep.size:
            np.testing.assert_allclose(
                masked.features[idx, j],
                np.full(idx.size, g.features[keep, j].mean()),
                atol=1e-12,
            )


def test_mask_ratio_out_of_range(graph4):
    with pytest.raises(ValidationError):
        mask_features(graph4, -0.1, seed=0)
    with pytest.raises(ValidationError):
        mask_features(graph4, 1.5, seed=0)


def test_od_fixture_round_trip(od4):
    logged = log_transform(od4)
    assert np.all(logged.flows >= 0.0)
    np.testing.assert_allclose(
        inverse_transform(logged).flows, od4.flows, rtol=1e-9
    )
