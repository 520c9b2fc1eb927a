"""Dataset round trips, normalization semantics, malformed-input errors."""
import os

import numpy as np
import pytest

from odgen.city import ODMatrix, UrbanGraph
from odgen.dataset import (
    CityRecord,
    Dataset,
    apply_stored_normalization,
    load_city,
    load_dataset,
    normalize_features,
    save_city,
    save_dataset,
)
from odgen.errors import ValidationError
from tests.conftest import tiny_graph, tiny_od

NAMES = ["population", "jobs", "retail"]


def make_ds(n_cities=3, splits=("train", "train", "val")):
    records = []
    for i, split in zip(range(n_cities), splits):
        g = tiny_graph(n=4 + i, d=3, seed=i)
        g = UrbanGraph(features=g.features, adjacency=g.adjacency,
                       distance=g.distance, d_demographic=g.d_demographic,
                       city_id=f"c{i:02d}")
        records.append(CityRecord(graph=g, od=tiny_od(n=4 + i, seed=i), split=split))
    return Dataset(records=records, feature_names=list(NAMES))


def test_split_and_ids():
    ds = make_ds()
    assert [r.graph.city_id for r in ds.split("train")] == ["c00", "c01"]
    assert ds.city_ids() == ["c00", "c01", "c02"]
    assert ds.population_index() == 0


def test_population_index_missing():
    ds = make_ds()
    ds.population_column = "area"
    with pytest.raises(ValidationError):
        ds.population_index()


def test_record_rejects_unknown_split():
    g = tiny_graph()
    with pytest.raises(ValidationError):
        CityRecord(graph=g, od=tiny_od(), split="holdout")


def test_normalize_two_value_column():
    # a train column holding {0, 2} z-scores to exactly {-1, +1}
    g = tiny_graph(n=4, d=1, seed=0)
    feats = np.array([[0.0], [2.0], [0.0], [2.0]])
    g = g.with_features(feats)
    ds = Dataset(records=[CityRecord(graph=g, od=tiny_od(4), split="train")],
                 feature_names=["population"])
    out = normalize_features(ds)
    np.testing.assert_allclose(out.records[0].graph.features,
                               [[-1.0], [1.0], [-1.0], [1.0]], atol=1e-12)
    np.testing.assert_allclose(out.feature_mean, [1.0])
    np.testing.assert_allclose(out.feature_std, [1.0])


def test_normalize_constant_column_maps_to_zero():
    g = tiny_graph(n=4, d=2, seed=0)
    feats = np.column_stack([np.full(4, 7.0), np.arange(4, dtype=float)])
    g = g.with_features(feats)
    ds = Dataset(records=[CityRecord(graph=g, od=tiny_od(4), split="train")],
                 feature_names=["population", "jobs"])
    out = normalize_features(ds)
    np.testing.assert_array_equal(out.records[0].graph.features[:, 0], np.zeros(4))
    assert out.feature_std[0] == 1.0


def test_normalize_uses_train_stats_for_val():
    ds = make_ds()
    out = normalize_features(ds)
    stacked = np.vstack([r.graph.features for r in ds.split("train")])
    mean, std = stacked.mean(axis=0), stacked.std(axis=0)
    val = ds.split("val")[0]
    expect = (val.graph.features - mean) / std
    np.testing.assert_allclose(out.split("val")[0].graph.features, expect,
                               atol=1e-12)
    # pooled train rows have exactly zero mean afterwards
    pooled = np.vstack([r.graph.features for r in out.split("train")])
    np.testing.assert_allclose(pooled.mean(axis=0), np.zeros(3), atol=1e-12)


def test_double_normalize_rejected():
    ds = normalize_features(make_ds())
    with pytest.raises(ValidationError):
        normalize_features(ds)


def test_normalize_requires_train_split():
    ds = make_ds(splits=("val", "val", "val"))
    with pytest.raises(ValidationError):
        normalize_features(ds)


def test_apply_stored_normalization():
    ds = normalize_features(make_ds())
    extra = tiny_graph(n=5, d=3, seed=9)
    out = apply_stored_normalization(extra, ds)
    expect = (extra.features - ds.feature_mean) / ds.feature_std
    np.testing.assert_allclose(out.features, expect, atol=1e-12)
    with pytest.raises(ValidationError):
        apply_stored_normalization(extra, make_ds())


def test_save_load_round_trip(tmp_path):
    ds = make_ds()
    root = os.path.join(tmp_path, "data")
    save_dataset(root, ds)
    back = load_dataset(root)
    assert back.feature_names == NAMES
    assert back.city_ids() == ds.city_ids()
    for a, b in zip(ds.records, back.records):
        assert a.split == b.split
        np.testing.assert_array_equal(a.graph.features, b.graph.features)
        np.testing.assert_array_equal(a.graph.adjacency, b.graph.adjacency)
        np.testing.assert_array_equal(a.graph.distance, b.graph.distance)
        np.testing.assert_array_equal(a.od.flows, b.od.flows)
        assert a.graph.region_ids == b.graph.region_ids
        assert a.graph.d_demographic == b.graph.d_demographic


def test_save_load_save_byte_identical(tmp_path):
    ds = make_ds()
    r1 = os.path.join(tmp_path, "d1")
    r2 = os.path.join(tmp_path, "d2")
    save_dataset(r1, ds)
    save_dataset(r2, load_dataset(r1))
    for city in sorted(os.listdir(r1)):
        for fname in ("features.csv", "adjacency.csv", "distance.csv",
                      "od.csv", "meta.json"):
            with open(os.path.join(r1, city, fname), "rb") as fh:
                b1 = fh.read()
            with open(os.path.join(r2, city, fname), "rb") as fh:
                b2 = fh.read()
            assert b1 == b2, f"{city}/{fname} differs after a round trip"


def test_save_city_guards(tmp_path):
    g = tiny_graph()
    od_log = ODMatrix(np.zeros((4, 4)), "log")
    with pytest.raises(ValidationError):
        save_city(str(tmp_path), g, od_log, "train", NAMES)
    with pytest.raises(ValidationError):
        save_city(str(tmp_path), g, tiny_od(), "train", ["only_one"])


def test_load_errors_name_the_file(tmp_path):
    ds = make_ds(n_cities=1, splits=("train",))
    root = os.path.join(tmp_path, "data")
    save_dataset(root, ds)
    od_path = os.path.join(root, "c00", "od.csv")

    with open(od_path) as fh:
        lines = fh.readlines()
    lines[1] = lines[1].rstrip("\n") + ",99\n"  # ragged row
    with open(od_path, "w") as fh:
        fh.writelines(lines)
    with pytest.raises(ValidationError, match="row 2"):
        load_city(os.path.join(root, "c00"))

    lines[1] = "1,2,notanumber,4\n"
    with open(od_path, "w") as fh:
        fh.writelines(lines)
    with pytest.raises(ValidationError, match="non-numeric"):
        load_city(os.path.join(root, "c00"))

    os.remove(od_path)
    with pytest.raises(ValidationError, match="od.csv"):
        load_city(os.path.join(root, "c00"))


def test_load_dataset_rejects_mixed_features(tmp_path):
    ds = make_ds(n_cities=2, splits=("train", "val"))
    root = os.path.join(tmp_path, "data")
    save_dataset(root, ds)
    feats_path = os.path.join(root, "c01", "features.csv")
    with open(feats_path) as fh:
        lines = fh.readlines()
    lines[0] = "population,jobs,offices\n"
    with open(feats_path, "w") as fh:
        fh.writelines(lines)
    with pytest.raises(ValidationError, match="feature columns"):
        load_dataset(root)


def test_load_dataset_missing_root(tmp_path):
    with pytest.raises(ValidationError):
        load_dataset(os.path.join(tmp_path, "nope"))
    os.makedirs(os.path.join(tmp_path, "empty"))
    with pytest.raises(ValidationError):
        load_dataset(os.path.join(tmp_path, "empty"))
