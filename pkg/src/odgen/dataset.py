"""Dataset handling: on-disk city directories, splits, feature normalization.

A dataset is a directory with one subdirectory per city:

    <root>/<city_id>/features.csv    header row = feature names, N data rows
    <root>/<city_id>/adjacency.csv   N x N of 0/1, no header
    <root>/<city_id>/distance.csv    N x N km, no header
    <root>/<city_id>/od.csv          N x N nonnegative raw flows, no header
    <root>/<city_id>/meta.json       city id, N, d1, d2, split tag, region ids,
                                     population column name

All CSV numbers are written with repr precision so a load/save round trip
is byte-identical.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .city import ODMatrix, UrbanGraph
from .errors import ValidationError

SPLITS = ("train", "val", "test")
_FMT = "%.17g"


@dataclass(frozen=True)
class CityRecord:
    graph: UrbanGraph
    od: ODMatrix
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")


@dataclass
class Dataset:
    """All cities of an experiment plus the train-split normalization state."""

    records: list = field(default_factory=list)
    feature_names: list = field(default_factory=list)
    population_column: str = "population"
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    normalized: bool = False

    def split(self, tag: str) -> list:
        return [r for r in self.records if r.split == tag]

    def city_ids(self) -> list:
        return [r.graph.city_id for r in self.records]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def population_index(self) -> int:
        try:
            return self.feature_names.index(self.population_column)
        except ValueError:
            raise ValidationError(
                f"population column {self.population_column!r} not among features")


def normalize_features(ds: Dataset) -> Dataset:
    """Z-score every feature column using statistics of the train split.

    Stats are computed once over all train-city rows and reused verbatim for
    val/test cities. Constant columns get std pinned to 1, so they normalize
    to exactly zero. Calling this on an already-normalized dataset is an error.
    """
    if ds.normalized:
        raise ValidationError("dataset is already normalized")
    train = ds.split("train")
    if not train:
        raise ValidationError("cannot normalize: train split is empty")
    stacked = np.vstack([r.graph.features for r in train])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)          # population std, ddof=0
    std = np.where(std > 0, std, 1.0)  # degenerate columns map to zero

    records = [
        replace(r, graph=r.graph.with_features((r.graph.features - mean) / std))
        for r in ds.records
    ]
    return Dataset(records=records, feature_names=list(ds.feature_names),
                   population_column=ds.population_column,
                   feature_mean=mean, feature_std=std, normalized=True)


def apply_stored_normalization(graph: UrbanGraph, ds: Dataset) -> UrbanGraph:
    """Normalize one extra city with the dataset's stored train stats."""
    if ds.feature_mean is None or ds.feature_std is None:
        raise ValidationError("dataset has no stored normalization stats")
    return graph.with_features((graph.features - ds.feature_mean) / ds.feature_std)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_city(root: str, graph: UrbanGraph, od: ODMatrix, split: str,
              feature_names, population_column: str = "population") -> str:
    if od.space_tag != "raw":
        raise ValidationError("cities are stored with raw-space od.csv")
    if len(feature_names) != graph.n_features:
        raise ValidationError("feature_names length does not match feature matrix")
    city_dir = os.path.join(root, graph.city_id)
    os.makedirs(city_dir, exist_ok=True)
    _write_matrix(os.path.join(city_dir, "features.csv"), graph.features,
                  header=",".join(feature_names))
    _write_matrix(os.path.join(city_dir, "adjacency.csv"), graph.adjacency, int_fmt=True)
    _write_matrix(os.path.join(city_dir, "distance.csv"), graph.distance)
    _write_matrix(os.path.join(city_dir, "od.csv"), od.flows)
    meta = {
        "city_id": graph.city_id,
        "n_regions": graph.n_regions,
        "d1": graph.d_demographic,
        "d2": graph.n_features - graph.d_demographic,
        "split": split,
        "region_ids": list(graph.region_ids),
        "population_column": population_column,
    }
    with open(os.path.join(city_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return city_dir


def load_city(city_dir: str):
    """Read one city directory. Returns (CityRecord, meta dict)."""
    meta_path = os.path.join(city_dir, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing {meta_path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"{meta_path}: line {e.lineno}: {e.msg}")

    names, feats = _read_matrix(os.path.join(city_dir, "features.csv"), header=True)
    _, adj = _read_matrix(os.path.join(city_dir, "adjacency.csv"))
    _, dist = _read_matrix(os.path.join(city_dir, "distance.csv"))
    _, flows = _read_matrix(os.path.join(city_dir, "od.csv"))

    n = int(meta["n_regions"])
    if feats.shape != (n, int(meta["d1"]) + int(meta["d2"])):
        raise ValidationError(
            f"{city_dir}/features.csv: expected {n}x{meta['d1'] + meta['d2']}, "
            f"got {feats.shape[0]}x{feats.shape[1]}")
    graph = UrbanGraph(features=feats, adjacency=adj, distance=dist,
                       region_ids=tuple(meta.get("region_ids", [])),
                       d_demographic=int(meta["d1"]),
                       city_id=str(meta["city_id"]))
    od = ODMatrix(flows, space_tag="raw")
    record = CityRecord(graph=graph, od=od, split=meta["split"])
    return record, meta


def load_dataset(root: str) -> Dataset:
    """Load every city directory under `root`, sorted by city id."""
    if not os.path.isdir(root):
        raise ValidationError(f"dataset directory not found: {root}")
    city_dirs = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d))
        and os.path.exists(os.path.join(root, d, "meta.json"))
    )
    if not city_dirs:
        raise ValidationError(f"no city directories under {root}")
    records = []
    feature_names = None
    population_column = None
    for d in city_dirs:
        record, meta = load_city(os.path.join(root, d))
        names, _ = _read_matrix(os.path.join(root, d, "features.csv"), header=True)
        if feature_names is None:
            feature_names = names
            population_column = meta.get("population_column", "population")
        elif names != feature_names:
            raise ValidationError(
                f"{root}/{d}: feature columns {names} differ from {feature_names}")
        records.append(record)
    return Dataset(records=records, feature_names=feature_names,
                   population_column=population_column)


def save_dataset(root: str, ds: Dataset) -> None:
    for r in ds.records:
        save_city(root, r.graph, r.od, r.split, ds.feature_names,
                  population_column=ds.population_column)


def _write_matrix(path, m, header=None, int_fmt=False):
    fmt = "%d" if int_fmt else _FMT
    with open(path, "w") as fh:
        if header is not None:
            fh.write(header + "\n")
        np.savetxt(fh, np.asarray(m), fmt=fmt, delimiter=",")


def _read_matrix(path, header=False):
    try:
        with open(path) as fh:
            names = fh.readline().rstrip("\n").split(",") if header else None
            rows = []
            for lineno, line in enumerate(fh, start=2 if header else 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append([float(tok) for tok in line.split(",")])
                except ValueError:
                    raise ValidationError(f"{path}: row {lineno}: non-numeric value")
    except FileNotFoundError:
        raise ValidationError(f"missing {path}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ValidationError(f"{path}: row {i + 1}: ragged width")
    return names, np.array(rows, dtype=np.float64)
