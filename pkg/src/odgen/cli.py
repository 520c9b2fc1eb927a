"""Command-line pipeline runner.

Eight subcommands cover the full workflow:

    synth      write a seeded synthetic dataset (or planted archetypes)
    train      fit the diffusion denoiser, logging per-epoch losses
    generate   sample OD matrices for a split from a checkpoint
    baseline   fit and apply a gravity baseline (gm-p / gm-e)
    evaluate   score predictions against ground truth (CSV + JSON report)
    classify   urban-structure indicators, scores, and labels
    explain    KernelSHAP feature attributions for one region's outflow
    stats      spatial regularity statistics and a distance-decay profile

Every run appends one JSON manifest under <out>/manifests/ with the
effective configuration, master seed, phase timings, and artifact hashes.
Exit codes: 0 success, 1 validation error, 2 numerical failure.

Option values resolve as: command-line flag, then config file (`key = value`
lines, `#` comments), then built-in default.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__
from . import autodiff as ad
from .city import log_transform, mask_features
from .dataset import (CityRecord, Dataset, _read_matrix, _write_matrix,
                      load_dataset, normalize_features, save_dataset)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (cosine_schedule, ddim_sample, generate_averaged,
                        q_sample, train)
from .errors import NumericalError, ValidationError
from .explain import ShapConfig, kernel_shap
from .gravity import gravity_fit, gravity_predict
from .manifest import (STREAM_BACKGROUND, STREAM_CITY, STREAM_INIT,
                       STREAM_MASK, STREAM_SAMPLE, STREAM_VAL, PhaseTimer,
                       derive_rng, derive_seed, hash_tree, write_manifest)
from .metrics import (JSD_VARIANTS, METRIC_KEYS, aggregate_metrics,
                      distance_decay_profile, evaluate_pair, spatial_stats)
from .structure import classify, size_category
from .synth import make_archetype_set, make_dataset

DEFAULTS = {
    "steps": 1000,        # diffusion schedule length T
    "ddim_steps": 100,    # sampler grid points tau (must divide T)
    "samples": 10,        # generations averaged per city
    "sampler": "ddim",
    "layers": 4,
    "hidden": 32,
    "heads": 4,
    "lr": 1e-4,
    "weight_decay": 0.0,
    "epochs": 50,
    "val_draws": 4,       # fixed (t, noise) probes per validation city
    "seed": 0,
    "jobs": 1,
    "mask_ratio": 0.0,
    "cities": 40,
    "min_regions": 8,
    "max_regions": 30,
    "decay": 0.25,
    "flow_noise": 0.15,
    "replicas": 5,
    "regions": 15,
    "restarts": 50,
    "bins": 10,
    "background": 64,
    "shap_samples": 2048,
    "shap_ddim_steps": 20,
}

HETEROGENEITY = {
    "low": ("small",),
    "medium": ("small", "medium"),
    "high": ("small", "medium", "large"),
}


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _parse_scalar(tok: str):
    if len(tok) >= 2 and tok[0] == tok[-1] and tok[0] in "'\"":
        return tok[1:-1]
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(tok)
        except ValueError:
            pass
    return tok


def _load_config(path: str | None) -> dict:
    """Flat `key = value` config file; sections and # comment lines ignored."""
    if not path:
        return {}
    try:
        fh = open(path)
    except OSError as e:
        raise ValidationError(f"cannot read config file: {e}")
    cfg = {}
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}: line {lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in DEFAULTS:
                raise ValidationError(f"{path}: line {lineno}: unknown key {key!r}")
            cfg[key] = _parse_scalar(val.strip())
    return cfg


def _effective(args, keys) -> dict:
    """Flag > config file > default, for the given config keys."""
    file_cfg = _load_config(getattr(args, "config", None))
    cfg = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is None:
            v = file_cfg.get(k, DEFAULTS[k])
        cfg[k] = v
    return cfg


def _filter_heterogeneity(records, level):
    if level is None:
        return list(records)
    allowed = HETEROGENEITY[level]
    kept = [r for r in records if size_category(r.graph.n_regions) in allowed]
    if not kept:
        raise ValidationError(f"heterogeneity preset {level!r} leaves no cities")
    return kept


def _split_records(ds: Dataset, split: str):
    records = list(ds.records) if split == "all" else ds.split(split)
    if not records:
        raise ValidationError(f"split {split!r} has no cities")
    return records


def _write_json(path: str, doc) -> str:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _render_svg(path: str, draw) -> str:
    """Render one small chart; matplotlib is an optional dependency."""
    try:
        import matplotlib
    except ImportError:
        raise ValidationError("--svg requires matplotlib (pip install 'odgen[plot]')")
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "odgen"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.2, 3.4), dpi=100)
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _cmd_synth(args):
    cfg = _effective(args, ("cities", "min_regions", "max_regions", "seed",
                            "decay", "flow_noise", "replicas", "regions"))
    seed = int(cfg["seed"])
    timer = PhaseTimer()
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    with timer.phase("synthesize"):
        if args.archetypes:
            pairs, kinds = make_archetype_set(int(cfg["replicas"]),
                                              int(cfg["regions"]), seed)
            from .synth import FEATURE_NAMES
            records = [CityRecord(graph=g, od=od, split="train")
                       for g, od in pairs]
            ds = Dataset(records=records, feature_names=list(FEATURE_NAMES))
            labels = {g.city_id: kind for (g, _), kind in zip(pairs, kinds)}
        else:
            ds = make_dataset(int(cfg["cities"]), int(cfg["min_regions"]),
                              int(cfg["max_regions"]), seed,
                              decay=float(cfg["decay"]),
                              flow_noise=float(cfg["flow_noise"]))
            labels = None
    with timer.phase("write"):
        save_dataset(args.out, ds)
        if labels is not None:
            artifacts.append(_write_json(
                os.path.join(args.out, "archetype_labels.json"), labels))
    dataset_hash = hash_tree(args.out)
    write_manifest(args.out, "synth",
                   config={**cfg, "archetypes": args.archetypes},
                   seed=seed, timings=timer.timings, artifacts=artifacts,
                   dataset_hash=dataset_hash)
    counts = {s: len(ds.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(ds.records)} cities to {args.out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_sidecar(ds: Dataset, schedule, cfg, seed, steps_done, epochs_done,
                   best_val, best_epoch) -> dict:
    return {
        "schedule_steps": schedule.n_steps,
        "lr": float(cfg["lr"]),
        "weight_decay": float(cfg["weight_decay"]),
        "seed": seed,
        "steps_completed": steps_done,
        "epochs_completed": epochs_done,
        "best_val_loss": None if math.isinf(best_val) else best_val,
        "best_epoch": best_epoch,
        "feature_names": list(ds.feature_names),
        "population_column": ds.population_column,
        "feature_mean": [float(v) for v in ds.feature_mean],
        "feature_std": [float(v) for v in ds.feature_std],
    }


def _cmd_train(args):
    cfg = _effective(args, ("steps", "epochs", "lr", "weight_decay", "layers",
                            "hidden", "heads", "seed", "val_draws"))
    seed = int(cfg["seed"])
    epochs = int(cfg["epochs"])
    if epochs < 0:
        raise ValidationError("--epochs must be >= 0")
    os.makedirs(args.out, exist_ok=True)
    timer = PhaseTimer()

    with timer.phase("load"):
        ds = normalize_features(load_dataset(args.data))
        data_hash = hash_tree(args.data)
    train_recs = ds.split("train")
    val_recs = ds.split("val")
    train_cities = [(r.graph.features, r.graph.adjacency, r.graph.distance,
                     log_transform(r.od).flows) for r in train_recs]
    spe = len(train_cities)  # one epoch = one step per training city

    start_epoch = 0
    best_val = math.inf
    best_epoch = -1
    if args.resume:
        arrays, sidecar = ad.load_checkpoint(args.resume)
        for need in ("model_config", "schedule_steps", "steps_completed"):
            if need not in sidecar:
                raise ValidationError(f"{args.resume}: sidecar lacks {need!r}")
        if int(sidecar.get("seed", seed)) != seed:
            raise ValidationError(
                f"checkpoint was trained with seed {sidecar['seed']}, "
                f"got --seed {seed}; training streams are keyed by it")
        cfg["steps"] = int(sidecar["schedule_steps"])
        cfg["lr"] = float(sidecar.get("lr", cfg["lr"]))
        cfg["weight_decay"] = float(sidecar.get("weight_decay", cfg["weight_decay"]))
        model = Denoiser(DenoiserConfig.from_dict(sidecar["model_config"]), seed=0)
        model.load_state_arrays({k: v for k, v in arrays.items()
                                 if not k.startswith("opt.")})
        optimizer = ad.AdamW(model.parameters(), lr=float(cfg["lr"]),
                             weight_decay=float(cfg["weight_decay"]))
        steps_done = int(sidecar["steps_completed"])
        opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
        if opt_arrays:
            optimizer.load_state_arrays(opt_arrays, t=steps_done)
        if steps_done % spe:
            raise ValidationError(
                f"checkpoint has {steps_done} steps, not a whole number of "
                f"epochs of {spe} training cities")
        start_epoch = steps_done // spe
        if sidecar.get("best_val_loss") is not None:
            best_val = float(sidecar["best_val_loss"])
        best_epoch = int(sidecar.get("best_epoch", -1))
        if start_epoch > epochs:
            raise ValidationError(
                f"checkpoint already has {start_epoch} epochs, target is {epochs}")
    else:
        model_cfg = DenoiserConfig(
            n_features=ds.n_features, hidden=int(cfg["hidden"]),
            layers=int(cfg["layers"]), heads=int(cfg["heads"]),
            use_spatial_priors=not args.no_spatial_priors,
            restrict_to_adjacency=args.restrict_attention)
        model = Denoiser(model_cfg, seed=derive_seed(seed, STREAM_INIT))
        optimizer = ad.AdamW(model.parameters(), lr=float(cfg["lr"]),
                             weight_decay=float(cfg["weight_decay"]))

    schedule = cosine_schedule(int(cfg["steps"]))

    # validation probes: fixed (t, noise) pairs per val city, reused verbatim
    # every epoch so curves are comparable and resume-invariant
    probes = []
    for i, r in enumerate(val_recs):
        rng = derive_rng(seed, STREAM_VAL, i)
        f0 = log_transform(r.od).flows
        for _ in range(int(cfg["val_draws"])):
            t = int(rng.integers(1, schedule.n_steps + 1))
            probes.append((r.graph, f0, t, rng.standard_normal(f0.shape)))

    def val_loss():
        if not probes:
            return float("nan")
        tot = 0.0
        for g, f0, t, eps in probes:
            ft = q_sample(f0, t, schedule, eps)
            eps_hat = model.predict_noise(g.features, g.adjacency, g.distance, ft, t)
            tot += float(np.mean((eps_hat - eps) ** 2))
        return tot / len(probes)

    model_path = os.path.join(args.out, "model.ckpt")
    state_path = os.path.join(args.out, "state.ckpt")
    rows = []
    with timer.phase("train"):
        for e in range(start_epoch, epochs):
            _, losses = train(model, train_cities, schedule,
                              steps=(e + 1) * spe, seed=seed,
                              optimizer=optimizer, start_step=e * spe)
            tr = float(np.mean(losses))
            va = val_loss()
            rows.append((e, tr, va))
            print(f"epoch {e}: train_loss {tr:.6f} val_loss {va:.6f}", flush=True)
            if not math.isnan(va) and va < best_val:
                best_val, best_epoch = va, e
                model.save(model_path, _train_sidecar(
                    ds, schedule, cfg, seed, (e + 1) * spe, e + 1,
                    best_val, best_epoch))

    steps_done = epochs * spe
    with timer.phase("save"):
        sidecar = _train_sidecar(ds, schedule, cfg, seed, steps_done, epochs,
                                 best_val, best_epoch)
        if best_epoch < 0:
            # no validation signal: the final parameters are the model
            model.save(model_path, sidecar)
        ad.save_checkpoint(state_path,
                           {**model.state_arrays(), **optimizer.state_arrays()},
                           {"model_config": model.config.to_dict(), **sidecar})
        loss_path = os.path.join(args.out, "loss.csv")
        append = bool(args.resume) and os.path.exists(loss_path)
        with open(loss_path, "a" if append else "w") as fh:
            if not append:
                fh.write("epoch,train_loss,val_loss\n")
            for e, tr, va in rows:
                fh.write(f"{e},{tr:.17g},{va:.17g}\n")

    artifacts = [loss_path, model_path, model_path + ".json",
                 state_path, state_path + ".json"]
    if args.svg:
        epochs_x, trs, vas = [], [], []
        with open(loss_path) as fh:
            next(fh)
            for line in fh:
                e_, t_, v_ = line.strip().split(",")
                epochs_x.append(int(e_))
                trs.append(float(t_))
                vas.append(float(v_))

        def draw(ax):
            ax.plot(epochs_x, trs, label="train")
            if not all(math.isnan(v) for v in vas):
                ax.plot(epochs_x, vas, label="val")
            ax.set_xlabel("epoch")
            ax.set_ylabel("noise MSE")
            ax.legend()

        if epochs_x:
            artifacts.append(_render_svg(os.path.join(args.out, "loss.svg"), draw))

    write_manifest(args.out, "train",
                   config={**cfg, "no_spatial_priors": args.no_spatial_priors,
                           "restrict_attention": args.restrict_attention,
                           "resume": args.resume, "data": args.data},
                   seed=seed, timings=timer.timings, artifacts=artifacts,
                   dataset_hash=data_hash, checkpoint=model_path)
    if best_epoch >= 0:
        print(f"best val_loss {best_val:.6f} at epoch {best_epoch}")
    print(f"trained {epochs - start_epoch} epochs ({steps_done} total steps); "
          f"checkpoints in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _sample_city(task):
    model, schedule, feats, adj, dist, n_samples, tau, sampler, seed = task
    mean, _ = generate_averaged(model, feats, adj, dist, schedule,
                                n_samples, tau, seed, sampler=sampler)
    return mean


def _load_generation_checkpoint(path):
    model, sidecar = Denoiser.load(path)
    for need in ("schedule_steps", "feature_mean", "feature_std"):
        if need not in sidecar:
            raise ValidationError(
                f"{path}: sidecar lacks {need!r}; use a checkpoint written by "
                "`odgen train`")
    schedule = cosine_schedule(int(sidecar["schedule_steps"]))
    mean = np.asarray(sidecar["feature_mean"], dtype=np.float64)
    std = np.asarray(sidecar["feature_std"], dtype=np.float64)
    return model, sidecar, schedule, mean, std


def _cmd_generate(args):
    cfg = _effective(args, ("ddim_steps", "samples", "sampler", "seed",
                            "jobs", "mask_ratio"))
    seed = int(cfg["seed"])
    tau = int(cfg["ddim_steps"])
    n_samples = int(cfg["samples"])
    mask_ratio = float(cfg["mask_ratio"])
    jobs = max(1, int(cfg["jobs"]))
    timer = PhaseTimer()

    with timer.phase("load"):
        model, sidecar, schedule, mean, std = _load_generation_checkpoint(args.model)
        ds = load_dataset(args.data)
        data_hash = hash_tree(args.data)
    if sidecar.get("feature_names") and list(sidecar["feature_names"]) != ds.feature_names:
        raise ValidationError(
            f"checkpoint feature columns {sidecar['feature_names']} do not "
            f"match dataset columns {ds.feature_names}")
    records = _filter_heterogeneity(_split_records(ds, args.split),
                                    args.heterogeneity)

    tasks = []
    feats_list = []
    for i, r in enumerate(records):
        g = r.graph
        if mask_ratio > 0:
            g = mask_features(g, mask_ratio, derive_seed(seed, STREAM_MASK, i))
        feats = (g.features - mean) / std
        feats_list.append(feats)
        tasks.append((model, schedule, feats, g.adjacency, g.distance,
                      n_samples, tau, cfg["sampler"],
                      derive_seed(seed, STREAM_CITY, i)))

    with timer.phase("sample"):
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                preds = list(pool.map(_sample_city, tasks))
        else:
            preds = [_sample_city(t) for t in tasks]

    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    with timer.phase("write"):
        for r, feats, pred in zip(records, feats_list, preds):
            cdir = os.path.join(args.out, r.graph.city_id)
            os.makedirs(cdir, exist_ok=True)
            od_path = os.path.join(cdir, "od.csv")
            _write_matrix(od_path, pred)
            _write_json(os.path.join(cdir, "meta.json"), {
                "city_id": r.graph.city_id,
                "n_regions": r.graph.n_regions,
                "split": r.split,
                "samples": n_samples,
                "ddim_steps": tau,
                "sampler": cfg["sampler"],
                "mask_ratio": mask_ratio,
            })
            artifacts.append(od_path)
            if args.export_attention:
                # attention at the cleanest point of the reverse pass: the
                # generated matrix itself, re-encoded in log space at t=1
                maps = model.attention_maps(feats, r.graph.adjacency,
                                            r.graph.distance, np.log1p(pred), 1)
                adir = os.path.join(cdir, "attention")
                os.makedirs(adir, exist_ok=True)
                for layer, arr in enumerate(maps):
                    for h in range(arr.shape[0]):
                        p = os.path.join(adir, f"layer{layer}_head{h}.csv")
                        _write_matrix(p, arr[h])
                        artifacts.append(p)

    extra = {"seconds_per_city": timer.timings.get("sample", 0.0) / len(records)}
    write_manifest(args.out, "generate",
                   config={**cfg, "split": args.split,
                           "heterogeneity": args.heterogeneity,
                           "export_attention": args.export_attention,
                           "model": args.model, "data": args.data},
                   seed=seed, timings=timer.timings, artifacts=artifacts,
                   dataset_hash=data_hash, checkpoint=args.model, extra=extra)
    print(f"generated {len(records)} cities -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _cmd_baseline(args):
    kind = {"gm-p": "power", "gm-e": "exponential"}[args.model]
    timer = PhaseTimer()
    with timer.phase("load"):
        ds = load_dataset(args.data)
        data_hash = hash_tree(args.data)
    pop = ds.population_index()
    with timer.phase("fit"):
        triples = [(r.graph.features[:, pop], r.graph.distance, r.od.flows)
                   for r in ds.split("train")]
        if not triples:
            raise ValidationError("train split is empty; nothing to fit")
        params = gravity_fit(triples, kind)
    records = _split_records(ds, args.split)

    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    with timer.phase("write"):
        for r in records:
            pred = gravity_predict(r.graph.features[:, pop], r.graph.distance,
                                   params)
            cdir = os.path.join(args.out, r.graph.city_id)
            os.makedirs(cdir, exist_ok=True)
            od_path = os.path.join(cdir, "od.csv")
            _write_matrix(od_path, pred)
            _write_json(os.path.join(cdir, "meta.json"), {
                "city_id": r.graph.city_id,
                "n_regions": r.graph.n_regions,
                "split": r.split,
                "baseline": args.model,
            })
            artifacts.append(od_path)
        params_path = _write_json(os.path.join(args.out, "params.json"),
                                  {"model": args.model, **params.to_dict()})
        artifacts.append(params_path)

    write_manifest(args.out, "baseline",
                   config={"model": args.model, "split": args.split,
                           "data": args.data},
                   seed=None, timings=timer.timings, artifacts=artifacts,
                   dataset_hash=data_hash)
    print(f"{args.model}: k={params.scale:.6g} a={params.origin_exp:.4f} "
          f"b={params.dest_exp:.4f} beta={params.beta:.4f}; "
          f"predicted {len(records)} cities -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _prediction_ids(root: str) -> set:
    if not os.path.isdir(root):
        raise ValidationError(f"prediction directory not found: {root}")
    return {d for d in os.listdir(root)
            if os.path.isfile(os.path.join(root, d, "od.csv"))}


def _truth_selection(root: str, split: str, heterogeneity) -> list:
    if not os.path.isdir(root):
        raise ValidationError(f"truth directory not found: {root}")
    chosen = []
    for d in sorted(os.listdir(root)):
        meta_path = os.path.join(root, d, "meta.json")
        if not os.path.isfile(meta_path):
            continue
        with open(meta_path) as fh:
            meta = json.load(fh)
        if split != "all" and meta.get("split") != split:
            continue
        chosen.append((d, int(meta["n_regions"])))
    if not chosen:
        raise ValidationError(f"split {split!r} has no cities in {root}")
    if heterogeneity is not None:
        allowed = HETEROGENEITY[heterogeneity]
        chosen = [(d, n) for d, n in chosen if size_category(n) in allowed]
        if not chosen:
            raise ValidationError(
                f"heterogeneity preset {heterogeneity!r} leaves no cities")
    return [d for d, _ in chosen]


def _cmd_evaluate(args):
    timer = PhaseTimer()
    with timer.phase("load"):
        truth_ids = _truth_selection(args.truth, args.split, args.heterogeneity)
        pred_ids = _prediction_ids(args.pred)
    missing_pred = sorted(set(truth_ids) - pred_ids)
    extra_pred = sorted(pred_ids - set(truth_ids))
    if missing_pred or extra_pred:
        parts = []
        if missing_pred:
            parts.append(f"missing predictions for: {', '.join(missing_pred)}")
        if extra_pred:
            parts.append(f"predictions without ground truth: {', '.join(extra_pred)}")
        raise ValidationError("city id mismatch: " + "; ".join(parts))

    per_city = {}
    with timer.phase("score"):
        for cid in truth_ids:
            _, t = _read_matrix(os.path.join(args.truth, cid, "od.csv"))
            _, p = _read_matrix(os.path.join(args.pred, cid, "od.csv"))
            per_city[cid] = evaluate_pair(t, p, args.exclude_diagonal,
                                          args.jsd_variant)
    average = aggregate_metrics(per_city)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w") as fh:
        fh.write("city_id," + ",".join(METRIC_KEYS) + "\n")
        for cid in truth_ids:
            row = per_city[cid]
            fh.write(cid + "," + ",".join(f"{row[k]:.17g}" for k in METRIC_KEYS) + "\n")
        fh.write("AVERAGE," + ",".join(f"{average[k]:.17g}" for k in METRIC_KEYS) + "\n")
    json_path = _write_json(os.path.join(args.out, "report.json"),
                            {"cities": per_city, "average": average})

    artifacts = [csv_path, json_path]
    if args.svg:
        cids = list(truth_ids)
        cpcs = [per_city[c]["cpc"] for c in cids]

        def draw(ax):
            ax.bar(range(len(cids)), cpcs)
            ax.axhline(average["cpc"], linestyle="--", linewidth=1)
            ax.set_xticks(range(len(cids)))
            ax.set_xticklabels(cids, rotation=90, fontsize=6)
            ax.set_ylabel("CPC")

        artifacts.append(_render_svg(os.path.join(args.out, "report.svg"), draw))

    write_manifest(args.out, "evaluate",
                   config={"pred": args.pred, "truth": args.truth,
                           "split": args.split,
                           "heterogeneity": args.heterogeneity,
                           "exclude_diagonal": args.exclude_diagonal,
                           "jsd_variant": args.jsd_variant},
                   seed=None, timings=timer.timings, artifacts=artifacts)
    print(f"{len(truth_ids)} cities: " +
          " ".join(f"{k} {average[k]:.4f}" for k in METRIC_KEYS))
    return 0


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------

_REPORT_COLUMNS = (
    "city_id", "n_regions", "size_category", "label",
    "pop_pareto", "pop_primacy", "pop_gini", "pop_hhi",
    "flow_gini", "flow_hhi", "flow_mfs", "flow_mbc",
    "dist_gini", "dist_hhi", "dist_mfs", "dist_mbc",
    "score_population", "score_flow", "score_distance", "composite", "flags",
)


def _cmd_classify(args):
    cfg = _effective(args, ("seed", "restarts"))
    seed = int(cfg["seed"])
    timer = PhaseTimer()
    with timer.phase("load"):
        ds = load_dataset(args.data)
        data_hash = hash_tree(args.data)
    records = _split_records(ds, args.split)
    with timer.phase("classify"):
        reports = classify([(r.graph, r.od) for r in records], seed=seed,
                           population_index=ds.population_index(),
                           include_raw_indicators=args.include_raw_indicators,
                           restarts=int(cfg["restarts"]))

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "structure_report.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(_REPORT_COLUMNS) + "\n")
        for rep in reports:
            ind = rep.indicators
            vals = [rep.city_id, str(rep.n_regions), rep.size_category, rep.label]
            vals += [f"{ind['population'][k]:.17g}"
                     for k in ("pareto", "primacy", "gini", "hhi")]
            vals += [f"{ind['flow'][k]:.17g}"
                     for k in ("gini", "hhi", "mfs", "mbc")]
            vals += [f"{ind['distance'][k]:.17g}"
                     for k in ("gini", "hhi", "mfs", "mbc")]
            vals += [f"{rep.dimension_scores[d]:.17g}"
                     for d in ("population", "flow", "distance")]
            vals.append(f"{rep.composite:.17g}")
            vals.append(";".join(rep.flags))
            fh.write(",".join(vals) + "\n")
    json_path = _write_json(os.path.join(args.out, "structure_report.json"),
                            [asdict(rep) for rep in reports])

    write_manifest(args.out, "classify",
                   config={**cfg, "split": args.split,
                           "include_raw_indicators": args.include_raw_indicators,
                           "data": args.data},
                   seed=seed, timings=timer.timings,
                   artifacts=[csv_path, json_path], dataset_hash=data_hash)
    counts = {}
    for rep in reports:
        counts[rep.label] = counts.get(rep.label, 0) + 1
    print("labels: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    return 0


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def _cmd_explain(args):
    cfg = _effective(args, ("seed", "background", "shap_samples",
                            "shap_ddim_steps"))
    seed = int(cfg["seed"])
    tau = int(cfg["shap_ddim_steps"])
    timer = PhaseTimer()
    with timer.phase("load"):
        model, sidecar, schedule, mean, std = _load_generation_checkpoint(args.model)
        ds = load_dataset(args.data)
    record = next((r for r in ds.records if r.graph.city_id == args.city), None)
    if record is None:
        raise ValidationError(f"city {args.city!r} not in {args.data}")
    graph = record.graph
    region = int(args.region)
    if not 0 <= region < graph.n_regions:
        raise ValidationError(
            f"region {region} out of range for {args.city} (N={graph.n_regions})")

    train_recs = ds.split("train")
    if not train_recs:
        raise ValidationError("no train cities to draw background rows from")
    pool = np.vstack([r.graph.features for r in train_recs])
    bg_size = int(cfg["background"])
    rng = derive_rng(seed, STREAM_BACKGROUND)
    idx = rng.choice(len(pool), size=bg_size, replace=len(pool) < bg_size)
    background = pool[idx]

    base = graph.features.copy()
    adj, dist = graph.adjacency, graph.distance

    def model_fn(v):
        feats_raw = base.copy()
        feats_raw[region] = v
        feats = (feats_raw - mean) / std
        # one deterministic surrogate run per query: same noise for every
        # mask, so attribution differences come from the features alone
        f = ddim_sample(model, feats, adj, dist, schedule, tau,
                        derive_rng(seed, STREAM_SAMPLE, 0))
        return float(f[region].mean())

    shap_cfg = ShapConfig(target_region=region,
                          n_mask_samples=int(cfg["shap_samples"]),
                          background_size=bg_size,
                          seed=derive_seed(seed, STREAM_MASK))
    target = f"mean predicted outflow of region {region} in {args.city}"
    with timer.phase("shap"):
        result = kernel_shap(model_fn, graph.features[region], background,
                             shap_cfg, feature_names=ds.feature_names,
                             target=target)

    os.makedirs(args.out, exist_ok=True)
    order = np.argsort(-np.abs(result.phi), kind="stable")
    rank = np.empty(len(order), dtype=int)
    rank[order] = np.arange(1, len(order) + 1)
    csv_path = os.path.join(args.out, "shap.csv")
    with open(csv_path, "w") as fh:
        fh.write("feature,phi,rank\n")
        for j, name in enumerate(result.feature_names):
            fh.write(f"{name},{result.phi[j]:.17g},{rank[j]}\n")
    json_path = _write_json(os.path.join(args.out, "shap.json"), {
        "target": result.target,
        "phi0": result.phi0,
        "phi": {n: float(v) for n, v in zip(result.feature_names, result.phi)},
        "full_output": result.phi0 + float(np.sum(result.phi)),
        "exact": result.exact,
        "n_evaluations": result.n_evaluations,
        "surrogate": {"sampler": "ddim", "ddim_steps": tau, "runs_per_eval": 1},
    })

    artifacts = [csv_path, json_path]
    if args.svg:
        names = [result.feature_names[i] for i in order][::-1]
        vals = [float(result.phi[i]) for i in order][::-1]

        def draw(ax):
            ax.barh(range(len(names)), vals)
            ax.set_yticks(range(len(names)))
            ax.set_yticklabels(names, fontsize=7)
            ax.set_xlabel("SHAP value")

        artifacts.append(_render_svg(os.path.join(args.out, "shap.svg"), draw))

    write_manifest(args.out, "explain",
                   config={**cfg, "city": args.city, "region": region,
                           "model": args.model, "data": args.data},
                   seed=seed, timings=timer.timings, artifacts=artifacts,
                   checkpoint=args.model)
    top = [result.feature_names[i] for i in order[:3]]
    print(f"{target}: phi0 {result.phi0:.4f}, top features {', '.join(top)} "
          f"({'exact' if result.exact else 'sampled'}, "
          f"{result.n_evaluations} model calls)")
    return 0


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

def _cmd_stats(args):
    cfg = _effective(args, ("bins",))
    timer = PhaseTimer()
    with timer.phase("load"):
        ds = load_dataset(args.data)
        data_hash = hash_tree(args.data)
    records = _split_records(ds, args.split)
    with timer.phase("compute"):
        triples = [(r.od.flows, r.graph.adjacency, r.graph.distance)
                   for r in records]
        stats = spatial_stats(triples)
        d_all, f_all = [], []
        for flows, _, distance in triples:
            off = ~np.eye(flows.shape[0], dtype=bool)
            d_all.append(distance[off])
            f_all.append(flows[off])
        centers, means, counts = distance_decay_profile(
            np.concatenate(f_all), np.concatenate(d_all), int(cfg["bins"]))

    os.makedirs(args.out, exist_ok=True)
    json_path = _write_json(os.path.join(args.out, "spatial_stats.json"),
                            {**stats, "n_cities": len(records),
                             "split": args.split})
    csv_path = os.path.join(args.out, "distance_decay.csv")
    with open(csv_path, "w") as fh:
        fh.write("bin_center_km,mean_flow,count\n")
        for c, m, k in zip(centers, means, counts):
            fh.write(f"{c:.17g},{m:.17g},{int(k)}\n")

    artifacts = [json_path, csv_path]
    if args.svg:
        pts = [(c, m) for c, m in zip(centers, means) if not math.isnan(m)]

        def draw(ax):
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
            ax.set_xlabel("distance (km)")
            ax.set_ylabel("mean flow")

        artifacts.append(_render_svg(os.path.join(args.out, "distance_decay.svg"),
                                     draw))

    write_manifest(args.out, "stats",
                   config={**cfg, "split": args.split, "data": args.data},
                   seed=None, timings=timer.timings, artifacts=artifacts,
                   dataset_hash=data_hash)
    print(f"dist-logflow corr {stats['dist_logflow_corr']:.4f}; "
          f"mean flow adjacent {stats['mean_flow_adjacent']:.2f} vs "
          f"non-adjacent {stats['mean_flow_nonadjacent']:.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Argparse errors map to the validation exit code (1), not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed (default 0)")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="odgen",
                     description="Diffusion-based OD matrix generation pipeline")
    parser.add_argument("--version", action="version",
                        version=f"odgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cities", type=int)
    p.add_argument("--min-regions", type=int, dest="min_regions")
    p.add_argument("--max-regions", type=int, dest="max_regions")
    p.add_argument("--decay", type=float)
    p.add_argument("--flow-noise", type=float, dest="flow_noise")
    p.add_argument("--archetypes", action="store_true",
                   help="planted monocentric/uniform/polycentric replicas")
    p.add_argument("--replicas", type=int, help="replicas per archetype")
    p.add_argument("--regions", type=int, help="regions per archetype city")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fit the diffusion denoiser")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="diffusion schedule length T")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--val-draws", type=int, dest="val_draws")
    p.add_argument("--no-spatial-priors", action="store_true",
                   help="ablation: zero the adjacency/distance priors")
    p.add_argument("--restrict-attention", action="store_true",
                   help="limit attention to graph neighbors and self")
    p.add_argument("--resume", help="state.ckpt from an earlier run")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="sample OD matrices from a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True, help="model.ckpt path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test", "all"))
    p.add_argument("--ddim-steps", type=int, dest="ddim_steps")
    p.add_argument("--samples", type=int)
    p.add_argument("--sampler", choices=("ddim", "ddpm"))
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--heterogeneity", choices=tuple(HETEROGENEITY))
    p.add_argument("--export-attention", action="store_true",
                   dest="export_attention")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("baseline", help="fit and apply a gravity baseline")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True, choices=("gm-p", "gm-e"))
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test", "all"))
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("evaluate", help="score predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test", "all"))
    p.add_argument("--exclude-diagonal", action="store_true",
                   dest="exclude_diagonal")
    p.add_argument("--jsd-variant", default="symmetric_kl",
                   choices=JSD_VARIANTS, dest="jsd_variant")
    p.add_argument("--heterogeneity", choices=tuple(HETEROGENEITY))
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("classify", help="urban-structure classification")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all",
                   choices=("train", "val", "test", "all"))
    p.add_argument("--restarts", type=int)
    p.add_argument("--include-raw-indicators", action="store_true",
                   dest="include_raw_indicators")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("explain", help="KernelSHAP attribution for one region")
    _add_common(p)
    p.add_argument("--model", required=True, help="model.ckpt path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--city", required=True)
    p.add_argument("--region", type=int, required=True)
    p.add_argument("--samples", type=int, dest="shap_samples",
                   help="mask-sample budget")
    p.add_argument("--background", type=int, help="background rows")
    p.add_argument("--ddim-steps", type=int, dest="shap_ddim_steps",
                   help="surrogate sampler grid (default 20)")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("stats", help="spatial regularity statistics")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all",
                   choices=("train", "val", "test", "all"))
    p.add_argument("--bins", type=int)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return int(args.func(args) or 0)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
