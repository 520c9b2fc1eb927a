"""Run manifests and the package-wide seed derivation scheme.

Every CLI run writes exactly one JSON manifest into `<out>/manifests/`,
named by command and UTC timestamp plus a counter so earlier manifests are
never overwritten. A manifest records the command, the effective config
snapshot, the master seed, wall-clock timings per phase, the dataset hash,
and the sha256 of every artifact the run produced.

Seed discipline: one master seed per run. Component k of stream s draws its
generator from SeedSequence([master, stream_id, k]), so any component can be
reproduced in isolation and resuming at step k replays exactly the same
randomness without replaying the generator history.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from datetime import datetime, timezone

import numpy as np

# stream ids for SeedSequence([master, stream, index])
STREAM_TRAIN = 0        # one index per global training step
STREAM_SAMPLE = 1       # one index per generation sample
STREAM_INIT = 2         # parameter initialization
STREAM_VAL = 3          # fixed validation noise, one index per val city
STREAM_MASK = 4         # feature masking, one index per city
STREAM_BACKGROUND = 5   # explainer background sampling
STREAM_CITY = 6         # per-city generation sub-seeds


def derive_seed(master: int, stream: int, index: int = 0) -> int:
    """Stable 32-bit sub-seed for (master, stream, index)."""
    return int(np.random.SeedSequence([master, stream, index]).generate_state(1)[0])


def derive_rng(master: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, stream, index]))


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str) -> str:
    """One hash over every file under `root` (relative path + content).

    Run-manifest directories are skipped so the hash reflects the data
    itself, not the bookkeeping appended by successive runs.
    """
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if d != "manifests"]
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            h.update(rel.encode())
            h.update(bytes.fromhex(sha256_file(full)))
    return h.hexdigest()


class PhaseTimer:
    """Collects wall-clock seconds per named phase."""

    def __init__(self):
        self.timings = {}

    def phase(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + (
                    time.perf_counter() - self.t0)
                return False

        return _Ctx()


def write_manifest(out_dir: str, command: str, config: dict, seed,
                   timings: dict | None = None, artifacts=None,
                   dataset_hash: str | None = None,
                   checkpoint: str | None = None,
                   extra: dict | None = None) -> str:
    """Write one append-only run manifest; returns its path."""
    from . import __version__

    mdir = os.path.join(out_dir, "manifests")
    os.makedirs(mdir, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    k = 0
    while True:
        path = os.path.join(mdir, f"{command}-{stamp}-{k:03d}.json")
        if not os.path.exists(path):
            break
        k += 1
    artifact_records = {}
    for a in artifacts or []:
        artifact_records[os.path.relpath(a, out_dir)] = sha256_file(a)
    doc = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seed": seed,
        "timings_s": {k: round(v, 6) for k, v in (timings or {}).items()},
        "dataset_hash": dataset_hash,
        "checkpoint": checkpoint,
        "artifacts": artifact_records,
        "written_utc": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
