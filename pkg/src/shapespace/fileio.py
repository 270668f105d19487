"""Run-directory persistence: hashed JSON configs, CSV training histories,
PLY sequences with manifests, and train-state checkpoint wrappers.

Every artifact directory is self-describing: the exact resolved config sits
next to the outputs, and its hash is embedded in the checkpoint manifest so
a silently swapped config (or checkpoint) is detected at load time.
"""

import csv
import hashlib
import json
import logging
import os

import numpy as np

from . import synthgen
from .autodiff.checkpoint import save_checkpoint, load_checkpoint
from .autodiff.optim import PlateauScheduler

log = logging.getLogger(__name__)


# -------------------------------------------------------------- JSON + hashes

def canonical_json(obj):
    """Key-sorted, whitespace-free dump; the byte string all hashes are over."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def json_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)


# ------------------------------------------------------------- history as CSV

def write_history_csv(path, rows, append=False):
    """Write per-step/per-epoch dict rows; columns are the sorted key union.

    Appending reuses the existing header; rows missing a column leave it
    blank, rows with an unknown column fail loudly.
    """
    rows = list(rows)
    if not rows:
        return
    if append and os.path.exists(path):
        with open(path, newline="") as f:
            fields = next(csv.reader(f))
    else:
        append = False
        fields = sorted(set().union(*(r.keys() for r in rows)))
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        if not append:
            w.writeheader()
        for r in rows:
            # repr(float(x)) is the shortest round-trip form even for numpy
            # scalars, whose own repr carries the type name
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v
                        for k, v in r.items()})


def read_history_csv(path):
    """Rows back as dicts, numeric strings parsed to float/int."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            parsed = {}
            for k, v in row.items():
                if v == "" or v is None:
                    parsed[k] = None
                    continue
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


# --------------------------------------------------------------- PLY exports

def write_cloud_sequence(out_dir, stem, clouds, extra=None):
    """Numbered PLY files plus a manifest with per-file hashes.

    Returns the manifest path; ``extra`` (JSON-able) is stored under "extra"
    so callers can attach latent paths, seeds, or provenance.
    """
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, P in enumerate(clouds):
        name = "%s_%03d.ply" % (stem, i)
        synthgen.write_ply(os.path.join(out_dir, name), np.asarray(P))
        files.append({"file": name,
                      "sha256": file_hash(os.path.join(out_dir, name))})
    manifest = {"stem": stem, "count": len(files), "files": files,
                "extra": extra or {}}
    path = os.path.join(out_dir, stem + "_manifest.json")
    save_json(path, manifest)
    return path


# ------------------------------------------------------- dataset integrity

CHECKSUM_FILE = "checksums.json"


def write_dataset_checksums(root):
    """Hash manifest over everything a consumer reads (meshes included).

    Rewritten only when the content actually changed, so a no-op dataset
    rerun leaves every file untouched.
    """
    sums = {}
    for rel in ("manifest.jsonl", "meta.json"):
        sums[rel] = file_hash(os.path.join(root, rel))
    for sub in ("clouds", "meshes"):
        d = os.path.join(root, sub)
        for name in sorted(os.listdir(d)):
            rel = os.path.join(sub, name)
            sums[rel] = file_hash(os.path.join(root, rel))
    path = os.path.join(root, CHECKSUM_FILE)
    if not (os.path.exists(path) and load_json(path) == sums):
        save_json(path, sums)
    return sums


def verify_dataset_checksums(root, include_meshes=False):
    """Re-hash the dataset files against ``checksums.json``.

    Raises ValueError naming the first mismatched or missing file.  Meshes
    are skipped by default (training reads only clouds and the manifest).
    """
    sums = load_json(os.path.join(root, CHECKSUM_FILE))
    for rel, want in sorted(sums.items()):
        if rel.startswith("meshes") and not include_meshes:
            continue
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            raise ValueError("dataset file %s is missing" % rel)
        if file_hash(path) != want:
            raise ValueError("dataset file %s does not match its recorded "
                             "hash" % rel)


# ------------------------------------------------------- train checkpoints

CHECKPOINT_DIR = "checkpoint"


def rng_state(rng):
    """JSON-able snapshot of a numpy Generator (PCG64 state is plain ints)."""
    return rng.bit_generator.state


def restore_rng(rng, state):
    rng.bit_generator.state = state


def save_train_checkpoint(run_dir, model, optimizer, scheduler, rng,
                          progress, config_sha, extra=None):
    """Persist a run: the model's full state (parameters AND buffers, e.g.
    batch-norm running statistics) + Adam moments + everything needed to
    resume.  ``progress`` is e.g. {"epoch": 12} or {"step": 400};
    ``config_sha`` ties the checkpoint to the config snapshot in the same
    directory.
    """
    payload = {"config_sha256": config_sha,
               "scheduler": scheduler.state_dict(),
               "rng_state": rng_state(rng),
               "progress": progress}
    payload.update(extra or {})
    save_checkpoint(os.path.join(run_dir, CHECKPOINT_DIR),
                    model.state_tensors(), optimizer=optimizer, extra=payload)


def load_train_checkpoint(run_dir, model):
    """Restore the model state in place; returns (optimizer, scheduler, extra).

    Verifies that the config snapshot in ``run_dir`` still hashes to the
    value embedded in the checkpoint manifest.
    """
    opt, extra = load_checkpoint(os.path.join(run_dir, CHECKPOINT_DIR),
                                 model.state_tensors())
    snap_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(snap_path):
        raise ValueError("run directory %s has no config snapshot" % run_dir)
    if json_hash(load_json(snap_path)) != extra.get("config_sha256"):
        raise ValueError("config snapshot in %s does not match the hash "
                         "embedded in the checkpoint" % run_dir)
    sched = (PlateauScheduler.from_state_dict(extra["scheduler"])
             if "scheduler" in extra else None)
    return opt, sched, extra
