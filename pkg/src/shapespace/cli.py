"""Command-line front end: dataset generation, spectrum precompute, AE/VAE
training, evaluation, and geometry export.

    shapespace gen-data -c exp.json --jobs 4
    shapespace precompute-spectra -c exp.json --backend pc
    shapespace train-ae -c exp.json --variant STD --supervision U --seed 0
    shapespace train-vae -c exp.json --regime PP --ae-run runs/ae-STD-U-s0
    shapespace eval --run runs/vae-PP-s0
    shapespace generate --run runs/vae-PP-s0 -n 25
    shapespace interp --run runs/vae-PP-s0 --id-a test_00000 \\
        --id-b test_00001 --mode intrinsic --steps 8
    shapespace transfer-pose --run runs/vae-PP-s0 --id-a test_00000 \\
        --id-b test_00001

Configs are JSON with four blocks (top-level scalars plus "dataset", "ae",
"vae" sections); anything omitted takes the documented default, and the fully
resolved form -- every value explicit -- is snapshotted into the run directory
as config.json with its hash embedded in the checkpoint manifest.  Unknown
keys are rejected rather than ignored.  Training commands resume from their
checkpoint when re-invoked with a compatible config (bump ae.epochs or
vae.iters to continue a finished run); the continuation is bit-identical to a
run that never stopped.

The spectrum cache location can be forced with the SHAPESPACE_CACHE_DIR
environment variable (overrides the config's cache_dir).

Exit codes: 0 ok, 2 config error, 3 numeric failure.
"""

import argparse
import copy
import dataclasses
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import ae, fileio, flows, metrics, spectral, synthgen, vae
from .autodiff.tensor import NonFiniteError

log = logging.getLogger(__name__)

CACHE_ENV = "SHAPESPACE_CACHE_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_SECTIONS = {"dataset": synthgen.DatasetConfig, "ae": ae.AEConfig,
             "vae": vae.VAEConfig}
_TOP_DEFAULTS = {"seed": 0, "out_dir": "runs", "cache_dir": None}


class ConfigError(ValueError):
    """Bad config file, bad flag combination, or mismatched run inputs."""


# ---------------------------------------------------------- config handling

def _declared_defaults(dc_type):
    return {f.name: f.default for f in dataclasses.fields(dc_type)}


def resolve_config(path=None):
    """Merge a user JSON config over the declared defaults.

    Returns a plain dict with every key present (derived fields may still be
    None until the dataclasses are constructed).  Unknown top-level keys or
    section fields raise ConfigError.
    """
    cfg = dict(_TOP_DEFAULTS)
    for name, typ in _SECTIONS.items():
        cfg[name] = _declared_defaults(typ)
    if path is None:
        return cfg
    try:
        user = fileio.load_json(path)
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e))
    except json.JSONDecodeError as e:
        raise ConfigError("config %s is not valid JSON: %s" % (path, e))
    if not isinstance(user, dict):
        raise ConfigError("config %s must be a JSON object" % path)
    for key, val in user.items():
        if key in _TOP_DEFAULTS:
            cfg[key] = val
        elif key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError("config section %r must be an object" % key)
            unknown = sorted(set(val) - set(cfg[key]))
            if unknown:
                raise ConfigError("unknown option(s) in %r section: %s"
                                  % (key, ", ".join(unknown)))
            cfg[key].update(val)
        else:
            raise ConfigError("unknown config key %r" % key)
    return cfg


def _construct(section_name, section):
    """Build the section's dataclass, mapping validation errors to exit 2."""
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return _SECTIONS[section_name](**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError("%s config: %s" % (section_name, e))


def _normalized(obj):
    """JSON round-trip so tuples and lists compare equal."""
    return json.loads(fileio.canonical_json(obj))


def _snapshot(cfg, ds_cfg, ae_cfg, vae_cfg, **more):
    """The fully resolved experiment config, every default explicit."""
    snap = {"seed": cfg["seed"], "out_dir": cfg["out_dir"],
            "cache_dir": cfg["cache_dir"],
            "dataset": dataclasses.asdict(ds_cfg),
            "ae": dataclasses.asdict(ae_cfg),
            "vae": dataclasses.asdict(vae_cfg)}
    snap.update(more)
    return _normalized(snap)


def _train_identity(snap):
    """What must match for a checkpoint to be resumable: everything except
    run duration, storage locations, and the sibling model's section."""
    ident = copy.deepcopy(snap)
    for key in ("out_dir", "cache_dir", "dataset_dir", "ae_run"):
        ident.pop(key, None)
    ident["ae"].pop("epochs", None)
    ident["vae"].pop("iters", None)
    return ident


def _sync_with_dataset(section, field, dataset_value, declared):
    """Fill a field from the dataset when left at its default; reject an
    explicit conflicting value."""
    have, want = _normalized(section[field]), _normalized(dataset_value)
    if have == _normalized(declared):
        section[field] = dataset_value
    elif have != want:
        raise ConfigError("%r is %r in the config but the dataset was built "
                          "with %r" % (field, section[field], dataset_value))


# ------------------------------------------------------------ shared loaders

def _dataset_dir(cfg):
    return os.path.join(cfg["out_dir"], "dataset")


def _cache_dir(cfg, data_dir):
    return (os.environ.get(CACHE_ENV) or cfg["cache_dir"]
            or os.path.join(data_dir, "spectra"))


def _load_dataset(data_dir, expect_config=None, include_meshes=False):
    if not os.path.exists(os.path.join(data_dir, "manifest.jsonl")):
        raise ConfigError("no dataset at %s; run `shapespace gen-data` first"
                          % data_dir)
    if os.path.exists(os.path.join(data_dir, fileio.CHECKSUM_FILE)):
        try:
            fileio.verify_dataset_checksums(data_dir,
                                            include_meshes=include_meshes)
        except ValueError as e:
            raise ConfigError("dataset integrity check failed: %s" % e)
    ds = synthgen.Dataset(data_dir)
    if expect_config is not None:
        if _normalized(ds.meta["config"]) != _normalized(expect_config):
            raise ConfigError("the dataset at %s was built from a different "
                              "config than the one supplied; regenerate it "
                              "or fix the config" % data_dir)
    return ds


def _load_ae_run(run_dir):
    """Rebuild a trained AE from its run directory (hash-verified)."""
    snap_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(snap_path):
        raise ConfigError("%s is not a run directory (no config.json)"
                          % run_dir)
    snap = fileio.load_json(snap_path)
    ae_cfg = _construct("ae", snap["ae"])
    model = ae.AEModel(ae_cfg, np.random.default_rng(0))
    try:
        _, _, extra = fileio.load_train_checkpoint(run_dir, model)
    except (ValueError, KeyError) as e:
        raise ConfigError("cannot load AE checkpoint from %s: %s"
                          % (run_dir, e))
    if extra.get("kind") != "ae":
        raise ConfigError("%s does not hold an AE checkpoint" % run_dir)
    return model, ae_cfg, snap


def _load_vae_run(run_dir, ae_run=None):
    """Rebuild a trained VAE plus the AE it was trained on."""
    snap_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(snap_path):
        raise ConfigError("%s is not a run directory (no config.json)"
                          % run_dir)
    snap = fileio.load_json(snap_path)
    ae_dir = ae_run or snap.get("ae_run")
    if not ae_dir or not os.path.isdir(ae_dir):
        raise ConfigError("AE run %r referenced by %s is missing; pass "
                          "--ae-run explicitly" % (ae_dir, run_dir))
    ae_model, ae_cfg, ae_snap = _load_ae_run(ae_dir)
    if snap.get("ae_config_sha256") not in (None, fileio.json_hash(ae_snap)):
        raise ConfigError("the AE run at %s no longer matches the config the "
                          "VAE was trained against" % ae_dir)
    vae_cfg = _construct("vae", snap["vae"])
    model = vae.VAEModel(vae_cfg, np.random.default_rng(0), n_x=ae_cfg.n_x)
    try:
        _, _, extra = fileio.load_train_checkpoint(run_dir, model)
    except (ValueError, KeyError) as e:
        raise ConfigError("cannot load VAE checkpoint from %s: %s"
                          % (run_dir, e))
    if extra.get("kind") != "vae":
        raise ConfigError("%s does not hold a VAE checkpoint" % run_dir)
    model.load_extra_state(extra)
    return model, ae_model, snap, extra


def _find_records(ds, ids):
    by_id = {r.id: r for r in ds.records}
    out = []
    for rid in ids:
        if rid not in by_id:
            some = ", ".join(sorted(by_id)[:3])
            raise ConfigError("no shape %r in the dataset (ids look like: %s)"
                              % (rid, some))
        out.append(by_id[rid])
    return out


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = resolve_config(args.config)
    ds_cfg = _construct("dataset", cfg["dataset"])
    data_dir = _dataset_dir(cfg)
    want = _normalized(dataclasses.asdict(ds_cfg))
    meta_path = os.path.join(data_dir, "meta.json")
    manifest_path = os.path.join(data_dir, "manifest.jsonl")
    if os.path.exists(meta_path) and not args.force:
        built = fileio.load_json(meta_path).get("config")
        if _normalized(built) != want:
            raise ConfigError("dataset at %s was built from a different "
                              "config; pass --force to rebuild" % data_dir)
    elif (os.path.isdir(data_dir) and os.listdir(data_dir)
          and not os.path.exists(meta_path) and not args.force):
        raise ConfigError("partial dataset at %s (no meta.json); pass "
                          "--force to rebuild" % data_dir)
    synthgen.build_dataset(ds_cfg, data_dir, jobs=args.jobs, force=args.force,
                           cache_dir=_cache_dir(cfg, data_dir))
    fileio.write_dataset_checksums(data_dir)
    with open(manifest_path) as f:
        n = sum(1 for _ in f)
    counts = fileio.load_json(meta_path)["counts"]
    print("dataset at %s: %d shapes (%s)" % (
        data_dir, n, ", ".join("%s=%d" % kv for kv in sorted(counts.items()))))
    return EXIT_OK


def cmd_precompute_spectra(args):
    cfg = resolve_config(args.config)
    ds_cfg = _construct("dataset", cfg["dataset"])
    data_dir = _dataset_dir(cfg)
    backend = args.backend or ds_cfg.spectrum_backend
    ds = _load_dataset(data_dir, expect_config=dataclasses.asdict(ds_cfg),
                       include_meshes=(backend == "mesh"))
    cache = spectral.SpectrumCache(_cache_dir(cfg, data_dir))

    def one(rec):
        if backend == "mesh":
            mesh = ds.load_mesh(rec)
            geometry = (mesh.verts, mesh.faces)
        else:
            geometry = rec.cloud
        key = cache.key(geometry, backend, ds_cfg.n_eigs, k=ds_cfg.knn_k)
        spec = cache.load(key)
        if spec is not None:
            return "hit", spec.params.get("max_residual")
        try:
            spec = spectral.compute_spectrum(geometry, ds_cfg.n_eigs,
                                             backend=backend, k=ds_cfg.knn_k)
        except spectral.EigensolveError as e:
            return "fail", (rec.id, str(e))
        cache.store(key, spec)
        return "new", spec.params.get("max_residual")

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            outcomes = list(ex.map(one, ds.records))
    else:
        outcomes = [one(rec) for rec in ds.records]

    hits = sum(1 for kind, _ in outcomes if kind == "hit")
    computed = sum(1 for kind, _ in outcomes if kind == "new")
    failures = [info for kind, info in outcomes if kind == "fail"]
    residuals = [r for kind, r in outcomes
                 if kind in ("hit", "new") and r is not None]
    total = len(ds.records)
    print("spectra (%s backend): %d/%d cache hits, %d computed"
          % (backend, hits, total, computed))
    if residuals:
        residuals = np.asarray(residuals)
        print("eigenpair residuals: min %.3e  median %.3e  max %.3e"
              % (residuals.min(), np.median(residuals), residuals.max()))
    if failures:
        print("eigensolver failures on %d shape(s):" % len(failures))
        for rid, msg in failures:
            print("  %s: %s" % (rid, msg))
        return EXIT_NUMERIC
    return EXIT_OK


def _prepare_run_dir(run_dir, snap, force):
    """Decide fresh-vs-resume; True means a compatible checkpoint exists.

    The snapshot is NOT written here: a resuming command must first verify
    the existing checkpoint against the old snapshot (see
    ``_refresh_snapshot``), only then may config.json be replaced.  Fresh
    runs get theirs written immediately.
    """
    ckpt_manifest = os.path.join(run_dir, fileio.CHECKPOINT_DIR,
                                 "manifest.json")
    if os.path.exists(ckpt_manifest):
        if not force:
            old = fileio.load_json(os.path.join(run_dir, "config.json"))
            if _train_identity(old) != _train_identity(snap):
                raise ConfigError(
                    "run %s was trained with an incompatible config; use "
                    "--force to start over or pick another --run-name"
                    % run_dir)
            return True
        shutil.rmtree(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    fileio.save_json(os.path.join(run_dir, "config.json"), snap)
    return False


def _refresh_snapshot(run_dir, snap):
    """Replace config.json after the old checkpoint has been validated
    (the duration fields may legitimately have grown)."""
    fileio.save_json(os.path.join(run_dir, "config.json"), snap)


def cmd_train_ae(args):
    cfg = resolve_config(args.config)
    if args.variant:
        cfg["ae"]["variant"] = args.variant
    if args.supervision:
        cfg["ae"]["supervision"] = args.supervision
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epochs is not None:
        cfg["ae"]["epochs"] = args.epochs
    ds_cfg = _construct("dataset", cfg["dataset"])
    data_dir = _dataset_dir(cfg)
    ds = _load_dataset(data_dir, expect_config=dataclasses.asdict(ds_cfg))
    meta_cfg = ds.meta["config"]
    _sync_with_dataset(cfg["ae"], "rotation_axis", meta_cfg["rotation_axis"],
                       _declared_defaults(ae.AEConfig)["rotation_axis"])
    _sync_with_dataset(cfg["ae"], "n_points", meta_cfg["n_points"],
                       _declared_defaults(ae.AEConfig)["n_points"])
    ae_cfg = _construct("ae", cfg["ae"])
    vae_cfg = _construct("vae", cfg["vae"])   # validate the full experiment
    run_name = args.run_name or "ae-%s-%s-s%d" % (
        ae_cfg.variant, ae_cfg.supervision, cfg["seed"])
    run_dir = os.path.join(cfg["out_dir"], run_name)
    snap = _snapshot(cfg, ds_cfg, ae_cfg, vae_cfg,
                     dataset_dir=os.path.abspath(data_dir))
    resuming = _prepare_run_dir(run_dir, snap, args.force)
    snap_hash = fileio.json_hash(snap)

    rng = np.random.default_rng(cfg["seed"])
    train_state = None
    if resuming:
        model = ae.AEModel(ae_cfg, np.random.default_rng(0))
        try:
            opt, sched, extra = fileio.load_train_checkpoint(run_dir, model)
        except (ValueError, KeyError) as e:
            raise ConfigError("cannot resume %s: %s" % (run_dir, e))
        done = int(extra["progress"]["epoch"])   # last epoch index (0-based)
        if done + 1 >= ae_cfg.epochs:
            print("%s already trained for %d epochs; nothing to do"
                  % (run_dir, done + 1))
            return EXIT_OK
        _refresh_snapshot(run_dir, snap)
        fileio.restore_rng(rng, extra["rng_state"])
        train_state = {"optimizer": opt, "scheduler": sched, "epoch": done}
        print("resuming %s at epoch %d" % (run_dir, done + 1))
    else:
        model = ae.AEModel(ae_cfg, rng)

    model, hist = ae.train_ae(ds.clouds("train"), ds.clouds("val"), ae_cfg,
                              rng, log_every=args.log_every, model=model,
                              train_state=train_state)
    fileio.write_history_csv(os.path.join(run_dir, "history.csv"),
                             hist["epochs"], append=bool(resuming))
    if hist["diverged"]:
        print("training diverged; last checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    final = hist["final"]
    fileio.save_train_checkpoint(
        run_dir, model, final["optimizer"], final["scheduler"], rng,
        {"epoch": final["epoch"]}, snap_hash,
        extra={"kind": "ae", "pretrain_steps": hist.get("pretrain_steps", 0)})
    last = hist["epochs"][-1] if hist["epochs"] else {}
    print("trained %s for %d epochs (val d_C %.5f)"
          % (run_dir, final["epoch"] + 1, last.get("val_dc", float("nan"))))
    return EXIT_OK


def cmd_train_vae(args):
    cfg = resolve_config(args.config)
    if args.regime:
        cfg["vae"]["regime"] = args.regime
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.iters is not None:
        cfg["vae"]["iters"] = args.iters
    ds_cfg = _construct("dataset", cfg["dataset"])
    data_dir = _dataset_dir(cfg)
    ds = _load_dataset(data_dir, expect_config=dataclasses.asdict(ds_cfg))

    ae_dir = args.ae_run
    if not os.path.isdir(ae_dir):
        inside = os.path.join(cfg["out_dir"], ae_dir)
        if os.path.isdir(inside):
            ae_dir = inside
        else:
            raise ConfigError("no AE run at %s" % args.ae_run)
    ae_model, ae_cfg, ae_snap = _load_ae_run(ae_dir)
    if _normalized(ae_snap["dataset"]) != _normalized(
            dataclasses.asdict(ds_cfg)):
        raise ConfigError("the AE at %s was trained on a different dataset "
                          "config" % ae_dir)

    lam = ds.spectra("train")
    regime = cfg["vae"]["regime"]
    if lam.ndim != 2 or lam.shape[1] == 0:
        raise ConfigError("the dataset has no spectra, which %s training "
                          "needs; run `shapespace precompute-spectra` first"
                          % regime)
    _sync_with_dataset(cfg["vae"], "n_I", int(lam.shape[1]),
                       _declared_defaults(vae.VAEConfig)["n_I"])
    vae_cfg = _construct("vae", cfg["vae"])

    run_name = args.run_name or "vae-%s-s%d" % (vae_cfg.regime, cfg["seed"])
    run_dir = os.path.join(cfg["out_dir"], run_name)
    snap = _snapshot(cfg, ds_cfg, ae_cfg, vae_cfg,
                     dataset_dir=os.path.abspath(data_dir),
                     ae_run=os.path.abspath(ae_dir),
                     ae_config_sha256=fileio.json_hash(_normalized(ae_snap)))
    resuming = _prepare_run_dir(run_dir, snap, args.force)
    snap_hash = fileio.json_hash(snap)

    # Three independent streams so a resumed run sees exactly the state an
    # uninterrupted one would: encoding is replayed from scratch, the training
    # stream alone is checkpointed, and init never touches either.
    enc_ss, train_ss, init_ss = np.random.SeedSequence(cfg["seed"]).spawn(3)
    rng_enc = np.random.default_rng(enc_ss)
    rng_train = np.random.default_rng(train_ss)
    data = vae.encode_dataset(ae_model, ds, "train", vae_cfg.rot_copies,
                              rng_enc)
    val = vae.encode_dataset(ae_model, ds, "val", 1, rng_enc)

    train_state = None
    if resuming:
        model = vae.VAEModel(vae_cfg, np.random.default_rng(0),
                             n_x=ae_cfg.n_x)
        try:
            opt, sched, extra = fileio.load_train_checkpoint(run_dir, model)
        except (ValueError, KeyError) as e:
            raise ConfigError("cannot resume %s: %s" % (run_dir, e))
        done = int(extra["progress"]["step"])
        if done >= vae_cfg.iters:
            print("%s already trained to step %d; nothing to do"
                  % (run_dir, done))
            return EXIT_OK
        _refresh_snapshot(run_dir, snap)
        model.load_extra_state(extra)
        fileio.restore_rng(rng_train, extra["rng_state"])
        train_state = {"optimizer": opt, "scheduler": sched, "step": done}
        print("resuming %s at step %d" % (run_dir, done + 1))
    else:
        model = vae.VAEModel(vae_cfg, np.random.default_rng(init_ss),
                             n_x=ae_cfg.n_x)

    model, hist = vae.fit_vae(data, vae_cfg, rng_train, val_data=val,
                              log_every=args.log_every, model=model,
                              train_state=train_state)
    fileio.write_history_csv(os.path.join(run_dir, "history.csv"),
                             hist["rows"], append=bool(resuming))
    if hist["diverged"]:
        print("training diverged; last checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    final = hist["final"]
    fileio.save_train_checkpoint(
        run_dir, model, final["optimizer"], final["scheduler"], rng_train,
        {"step": final["step"]}, snap_hash,
        extra=dict(model.extra_state(), kind="vae",
                   ae_run=os.path.abspath(ae_dir)))
    last = hist["rows"][-1] if hist["rows"] else {}
    print("trained %s to step %d (val total %.4f)"
          % (run_dir, final["step"], last.get("total", float("nan"))))
    return EXIT_OK


def cmd_eval(args):
    vae_model, ae_model, snap, _ = _load_vae_run(args.run, args.ae_run)
    ds = _load_dataset(snap["dataset_dir"], expect_config=snap["dataset"])
    seed = snap["seed"] if args.seed is None else args.seed
    report_cfg = {"seed": seed}
    if args.report_config:
        try:
            overrides = json.loads(args.report_config)
        except json.JSONDecodeError as e:
            raise ConfigError("--report-config is not valid JSON: %s" % e)
        unknown = sorted(set(overrides) - set(metrics.REPORT_DEFAULTS))
        if unknown:
            raise ConfigError("unknown report option(s): %s"
                              % ", ".join(unknown))
        report_cfg.update(overrides)
    report = metrics.full_report({"ae": ae_model, "vae": vae_model}, ds,
                                 report_cfg)
    out = os.path.join(args.run, "report.json")
    with open(out, "w") as f:
        f.write(report.to_json())
    flat = ", ".join("%s=%.4g" % kv for kv in sorted(report.metrics.items()))
    print("wrote %s (%s)" % (out, flat))
    if report.partial:
        print("report is PARTIAL; failed: %s"
              % "; ".join(report.failures), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_generate(args):
    vae_model, ae_model, snap, _ = _load_vae_run(args.run, args.ae_run)
    rng = np.random.default_rng(args.seed)
    clouds = vae.generate(ae_model, vae_model, args.count, rng)
    out_dir = args.out or os.path.join(args.run, "generated")
    manifest = fileio.write_cloud_sequence(
        out_dir, "gen", clouds,
        extra={"seed": args.seed, "count": args.count,
               "run": os.path.abspath(args.run)})
    print("wrote %d clouds; manifest at %s" % (len(clouds), manifest))
    return EXIT_OK


def _latent_endpoints(ae_model, recs):
    shapes = []
    for rec in recs:
        q, x_c = ae.encode(ae_model, rec.cloud[None])
        shapes.append((q[0], x_c[0]))
    return shapes


def _export_path(run_dir, args, vae_model, ae_model, ds, mode, steps,
                 out_default):
    rec_a, rec_b = _find_records(ds, [args.id_a, args.id_b])
    shape_a, shape_b = _latent_endpoints(ae_model, [rec_a, rec_b])
    out = vae.interpolate_and_transfer(vae_model, shape_a, shape_b, mode,
                                       steps=steps, ae_model=ae_model)
    out_dir = args.out or os.path.join(run_dir, out_default)
    extra = {"mode": mode, "ids": [rec_a.id, rec_b.id],
             "t": out["t"].tolist(),
             "latents": [{g: v.tolist() for g, v in l.items()}
                         for l in out["latents"]]}
    manifest = fileio.write_cloud_sequence(out_dir, mode.replace("_", "-"),
                                           out["clouds"], extra=extra)
    print("wrote %d clouds; manifest at %s" % (len(out["clouds"]), manifest))
    return EXIT_OK


def cmd_interp(args):
    vae_model, ae_model, snap, _ = _load_vae_run(args.run, args.ae_run)
    ds = _load_dataset(snap["dataset_dir"], expect_config=snap["dataset"])
    if args.steps < 2:
        raise ConfigError("--steps must be at least 2 (the two endpoints)")
    return _export_path(args.run, args, vae_model, ae_model, ds, args.mode,
                        args.steps, "interp-%s" % args.mode)


def cmd_transfer_pose(args):
    vae_model, ae_model, snap, _ = _load_vae_run(args.run, args.ae_run)
    ds = _load_dataset(snap["dataset_dir"], expect_config=snap["dataset"])
    return _export_path(args.run, args, vae_model, ae_model, ds,
                        "pose_transfer", 2, "pose-transfer")


# -------------------------------------------------------------- entry point

def _add_config(p):
    p.add_argument("-c", "--config", metavar="JSON",
                   help="experiment config (defaults apply when omitted)")


def _add_run(p):
    p.add_argument("--run", required=True, metavar="DIR",
                   help="trained VAE run directory")
    p.add_argument("--ae-run", metavar="DIR",
                   help="override the AE run recorded in the VAE config")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shapespace",
        description="factorized shape-space pipeline: synthetic corpus, "
                    "rotation-factorizing AE, disentangling VAE, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_config(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true",
                   help="rebuild even over an existing or partial dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("precompute-spectra",
                       help="fill the spectrum cache for every shape")
    _add_config(p)
    p.add_argument("--backend", choices=("mesh", "pc"))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_precompute_spectra)

    p = sub.add_parser("train-ae", help="train the rotation-factorizing AE")
    _add_config(p)
    p.add_argument("--variant", choices=("STD", "FTL"))
    p.add_argument("--supervision", choices=("S", "U"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override ae.epochs")
    p.add_argument("--run-name")
    p.add_argument("--force", action="store_true",
                   help="discard an existing run directory")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-vae",
                       help="train the latent VAE on frozen-AE codes")
    _add_config(p)
    p.add_argument("--regime", choices=("FO", "PP"))
    p.add_argument("--ae-run", required=True, metavar="DIR",
                   help="trained AE run directory (or name under out_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="override vae.iters")
    p.add_argument("--run-name")
    p.add_argument("--force", action="store_true",
                   help="discard an existing run directory")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("eval", help="run the full metric report")
    _add_run(p)
    p.add_argument("--seed", type=int,
                   help="evaluation seed (default: the run's seed)")
    p.add_argument("--report-config", metavar="JSON",
                   help="inline overrides for the report settings, e.g. "
                        "'{\"sizes\": [10, 20], \"c3d_shapes\": 8}'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample shapes from the prior")
    _add_run(p)
    p.add_argument("-n", "--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interp",
                       help="interpolate one latent group between two shapes")
    _add_run(p)
    p.add_argument("--id-a", required=True)
    p.add_argument("--id-b", required=True)
    p.add_argument("--mode", choices=("intrinsic", "extrinsic"),
                   default="intrinsic")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("transfer-pose",
                       help="swap the extrinsic code between two shapes")
    _add_run(p)
    p.add_argument("--id-a", required=True)
    p.add_argument("--id-b", required=True)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_transfer_pose)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("SHAPESPACE_LOGLEVEL", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print("shapespace: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, spectral.EigensolveError,
            flows.FlowNumericsError) as e:
        print("shapespace: numeric failure: %s" % e, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
