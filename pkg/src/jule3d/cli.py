"""Command-line front end: ``jule3d <command> [flags]``.

Commands write their artifacts under ``--outdir``:

``phantom``   phantom.vol3, truth.vol3
``train``     model.net3, trace.txt, partition.txt
``segment``   jule_labels.vol3
``baseline``  kmeans_labels.vol3, otsu_labels.vol3
``eval``      metrics.json
``pipeline``  all of the above plus a comparison table on stdout

Label maps and volumes carry a ``<name>.json`` sidecar holding the config
hash; the checkpoint stores it as metadata. Failures print one JSON line
``{"error": <name>, "message": <text>}`` to stderr and exit nonzero.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import config as cfgmod
from .exceptions import ConfigHashMismatch, IoFailure, Jule3DError, MissingCheckpoint

log = logging.getLogger("jule3d")

FLAG_KEYS = {"input": "input", "outdir": "outdir", "seed": "seed", "threads": "threads", "K": "K",
             "C": "C", "ns": "ns", "w": "w", "stride": "stride", "threshold": "threshold", "levels": "levels"}

PHANTOM = "phantom.vol3"
TRUTH = "truth.vol3"
MODEL = "model.net3"
TRACE = "trace.txt"
PARTITION = "partition.txt"
METRICS = "metrics.json"
LABEL_FILES = {"jule": "jule_labels.vol3", "kmeans": "kmeans_labels.vol3", "otsu": "otsu_labels.vol3"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, status=2)


def _fail(name, message, status=1):
    print(json.dumps({"error": name, "message": " ".join(str(message).split())}), file=sys.stderr)
    raise SystemExit(status)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--input", help="input VOL3 volume")
    common.add_argument("--outdir", help="artifact directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on worker threads (0 = no cap)")
    common.add_argument("--K", type=int, help="clusters for segmentation")
    common.add_argument("--C", type=int, help="final cluster count of the joint loop")
    common.add_argument("--ns", type=int, help="training patch count")
    common.add_argument("--w", type=int, help="patch edge length")
    common.add_argument("--stride", type=int, help="dense-grid pitch and label block size")
    common.add_argument("--threshold", type=int, help="foreground intensity cutoff")
    common.add_argument("--levels", type=int, help="Otsu threshold count (1 or 2)")
    common.add_argument("--force", action="store_true", help="accept artifacts from a different config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="jule3d", description="Unsupervised 3D segmentation with jointly learned patch features.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("phantom", "write a synthetic phantom and its ground truth"),
                       ("train", "learn patch features and clusters from a volume"),
                       ("segment", "segment a volume with a trained checkpoint"),
                       ("baseline", "intensity k-means and Otsu segmentations"),
                       ("eval", "score label maps against ground truth"),
                       ("pipeline", "run every stage and print a comparison table")]:
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args):
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            _fail("ConfigTypeError", f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return cfgmod.load_config(args.config, overrides)


def _limit_threads(n):
    if n <= 0:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# artifact helpers

def _stamp(path, cfg, kind, **extra):
    meta = {"config_hash": cfg.hash_hex(), "kind": kind, **extra}
    try:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}.json: {exc}") from exc


def _read_stamp(path):
    side = Path(str(path) + ".json")
    if not side.is_file():
        return {}
    return json.loads(side.read_text())


def _check_hash(found, cfg, what, force):
    if found == cfg.hash_hex():
        return
    msg = f"{what} was produced under config {found or 'unknown'}, current config is {cfg.hash_hex()}"
    if not force:
        raise ConfigHashMismatch(msg + "; rerun with --force to accept")
    log.warning("%s (accepted with --force)", msg)


def _write_labelmap(labelmap, path, cfg, kind, **extra):
    from .volume import load_labelmap, save_labelmap
    save_labelmap(labelmap, path)
    if load_labelmap(path) != labelmap:
        raise IoFailure(f"{path} does not match what was written")
    _stamp(path, cfg, kind, **extra)


def _write_volume(volume, path, cfg, kind):
    from .volume import load_volume, save_volume
    save_volume(volume, path)
    if load_volume(path) != volume:
        raise IoFailure(f"{path} does not match what was written")
    _stamp(path, cfg, kind)


def _input_volume(cfg, outdir):
    from .volume import load_volume
    path = cfg.input or str(outdir / PHANTOM)
    if not cfg.input and not Path(path).is_file():
        raise IoFailure("no --input given and no phantom in the output directory")
    return load_volume(path)


def _dump_slices(labelmap, name, outdir, cfg):
    from .volume import save_pgm_slice
    from .segmenter import default_slices
    zs = cfg.slice_indices(labelmap.dims[2]) or default_slices(labelmap.dims[2])
    folder = outdir / "slices"
    folder.mkdir(exist_ok=True)
    for z in zs:
        save_pgm_slice(labelmap, z, folder / f"{name}_z{z:04d}.pgm")


# commands

def cmd_phantom(cfg, outdir, force):
    from .volume import generate_phantom
    volume, truth = generate_phantom(cfg.phantom_spec())
    _write_volume(volume, outdir / PHANTOM, cfg, "volume")
    _write_labelmap(truth, outdir / TRUTH, cfg, "truth")
    log.info("phantom %s written to %s", volume.dims, outdir)
    if cfg.dump_pgm:
        _dump_slices(truth, "truth", outdir, cfg)


def cmd_train(cfg, outdir, force):
    from .cluster import load_partition, save_partition
    from .jule import run_jule, save_trace
    from .net3d import load_checkpoint, save_checkpoint
    from .sampler import normalize_patches, sample_training_patches
    volume = _input_volume(cfg, outdir)
    start = time.perf_counter()
    patches = normalize_patches(sample_training_patches(volume, cfg.ns, cfg.w, cfg.threshold, cfg.seed))

    def progress(t, params, labels, rec):
        log.info("period %d: %d clusters, loss %.4f, %.1f s", t, rec.n_clusters, rec.loss, rec.wall_s)

    params, labels, trace = run_jule(patches, cfg.jule_config(), callback=progress)
    mean, std = patches.norm_stats
    meta = {"config_hash": cfg.hash_hex(), "norm_mean": repr(mean), "norm_std": repr(std), "w": str(cfg.w),
            "runtime_s": f"{time.perf_counter() - start:.3f}"}
    save_checkpoint(params, outdir / MODEL, meta)
    reloaded, _ = load_checkpoint(outdir / MODEL)
    if not reloaded.equals(params):
        raise IoFailure(f"{outdir / MODEL} does not match what was written")
    save_trace(trace, outdir / TRACE)
    with open(outdir / TRACE, "a") as fh:
        fh.write(f"# config_hash={cfg.hash_hex()}\n")
    save_partition(labels, outdir / PARTITION)
    if (load_partition(outdir / PARTITION) != labels).any():
        raise IoFailure(f"{outdir / PARTITION} does not match what was written")
    log.info("trained: %d training events, final clusters %d", len(trace), trace[-1].n_clusters)


def cmd_segment(cfg, outdir, force):
    from .net3d import load_checkpoint
    from .segmenter import segment_volume
    path = outdir / MODEL
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}; run 'train' first")
    params, meta = load_checkpoint(path)
    _check_hash(meta.get("config_hash", ""), cfg, str(path), force)
    volume = _input_volume(cfg, outdir)
    norm = (float(meta["norm_mean"]), float(meta["norm_std"]))
    start = time.perf_counter()
    labels = segment_volume(volume, params, norm, cfg.segmentation_config())
    runtime = time.perf_counter() - start + float(meta.get("runtime_s", 0.0))
    _write_labelmap(labels, outdir / LABEL_FILES["jule"], cfg, "jule", K=cfg.K, runtime_s=runtime)
    if cfg.dump_pgm:
        _dump_slices(labels, "jule", outdir, cfg)


def cmd_baseline(cfg, outdir, force):
    from .segmenter import baseline_intensity_kmeans, baseline_otsu, timed
    volume = _input_volume(cfg, outdir)
    km, t_km = timed(baseline_intensity_kmeans, volume, cfg.K, cfg.threshold, cfg.seed)
    _write_labelmap(km, outdir / LABEL_FILES["kmeans"], cfg, "kmeans", K=cfg.K, runtime_s=t_km)
    ot, t_ot = timed(baseline_otsu, volume, cfg.levels, cfg.threshold)
    _write_labelmap(ot, outdir / LABEL_FILES["otsu"], cfg, "otsu", K=cfg.levels + 1, runtime_s=t_ot)
    if cfg.dump_pgm:
        _dump_slices(km, "kmeans", outdir, cfg)
        _dump_slices(ot, "otsu", outdir, cfg)


def cmd_eval(cfg, outdir, force):
    from .exceptions import NoOverlap
    from .segmenter import default_slices, evaluate_nmi, metrics_record, write_metrics
    from .volume import load_labelmap
    truth_path = Path(cfg.truth) if cfg.truth else outdir / TRUTH
    truth = load_labelmap(truth_path)
    slices = cfg.slice_indices(truth.dims[2])
    seven = default_slices(truth.dims[2])
    records = []
    for method, name in LABEL_FILES.items():
        path = outdir / name
        if not path.is_file():
            continue
        stamp = _read_stamp(path)
        _check_hash(stamp.get("config_hash", ""), cfg, str(path), force)
        pred = load_labelmap(path)
        score, count = evaluate_nmi(pred, truth, slices, return_count=True)
        try:
            score7 = evaluate_nmi(pred, truth, seven)
        except NoOverlap:
            score7 = None
        records.append(metrics_record(method, stamp.get("K", pred.n_classes), score, count, slices, cfg.seed,
                                      stamp.get("runtime_s", 0.0), nmi_seven_slices=score7,
                                      seven_slices=seven, config_hash=cfg.hash_hex()))
    if not records:
        raise IoFailure(f"no label maps to evaluate in {outdir}")
    write_metrics(records, outdir / METRICS)
    return records


def format_table(records):
    lines = [f"{'method':<8} {'K':>2} {'nmi':>7} {'nmi@7':>7} {'voxels':>9} {'runtime_s':>10}"]
    for r in records:
        s7 = "n/a" if r.get("nmi_seven_slices") is None else f"{r['nmi_seven_slices']:.4f}"
        lines.append(f"{r['method']:<8} {r['K']:>2} {r['nmi']:>7.4f} {s7:>7} {r['evaluated_voxels']:>9} "
                     f"{r['runtime_s']:>10.1f}")
    return "\n".join(lines)


def cmd_pipeline(cfg, outdir, force):
    if not cfg.input:
        cmd_phantom(cfg, outdir, force)
    cmd_train(cfg, outdir, force)
    cmd_segment(cfg, outdir, force)
    if cfg.baselines:
        cmd_baseline(cfg, outdir, force)
    records = cmd_eval(cfg, outdir, force)
    print(format_table(records))


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "segment": cmd_segment,
            "baseline": cmd_baseline, "eval": cmd_eval, "pipeline": cmd_pipeline}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        outdir = Path(cfg.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        print(f"config_hash {cfg.hash_hex()}", file=sys.stderr)
        limiter = _limit_threads(cfg.threads)
        try:
            COMMANDS[args.command](cfg, outdir, args.force)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except Jule3DError as exc:
        _fail(exc.code, exc)
    except (OSError, ValueError, KeyError) as exc:
        _fail(type(exc).__name__, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
