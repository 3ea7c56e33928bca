"""crowdpose-kit command line: reproducible pipelines over the toolkit.

Every run with file outputs also writes a manifest (argv, seed, content
digest of all inputs, version, duration). Exit codes: 0 success, 1 domain
error, 2 usage error. Diagnostics go to stderr; data goes to files or
stdout only. The --jobs flag controls data-parallel width without changing
any output byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import functools
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from . import annotations as anno
from . import augment as aug
from . import crowd_metrics
from . import evaluator
from . import heatmaps
from . import masks
from . import occloss
from . import synthgen
from .errors import ConfigError, CrowdKitError, InventoryError
from .seeding import substream


def _digest_paths(paths) -> str:
    h = hashlib.sha256()
    for path in sorted(str(p) for p in paths if p):
        p = Path(path)
        h.update(path.encode("utf-8"))
        if p.is_file():
            h.update(p.read_bytes())
        elif p.is_dir():
            for child in sorted(p.rglob("*")):
                if child.is_file():
                    h.update(str(child.relative_to(p)).encode("utf-8"))
                    h.update(child.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, argv, inputs, seed, started: float) -> None:
    manifest = {
        "command": ["crowdpose-kit", *argv],
        "seed": seed,
        "config_digest": _digest_paths(inputs),
        "tool_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    if out.suffix:  # file output: manifest next to it
        path = out.with_suffix(out.suffix + ".manifest.json")
    else:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _format_name(flag: str) -> str:
    return flag + "_like" if flag in ("coco", "jta") else "native"


def _read_dataset(path: str, fmt: str) -> anno.Dataset:
    return anno.parse_dataset(Path(path).read_bytes(), fmt)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --- subcommands -----------------------------------------------------------

def _cmd_convert(args, argv) -> int:
    started = time.time()
    dataset = _read_dataset(args.infile, _format_name(args.src_format))
    if args.to == "crowdpose":
        if dataset.schema.count != anno.JTA_SCHEMA.count:
            raise ConfigError("conversion to crowdpose expects a 22-keypoint input")
        mapping = None
        if args.mapping:
            mapping = json.loads(Path(args.mapping).read_text(encoding="utf-8"))
        dataset = anno.convert_dataset_jta_to_crowdpose(dataset, mapping)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(anno.serialize_dataset(dataset))
    _write_manifest(out, argv, [args.infile, args.mapping], args.seed, started)
    return 0


def _cmd_validate(args, argv) -> int:
    report = anno.validate(_read_dataset(args.infile, _format_name(args.format)))
    _emit(report.to_json(), args.out)
    if args.out:
        _write_manifest(Path(args.out), argv, [args.infile], args.seed, time.time())
    return 0


def _cmd_analyze(args, argv) -> int:
    started = time.time()
    dataset = _read_dataset(args.infile, "native")
    stats = crowd_metrics.dataset_histogram(dataset, args.bins, args.count_mode)
    _emit(stats.to_json(), args.out)
    if args.out:
        _write_manifest(Path(args.out), argv, [args.infile], args.seed, started)
    return 0


@functools.lru_cache(maxsize=4)
def _inventory_cached(directory: str) -> aug.CutoutInventory:
    return aug.load_inventory(Path(directory))


def _augment_one(images_dir: str, inventory_dir: str, seed: int,
                 config: aug.AugmentConfig, record: anno.ImageRecord):
    raster = masks.read_pam((Path(images_dir) / f"{record.id}.pam").read_bytes())
    inventory = _inventory_cached(inventory_dir)
    if not record.persons:
        return record.id, masks.write_pam(raster), record, {"placements": [],
                                                            "flag_changes": []}
    rng = substream(seed, "augment", record.id)
    target = int(rng.integers(len(record.persons)))
    result = aug.apply_augmentation(rng, raster, record, target, config, inventory)
    log = {
        "target_person": target,
        "placements": [p.to_json() for p in result.placements],
        "flag_changes": [c.to_json() for c in result.flag_changes],
    }
    return record.id, masks.write_pam(result.image), result.record, log


def _cmd_augment(args, argv) -> int:
    started = time.time()
    if not Path(args.inventory).is_dir():
        raise InventoryError(f"inventory directory not found: {args.inventory}")
    dataset = _read_dataset(args.infile, "native")
    config = aug.AugmentConfig(method=args.method, seed=args.seed)
    images_dir = args.images or str(Path(args.infile).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    worker = functools.partial(_augment_one, images_dir, args.inventory,
                               args.seed, config)
    results = _map_jobs(worker, dataset.images, args.jobs)
    log = {}
    new_images = []
    for image_id, pam, record, entry in results:
        (out / f"{image_id}.pam").write_bytes(pam)
        new_images.append(record)
        log[image_id] = entry
    augmented = anno.Dataset(schema=dataset.schema, images=tuple(new_images),
                             meta=dict(dataset.meta))
    (out / "dataset.json").write_bytes(anno.serialize_dataset(augmented))
    (out / "augment_log.json").write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, argv, [args.infile, images_dir, args.inventory],
                    args.seed, started)
    return 0


def _render_scene(scene: synthgen.GeneratedScene):
    raster, depth = synthgen.render_layout(scene.layout)
    return scene.record.id, masks.write_pam(raster), masks.write_depth_pam(depth)


def _map_jobs(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (jobs * 4))))


def _target_histogram(target: str, bins: int) -> tuple[float, ...]:
    if target == "uniform":
        return (1.0 / bins,) * bins
    if target == "easy":
        return (1.0,) + (0.0,) * (bins - 1)
    weights = json.loads(Path(target).read_text(encoding="utf-8"))
    total = float(sum(weights))
    return tuple(w / total for w in weights)


def _cmd_gen(args, argv) -> int:
    started = time.time()
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        overrides.pop("seed", None)  # --seed always wins
        for key in ("person_count_range", "scale_range"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
    scene_cfg = synthgen.SceneConfig(seed=args.seed, **overrides)
    corpus_cfg = synthgen.CorpusConfig(
        scenes=args.scenes, scene_cfg=scene_cfg,
        target_histogram=_target_histogram(args.target, args.bins),
        tolerance=args.tolerance)
    scenes = synthgen.plan_corpus(corpus_cfg)
    dataset = synthgen.corpus_dataset(corpus_cfg, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.json").write_bytes(anno.serialize_dataset(dataset))
    if not args.no_rasters:
        for image_id, pam, depth_pam in _map_jobs(_render_scene, scenes, args.jobs):
            (out / f"{image_id}.pam").write_bytes(pam)
            (out / f"{image_id}_depth.pam").write_bytes(depth_pam)
    _write_manifest(out, argv, [args.config], args.seed, started)
    return 0


def _cmd_heatmap(args, argv) -> int:
    started = time.time()
    if args.action == "encode":
        dataset = _read_dataset(args.infile, "native")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        index = {}
        for img in dataset.images:
            for pi, person in enumerate(img.persons):
                transform = heatmaps.bbox_to_crop(person.bbox)
                pair, in_bounds = heatmaps.encode(person.pose, transform, args.sigma)
                name = f"{img.id}_p{pi}.hm"
                (out / name).write_bytes(heatmaps.write_heatmap_pair(pair))
                index[name] = {
                    "image_id": img.id, "person_index": pi,
                    "bbox": [person.bbox.x, person.bbox.y, person.bbox.w,
                             person.bbox.h],
                    "encoded": [bool(b) for b in in_bounds],
                }
        (out / "heatmaps.json").write_text(
            json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_manifest(out, argv, [args.infile], args.seed, started)
        return 0
    # decode
    if not args.bbox:
        sys.stderr.write("error: heatmap decode requires --bbox X Y W H\n")
        return 2
    pair = heatmaps.read_heatmap_pair(Path(args.infile).read_bytes())
    bx, by, bw, bh = args.bbox
    transform = heatmaps.bbox_to_crop(anno.BBox(bx, by, bw, bh))
    result = heatmaps.decode(pair, transform, args.threshold)
    payload = {
        "keypoints": [[kp.x, kp.y, kp.vis.value] for kp in result.pose.keypoints],
        "confidences": [float(c) for c in result.confidences],
        "low_confidence": [bool(b) for b in result.low_confidence],
    }
    _emit(payload, args.out)
    if args.out:
        _write_manifest(Path(args.out), argv, [args.infile], args.seed, started)
    return 0


def _cmd_losscheck(args, argv) -> int:
    cfg = occloss.LossConfig(alpha=args.alpha)
    err = occloss.grad_check(cfg, trials=args.trials, fd_step=args.fd_step,
                             seed=args.seed)
    ok = err < 1e-5
    sys.stdout.write(f"max_relative_error={err:.3e} {'PASS' if ok else 'FAIL'}\n")
    return 0 if ok else 1


def _cmd_eval(args, argv) -> int:
    started = time.time()
    gt = _read_dataset(args.gt, "native")
    pred = _read_dataset(args.pred, "native")
    if args.sigmas:
        sigmas = tuple(json.loads(Path(args.sigmas).read_text(encoding="utf-8")))
    else:
        sigmas = tuple(evaluator.default_sigmas(gt.schema.count))
    cfg = evaluator.OksConfig(sigmas=sigmas)
    report = evaluator.eval_by_crowding(pred, gt, cfg, jobs=args.jobs)
    _emit(report.to_json(), args.out)
    if args.csv:
        _write_report_csv(Path(args.csv), report)
    if args.out:
        _write_manifest(Path(args.out), argv,
                        [args.gt, args.pred, args.sigmas], args.seed, started)
    return 0


def _write_report_csv(path: Path, report: evaluator.EvalReport) -> None:
    def cell(v):
        return "" if v is None else f"{v:.3f}"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "AP,AP_Easy,AP_Med,AP_Hard\n"
        f"{cell(report.ap)},{cell(report.ap_easy)},{cell(report.ap_medium)},"
        f"{cell(report.ap_hard)}\n", encoding="utf-8")


# --- parser ----------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdpose-kit",
        description="Crowded-scene pose data toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help, seed_required=False):
        p = sub.add_parser(name, help=help)
        # --seed is accepted everywhere and recorded in the manifest even
        # for commands whose output is a pure function of their inputs
        p.add_argument("--seed", type=int, required=seed_required, default=0)
        p.set_defaults(func=func)
        return p

    p = command("convert", _cmd_convert, "convert between annotation schemas")
    p.add_argument("--from", dest="src_format", required=True,
                   choices=("jta", "coco", "native"))
    p.add_argument("--to", required=True, choices=("crowdpose", "native"))
    p.add_argument("--mapping", help="JSON list of source keypoint indices")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)

    p = command("validate", _cmd_validate, "report annotation invariant violations")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", default="native", choices=("coco", "jta", "native"))
    p.add_argument("--out")

    p = command("analyze", _cmd_analyze, "CrowdIndex statistics for a dataset")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--count-mode", default=crowd_metrics.COUNT_LABELED,
                   choices=(crowd_metrics.COUNT_LABELED,
                            crowd_metrics.COUNT_VISIBLE_ONLY))
    p.add_argument("--out")

    p = command("augment", _cmd_augment, "paste occlusion cutouts over a dataset",
                seed_required=True)
    p.add_argument("--method", required=True, choices=aug.METHODS)
    p.add_argument("--inventory", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--images",
                   help="directory of <id>.pam rasters (default: beside --in)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = command("gen", _cmd_gen, "generate a synthetic annotated crowd corpus",
                seed_required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--target", default="uniform",
                   help="'uniform', 'easy', or a JSON file of bin weights")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=0.03)
    p.add_argument("--config", help="JSON with SceneConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-rasters", action="store_true",
                   help="skip PAM raster and depth outputs")

    p = command("heatmap", _cmd_heatmap, "encode or decode dual-branch heatmaps")
    p.add_argument("action", choices=("encode", "decode"))
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out")
    p.add_argument("--sigma", type=float, default=heatmaps.DEFAULT_SIGMA)
    p.add_argument("--bbox", type=float, nargs=4, metavar=("X", "Y", "W", "H"),
                   help="person box in image coordinates (decode)")
    p.add_argument("--threshold", type=float, default=heatmaps.DEFAULT_CONF_THRESHOLD)

    p = command("losscheck", _cmd_losscheck,
                "finite-difference check of the loss gradient")
    p.add_argument("--alpha", type=float, default=occloss.DEFAULT_ALPHA)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--fd-step", type=float, default=1e-4)

    p = command("eval", _cmd_eval, "OKS/AP evaluation by crowding level")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--sigmas", help="JSON list of per-keypoint sigmas")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, list(argv))
    except CrowdKitError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: missing input: {exc.filename}\n")
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
