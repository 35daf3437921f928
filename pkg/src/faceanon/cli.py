"""Command-line entry point: one subcommand per pipeline stage.

Stages talk to each other only through files (dataset cache, identity
snapshot, training checkpoints, mapping JSON, reports), so each one can run
on a different machine.  Every run directory gets an append-only
``run_manifest.jsonl`` written before any work starts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .errors import EmptyDatasetError, FaceAnonError

log = logging.getLogger("faceanon")

MANIFEST_NAME = "run_manifest.jsonl"

# TrainConfig fields exposed as flags; None means "keep the file/default value"
TRAIN_FLAGS = {
    "lr": float, "epochs": int, "batch_size": int, "lambda_id": float, "resolution": int, "width": float,
    "embedding_dim": int, "pretrain_epochs": int, "pretrain_lr": float, "pretrain_batch_size": int,
    "holdout": float,
}


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"time": record.created, "level": record.levelname, "logger": record.name,
                           "message": record.getMessage()})


def code_hash() -> str:
    """sha256 over the package sources, in path order."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(run_dir: Path, record: dict) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / MANIFEST_NAME
    with path.open("a") as fh:
        fh.write(json.dumps(record, default=str) + "\n")
    return path


def _config(args) -> "TrainConfig":
    from .training import TrainConfig

    overrides = {k: getattr(args, k, None) for k in TRAIN_FLAGS}
    overrides["seed"] = args.seed
    return TrainConfig.from_file(args.config, overrides)


def _load_data(path):
    from .dataset import load_cache

    path = Path(path)
    if not path.exists():
        raise EmptyDatasetError(f"dataset path {path} does not exist")
    return load_cache(path)


# ---------------------------------------------------------------------------
# subcommands; each returns a dict that is logged and stored in the manifest


def cmd_synth(args, cfg) -> dict:
    from .synthetic import write_synthetic_dataset

    write_synthetic_dataset(args.output, args.identities, args.per_identity, args.size, cfg.seed)
    return {"identities": args.identities, "images": args.identities * args.per_identity}


def cmd_prepare(args, cfg) -> dict:
    from .dataset import SidecarDetector, load_dataset, save_cache

    ds = load_dataset(args.input, SidecarDetector(), cfg.resolution, cfg.seed, args.workers, not args.no_align)
    save_cache(ds, args.output)
    return {"records": len(ds), "identities": ds.n_identities, "skipped": ds.skipped}


def cmd_pretrain_id(args, cfg) -> dict:
    from .training import pretrain_identity, save_identity

    ds = _load_data(args.data)
    train, held = ds.split(cfg.holdout, cfg.seed)
    res = pretrain_identity(train, cfg, held)
    out = Path(args.output) / "identity.npz"
    save_identity(res.net, res.proxies, out,
                  {"recall_before": res.recall_before, "recall_after": res.recall_after, "config": cfg.to_dict()})
    return {"identity": str(out), "recall_before": res.recall_before, "recall_after": res.recall_after}


def cmd_train(args, cfg) -> dict:
    from .training import fit, load_identity, pretrain_identity, save_identity

    ds = _load_data(args.data)
    train, _ = ds.split(cfg.holdout, cfg.seed)
    net = proxies = None
    if args.identity:
        net, proxies = load_identity(args.identity)
    elif args.resume is None:
        res = pretrain_identity(train, cfg)
        net, proxies = res.net, res.proxies
        save_identity(net, proxies, Path(args.output) / "identity.npz")
    result = fit(train, cfg, args.output, net, proxies, resume=args.resume, max_steps=args.max_steps)
    return {"checkpoints": [str(p) for p in result.checkpoints], "log": str(result.log_path),
            "steps": result.state.step}


def cmd_anonymize(args, cfg) -> dict:
    from .anonymize import ControlMapping, anonymize_image
    from .dataset import SidecarDetector, list_images, read_image, write_image
    from .training import load_generator

    gen = load_generator(args.checkpoint)
    out = Path(args.output)
    mapping_path = Path(args.mapping) if args.mapping else out / "mapping.json"
    if mapping_path.exists():
        mapping = ControlMapping.load(mapping_path)
    else:
        mapping = ControlMapping(gen.cfg.n_identities, cfg.seed)
    root = Path(args.input)
    paths = list_images(root)
    if not paths:
        raise EmptyDatasetError(f"no images under {root}")
    detector = SidecarDetector()
    faces = 0
    for p in paths:
        res = anonymize_image(gen, read_image(p), detector, mapping, args.camera_id, feather=args.feather, path=p)
        write_image(out / p.relative_to(root), res.image)
        faces += len(res.boxes)
    mapping_path.parent.mkdir(parents=True, exist_ok=True)
    mapping.save(mapping_path)
    return {"images": len(paths), "faces": faces, "mapping": str(mapping_path)}


def cmd_anonymize_video(args, cfg) -> dict:
    from .anonymize import ControlMapping
    from .training import load_generator
    from .video import anonymize_video, read_frames, read_tracks, write_frames

    gen = load_generator(args.checkpoint)
    names, frames = read_frames(args.input)
    if not frames:
        raise EmptyDatasetError(f"no frames under {args.input}")
    out = Path(args.output)
    mapping_path = Path(args.mapping) if args.mapping else out / "mapping.json"
    mapping = ControlMapping.load(mapping_path) if mapping_path.exists() else ControlMapping(gen.cfg.n_identities,
                                                                                              cfg.seed)
    res = anonymize_video(gen, frames, read_tracks(args.tracks), mapping, args.camera_id,
                          feather=args.feather, window=args.window)
    write_frames(out, names, res.frames)
    mapping.save(mapping_path)
    return {"frames": len(frames), "mapping": str(mapping_path)}


def cmd_baseline(args, cfg) -> dict:
    from .anonymize import _image_mask
    from .baselines import BaselineSpec, apply_in_box, mask_box
    from .dataset import SidecarDetector, list_images, read_image, write_image

    method = BaselineSpec(args.kind, args.param)
    root = Path(args.input)
    paths = list_images(root)
    if not paths:
        raise EmptyDatasetError(f"no images under {root}")
    detector = SidecarDetector()
    for p in paths:
        img = read_image(p)
        if args.whole_image:
            img = method.apply(img)
        else:
            for det in detector.detect(img, p):
                mask = _image_mask(img.shape, det)
                box = mask_box(mask)
                if box is not None:
                    img = apply_in_box(img, method, box, mask)
        write_image(Path(args.output) / p.relative_to(root), img)
    return {"images": len(paths), "method": method.name}


def cmd_evaluate(args, cfg) -> dict:
    from .baselines import BaselineSpec
    from .evaluation import write_report, write_table_csv
    from .study import evaluate_methods
    from .training import load_generator, load_identity

    ds = _load_data(args.data)
    _, held = ds.split(cfg.holdout, cfg.seed)
    if len(held) < 2:
        raise EmptyDatasetError("held-out split has fewer than two faces")
    net, _ = load_identity(args.identity)
    gen = load_generator(args.checkpoint) if args.checkpoint else None
    baselines = [BaselineSpec(k, float(v)) for k, _, v in (b.partition("=") for b in args.baseline)]
    rows = evaluate_methods(held, net, gen, baselines, seed=cfg.seed)
    out = Path(args.output)
    write_table_csv(out / "table.csv", rows)
    metrics = {f"{r['method']}/{k}": r[k] for r in rows for k in ("recall_at_1", "fid") if r.get(k) is not None}
    write_report(out / "report.json", metrics, cfg.to_dict())
    return {"rows": rows}


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "pretrain-id": cmd_pretrain_id,
    "train": cmd_train,
    "anonymize": cmd_anonymize,
    "anonymize-video": cmd_anonymize_video,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file of TrainConfig keys")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--json-logs", action="store_true", help="emit log records as JSON lines")

    train_flags = argparse.ArgumentParser(add_help=False)
    for name, typ in TRAIN_FLAGS.items():
        train_flags.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)

    parser = argparse.ArgumentParser(prog="faceanon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic face dataset with landmark sidecars")
    p.add_argument("--output", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--size", type=int, default=80)

    p = sub.add_parser("prepare", parents=[common, train_flags], help="detect, align and cache a dataset")
    p.add_argument("--input", required=True, help="<root>/<identity>/<image> with landmark sidecars")
    p.add_argument("--output", default=None, help="cache directory (default: $FACEANON_CACHE_DIR/<input name>)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-align", action="store_true")

    p = sub.add_parser("pretrain-id", parents=[common, train_flags], help="Proxy-NCA pretraining of the identity net")
    p.add_argument("--data", required=True, help="dataset cache directory")
    p.add_argument("--output", required=True)

    p = sub.add_parser("train", parents=[common, train_flags], help="joint generator/discriminator training")
    p.add_argument("--data", required=True, help="dataset cache directory")
    p.add_argument("--output", required=True)
    p.add_argument("--identity", help="identity snapshot from pretrain-id (pretrains inline when omitted)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("anonymize", parents=[common], help="anonymize every detected face in a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--camera-id", required=True)
    p.add_argument("--feather", action="store_true")
    p.add_argument("--mapping", help="mapping JSON (default: <output>/mapping.json)")

    p = sub.add_parser("anonymize-video", parents=[common], help="anonymize tracked faces in a frame sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of numbered frames")
    p.add_argument("--tracks", required=True, help="JSON {track_id: [{frame, landmarks}]}")
    p.add_argument("--output", required=True)
    p.add_argument("--camera-id", required=True)
    p.add_argument("--feather", action="store_true")
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--mapping")

    p = sub.add_parser("baseline", parents=[common], help="pixelize, blur or mask detected faces")
    p.add_argument("--kind", required=True, choices=["pixelize", "blur", "mask"])
    p.add_argument("--param", required=True, type=float)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--whole-image", action="store_true")

    p = sub.add_parser("evaluate", parents=[common, train_flags], help="Recall@1 and FID on the held-out split")
    p.add_argument("--data", required=True, help="dataset cache directory")
    p.add_argument("--identity", required=True, help="identity snapshot used as the recognizer")
    p.add_argument("--checkpoint", help="generator checkpoint to evaluate")
    p.add_argument("--baseline", action="append", default=[], metavar="KIND=PARAM",
                   help="baseline to compare against, e.g. blur=17 (repeatable)")
    p.add_argument("--output", required=True)
    return parser


def _setup_logging(json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def _run_dir(args) -> Path:
    if args.command == "prepare" and args.output is None:
        from .dataset import default_cache_dir

        args.output = str(default_cache_dir() / Path(args.input).resolve().name)
    return Path(args.output)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.json_logs)
    try:
        cfg = _config(args)
        run_dir = _run_dir(args)
        paths = {k: v for k, v in vars(args).items()
                 if k in ("input", "output", "data", "identity", "checkpoint", "resume", "tracks", "mapping")
                 and v is not None}
        write_manifest(run_dir, {
            "event": "start", "command": args.command, "argv": list(argv if argv is not None else sys.argv[1:]),
            "config": cfg.to_dict(), "seed": cfg.seed, "code_hash": code_hash(), "started": time.time(),
            "paths": paths,
        })
        summary = COMMANDS[args.command](args, cfg)
    except FaceAnonError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(json.dumps({"error": "file-not-found", "message": str(exc)}), file=sys.stderr)
        return 1
    write_manifest(run_dir, {"event": "finish", "command": args.command, "finished": time.time(),
                             "summary": summary})
    log.info("%s done: %s", args.command, json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
