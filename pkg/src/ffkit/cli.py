"""Command-line entry point: ``ffkit {synth,preprocess,train,infer,eval,report}``.

Exit codes: 0 success, 2 usage or bad input data, 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import torch

from .codec import SizePriorTable
from .config import MODEL_PRESETS, RunConfig, resolve
from .errors import BadContainer, FFKitError, NumericError, TruncatedFile
from .frustum import BuildStats, build_samples, read_samples, write_samples
from .kitti import KittiDataset, LabelRecord, make_splits, read_detections_dir, write_detections_dir
from .metrics import ScoredBox, evaluate, format_table
from .pipeline import detections_from_labels, ground_truth_from_labels
from .synth import SynthSpec, generate_synthetic_scene, scene_rng
from .train import infer, load_model, save_model, train

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    """Bad arguments or inputs detected after parsing."""


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (BadContainer, TruncatedFile, OSError)):
        return EXIT_IO
    # corrupt labels/calib, bad specs, missing splits and shape mismatches all land here
    if isinstance(exc, (UsageError, FFKitError, ValueError, TypeError, KeyError)):
        return EXIT_USAGE
    raise exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    for key in ("seed", "threads", "model_preset"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    for flag, key in (("epochs", "train.epochs"), ("batch_size", "train.batch_size"), ("lr", "train.lr")):
        if getattr(args, flag, None) is not None:
            out[key] = getattr(args, flag)
    if getattr(args, "no_mask", False):
        out["model.use_mask_channel"] = False
    return out


def _run_config(args) -> RunConfig:
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None and not Path(cfg_path).is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    try:
        cfg = resolve(cfg_path, _overrides(args))
    except json.JSONDecodeError as e:
        raise UsageError(f"{cfg_path}: invalid JSON ({e})") from None
    torch.set_num_threads(cfg.threads)
    return cfg


def _require_out(args) -> Path:
    if getattr(args, "out", None) is None:
        raise UsageError("--out is required")
    return Path(args.out)


def _split_ids(ds: KittiDataset, split: str) -> list[str]:
    if split == "all":
        return ds.frame_ids()
    path = ds.root / "splits.json"
    if not path.is_file():
        raise UsageError(f"{path}: split manifest not found")
    manifest = ds.read_splits()
    if split not in ("train", "val", "test"):
        raise UsageError(f"unknown split {split!r}")
    return manifest.split(split)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = _require_out(args)
    if args.spec is not None:
        try:
            spec = SynthSpec.load(args.spec)
        except (json.JSONDecodeError, TypeError) as e:
            raise UsageError(f"{args.spec}: bad synth spec ({e})") from None
        except ValueError as e:
            raise UsageError(f"{args.spec}: {e}") from None
    else:
        spec = cfg.synth_spec()
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    ds = KittiDataset(out)
    ds.ensure_layout()
    ids = [f"{i:06d}" for i in range(args.scenes)]
    for i, fid in enumerate(ids):
        ds.write_frame(generate_synthetic_scene(spec, scene_rng(cfg.seed, i), fid))
    manifest = make_splits(ids, cfg.split_ratios, seed=cfg.seed)
    ds.write_splits(manifest)
    (out / "synth_spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    _write_json(out / "run_config.json", cfg.to_dict())
    print(f"synth: {len(ids)} frames -> {out} (train {len(manifest.train)}, val {len(manifest.val)}, test {len(manifest.test)})")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    out = _require_out(args)
    ds = KittiDataset(args.data)
    ids = _split_ids(ds, args.split)
    mode = args.mode or ("train" if args.split == "train" else "eval")
    if args.detections is not None and mode == "train":
        raise UsageError("external detections can only be preprocessed in eval mode")
    fcfg = cfg.frustum_config()
    classes = cfg.synth_spec().classes
    external = read_detections_dir(args.detections, ids) if args.detections is not None else None
    stats = BuildStats()
    samples = []
    for fid in ids:
        frame = ds.read_frame(fid)
        if external is not None:
            dets = detections_from_labels(external[fid])
            for d in dets:
                d.gt_box = None  # detector output carries no truth
        else:
            dets = detections_from_labels(frame.labels)
        samples.extend(build_samples(frame, dets, mode, fcfg, classes, cfg.seed, stats))
    meta = {
        "run_config": cfg.to_dict(),
        "split": args.split,
        "mode": mode,
        "frames": ids,
        "stats": {"objects": stats.objects, "samples": stats.samples, "empty_dropped": stats.empty_dropped,
                  "skipped_classes": stats.skipped_classes, "by_class": stats.by_class},
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    write_samples(out, samples, classes, meta)
    print(
        f"preprocess: split={args.split} mode={mode} frames={len(ids)} objects={stats.objects} "
        f"samples={stats.samples} empty_dropped={stats.empty_dropped} skipped_classes={stats.skipped_classes}"
    )
    return 0


def _priors(cfg: RunConfig, classes) -> SizePriorTable:
    return cfg.synth_spec().prior_table().subset(classes)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _require_out(args)
    samples, meta = read_samples(args.samples)
    classes = meta["classes"]
    val = read_samples(args.val_samples)[0] if args.val_samples else None
    priors = _priors(cfg, classes)
    out.mkdir(parents=True, exist_ok=True)
    model, records = train(
        samples, cfg.model_config(), cfg.train_config(), priors,
        val_samples=val, log_path=out / "train_log.jsonl",
    )
    save_model(out / "model.ckpt", model, classes, priors, {"run_config": cfg.to_dict()})
    _write_json(out / "run_config.json", cfg.to_dict())
    last = records[-1]["loss"]["total"] if records else float("nan")
    print(f"train: {len(records)} epochs on {len(samples)} samples, final loss {last:.4f} -> {out / 'model.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    out = _require_out(args)
    model, ckpt_meta = load_model(args.model)
    samples, meta = read_samples(args.samples)
    priors = SizePriorTable({c: v for c, v in ckpt_meta["priors"].items()})
    timing: dict = {}
    dets = infer(samples, model, priors, cfg.train_config(), timing=timing)
    by_sample = {(s.frame_id, s.object_index): s for s in samples}
    files: dict[str, list[LabelRecord]] = {fid: [] for fid in meta.get("frames", [])}
    for d in dets:
        src = by_sample[(d.frame_id, d.object_index)].source_box2d
        files.setdefault(d.frame_id, []).append(LabelRecord.from_boxes(d.box, src, score=d.score))
    write_detections_dir(out / "detections", files)
    _write_json(out / "timing.json", timing)
    _write_json(out / "run_config.json", cfg.to_dict())
    print(
        f"infer: {timing['objects']} objects in {timing['frames']} frames, "
        f"{timing['per_object_ms']:.2f} ms/object, {timing['per_frame_ms']:.2f} ms/frame"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = _require_out(args)
    ds = KittiDataset(args.data)
    ids = _split_ids(ds, args.split)
    classes = cfg.synth_spec().classes
    gts = {fid: [g for g in ground_truth_from_labels(ds.read_labels(fid)) if g.box.label in classes] for fid in ids}
    recs = read_detections_dir(args.detections, ids)
    dets = {fid: [r for r in rs if r.type in classes] for fid, rs in recs.items()}
    scored = {
        fid: [ScoredBox(r.to_box3d(), 1.0 if r.score is None else r.score) for r in rs] for fid, rs in dets.items()
    }
    report = evaluate(scored, gts, cfg.match_config(), classes)
    body = report.to_dict()
    body["run_config"] = cfg.to_dict()
    body["frames"] = len(ids)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", body)
    table = format_table(report)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def _report_rows(path: Path) -> list[dict]:
    if path.is_dir():
        rows = []
        for name in ("report.json", "train_log.jsonl"):
            if (path / name).is_file():
                rows += _report_rows(path / name)
        return rows
    if path.suffix == ".jsonl":
        rows = []
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            row = {"source": str(path), "kind": "epoch", "epoch": rec["epoch"], "loss": rec["loss"]["total"]}
            for cls, m in (rec.get("val") or {}).items():
                row[f"{cls}_ap_3d"] = m["ap_3d"]
            rows.append(row)
        return rows
    d = json.loads(path.read_text(encoding="utf-8"))
    if "per_class" not in d:
        raise UsageError(f"{path}: not a metrics report")
    return [
        {"source": str(path), "kind": "class", "class": cls, "ap_3d": m["ap_3d"], "ap_bev": m["ap_bev"],
         "distance_error": m.get("mean_distance_error"), "orientation_error": m.get("mean_orientation_error"),
         "tp": m["tp"], "fp": m["fp"], "fn": m["fn"]}
        for cls, m in d["per_class"].items()
    ]


def cmd_report(args) -> int:
    _run_config(args)
    rows = []
    for p in args.inputs:
        path = Path(p)
        if not path.exists():
            raise FileNotFoundError(f"{path}: no such file or directory")
        rows += _report_rows(path)
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        cols = list(dict.fromkeys(k for r in rows for k in r))
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    out = getattr(args, "out", None)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=S, help="JSON run config; flags override it")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--threads", type=int, default=S, help="torch intra-op threads")
    common.add_argument("--out", default=S, help="output path (directory, or file for preprocess/report)")
    common.add_argument("--set", action="append", default=S, metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=5e-4 or model.use_mask_channel=false")
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    p = argparse.ArgumentParser(prog="ffkit", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic KITTI-layout dataset")
    s.add_argument("--scenes", type=int, default=100)
    s.add_argument("--spec", help="synth spec JSON (defaults to the config's synth section)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="extract frustum samples into a container")
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--split", default="train", help="train, val, test or all")
    s.add_argument("--mode", choices=["train", "eval"], help="default: train for the train split, eval otherwise")
    s.add_argument("--detections", help="directory of per-frame 2D detections to use instead of labels")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train the fusion network")
    s.add_argument("--samples", required=True)
    s.add_argument("--val-samples")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--model-preset", choices=sorted(MODEL_PRESETS))
    s.add_argument("--no-mask", action="store_true", help="zero the Gaussian-mask point channel")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="write per-frame 3D detections")
    s.add_argument("--model", required=True)
    s.add_argument("--samples", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score detections against labels")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--detections", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="collect reports and training logs into JSON or CSV")
    s.add_argument("inputs", nargs="+", help="report.json, train_log.jsonl or run directories")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(message)s",
        datefmt="%H:%M:%S",
    )
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code(e)
        print(f"ffkit {args.command}: error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
