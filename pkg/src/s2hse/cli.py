"""Command-line workflow: synth, train, predict, evaluate, compare, params,
gradcheck.

Exit codes are stable: 0 success, 2 usage or input error, 3 numeric failure
(divergence). All randomness flows from --seed (default 42, echoed in the
banner). Config files are plain ``key=value`` lines mirroring the training
options; any command-line flag overrides its file key.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import assess, mosaic, net, raster, training
from .errors import DivergenceError, S2HSEError
from .gradcheck import THRESHOLD, run_suite

DEFAULT_SEED = 42

# RunConfig keys: TrainConfig fields + architecture + paths.
CONFIG_KEYS = {
    "lr": float, "batch_size": int, "patience": int, "max_epochs": int,
    "seed": int, "split": str, "val_fraction": float,
    "f": int, "depth": int, "dropout": float,
    "data": str, "out": str, "history": str,
}


def load_config(path):
    """Parse a key=value config file; unknown keys are rejected."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in CONFIG_KEYS:
                raise S2HSEError(f"{path}:{lineno}: unknown config line {line!r}")
            try:
                values[key] = CONFIG_KEYS[key](val)
            except ValueError as exc:
                raise S2HSEError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc
    return values


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise S2HSEError(f"--size must look like 256x256, got {text!r}") from exc


def _threads(args):
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("S2HSE_THREADS")
    return int(env) if env else 1


def cmd_synth(args):
    w, h = _parse_size(args.size)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.scenes):
        spec = raster.SynthSpec(width=w, height=h, seed=args.seed + i)
        image, labels = raster.synth_scene(spec, origin=(i * (w * 10.0 + 1000.0), None))
        img_path = outdir / f"scene_{i:03d}_img.bsqf"
        lbl_path = outdir / f"scene_{i:03d}_lbl.bsqf"
        raster.save_raster(image, img_path)
        raster.save_raster(labels, lbl_path)
        entries.append({
            "id": f"scene_{i:03d}",
            "image": img_path.name,
            "labels": lbl_path.name,
            "width": w, "height": h,
            "extent": list(image.extent),
        })
    raster.write_manifest(outdir / "manifest.json", entries)
    print(f"wrote {args.scenes} scene(s) to {outdir}")
    return 0


def _load_samples(data_dir):
    data_dir = Path(data_dir)
    entries = raster.read_manifest(data_dir / "manifest.json")
    sets = []
    for entry in entries:
        image = raster.load_raster(data_dir / entry["image"])
        labels = raster.load_raster(data_dir / entry["labels"])
        if image.scale != 1.0:
            image = raster.normalize_reflectance(image)
        sets.append(raster.extract_patches(image, labels, scene_id=entry["id"]))
    return raster.SampleSet.merge(sets)


def cmd_train(args):
    values = load_config(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in
             ("lr", "batch_size", "patience", "max_epochs", "seed", "split",
              "val_fraction", "f", "depth", "dropout", "data", "out", "history")}
    for key, val in flags.items():
        if val is not None:
            values[key] = val
    for key in ("data", "out"):
        if not values.get(key):
            raise S2HSEError(f"missing required option --{key} (or config key {key})")

    spec = net.ArchSpec(f=values.get("f", 16), depth=values.get("depth", 2))
    config = training.TrainConfig(
        lr=values.get("lr", 2e-4), batch_size=values.get("batch_size", 8),
        patience=values.get("patience", 10), max_epochs=values.get("max_epochs", 200),
        seed=values.get("seed", DEFAULT_SEED), split=values.get("split", "spatial"),
        val_fraction=values.get("val_fraction", 0.25))
    print(f"s2hse train: f={spec.f} depth={spec.depth} "
          f"parameters={net.param_count(spec)} seed={config.seed}")
    print(f"  lr={config.lr} batch_size={config.batch_size} patience={config.patience} "
          f"max_epochs={config.max_epochs} split={config.split}")

    samples = _load_samples(values["data"])
    rng = np.random.default_rng(config.seed)
    train_set, val_set = training.split_dataset(samples, config.split,
                                                config.val_fraction, rng)
    print(f"  samples: {len(train_set)} train / {len(val_set)} val")
    model = net.build(spec, rng, dropout_rate=values.get("dropout", 0.5))

    def log(stats):
        print(f"  epoch {stats.epoch}: train {stats.train_loss:.6f} "
              f"val {stats.val_loss:.6f} ({stats.seconds:.1f}s)")

    model, history = training.train(model, train_set, val_set, config, log=log)
    out = Path(values["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(model, out)
    hist_path = Path(values.get("history") or str(out) + ".history.csv")
    hist_path.write_text("\n".join(training.history_lines(history)) + "\n", encoding="utf-8")
    best = min(h.val_loss for h in history)
    print(f"  done after {len(history)} epoch(s); best val loss {best:.6f}")
    print(f"  checkpoint: {out}\n  history: {hist_path}")
    return 0


def cmd_predict(args):
    model = net.load_checkpoint(args.model)
    model.set_mode("eval")
    image = raster.load_raster(args.image, mmap=True)
    if image.scale != 1.0:
        image = raster.normalize_reflectance(image)
    plan = mosaic.plan_tiles(image.width, image.height, tile=args.tile, margin=args.margin)
    hse, prob = mosaic.predict_map(model, image, plan, threads=_threads(args))
    raster.save_raster(hse, args.out)
    if args.prob:
        raster.save_raster(prob, args.prob)
    if args.pgm:
        mosaic.save_pgm(hse, args.pgm)
    print(f"wrote {hse.width}x{hse.height} map to {args.out} "
          f"({len(plan.tiles)} tile(s), margin {plan.margin})")
    return 0


def cmd_evaluate(args):
    hse_map = raster.load_raster(args.map)
    if args.points:
        points = assess.load_points_csv(args.points)
        cm, excluded = assess.confusion_from_points(hse_map, points)
        doc = json.loads(assess.report([("map", cm)]))
        doc["points"] = {"total": len(points), "excluded_nodata": excluded}
        text = assess.report([("map", cm)], fmt="text")
    else:
        buildings = raster.load_raster(args.buildings)
        rec = assess.building_recall(hse_map, buildings)
        doc = {"building_recall_pct": rec * 100.0}
        text = f"building recall: {rec * 100.0:.1f}%\n"
    payload = json.dumps(doc, indent=2)
    if args.report:
        Path(args.report).write_text(payload + "\n", encoding="utf-8")
    sys.stdout.write(text)
    if not args.report:
        print(payload)
    return 0


def cmd_compare(args):
    ours = raster.load_raster(args.ours)
    guf = raster.load_raster(args.guf)
    ghsl = raster.load_raster(args.ghsl)
    agree = assess.agreement_map(ours, guf, ghsl)
    raster.save_raster(agree, args.out)
    if args.ppm:
        assess.save_agreement_ppm(agree, args.ppm)
    counts = {int(k): int(v) for k, v in
              zip(*np.unique(agree.data[0], return_counts=True))}
    print(f"agreement map written to {args.out}; code counts: {counts}")
    return 0


def cmd_params(args):
    spec = net.ArchSpec(f=args.f, depth=args.depth)
    print(net.param_count(spec))
    return 0


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in results:
        status = "ok" if err <= THRESHOLD else "FAIL"
        print(f"{name:20s} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e} (threshold {THRESHOLD:.0e})")
    return 0 if worst <= THRESHOLD else 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="s2hse",
        description="Settlement-extent mapping: synthesize data, train the "
                    "network, predict maps, and assess them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scene pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--size", default="256x256")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a synthesized or converted dataset")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--f", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--split", choices=("spatial", "random"))
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tiled inference over a 10-band raster")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob")
    p.add_argument("--pgm")
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--margin", type=int, default=16)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a map against points or buildings")
    p.add_argument("--map", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--points")
    group.add_argument("--buildings")
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="3-product agreement map")
    p.add_argument("--ours", required=True)
    p.add_argument("--guf", required=True)
    p.add_argument("--ghsl", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ppm")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("params", help="print the parameter count for f/depth")
    p.add_argument("--f", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of all layers")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (S2HSEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
