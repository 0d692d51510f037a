"""Command-line entry point: ``partpool {generate,train,eval,viz}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
``PARTPOOL_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .backbone import decode_array
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, PartPoolError
from .imageio import write_pgm, write_ppm
from .metrics import (PartBoxRule, accuracy, part_boxes, pck, pck_rows, pcp, pcp_rows, write_metric_csv)
from .model import PartModel
from .synth import PART_GROUPS, PART_NAMES, GeneratorConfig, generate, holistic_confusability_check, load_split, save_dataset
from .tensor import sigmoid
from .training import TrainConfig, predict, train, write_log

log = logging.getLogger("partpool")

# marker colour per part index
PART_COLORS = np.array([
    [255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255],
    [0, 255, 255], [255, 128, 0], [128, 0, 255],
], dtype=np.uint8)


def _config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out: Path, command: str, config: dict, seed, outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "git_describe": _git_describe(),
        "start": started,
        "end": datetime.now(timezone.utc).isoformat(),
        "outputs": sorted(outputs),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: cannot create output directory ({exc})") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"{out}: output directory is not writable")
    return out


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    started = _now()
    config = GeneratorConfig.from_dict(_read_json(args.config) if args.config else {})
    out = _outdir(args.out)
    train_set, test_set = generate(config)
    if config.encoding == "permutation":
        holistic_confusability_check(train_set, raise_on_fail=True)
    save_dataset(train_set, test_set, out)
    with open(out / "generator.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    outputs = ["train.json", "test.json", "generator.json"] + train_set.files + test_set.files
    _write_manifest(out, "generate", config.to_dict(), config.seed, outputs, started)
    log.info("wrote %d train and %d test samples to %s", len(train_set), len(test_set), out)


def cmd_train(args) -> None:
    started = _now()
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    data = load_split(args.data, "train")
    out = _outdir(args.out)
    num_classes = int(data.labels.max()) + 1
    model = PartModel(config.model_config(data.num_parts, max(num_classes, 2), data.image_size))
    rows = train(model, data, config)
    save_checkpoint(model, out / "model.ppool")
    write_log(rows, out / "train_log.csv")
    _write_manifest(out, "train", config.to_dict(), config.seed, ["model.ppool", "train_log.csv"], started)
    log.info("trained %d epochs; checkpoint in %s", len(rows), out)


def _load_for_eval(args):
    model = load_checkpoint(args.checkpoint)
    data = load_split(args.data, args.split)
    if data.num_parts != model.config.backbone.num_parts:
        raise ConfigError(f"checkpoint predicts {model.config.backbone.num_parts} parts, "
                          f"dataset has {data.num_parts}")
    if data.image_size != model.config.backbone.input_size:
        raise ConfigError(f"checkpoint expects {model.config.backbone.input_size}px images, "
                          f"dataset has {data.image_size}px")
    return model, data


def _groups(num_parts: int) -> dict:
    groups = {g: [k for k in members if k < num_parts] for g, members in PART_GROUPS.items()}
    groups = {g: m for g, m in groups.items() if m}
    return groups or {"all": list(range(num_parts))}


def cmd_eval(args) -> None:
    started = _now()
    model, data = _load_for_eval(args)
    out = _outdir(args.out)
    pred = predict(model, data.images)
    acc = accuracy(pred.labels, data.labels)
    write_metric_csv([{"name": f"accuracy_{args.split}", "threshold": 0, "fraction": acc, "count": len(data)}],
                     out / "accuracy.csv")
    table = pck(pred.keypoints, data.keypoints, data.boxes)
    names = PART_NAMES[:data.num_parts] if data.num_parts <= len(PART_NAMES) else None
    write_metric_csv(pck_rows(table, names), out / "pck.csv")
    rule = PartBoxRule(_groups(data.num_parts))
    size = (data.image_size, data.image_size)
    visible_pred = np.concatenate([pred.keypoints, np.ones(pred.keypoints.shape[:2] + (1,))], axis=-1)
    pred_boxes = [part_boxes(k, rule, size) for k in visible_pred]
    gt_boxes = [part_boxes(k, rule, size) for k in data.keypoints]
    write_metric_csv(pcp_rows(pcp(pred_boxes, gt_boxes)), out / "pcp.csv", header_comment=rule.describe())
    _write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split},
                    None, ["accuracy.csv", "pck.csv", "pcp.csv"], started)
    log.info("accuracy %.4f, mean PCK@0.10 %.4f", acc, table.mean_over_parts()[-1])


def heatmap_image(logits_map: np.ndarray) -> np.ndarray:
    """Sigmoid scores of one part map scaled to 0..255."""
    return np.rint(sigmoid(logits_map.astype(np.float64)) * 255.0).astype(np.uint8)


def draw_markers(rgb: np.ndarray, points, visible=None) -> np.ndarray:
    """Plus-shaped markers centred at the rounded pixel positions, coloured per part."""
    out = rgb.copy()
    h, w = out.shape[:2]
    for k, (x, y) in enumerate(points):
        if visible is not None and not visible[k]:
            continue
        cx, cy = int(np.clip(np.rint(x), 0, w - 1)), int(np.clip(np.rint(y), 0, h - 1))
        color = PART_COLORS[k % len(PART_COLORS)]
        for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
            px, py = cx + dx, cy + dy
            if 0 <= px < w and 0 <= py < h:
                out[py, px] = color
    return out


def cmd_viz(args) -> None:
    started = _now()
    model, data = _load_for_eval(args)
    if args.n > len(data):
        raise ConfigError(f"--n {args.n} exceeds split size {len(data)}")
    out = _outdir(args.out)
    outputs = []
    images = data.images[:args.n]
    fmap = model.features(images)
    logits = model.keypoint_logits(fmap)
    pred_xy = decode_array(logits, model.stride)
    for i in range(args.n):
        for k in range(logits.shape[1]):
            name = f"{i:05d}_part{k}.pgm"
            write_pgm(out / name, heatmap_image(logits[i, k]))
            outputs.append(name)
        rgb = np.rint(images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        left = draw_markers(rgb, data.keypoints[i, :, :2], data.keypoints[i, :, 2] > 0)
        right = draw_markers(rgb, pred_xy[i])
        name = f"{i:05d}_overlay.ppm"
        write_ppm(out / name, np.concatenate([left, right], axis=1))
        outputs.append(name)
    _write_manifest(out, "viz", {"checkpoint": str(args.checkpoint), "data": str(args.data), "n": args.n},
                    None, outputs, started)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partpool", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the synthetic dataset")
    p.add_argument("--config", help="generator config JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training config JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "write accuracy, PCK and PCP reports"),
                                 ("viz", cmd_viz, "export heatmaps and keypoint overlays")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="test", choices=["train", "test"])
        if name == "viz":
            p.add_argument("--n", type=int, default=8)
        p.set_defaults(func=func)
    return parser


def _thread_limit():
    raw = os.environ.get("PARTPOOL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"PARTPOOL_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"PARTPOOL_THREADS must be >= 1, got {n}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        threads = _thread_limit()
        if threads is None:
            args.func(args)
        else:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                args.func(args)
    except PartPoolError as exc:
        print(f"partpool {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
