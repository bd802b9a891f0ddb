"""Command-line entry points and the qualitative applications.

    facecycle train --config run.cfg --set train.stage=1
    facecycle probe --checkpoint stage2_final.pt --set probe.train_set=fer2013.csv ...
    facecycle verify --checkpoint stage2_final.pt --set verify.pairs=lfw_pairs.csv
    facecycle frontalize --checkpoint stage2_final.pt face.png
    facecycle translate --checkpoint stage1_final.pt source.png target.png
    facecycle inspect --checkpoint stage2_final.pt a.png b.png c.png
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import evalsuite
from .config import Config, dump_config, load_config
from .dataset import load_face
from .nets import load_checkpoint
from .train import run_training
from .warpflow import flow_to_rgb, write_flow

log = logging.getLogger(__name__)

COMMANDS = ("train", "probe", "verify", "frontalize", "translate", "inspect")
INSPECT_COLUMNS = ("input", "forward_flow", "neutral", "backward_flow", "mean_face", "reconstruction")


class StageError(RuntimeError):
    pass


def _batched(face):
    return face.unsqueeze(0) if face.dim() == 3 else face


def _unbatch(out, like):
    return out.squeeze(0) if like.dim() == 3 else out


@torch.no_grad()
def frontalize(model, face, method: str = "de_expression"):
    """Neutral frontal face by de-expression, or by re-identity of the mean face."""
    model.eval()
    x = _batched(face)
    neutral = model.de_expression(x, model.flows(x)[0])
    if method == "de_expression":
        out = neutral
    elif method == "re_identity":
        if getattr(model, "trained_stage", 0) < 2:
            raise StageError("re_identity frontalization needs a stage-2 checkpoint")
        code = model.encode_identity(x)
        out = model.re_identity(model.de_identity(neutral, code), code)
    else:
        raise ValueError(f"unknown frontalization method {method!r}")
    return _unbatch(out, face)


@torch.no_grad()
def translate(model, source, target):
    """Transfer the source's expression and pose onto the target's neutral face."""
    model.eval()
    s, t = _batched(source), _batched(target)
    bw_source = model.flows(s)[1]
    neutral_t = model.de_expression(t, model.flows(t)[0])
    return _unbatch(model.re_expression(neutral_t, bw_source), target)


@torch.no_grad()
def intermediates(model, faces) -> dict:
    model.eval()
    x = _batched(faces)
    fw, bw = model.flows(x)
    neutral = model.de_expression(x, fw)
    if getattr(model, "trained_stage", 0) >= 2:
        mean = model.de_identity(neutral, model.encode_identity(x))
    else:
        mean = None
    recon = model.re_expression(neutral, bw)
    return {"input": x, "forward_flow": fw, "neutral": neutral, "backward_flow": bw, "mean_face": mean,
            "reconstruction": recon}


def to_uint8(img: torch.Tensor) -> np.ndarray:
    return np.round(img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).astype(np.uint8)


def inspect(model, faces, path) -> Path:
    """PNG grid, one row per face: input, fw flow, neutral, bw flow, mean face, reconstruction."""
    parts = intermediates(model, faces)
    n, _, h, w = parts["input"].shape
    grid = np.full((n * h, len(INSPECT_COLUMNS) * w, 3), 128, np.uint8)
    if parts["mean_face"] is None:
        log.warning("checkpoint has no stage-2 networks; mean-face column left gray")
    for i in range(n):
        scale = float(max(parts["forward_flow"][i].norm(dim=0).max(), parts["backward_flow"][i].norm(dim=0).max()))
        for j, col in enumerate(INSPECT_COLUMNS):
            t = parts[col]
            if t is None:
                continue
            tile = flow_to_rgb(t[i], scale) if col.endswith("flow") else to_uint8(t[i])
            grid[i * h : (i + 1) * h, j * w : (j + 1) * w] = tile
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path


def save_image(img: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)
    return path


# -- CLI ----------------------------------------------------------------------


def config_help(cfg: Config | None = None) -> str:
    cfg = cfg or Config()
    lines = ["config keys (set with --set key=value or in a --config file):"]
    lines += [f"  {k} = {v}" for k, v in cfg.flat().items()]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("--out", help="output directory (default: runs/<time>-<config hash>)")
    common.add_argument("--seed", type=int, help="seed for every RNG (also sets train.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = lambda prog: argparse.RawDescriptionHelpFormatter(prog, width=100)  # noqa: E731
    p = argparse.ArgumentParser(prog="facecycle", description="face-cycle representation learning",
                                epilog=config_help(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train stage 1 or 2", epilog=config_help(), formatter_class=fmt)
    sub.add_parser("probe", parents=[common], help="linear probe on frozen codes", epilog=config_help(),
                   formatter_class=fmt)
    sub.add_parser("verify", parents=[common], help="pair verification by cosine similarity",
                   epilog=config_help(), formatter_class=fmt)
    fr = sub.add_parser("frontalize", parents=[common], help="neutral frontal faces", formatter_class=fmt)
    fr.add_argument("images", nargs="+")
    fr.add_argument("--method", choices=("de_expression", "re_identity", "both"), default="both")
    tr = sub.add_parser("translate", parents=[common], help="expression/pose transfer", formatter_class=fmt)
    tr.add_argument("source")
    tr.add_argument("target")
    ins = sub.add_parser("inspect", parents=[common], help="grid of intermediate results", formatter_class=fmt)
    ins.add_argument("images", nargs="+")
    ins.add_argument("--save-flows", action="store_true", help="also write FLW1 flow files")
    return p


def _seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _out_dir(args, cfg: Config) -> Path:
    if args.out:
        return Path(args.out)
    return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.digest()}"


def _model(args, cfg):
    if not args.checkpoint:
        raise SystemExit(f"{args.command}: --checkpoint is required")
    model, _ = load_checkpoint(args.checkpoint, cfg.model.backbone_weights)
    model.eval()
    return model


def _feature_set(path, model, cfg, which):
    path = Path(path)
    if Path(str(path) + ".json").exists():
        return evalsuite.LabeledFeatureSet.load(path)
    faces, labels, schema = evalsuite.load_labeled_faces(path, cfg.data.image_size)
    feats = evalsuite.extract_frozen_features(model, faces, which)
    return evalsuite.LabeledFeatureSet(feats, labels, schema)


def cmd_probe(args, cfg, out):
    p = cfg.probe
    if not p.train_set or not p.test_set:
        raise SystemExit("probe: set probe.train_set and probe.test_set")
    needs_model = any(not Path(str(s) + ".json").exists() for s in (p.train_set, p.test_set))
    model = _model(args, cfg) if needs_model else None
    train_set = _feature_set(p.train_set, model, cfg, p.which)
    test_set = _feature_set(p.test_set, model, cfg, p.which)
    classify = p.task == "expression_classify"
    pc = evalsuite.ProbeConfig.for_task(
        p.task, epochs=p.epochs, lr_initial=p.lr_initial, lr_drop_every=p.lr_drop_every, batch_size=p.batch_size,
        num_classes=int(train_set.label_schema.get("num_classes", 0)) if classify else 0,
        seed=cfg.train.seed,
    )
    probe = evalsuite.train_linear_probe(train_set, pc)
    pred = probe.predict(test_set.features)
    if classify:
        metrics = {"accuracy": evalsuite.evaluate_classification(probe, test_set), "degenerate": probe.degenerate}
        rows = [{"index": i, "label": int(y), "prediction": int(q)} for i, (y, q) in enumerate(zip(test_set.labels, pred))]
    else:
        metrics = evalsuite.evaluate_pose(probe, test_set)
        rows = [
            {"index": i, **{f"{c}": float(y[k]) for k, c in enumerate(evalsuite.POSE_COLUMNS)},
             **{f"pred_{c}": float(q[k]) for k, c in enumerate(evalsuite.POSE_COLUMNS)}}
            for i, (y, q) in enumerate(zip(test_set.labels, pred))
        ]
    metrics["task"] = p.task
    path = evalsuite.write_report(out, "probe", metrics, rows)
    print(json.dumps(metrics))
    return path


def cmd_verify(args, cfg, out):
    if not cfg.verify.pairs:
        raise SystemExit("verify: set verify.pairs to a path_a,path_b,same csv")
    model = _model(args, cfg)
    pairs = evalsuite.read_pairs_csv(cfg.verify.pairs, cfg.data.image_size)
    res = evalsuite.verify_pairs(model, pairs, folds=cfg.verify.folds)
    metrics = res.metrics()
    metrics["roc"] = res.roc
    rows = [{"index": i, "same": int(p[2]), "similarity": float(s), "zero_norm": int(z)}
            for i, (p, s, z) in enumerate(zip(pairs, res.similarity, res.zero_norm))]
    path = evalsuite.write_report(out, "verify", metrics, rows)
    print(json.dumps(res.metrics()))
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            cfg.train.validate()
    except (KeyError, ValueError) as exc:
        print(f"facecycle: configuration error: {exc}", file=sys.stderr)
        return 2
    _seed_everything(cfg.train.seed)
    out = _out_dir(args, cfg)

    if args.command == "train":
        path = run_training(cfg, out)
        print(path)
    elif args.command == "probe":
        cmd_probe(args, cfg, out)
    elif args.command == "verify":
        cmd_verify(args, cfg, out)
    elif args.command == "frontalize":
        model = _model(args, cfg)
        methods = ("de_expression", "re_identity") if args.method == "both" else (args.method,)
        if "re_identity" in methods and model.trained_stage < 2:
            print("facecycle: re_identity needs a stage-2 checkpoint", file=sys.stderr)
            return 2
        for img in args.images:
            face = load_face(img, cfg.data.image_size)
            tiles = [face] + [frontalize(model, face, m) for m in methods]
            save_image(torch.cat(tiles, dim=2), out / f"{Path(img).stem}_frontal.png")
        print(out)
    elif args.command == "translate":
        model = _model(args, cfg)
        src = load_face(args.source, cfg.data.image_size)
        tgt = load_face(args.target, cfg.data.image_size)
        print(save_image(translate(model, src, tgt), out / f"{Path(args.source).stem}_to_{Path(args.target).stem}.png"))
    elif args.command == "inspect":
        model = _model(args, cfg)
        faces = torch.stack([load_face(p, cfg.data.image_size) for p in args.images])
        print(inspect(model, faces, out / "inspect.png"))
        if args.save_flows:
            parts = intermediates(model, faces)
            for p, fw, bw in zip(args.images, parts["forward_flow"], parts["backward_flow"]):
                write_flow(out / f"{Path(p).stem}_fw.flw", fw)
                write_flow(out / f"{Path(p).stem}_bw.flw", bw)
    (out / "config.txt").parent.mkdir(parents=True, exist_ok=True)
    if not (out / "config.txt").exists():
        (out / "config.txt").write_text(dump_config(cfg))
    return 0


if __name__ == "__main__":
    sys.exit(main())
