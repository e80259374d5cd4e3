"""Command-line interface.

Subcommands: synth (generate the corpus), train, eval, decompose (single
image), gradcheck. Exit codes: 0 success, 1 generic failure, 2 I/O, 3
format compatibility. `--seed` beats the DTP_SEED environment variable,
which beats the config file.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diffcore as dc
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .diffcore import Tensor
from .diffcore.gradcheck import run_full_check, run_op_suite
from .disentangler import recombine
from .errors import CompatibilityError, ConfigError, DataError, DtpError
from .eval import DEFAULT_TTA_SCALES, ConfusionMatrix, iou_report, tta_inference
from .iaparser import forward as full_forward
from .iaparser import parse
from .train import build_nets, make_forward_fn, train_run


def _resolve_seed(flag_seed, config_seed: int) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("DTP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DTP_SEED must be an integer, got {env!r}") from None
    return config_seed


def cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed, 0)
    samples = ds.write_corpus(Path(args.out), n_train=args.n_train, n_val=args.n_val,
                              base_seed=seed, hw=(args.height, args.width),
                              sensor_noise_sigma=args.noise_sigma)
    n_train = sum(1 for s in samples if s.split == "train")
    n_val = len(samples) - n_train
    print(f"wrote {len(samples)} samples ({n_train} train / {n_val} val) "
          f"at {args.height}x{args.width} under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.tsv'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = _resolve_seed(args.seed, cfg.seed)
    if seed != cfg.seed:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
    data_dir = Path(args.data or cfg.data_dir)
    out_dir = Path(args.out or cfg.out_dir)
    if not str(data_dir):
        raise ConfigError("no data directory given (flag --data or config data_dir)")
    if not str(out_dir):
        raise ConfigError("no output directory given (flag --out or config out_dir)")
    final = train_run(cfg, data_dir, out_dir, baseline=args.baseline, quiet=args.quiet)
    print(f"final checkpoint: {final}")
    return 0


def _rebuild(checkpoint_path: Path):
    ckpt = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(ckpt.config)
    dis_net, seg_net = build_nets(cfg)
    named = seg_net.named_params() if ckpt.mode == "baseline" \
        else dis_net.named_params() + seg_net.named_params()
    ckpt.restore_into(named)
    return ckpt, cfg, dis_net, seg_net


def _eval_samples(data_dir: Path, split: str):
    splits = ds.load_corpus(Path(data_dir))
    if split not in splits:
        raise DataError(f"split {split!r} not present in {data_dir}")
    for s in splits[split]:
        yield s.sample_id, s.image(), s.label()


def cmd_eval(args) -> int:
    ckpt, cfg, dis_net, seg_net = _rebuild(Path(args.checkpoint))
    baseline = ckpt.mode == "baseline"
    forward_fn = make_forward_fn(dis_net, seg_net, baseline)
    names = ds.CLASS_NAMES if cfg.k_classes == len(ds.CLASS_NAMES) else None
    dump_dir = Path(args.dump_dir) if args.dump_dir else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    cm = ConfusionMatrix(cfg.k_classes)
    failures = 0
    for sid, image, label in _eval_samples(args.data, args.split):
        try:
            if args.tta:
                logits = tta_inference(forward_fn, image, DEFAULT_TTA_SCALES, flip=True)
            else:
                logits = forward_fn(image[None])
            pred = np.argmax(logits[0], axis=0)
            cm.update(pred, label, cfg.ignore_index)
            if dump_dir:
                ds.save_prediction_png(dump_dir / f"{sid}_pred.png", pred)
                with dc.no_grad():
                    x = Tensor(image[None])
                    out = parse(seg_net, x, dc.mean_channels(x)) if baseline \
                        else full_forward(dis_net, seg_net, x)
                ds.save_image_png(dump_dir / f"{sid}_attention.png", out.attention.data[0])
        except DtpError as exc:
            failures += 1
            print(f"error evaluating {sid}: {exc}", file=sys.stderr)
    report = iou_report(cm, names)
    print(report.tsv())
    return 1 if failures else 0


def cmd_decompose(args) -> int:
    _, _, dis_net, _ = _rebuild(Path(args.checkpoint))
    image = ds.load_image_png(Path(args.image))
    if image.shape[0] != 3:
        raise DataError(f"{args.image} is not an RGB image")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with dc.no_grad():
        x = Tensor(image[None])
        decomp = dis_net.forward(x)
        recon = recombine(decomp.reflectance, decomp.illumination)
        mse = float(np.mean((recon.data - x.data) ** 2))
    ds.save_image_png(out_dir / "reflectance.png", decomp.reflectance.data[0])
    ds.save_image_png(out_dir / "illumination.png", decomp.illumination.data[0])
    ds.save_image_png(out_dir / "reconstruction.png", recon.data[0])
    print(f"reconstruction_mse {mse:.8f}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed, 0)
    errs = run_op_suite(seed=seed)
    failed = []
    for name, err in sorted(errs.items()):
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{status:4s} {name:24s} max rel err {err:.3e}")
        if err >= 1e-4:
            failed.append((name, err))
    if args.full:
        err = run_full_check(n_params=60, seed=seed)
        status = "ok" if err < 1e-3 else "FAIL"
        print(f"{status:4s} {'sod_iaparser_full':24s} max rel err {err:.3e} "
              f"(60 sampled parameters)")
        if err >= 1e-3:
            failed.append(("sod_iaparser_full", err))
    if failed:
        for name, err in failed:
            print(f"gradient check failed: op={name} seed={seed} error={err:.3e}",
                  file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtp",
        description="Night-scene segmentation via reflectance/illumination "
                    "disentanglement, on a synthetic verification corpus.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the full model or the baseline")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", default=None, help="corpus directory")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--baseline", action="store_true",
                   help="capacity-matched parser on raw images (no disentanglement)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--tta", action="store_true", help="multi-scale flip inference")
    p.add_argument("--dump-dir", default=None,
                   help="write per-image prediction and attention PNGs here")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decompose", help="split one image into its components")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("gradcheck", help="finite-difference the gradient engine")
    p.add_argument("--full", action="store_true",
                   help="also check sampled parameters through the complete loss")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DtpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
