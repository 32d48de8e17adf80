"""Command-line interface: ``depthdbd {synth,train,eval,predict}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(non-finite loss, I/O).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DatasetError, NonFiniteLossError

logger = logging.getLogger("depthdbd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _overrides(args, mapping):
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
        out["train.seed"] = args.seed
    return out


def _size(text):
    parts = [int(p) for p in str(text).lower().replace("x", ",").split(",") if p]
    return (parts[0], parts[0]) if len(parts) == 1 else tuple(parts[:2])


# -- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import parse_regime, synth_dataset

    regimes = [parse_regime(t) for t in args.regimes.split(",") if t.strip()]
    out = Path(args.out)
    manifest = synth_dataset(out, args.n, regimes, seed=args.seed, size=_size(args.size),
                             homogeneous_fraction=args.homogeneous_fraction,
                             manifest_name=args.manifest)
    print(manifest)
    return EXIT_OK


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    from .config import load_run_config
    from .data import load_dataset
    from .distillation import (TeacherBundle, make_depth_teacher, student_from, train_rdffnet,
                               train_stage1, train_stage2)
    from .model import build_model, load_checkpoint

    cfg = load_run_config(args.config, _overrides(args, {
        "dataset": "data.dataset_root", "manifest": "data.manifest",
        "output_dir": "output_dir", "epochs": "train.max_epochs",
        "lr": "train.lr_model", "batch_size": "train.batch_size",
        "defocus_teacher": "distill.defocus_teacher", "beta": "distill.beta",
    }))
    stage = args.stage
    if stage == "stage2" and not cfg.distill.defocus_teacher:
        raise ConfigurationError("stage2 needs a defocus teacher checkpoint (--defocus-teacher)")
    if stage == "rdffnet" and not cfg.model.depth_heads:
        cfg.model.depth_heads = True
    if not cfg.data.dataset_root:
        raise ConfigurationError("no dataset given (--dataset or data.dataset_root)")

    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / f"{stage}_config.yaml")
    records = load_dataset(cfg.data.dataset_root, cfg.data.manifest, cfg.data.polarity_flag)
    seed = cfg.train.seed

    if stage == "stage1":
        model = build_model(cfg.model, seed=seed)
        result = train_stage1(model, records, cfg.train, out_dir=out_dir, resume=args.resume)
    elif stage == "stage2":
        teacher = load_checkpoint(cfg.distill.defocus_teacher)
        student = student_from(cfg.model, seed, cfg.distill, teacher)
        depth_teacher = make_depth_teacher(
            cfg.distill.depth_teacher, cfg.distill.depth_channels,
            student.encoder_strides if cfg.distill.taps == "all" else student.encoder_strides[-1:],
            path=cfg.distill.depth_checkpoint, seed=seed)
        result = train_stage2(student, TeacherBundle(teacher, depth_teacher), records,
                              cfg.train, cfg.distill, out_dir=out_dir, resume=args.resume)
    else:
        model = build_model(cfg.model, seed=seed)
        depth_teacher = make_depth_teacher(cfg.distill.depth_teacher, cfg.distill.depth_channels,
                                           model.encoder_strides[-1:],
                                           path=cfg.distill.depth_checkpoint, seed=seed)
        result = train_rdffnet(model, depth_teacher, records, cfg.train, out_dir=out_dir,
                               resume=args.resume)
    last = result.history[-1]
    print(f"stage={stage} epochs={len(result.history)} loss={last['loss']!r} "
          f"checkpoint={out_dir / (stage + '.pt')}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _load_prediction_dir(directory, records):
    from PIL import Image

    preds = []
    for rec in records:
        path = None
        for ext in (".png", ".jpg", ".bmp"):
            cand = Path(directory) / f"{rec.stem}{ext}"
            if cand.exists():
                path = cand
                break
        if path is None:
            raise DatasetError(f"no prediction map for stem {rec.stem!r} in {directory}")
        with Image.open(path) as im:
            preds.append(np.asarray(im.convert("L"), np.float32)[None] / 255.0)
    return preds


def cmd_eval(args) -> int:
    from .config import load_run_config
    from .data import load_dataset
    from .evaluation import evaluate_predictions, plot_pr_curve, predict_records
    from .model import load_checkpoint

    cfg = load_run_config(args.config, _overrides(args, {
        "dataset": "data.dataset_root", "manifest": "data.manifest",
        "output_dir": "output_dir", "beta_squared": "eval.beta_squared",
        "threshold": "eval.binarize_threshold",
    }))
    if (args.checkpoint is None) == (args.predictions is None):
        raise ConfigurationError("give exactly one of --checkpoint or --predictions")
    if not cfg.data.dataset_root:
        raise ConfigurationError("no dataset given (--dataset or data.dataset_root)")
    records = load_dataset(cfg.data.dataset_root, cfg.data.manifest, cfg.data.polarity_flag)
    if args.checkpoint is not None:
        expected = cfg.model if args.config is not None else None
        model = load_checkpoint(args.checkpoint, expected)
        preds = predict_records(model, records)
    else:
        preds = _load_prediction_dir(args.predictions, records)
    report = evaluate_predictions(preds, [r.blur_label for r in records], cfg.eval.metric_config())

    out_dir = cfg.resolved_output_dir()
    report_path = Path(args.report) if args.report else out_dir / "metrics.txt"
    plot_path = Path(args.plot) if args.plot else report_path.with_name("pr_curve.png")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    plot_path.parent.mkdir(parents=True, exist_ok=True)
    report.write(report_path)
    cfg.dump(report_path.with_name(report_path.stem + "_config.yaml"))
    plot_pr_curve(report, plot_path)
    print(report.summary_line())
    return EXIT_OK


# -- predict -----------------------------------------------------------------

def cmd_predict(args) -> int:
    import torch
    import yaml
    from PIL import Image

    from .data import IMAGE_EXTS, _resize
    from .evaluation import resize_prediction
    from .model import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    size = model.config.input_size
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    done = skipped = 0
    for path in sorted(Path(args.images).iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        try:
            with Image.open(path) as im:
                image = np.asarray(im.convert("RGB"), np.float32) / 255.0
        except Exception as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            print(f"warning: cannot decode {path.name}", file=sys.stderr)
            skipped += 1
            continue
        x = _resize(np.moveaxis(image, -1, 0), size, 1)
        with torch.no_grad():
            prob = model(torch.from_numpy(x[None])).final_prediction[0].numpy()
        prob = resize_prediction(prob, image.shape[:2])[0]
        out = np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(out, "L").save(out_dir / f"{path.stem}.png")
        done += 1
    echo = {"checkpoint": str(args.checkpoint), "images": str(args.images),
            "model": model.config.to_dict(), "predicted": done, "skipped": skipped}
    (out_dir / "predict_config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True))
    print(f"predicted={done} skipped={skipped} out={out_dir}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthdbd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic thin-lens dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regimes", default="f1.8,f16", help="comma-separated f-numbers")
    p.add_argument("--size", default="64", help="H or HxW")
    p.add_argument("--homogeneous-fraction", type=float, default=0.5)
    p.add_argument("--manifest", default="manifest.jsonl")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train stage1, stage2 or the rdffnet baseline")
    p.add_argument("--stage", choices=("stage1", "stage2", "rdffnet"), required=True)
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--manifest")
    p.add_argument("--output-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--beta", type=float, help="constant distillation weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--defocus-teacher")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute MAE, F-beta, IoU and PR curve")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of precomputed 8-bit maps")
    p.add_argument("--dataset")
    p.add_argument("--manifest")
    p.add_argument("--output-dir")
    p.add_argument("--report")
    p.add_argument("--plot")
    p.add_argument("--beta-squared", type=float)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write blur maps for a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
