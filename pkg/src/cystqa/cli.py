"""Command-line interface: synth, preprocess, fit, predict, eval-seg, eval-rcap, select, serve."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import report
from .baseline import BaselineModel, predict_baseline
from .dataset import AnnotatorBias, SynthConfig, generate_synthetic_stack, save_mask_png, save_stack
from .harness import (
    ExperimentConfig,
    config_from_mapping,
    fit_model,
    parse_config_file,
    prepare,
    run_rcap_eval,
    run_segmentation_eval,
    run_selection,
)
from .paresn import load_paresn, predict_paresn, save_paresn
from .preprocess import preprocess
from .review import DEFAULT_PORT, QueueStore, build_queue, serve


def _experiment_config(args) -> ExperimentConfig:
    values = parse_config_file(args.config) if args.config else {}
    cfg = config_from_mapping(values)
    for key in ("stack_dir", "model", "train_label", "external_rps_dir", "repetitions", "baseline_reps"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.rng_seed = args.seed
    if getattr(args, "no_figures", False):
        cfg.figures = False
    if not cfg.stack_dir:
        raise SystemExit("a stack directory is required (--stack or stack_dir= in --config)")
    return cfg


def _add_common(parser: argparse.ArgumentParser, stack: bool = True) -> None:
    parser.add_argument("--config", help="plain-text key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="rng seed")
    parser.add_argument("--out", default=None, help="output directory")
    if stack:
        parser.add_argument("--stack", dest="stack_dir", default=None, help="stack directory")
        parser.add_argument("--model", choices=["baseline", "paresn", "external"], default=None)
        parser.add_argument("--train-label", dest="train_label", choices=["G1", "G2", "G1andG2"], default=None)
        parser.add_argument("--external-rps", dest="external_rps_dir", default=None)
        parser.add_argument("--no-figures", action="store_true")


def cmd_synth(args) -> int:
    bias = {
        "G1": AnnotatorBias(dilate_px=args.g1_dilate, miss_small_below_px=args.g1_miss_below),
        "G2": AnnotatorBias(dilate_px=args.g2_dilate, miss_small_below_px=args.g2_miss_below),
    }
    cfg = SynthConfig(
        num_images=args.num_images,
        speckle_sigma=args.speckle,
        annotator_bias=bias,
        rng_seed=args.seed if args.seed is not None else 0,
        stack_id=args.stack_id,
    )
    records, gt = generate_synthetic_stack(cfg)
    out = Path(args.out or "synth_stack")
    save_stack(records, out, gt=gt)
    print(f"wrote {len(records)} images to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _experiment_config(args)
    prepared = prepare(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .dataset import save_gray_png

    for image_id, planes in sorted(prepared.planes.items()):
        save_gray_png(planes.base, out / f"{image_id}.base.png")
        save_gray_png(planes.bottom_hat, out / f"{image_id}.bh.png")
        save_gray_png(planes.grad_mag, out / f"{image_id}.gm.png")
        save_gray_png(planes.grad_dir, out / f"{image_id}.gd.png")
        save_mask_png(planes.roi, out / f"{image_id}.roi.png")
    print(f"wrote planes for {len(prepared.planes)} images to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _experiment_config(args)
    if cfg.model == "external":
        raise SystemExit("nothing to fit for the external model")
    prepared = prepare(cfg)
    model, source = fit_model(cfg, prepared)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.model == "baseline":
        model.save(out / "baseline.json")
        if cfg.figures:
            report.render_roc(model, out / "roc.png")
        print(f"fitted {source}; AUC = {model.auc:.4f}")
    else:
        save_paresn(model, out / "paresn.bin")
        if cfg.figures:
            report.render_ssim_history(model.ssim_history, out / "ssim_history.png")
        print(f"fitted {source}; windows = {model.windows_seen}, images = {model.images_seen}")
    return 0


def _load_model(cfg: ExperimentConfig, model_file: str | None):
    path = Path(model_file) if model_file else Path(cfg.out_dir) / (
        "baseline.json" if cfg.model == "baseline" else "paresn.bin"
    )
    if cfg.model == "baseline":
        return BaselineModel.load(path)
    return load_paresn(path)


def cmd_predict(args) -> int:
    cfg = _experiment_config(args)
    prepared = prepare(cfg)
    model = _load_model(cfg, args.model_file)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    predict = predict_baseline if cfg.model == "baseline" else predict_paresn
    for image_id in sorted(prepared.split.test_ids):
        rps = predict(model, prepared.planes[image_id])
        for name, mask in zip(("P1", "P2", "P3"), rps.as_tuple()):
            save_mask_png(mask, out / f"{image_id}.{name}.png")
    print(f"wrote proposals for {len(prepared.split.test_ids)} test images to {out}")
    return 0


def cmd_eval_seg(args) -> int:
    cfg = _experiment_config(args)
    run_segmentation_eval(cfg)
    print((Path(cfg.out_dir) / "tables.txt").read_text())
    return 0


def cmd_eval_rcap(args) -> int:
    cfg = _experiment_config(args)
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
    if args.dump_noisy:
        cfg.dump_noisy = True
    run_rcap_eval(cfg)
    print((Path(cfg.out_dir) / "tables.txt").read_text())
    return 0


def cmd_select(args) -> int:
    cfg = _experiment_config(args)
    run_selection(cfg)
    print((Path(cfg.out_dir) / "tables.txt").read_text())
    return 0


def cmd_serve(args) -> int:
    store_dir = Path(args.queue)
    if args.decisions:
        if not args.stack_dir:
            raise SystemExit("--decisions requires --stack-dir to render overlays")
        store = build_queue(args.decisions, args.stack_dir, store_dir, rps_dir=args.rps)
    else:
        store = QueueStore.open(store_dir)
    static_dir = Path(args.ui) if args.ui else None
    serve(store, port=args.port, static_dir=static_dir)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cystqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic stack")
    p_synth.add_argument("--num-images", type=int, default=12)
    p_synth.add_argument("--speckle", type=float, default=0.08)
    p_synth.add_argument("--g1-dilate", type=int, default=0)
    p_synth.add_argument("--g1-miss-below", type=int, default=0)
    p_synth.add_argument("--g2-dilate", type=int, default=0)
    p_synth.add_argument("--g2-miss-below", type=int, default=0)
    p_synth.add_argument("--stack-id", default="synth")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out", default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_pre = sub.add_parser("preprocess", help="dump the preprocessed planes per image")
    _add_common(p_pre)
    p_pre.set_defaults(func=cmd_preprocess)

    p_fit = sub.add_parser("fit", help="fit the configured model on the training split")
    _add_common(p_fit)
    p_fit.add_argument("--reps", dest="baseline_reps", type=int, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="write proposal masks for the test split")
    _add_common(p_pred)
    p_pred.add_argument("--model-file", default=None)
    p_pred.set_defaults(func=cmd_predict)

    p_seg = sub.add_parser("eval-seg", help="segmentation metrics of proposals vs labels")
    _add_common(p_seg)
    p_seg.add_argument("--reps", dest="baseline_reps", type=int, default=None)
    p_seg.set_defaults(func=cmd_eval_seg)

    p_rcap = sub.add_parser("eval-rcap", help="true-vs-corrupted label selection accuracy")
    _add_common(p_rcap)
    p_rcap.add_argument("--repetitions", type=int, default=None)
    p_rcap.add_argument("--dump-noisy", dest="dump_noisy", action="store_true")
    p_rcap.set_defaults(func=cmd_eval_rcap)

    p_sel = sub.add_parser("select", help="choose the better label per test image")
    _add_common(p_sel)
    p_sel.set_defaults(func=cmd_select)

    p_serve = sub.add_parser("serve", help="serve the manual-review queue")
    p_serve.add_argument("--queue", required=True, help="queue store directory")
    p_serve.add_argument("--port", type=int, default=DEFAULT_PORT)
    p_serve.add_argument("--decisions", default=None, help="decisions.jsonl to (re)build the queue from")
    p_serve.add_argument("--stack-dir", default=None)
    p_serve.add_argument("--rps", default=None, help="directory of proposal masks for overlays")
    p_serve.add_argument("--ui", default=None, help="static UI bundle directory")
    p_serve.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
