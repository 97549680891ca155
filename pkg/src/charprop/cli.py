"""Command-line entry point: ``charprop {synth,train,infer,eval,inspect}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from charprop import config as cfgmod
from charprop.data import SynthConfig, load_annotations, read_image, synth_generate
from charprop.evaluation import recall, recall_curves, write_curves_csv
from charprop.inference import PyramidConfig, generate_proposals, read_proposals_csv, write_proposals_csv
from charprop.modelio import load_model, save_model
from charprop.network import receptive_field_size, shape_trace
from charprop.training import TrainConfig, make_initial_model, train

logger = logging.getLogger("charprop")


def _echo_config(out_path: Path, values: dict) -> None:
    """Write the effective configuration next to an output file."""
    target = out_path / "config.txt" if out_path.is_dir() else out_path.with_name(out_path.stem + ".config.txt")
    cfgmod.write_config(target, values)


def _resolve(cls, args, file_key="config"):
    defaults = cfgmod.as_mapping(cls())
    file_values = cfgmod.load_config(getattr(args, file_key)) if getattr(args, file_key, None) else {}
    flags = {k: getattr(args, k) for k in defaults if hasattr(args, k)}
    return cfgmod.from_mapping(cls, cfgmod.merge(defaults, file_values, flags))


def cmd_synth(args) -> int:
    conf = _resolve(SynthConfig, args)
    out = Path(args.out)
    records = synth_generate(conf, args.count, out)
    _echo_config(out, {**cfgmod.as_mapping(conf), "count": args.count})
    print(f"wrote {len(records)} scenes, {sum(len(r.boxes) for r in records)} glyphs to {out}")
    return 0


def cmd_train(args) -> int:
    conf = _resolve(TrainConfig, args)
    dataset = load_annotations(args.annotations)
    if not dataset:
        raise ValueError(f"{args.annotations}: no annotated images")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    initial = make_initial_model(dataset, conf)
    if args.save_init:
        save_model(initial, args.save_init)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + ".log.csv")
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("iter,loss_total,loss_cls,loss_reg\n")

        def on_iteration(it, parts):
            log.write(f"{it},{parts.total:.6f},{parts.cls:.6f},{parts.reg:.6f}\n")
            if args.verbose and it % 100 == 0:
                print(f"iter {it}: loss {parts.total:.4f} (cls {parts.cls:.4f}, reg {parts.reg:.4f})")

        model, curve = train(dataset, conf, model=initial, on_iteration=on_iteration)
    save_model(model, out)
    _echo_config(out, cfgmod.as_mapping(conf))
    final = f"{curve[-1][1]:.4f}" if curve else "n/a"
    print(f"saved {out} after {conf.iterations} iterations, final loss {final}")
    return 0


def cmd_infer(args) -> int:
    conf = _resolve(PyramidConfig, args)
    model = load_model(args.model)
    if args.annotations:
        items = [(r.image_id, r.path) for r in load_annotations(args.annotations)]
    else:
        items = [(p, Path(p)) for p in args.images]
    if not items:
        raise ValueError("no input images")
    results = {}
    for image_id, path in items:
        results[image_id] = generate_proposals(model, read_image(path), conf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_proposals_csv(out, results)
    _echo_config(out, {**cfgmod.as_mapping(conf), "model": args.model})
    print(f"wrote {sum(len(v) for v in results.values())} proposals for {len(results)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    proposals = read_proposals_csv(args.proposals)
    truths = {r.image_id: r.boxes for r in load_annotations(args.annotations)}
    res = recall(proposals, truths, args.iou, args.top_n)
    budget = "all" if args.top_n is None else args.top_n
    print(f"recall {res.recall:.6f} ({res.matched}/{res.total}) at IoU > {args.iou:g}, top {budget} proposals")
    if args.curves:
        rows = recall_curves(proposals, truths, fixed_iou=args.iou, fixed_top_n=args.curve_top_n)
        out = Path(args.curves)
        write_curves_csv(out, rows)
        _echo_config(out, {"iou": args.iou, "top_n": args.top_n, "curve_top_n": args.curve_top_n})
        print(f"wrote {len(rows)} curve points to {out}")
    return 0


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    spec = model.spec
    rw, rh = model.receptive_field
    print(f"architecture: {spec.name}")
    print(f"classes (K): {spec.num_classes} ({spec.num_classes - 1} templates + background)")
    print("layers:")
    for layer in spec.layers:
        print(f"  {layer}")
    print(f"input size: {rw}x{rh}")
    print(f"receptive field: {receptive_field_size(spec)}x{receptive_field_size(spec)}")
    print(f"stride: {model.stride}")
    print(f"shape trace: {' -> '.join(map(str, shape_trace(spec, rh)))}")
    if model.templates is not None:
        print(f"templates ({model.templates.mode}):")
        for k, (a, (w, h)) in enumerate(zip(model.templates.aspect_ratios, model.templates.sizes), 1):
            print(f"  {k}: aspect {a:.4f}, size {w:.2f}x{h:.2f}")
    n_params = sum(k.size + b.size for k, b in model.params)
    print(f"parameters: {n_params}")
    for key in sorted(model.meta):
        print(f"meta.{key}: {model.meta[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="charprop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic glyph-scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on an annotation file")
    t.add_argument("--annotations", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--save-init", help="also write the untrained model here")
    t.add_argument("--log", help="per-iteration loss CSV (default: <out>.log.csv)")
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-step", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--num-classes", "-K", type=int)
    t.add_argument("--arch", choices=["CPN-ENG", "CPN-CHS"])
    t.add_argument("--width", type=float)
    t.add_argument("--init")
    t.add_argument("--template-mode", choices=["aspect", "literal"])
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write proposals for images")
    i.add_argument("--model", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--annotations", help="take the image list from an annotation file")
    src.add_argument("--images", nargs="+")
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--ratio", type=float)
    i.add_argument("--max-scale", type=float)
    i.add_argument("--min-scale", type=float)
    i.add_argument("--num-scales", type=int)
    i.add_argument("--threshold", dest="score_threshold", type=float)
    i.add_argument("--nms-iou", type=float)
    i.add_argument("--max-proposals", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="recall of a proposal CSV against annotations")
    e.add_argument("--proposals", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--top-n", type=int)
    e.add_argument("--curves", help="write recall curves CSV here")
    e.add_argument("--curve-top-n", type=int, default=500)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("inspect", help="describe a model file")
    n.add_argument("--model", required=True)
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"charprop {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
