"""Command-line entry point: ``bnnvpr <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, model_io
from .arch import NetworkSpec, parse_shape, preset, spec_with_input

log = logging.getLogger("bnnvpr")


def _spec(args) -> NetworkSpec:
    spec = preset(args.preset)
    if getattr(args, "input", None):
        spec = spec_with_input(spec, parse_shape(args.input))
    return spec


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> None:
    from .data import load_labeled_folders, synthetic_places
    from .train import TrainConfig, train

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {
        k: v
        for k, v in (("seed", args.seed), ("epochs", args.epochs), ("fc_neurons", args.fc_neurons), ("bits", args.bits))
        if v is not None
    }
    spec = _spec(args)
    if "fc_neurons" not in overrides and not args.config and spec.head_neurons:
        overrides["fc_neurons"] = spec.head_neurons
    if args.data:
        images, labels, classes = load_labeled_folders(args.data, spec.input_shape)
        overrides["num_classes"] = len(classes)
    else:
        ds = synthetic_places(args.synthetic, shape=spec.input_shape, seed=args.data_seed)
        images, labels = ds.train_images, ds.train_labels
        overrides["num_classes"] = args.synthetic
    cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    log_fh = open(args.log, "w") if args.log else None
    try:
        if log_fh:
            log_fh.write("epoch,step,loss,accuracy\n")

        def on_step(row):
            if log_fh:
                log_fh.write(f"{row['epoch']},{row['step']},{row['loss']:.6f},{row['accuracy']:.6f}\n")

        model = train(images, labels, spec, cfg, on_step=on_step)
    finally:
        if log_fh:
            log_fh.close()
    model_io.save_checkpoint(model, args.out)
    last = model.history[-1] if model.history else {"loss": float("nan"), "accuracy": float("nan")}
    print(f"saved {args.out} loss={last['loss']:.4f} accuracy={last['accuracy']:.4f}")


def cmd_export(args) -> None:
    from .network import random_frozen
    from .train import export_extractor

    if args.checkpoint:
        net = export_extractor(model_io.load_checkpoint(args.checkpoint))
    elif args.preset:
        net = random_frozen(_spec(args), seed=args.seed)
    else:
        raise ValueError("export needs --checkpoint or --preset")
    size = model_io.save(net, args.out)
    print(f"saved {args.out} ({size} bytes, output layer {net.spec.output_layer})")


def _image_list(directory: str, net) -> list[tuple[str, np.ndarray]]:
    from .data import list_images, load_image

    size = net.spec.input_shape[:2]
    return [(p.stem, load_image(p, size)) for p in list_images(directory)]


def cmd_extract(args) -> None:
    from .vpr import extract

    net = model_io.load(args.model)
    descs = [extract(net, img, args.layer, image_id) for image_id, img in _image_list(args.images, net)]
    model_io.write_descriptors(args.out, descs)
    print(f"wrote {len(descs)} descriptors of dimension {descs[0].dim} to {args.out}")


def _summary(report, size_kib: float | None, name: str, precision: str) -> dict:
    score = metrics.s_p100(report)
    out = {"name": name, "precision": precision, "queries": report.total, "correct": report.n_correct, "s_p100": score}
    if size_kib is not None:
        out["size_kib"] = size_kib
        out["eta_m"] = metrics.memory_efficiency(score, size_kib) if score > 0 else None
    return out


def cmd_match(args) -> None:
    from .data import read_ground_truth
    from .vpr import ReferenceDB, match_descriptors

    refs = model_io.read_descriptors(args.reference)
    queries = model_io.read_descriptors(args.query)
    report = match_descriptors(queries, ReferenceDB.from_descriptors(refs), read_ground_truth(args.gt))
    _write(args.out, report.to_csv())
    if args.summary:
        Path(args.summary).write_text(json.dumps(_summary(report, args.size_kib, args.name, ""), indent=2) + "\n")
    print(f"S_P100={metrics.s_p100(report):.2f}", file=sys.stderr)


def _precision(net) -> str:
    bits = {fl.spec.weight_bits for fl in net.layers if fl.spec.has_weights}
    return metrics.precision_label(max(bits)) if bits else ""


def cmd_eval(args) -> None:
    from .data import load_dataset
    from .vpr import build_db, run_queries

    net = model_io.load(args.model)
    layer = args.layer or net.spec.output_layer
    ds = load_dataset(args.reference, args.query, args.gt, net.spec.input_shape)
    db = build_db(net, ds.references, layer, dataset=args.name)
    report = run_queries(net, ds.queries, db, ds.ground_truth, layer)
    _write(args.out, report.to_csv())
    size_kib = metrics.size_breakdown(net.spec.truncated(layer)).total_kib
    summary = _summary(report, size_kib, args.name or Path(args.model).stem, _precision(net))
    text = json.dumps(summary, indent=2) + "\n"
    if args.summary:
        Path(args.summary).write_text(text)
    print(f"S_P100={summary['s_p100']:.2f} size={size_kib:.2f}KiB", file=sys.stderr)


def cmd_sizeof(args) -> None:
    spec = _spec(args)
    if args.layer:
        spec = spec.truncated(args.layer)
    table = metrics.size_breakdown(spec, args.bits)
    _write(args.out, table.to_json() + "\n" if args.format == "json" else table.to_csv())
    print(f"total={table.total_kib:.2f}KiB", file=sys.stderr)


def cmd_macs(args) -> None:
    spec = _spec(args)
    spec = spec.truncated(args.layer) if args.layer else spec
    macs = metrics.mac_breakdown(spec)
    if args.out:
        Path(args.out).write_text(macs.to_csv())
    print(macs.summary())


def cmd_report(args) -> None:
    rows = []
    for path in args.summary:
        d = json.loads(Path(path).read_text())
        rows.append(metrics.EffReport(d["name"], d.get("precision", ""), float(d["s_p100"]), float(d["size_kib"])))
    if args.format == "json":
        text = json.dumps(metrics.efficiency_table(rows), indent=2) + "\n"
    else:
        text = metrics.efficiency_csv(rows)
    _write(args.out, text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnnvpr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_preset(sp, default=None):
        sp.add_argument("--preset", default=default, help="baseline, binarynet, floppynet, shallownet, floppynet_<k>, desk")
        sp.add_argument("--input", help="input shape HxWxC")

    t = sub.add_parser("train", help="train a binary feature extractor")
    with_preset(t, "desk")
    t.add_argument("--data", help="training images as <dir>/<category>/<image>")
    t.add_argument("--synthetic", type=int, default=8, help="number of synthetic places when --data is absent")
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--fc-neurons", type=int)
    t.add_argument("--bits", type=int)
    t.add_argument("--log", help="progress CSV (epoch,step,loss,accuracy)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export", help="write a frozen model file (FC head stripped)")
    e.add_argument("--checkpoint")
    with_preset(e)
    e.add_argument("--seed", type=int, default=0, help="weights seed for --preset")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    x = sub.add_parser("extract", help="descriptors for every image in a directory")
    x.add_argument("--model", required=True)
    x.add_argument("--images", required=True)
    x.add_argument("--layer")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract)

    m = sub.add_parser("match", help="match query descriptors against reference descriptors")
    m.add_argument("--reference", required=True)
    m.add_argument("--query", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--out")
    m.add_argument("--summary")
    m.add_argument("--size-kib", type=float)
    m.add_argument("--name", default="")
    m.set_defaults(func=cmd_match)

    v = sub.add_parser("eval", help="extract, match and score a reference/query dataset")
    v.add_argument("--model", required=True)
    v.add_argument("--reference", required=True)
    v.add_argument("--query", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--layer")
    v.add_argument("--name", default="")
    v.add_argument("--out")
    v.add_argument("--summary")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("sizeof", help="cumulative model size per layer")
    with_preset(s, "floppynet")
    s.add_argument("--bits", type=int, help="weight precision for all binarizable parameters")
    s.add_argument("--layer", help="cut the network after this layer")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sizeof)

    c = sub.add_parser("macs", help="MAC counts per layer")
    with_preset(c, "floppynet")
    c.add_argument("--layer", help="cut the network after this layer")
    c.add_argument("--out", help="per-layer CSV")
    c.set_defaults(func=cmd_macs)

    r = sub.add_parser("report", help="combine eval summaries into a memory-efficiency table")
    r.add_argument("--summary", action="append", required=True)
    r.add_argument("--format", choices=["csv", "json"], default="csv")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for every failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
