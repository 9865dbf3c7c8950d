"""Command-line surface.

Exit codes: 0 ok, 1 input/parse error, 2 verification failure, 3 numeric
failure. Machine-readable output sits between ``---BEGIN REPORT---`` and
``---END REPORT---`` and is stable for fixed seeds (no timestamps).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import yaml

from .archive import ArchiveError, load_model, save_model
from .dataset import ToyDataConfig, generate_split
from .energy import (
    EPTReport,
    PerfSeries,
    TraceError,
    compute_mept,
    compute_power,
    estimate_cost,
    fpn_traffic,
    ingest_trace,
    neck_tap_shapes,
    pan_traffic,
    sharedneck_traffic,
)
from .fold import verify_fold
from .metrics import evaluate_ap
from .model import Detection, FemtoNet, ModelConfig, count_params, default_config, fold_model, load_config
from .train import (
    NumericError,
    build_flat_stages,
    build_recwr_schedule,
    evaluate_model,
    predict_dataset,
    train_toy,
)

OK, INPUT_ERROR, VERIFY_FAILURE, NUMERIC_FAILURE = 0, 1, 2, 3
FOLD_TOLERANCE = 1e-4


def _report(pairs):
    print("---BEGIN REPORT---")
    for k, v in pairs:
        print(f"{k}={v}")
    print("---END REPORT---")


def _load_cfg(path: str | None, input_size=None) -> ModelConfig:
    if path is None:
        return default_config() if input_size is None else default_config(input_size=input_size)
    return load_config(path)


def cmd_fold(args) -> int:
    try:
        cfg = _load_cfg(args.config)
        net, was_folded = load_model(args.model, cfg)
    except (ArchiveError, OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return INPUT_ERROR
    net.set_mode("eval")
    folded = fold_model(net)
    save_model(args.out, folded, folded=True)
    if not args.verify:
        return OK
    stride = 1
    for row in cfg.backbone:
        stride *= row.s
    side = max(32, 2 * stride)
    report = verify_fold(net.forward_flat, folded.forward_flat, 3,
                         n_probes=args.probes, seed=args.seed, sizes=((1, 3, side, side),
                                                                      (2, 3, side, side)),
                         param_count_before=count_params(net).total,
                         param_count_after=count_params(folded).total)
    _report([("max_abs_diff", repr(report.max_abs_diff)),
             ("max_rel_diff", repr(report.max_rel_diff)),
             ("n_probes", report.n_probes),
             ("param_count_before", report.param_count_before),
             ("param_count_after", report.param_count_after)])
    return OK if report.max_abs_diff < FOLD_TOLERANCE else VERIFY_FAILURE


def cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f.read()) or {}
        data_cfg = ToyDataConfig.from_dict(doc.get("dataset", {}))
        size = (data_cfg.image_size, data_cfg.image_size)
        model_cfg = (ModelConfig.from_dict(doc["model"]) if "model" in doc
                     else default_config(input_size=size, num_classes=data_cfg.num_classes))
        base_lr = float(doc.get("lr", 0.1))
        batch_size = int(doc.get("batch_size", 8))
    except (OSError, ValueError, KeyError, TypeError) as err:
        print(f"error: bad train config: {err}", file=sys.stderr)
        return INPUT_ERROR
    if args.schedule == "recwr":
        per = max(1, args.epochs // 4)
        stages = build_recwr_schedule((per, per, per, max(1, args.epochs - 3 * per)), base_lr).stages
    else:
        stages = build_flat_stages(args.epochs, base_lr)
    net = FemtoNet(model_cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.epochs == 0:
        save_model(os.path.join(args.out, "initial.femto"), net,
                   extra={"train.stage_index": np.array([0.0], np.float32)})
        with open(os.path.join(args.out, "metrics.log"), "w", encoding="utf-8") as f:
            f.write("")
        return OK
    try:
        state = train_toy(net, stages, data_cfg, args.seed, batch_size=batch_size,
                          out_dir=args.out)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return NUMERIC_FAILURE
    with open(os.path.join(args.out, "metrics.log"), "w", encoding="utf-8") as f:
        f.write("\n".join(state.logs) + "\n")
    return OK


def _load_predictions(path, n_images: int) -> list[list[Detection]]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    preds: list[list[Detection]] = [[] for _ in range(n_images)]
    for entry in doc:
        idx = int(entry["image"])
        if not 0 <= idx < n_images:
            raise ValueError(f"prediction references image {idx} outside the dataset")
        for box, score, label in zip(entry["boxes"], entry["scores"], entry["labels"]):
            preds[idx].append(Detection(tuple(float(v) for v in box), float(score), int(label)))
    return preds


def cmd_eval(args) -> int:
    try:
        with open(args.dataset, "r", encoding="utf-8") as f:
            data_cfg = ToyDataConfig.from_yaml(f.read())
        val = generate_split(data_cfg, "val")
        if args.predictions is not None:
            preds = _load_predictions(args.predictions, len(val))
        else:
            cfg = _load_cfg(args.config,
                            input_size=(data_cfg.image_size, data_cfg.image_size))
            net, _ = load_model(args.model, cfg)
            preds = predict_dataset(net, val, net.out_stride,
                                    score_thresh=args.score_thresh)
    except (ArchiveError, OSError, ValueError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return INPUT_ERROR
    gts = [(s.boxes, s.labels) for s in val]
    res = evaluate_ap(preds, gts, args.iou)
    pairs = [("iou_thresh", repr(res.iou_thresh)), ("ap", repr(res.ap)), ("ar", repr(res.ar)),
             ("ap_small", repr(res.ap_small)), ("ap_medium", repr(res.ap_medium)),
             ("ap_large", repr(res.ap_large))]
    pairs += [(f"ap_class_{c}", repr(v)) for c, v in sorted(res.per_class.items())]
    _report(pairs)
    return OK


def cmd_energy(args) -> int:
    try:
        model_trace = ingest_trace(args.trace, label="model")
        empty_trace = ingest_trace(args.baseline, label="empty")
        try:
            perf = PerfSeries.scalar(float(args.perf))
        except ValueError:
            with open(args.perf, "r", encoding="utf-8") as f:
                perf = PerfSeries(np.array([float(x) for x in f.read().split()]))
        power = compute_power(model_trace, empty_trace)
        report = compute_mept(perf, power)
    except (TraceError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return INPUT_ERROR
    _report([("power_watts", repr(report.power_watts)),
             ("mean_perf", repr(report.mean_perf)),
             ("mept", f"{report.mept:.2f}")])
    return OK


def cmd_cost(args) -> int:
    try:
        cfg = _load_cfg(args.config)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return INPUT_ERROR
    net = FemtoNet(cfg, seed=0)
    shape = (1, 3, *cfg.input_size)
    cost = estimate_cost(net, shape)
    taps = neck_tap_shapes(net, shape)
    pairs = [
        ("macs", cost.macs),
        ("param_count", cost.param_count),
        ("activation_bytes_read", cost.activation_bytes_read),
        ("activation_bytes_written", cost.activation_bytes_written),
        ("fpn_traffic_bytes", fpn_traffic(taps, cfg.neck_channels)),
        ("sharedneck_traffic_bytes", sharedneck_traffic(taps, cfg.neck_channels)),
        ("pan_traffic_bytes", pan_traffic(taps, cfg.neck_channels)),
    ]
    _report(pairs)
    if args.per_layer:
        for item in cost.per_layer:
            print(f"{item.name}: macs={item.macs} read={item.read_elems} write={item.write_elems}")
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="femto", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fold", help="fold a checkpoint into plain convs")
    f.add_argument("--model", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config", default=None, help="model config yaml (default: stock config)")
    f.add_argument("--verify", action="store_true")
    f.add_argument("--probes", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(fn=cmd_fold)

    t = sub.add_parser("train", help="train on the synthetic dataset")
    t.add_argument("--config", required=True, help="train config yaml (model/dataset/optim)")
    t.add_argument("--schedule", choices=("recwr", "flat"), default="recwr")
    t.add_argument("--epochs", type=int, required=True, help="total epochs across stages")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate AP on the synthetic val split")
    e.add_argument("--model", default=None)
    e.add_argument("--predictions", default=None, help="json detections instead of a model")
    e.add_argument("--config", default=None)
    e.add_argument("--dataset", required=True, help="dataset config yaml")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--score-thresh", type=float, default=0.05)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("energy", help="power and tradeoff score from traces")
    g.add_argument("--trace", required=True)
    g.add_argument("--baseline", required=True)
    g.add_argument("--perf", required=True, help="scalar or file of per-image values")
    g.set_defaults(fn=cmd_energy)

    c = sub.add_parser("cost", help="analytical MAC/traffic cost of a config")
    c.add_argument("--config", default=None)
    c.add_argument("--per-layer", action="store_true")
    c.set_defaults(fn=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and args.model is None and args.predictions is None:
        print("error: eval needs --model or --predictions", file=sys.stderr)
        return INPUT_ERROR
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
