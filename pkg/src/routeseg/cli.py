"""Command-line surface: train, eval, infer, report, bench-scaling,
dump-attention, gradcheck.

One command per process. Exit codes: 0 success, 1 gradcheck or internal
failure, 2 configuration error, 3 data or artifact error, 4 numeric
abort during training. ``--threads`` is accepted and recorded in the
effective config; the compute kernels are single-threaded by
construction, so every value behaves like 1 and results stay
bit-reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import (RunConfig, describe_keys, effective_text, load_config,
                     parse_config_text)
from .data import (DataError, SegSample, kfold_splits, load_dataset,
                   make_splits, read_pnm, read_split_file, synth_dataset,
                   to_unit_image, write_pgm)
from .model import (CheckpointError, ConfigError, Model, build_model,
                    count_flops, count_params, load_into_model, read_records)
from .optim import OptimConfigError
from .tensor import Tensor
from .train import NumericAbort, evaluate, train_loop

PARAM_TARGETS = [
    ("base with channel-spatial fusion", 96, True, 50.76e6),
    ("base without channel-spatial fusion", 96, False, 31.40e6),
    ("tiny (C=64) with channel-spatial fusion", 64, True, 22.64e6),
]
PARAM_TOLERANCE = 0.05


def _say(*parts):
    print(" ".join(str(p) for p in parts))


def _apply_threads(run: RunConfig, threads: Optional[int]) -> RunConfig:
    if threads is None:
        return run
    return dataclasses.replace(run, threads=threads).validate()


def _split_samples(samples: List[SegSample], run: RunConfig
                   ) -> Tuple[List[SegSample], List[SegSample], List[SegSample]]:
    ids = [s.id for s in samples]
    if run.split_file:
        assignment = read_split_file(run.split_file)
        missing = [i for i in ids if i not in assignment]
        if missing:
            raise DataError(f"{run.split_file}: no split for id {missing[0]!r}")
    elif run.kfold:
        assignment = kfold_splits(ids, run.kfold, run.fold, run.seed)
    else:
        assignment = make_splits(ids, run.split_fractions, run.seed)
    buckets: Dict[str, List[SegSample]] = {"train": [], "val": [], "test": []}
    for s in samples:
        name = assignment[s.id]
        if name not in buckets:
            raise DataError(f"unknown split name {name!r} for id {s.id!r}")
        buckets[name].append(s)
    return buckets["train"], buckets["val"], buckets["test"]


def _gather_samples(run: RunConfig) -> List[SegSample]:
    if run.synthetic:
        return synth_dataset(run.synth_n, run.model.input_hw,
                             run.model.num_classes, run.seed,
                             in_channels=run.model.in_channels)
    if not run.data_root:
        raise DataError("no data_root configured and synthetic = false")
    return load_dataset(run.data_root, run.model.in_channels,
                        run.model.num_classes)


def _load_checkpoint_model(path: str) -> Tuple[Model, RunConfig, Dict[str, np.ndarray]]:
    config_text, records = read_records(path)
    run = parse_config_text(config_text, source=f"{path}:config")
    model = build_model(run.model, seed=run.seed)
    extras = load_into_model(model, records)
    return model, run, extras


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _read_input_image(path: str, run: RunConfig) -> np.ndarray:
    raw = read_pnm(path)
    image = to_unit_image(raw, run.model.in_channels)
    hw = run.model.input_hw
    if image.shape[0] != hw or image.shape[1] != hw:
        raise DataError(f"{path}: extents {image.shape[0]}x{image.shape[1]} "
                        f"do not match the checkpoint input {hw}x{hw}")
    return image


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    run = _apply_threads(load_config(args.config), args.threads)
    os.makedirs(args.out, exist_ok=True)
    text = effective_text(run)
    with open(os.path.join(args.out, "effective.cfg"), "w", encoding="utf-8") as f:
        f.write(text)
    samples = _gather_samples(run)
    if not samples:
        raise DataError(f"no samples found under {run.data_root!r}")
    train_set, val_set, _ = _split_samples(samples, run)
    if not train_set:
        raise DataError("training split is empty")
    model = build_model(run.model, seed=run.seed)
    totals = count_params(model)
    _say(f"model: {totals['total']:,} parameters; "
         f"{len(train_set)} train / {len(val_set)} val samples")
    state = train_loop(
        model, train_set, val_set, run.optim,
        loss_lambda=run.loss_lambda, seed=run.seed, out_dir=args.out,
        eval_every=run.eval_every, aug=run.aug if run.augment else None,
        config_text=text, resume_from=args.resume,
        stop_after_epochs=args.stop_after_epochs)
    _say(f"done: {state.epoch} epochs, {state.step} steps, "
         f"best foreground DSC {state.best_dsc:.4f}")
    _say(f"wrote {os.path.join(args.out, 'best.ckpt')} and last.ckpt")
    return 0


def cmd_eval(args) -> int:
    model, run, _ = _load_checkpoint_model(args.checkpoint)
    root = args.data or run.data_root
    if not root:
        raise DataError("no dataset: pass --data or configure data_root")
    samples = load_dataset(root, run.model.in_channels, run.model.num_classes)
    if not samples:
        raise DataError(f"no samples found under {root!r}")
    if args.split != "all":
        split_file = args.split_file or run.split_file
        if not split_file:
            raise ConfigError(f"--split {args.split} needs a split file")
        assignment = read_split_file(split_file)
        samples = [s for s in samples if assignment.get(s.id) == args.split]
        if not samples:
            raise DataError(f"split {args.split!r} selects no samples")
    report = evaluate(model, samples, batch_size=args.batch_size,
                      with_hausdorff=args.hausdorff or run.eval_hausdorff)
    doc = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(doc + "\n")
        _say(f"wrote {args.out}")
    print(doc)
    return 0


def cmd_infer(args) -> int:
    model, run, _ = _load_checkpoint_model(args.checkpoint)
    image = _read_input_image(args.image, run)
    logits = model.forward(Tensor(image[None]), training=False)
    probs = _softmax_np(logits.data[0].astype(np.float64))
    pred = np.argmax(probs, axis=-1)
    if run.model.num_classes > 256:
        raise ConfigError("cannot write class indices above 255 as PGM")
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "pred.pgm")
    write_pgm(pred_path, pred.astype(np.uint8))
    written = [pred_path]
    if args.probs:
        for k in range(run.model.num_classes):
            p = os.path.join(args.out, f"prob_{k:02d}.pgm")
            write_pgm(p, np.rint(probs[:, :, k] * 255.0).astype(np.uint8))
            written.append(p)
    for path in written:
        _say(f"wrote {path}")
    return 0


def _report_text(run: RunConfig) -> str:
    model = build_model(run.model, seed=run.seed)
    params = count_params(model)
    flops = count_flops(run.model)
    per_module = flops["per_module"]
    lines = ["module          params          macs",
             "------          ------          ----"]
    order = (["embed"] + [f"stage{i}" for i in range(1, 8)]
             + ["merges", "expands", "fusion", "head"])
    for name in order:
        lines.append(f"{name:<14}{params.get(name, 0):>12,}"
                     f"{per_module.get(name, 0):>16,}")
    lines.append(f"{'total':<14}{params['total']:>12,}"
                 f"{flops['total_macs']:>16,}")
    lines.append(f"total params: {params['total'] / 1e6:.2f} M")
    lines.append(f"total flops:  {flops['total_macs'] / 1e9:.2f} G "
                 f"({flops['convention']})")

    default = run.model.__class__()
    comparable = (run.model.stage_depths == default.stage_depths
                  and run.model.input_hw == default.input_hw
                  and run.model.s == default.s
                  and run.model.num_classes == default.num_classes
                  and run.model.in_channels == default.in_channels
                  and all(run.model.skip_mask)
                  and run.model.top_k_schedule is None)
    matched = False
    if comparable:
        for label, base_c, sccsa, target in PARAM_TARGETS:
            if run.model.base_channels == base_c and run.model.sccsa == sccsa:
                dev = (params["total"] - target) / target
                verdict = "PASS" if abs(dev) <= PARAM_TOLERANCE else "FAIL"
                lines.append(
                    f"published target [{label}]: {target / 1e6:.2f} M, "
                    f"deviation {dev * 100:+.2f}% -> {verdict} "
                    f"(tolerance +-{PARAM_TOLERANCE * 100:.0f}%)")
                matched = True
    if not matched:
        lines.append("no published parameter target for this configuration")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    run = load_config(args.config)
    text = _report_text(run)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        _say(f"wrote {args.out}")
    print(text, end="")
    return 0


def _fit_exponent(hws: List[int], costs: List[int]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(hws, dtype=np.float64)),
                          np.log(np.asarray(costs, dtype=np.float64)), 1)
    return float(slope)


def bench_scaling_table(sides: List[int], top_k: int, channels: int) -> dict:
    from .attention import min_cost_over_s
    rows = []
    for side in sides:
        hw = side * side
        best_s, bra = min_cost_over_s(hw, channels, top_k)
        full = 2 * hw * hw * channels
        rows.append({"side": side, "hw": hw, "best_s": best_s,
                     "bra_macs": bra, "full_macs": full})
    bra_exp = _fit_exponent([r["hw"] for r in rows],
                            [r["bra_macs"] for r in rows])
    full_exp = _fit_exponent([r["hw"] for r in rows],
                             [r["full_macs"] for r in rows])
    return {"rows": rows, "bra_exponent": bra_exp, "full_exponent": full_exp,
            "top_k": top_k, "channels": channels}


def cmd_bench_scaling(args) -> int:
    sides = sorted(set(args.sides))
    if len(sides) < 3:
        raise ConfigError(f"need at least 3 distinct resolutions, got {sides}")
    if any(s < 2 for s in sides):
        raise ConfigError(f"feature sides must be >= 2, got {sides}")
    table = bench_scaling_table(sides, args.top_k, args.channels)
    lines = [f"routed attention cost scan (top_k={args.top_k}, "
             f"c={args.channels})",
             "side        hw   best_s        bra_macs       full_macs"]
    for r in table["rows"]:
        lines.append(f"{r['side']:>4}{r['hw']:>10}{r['best_s']:>9}"
                     f"{r['bra_macs']:>16,}{r['full_macs']:>16,}")
    lines.append(f"fitted exponent, routed minimum: {table['bra_exponent']:.4f} "
                 f"(4/3 = 1.3333)")
    lines.append(f"fitted exponent, full attention: {table['full_exponent']:.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        _say(f"wrote {args.out}")
    print(text, end="")
    return 0


def cmd_dump_attention(args) -> int:
    model, run, _ = _load_checkpoint_model(args.checkpoint)
    if not 1 <= args.stage <= 7:
        raise ConfigError(f"stage must be in [1, 7], got {args.stage}")
    stage_idx = args.stage - 1
    depth = len(model.params.stages[stage_idx])
    if depth == 0:
        raise ConfigError(f"stage {args.stage} has no blocks in this checkpoint")
    if args.block != -1 and not 0 <= args.block < depth:
        raise ConfigError(f"block {args.block} outside [0, {depth}) "
                          f"for stage {args.stage}")
    image = _read_input_image(args.image, run)
    _, trace = model.forward(Tensor(image[None]), training=False,
                             capture=(stage_idx, args.block))
    spec = trace.spec
    side = spec.feat_h
    if not (0 <= args.row < side and 0 <= args.col < side):
        raise ConfigError(f"query ({args.row}, {args.col}) outside the "
                          f"{side}x{side} stage-{args.stage} feature map")
    rh, rw, s = spec.region_h, spec.region_w, spec.s
    region = (args.row // rh) * s + (args.col // rw)
    t_local = (args.row % rh) * rw + (args.col % rw)
    routed = trace.routing.index[0, region]              # [top_k]
    wrow = trace.weights[0, region, :, t_local, :].mean(axis=0)

    region_map = np.zeros((side, side), dtype=np.uint8)
    heat = np.zeros((side, side), dtype=np.float64)
    tokens = rh * rw
    for j, rid in enumerate(routed):
        ry, rx = divmod(int(rid), s)
        ys, xs = ry * rh, rx * rw
        region_map[ys:ys + rh, xs:xs + rw] = 255
        heat[ys:ys + rh, xs:xs + rw] = \
            wrow[j * tokens:(j + 1) * tokens].reshape(rh, rw)

    factor = run.model.input_hw // side
    up = lambda m: np.repeat(np.repeat(m, factor, axis=0), factor, axis=1)
    os.makedirs(args.out, exist_ok=True)
    region_path = os.path.join(args.out, "region_map.pgm")
    heat_path = os.path.join(args.out, "heatmap.pgm")
    raw_path = os.path.join(args.out, "heatmap.txt")
    write_pgm(region_path, up(region_map))
    write_pgm(heat_path,
              np.rint(up(heat) / heat.max() * 255.0).astype(np.uint8))
    with open(raw_path, "w", encoding="utf-8") as f:
        f.write(f"# stage {args.stage} query ({args.row}, {args.col}) "
                f"region {region} routed {list(map(int, routed))}\n")
        for r in range(side):
            f.write(" ".join(f"{v:.17g}" for v in heat[r]) + "\n")
    _say(f"attention mass {heat.sum():.6f} over {len(routed)} routed regions")
    for path in (region_path, heat_path, raw_path):
        _say(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_standard_suite
    reports = run_standard_suite(step=args.step, tol=args.tol)
    worst = None
    for rep in reports:
        _say(rep.summary())
        if worst is None or rep.max_rel_err > worst.max_rel_err:
            worst = rep
    failed = [r for r in reports if not r.passed]
    if failed:
        bad = max(failed, key=lambda r: r.max_rel_err)
        _say(f"FAILED: {len(failed)}/{len(reports)} checks; worst offender "
             f"{bad.op} at rel err {bad.max_rel_err:.3e} (tol {bad.tol})")
        return 1
    _say(f"all {len(reports)} gradient checks passed "
         f"(worst {worst.op} at {worst.max_rel_err:.3e})")
    return 0


# ---------------------------------------------------------------------------
# parser


def _int_list(raw: str) -> List[int]:
    try:
        return [int(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, "
                                         f"got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routeseg",
        description="Region-routed attention segmentation toolkit.",
        epilog="exit codes: 0 ok, 1 failed check, 2 config error, "
               "3 data error, 4 numeric abort")
    parser.add_argument("--help-config", action="store_true",
                        help="print the config key reference and exit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--stop-after-epochs", type=int, default=None,
                   help="interrupt after this many epochs (schedule unchanged)")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="dataset root (images/+masks/)")
    p.add_argument("--split", default="all",
                   choices=("all", "train", "val", "test"))
    p.add_argument("--split-file", default=None)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--hausdorff", action="store_true")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PGM/PPM input")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--probs", action="store_true",
                   help="also write per-class probability maps")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="parameter and FLOP table for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench-scaling",
                       help="attention cost vs resolution, fitted exponent")
    p.add_argument("--sides", type=_int_list, default=[32, 64, 128, 256],
                   help="comma-separated feature map sides")
    p.add_argument("--top-k", type=int, default=4)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_scaling)

    p = sub.add_parser("dump-attention",
                       help="export routed regions and an attention heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stage", type=int, default=3, help="stage number, 1-7")
    p.add_argument("--block", type=int, default=-1,
                   help="block index within the stage; -1 = last")
    p.add_argument("--row", type=int, required=True,
                   help="query row in stage feature coordinates")
    p.add_argument("--col", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        print(describe_keys(), end="")
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (ConfigError, OptimConfigError) as e:
        print(f"routeseg: config error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as e:
        print(f"routeseg: data error: {e}", file=sys.stderr)
        return 3
    except NumericAbort as e:
        print(f"routeseg: numeric abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
