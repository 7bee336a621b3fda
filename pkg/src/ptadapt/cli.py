"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
inputs, failed checks).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiments, gradcheck, storage
from .masks import evaluate, mask_iou, min_enclosing_box
from .npc import DEFAULT_K, DEFAULT_TAU_IOU, calibrate_detailed
from .prototypes import build_target_prototypes
from .scenes import GeneratorSpec, generate_dataset, resample_prompts
from .segmenter import encode, predict_mask, source_params
from .train import HISTORY_COLUMNS, TrainConfig, evaluate_scenes, initial_params, run_adaptation, substream

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
EVAL_COLUMNS = ("scene_id", "instance_id", "iou", "dice")

log = logging.getLogger("ptadapt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def _load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(_load_json(path)) if path else TrainConfig()


def _write_csv(path, header, rows) -> None:
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()


def _fmt(x) -> str:
    return repr(float(x))


def _with_points(scenes, points, seed):
    if points is None:
        return scenes
    return [s if s.points == points else resample_prompts(s, points, seed) for s in scenes]


def _params(ckpt, config: TrainConfig):
    if ckpt:
        return storage.read_checkpoint(ckpt)[0]
    return initial_params(config)


# --- subcommands -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = GeneratorSpec.from_dict(_load_json(args.spec)) if args.spec else GeneratorSpec()
    scenes = generate_dataset(spec, args.count, args.seed, points=args.points)
    storage.write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_init(args) -> int:
    config = _load_config(args.config)
    storage.write_checkpoint(initial_params(config), args.out, seed=config.seed, steps=0)
    print(f"wrote source checkpoint to {args.out}")
    return EXIT_OK


def cmd_prototypes(args) -> int:
    config = _load_config(args.config)
    scenes = storage.read_dataset(args.data)
    src = source_params(_params(args.ckpt, config))
    protos = build_target_prototypes(scenes, lambda im: encode(im, src), src.stride)
    storage.write_prototypes(protos, args.out)
    print(f"wrote {len(protos)} target prototypes to {args.out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    config = _load_config(args.config)
    train = storage.read_dataset(args.data)
    held_out = storage.read_dataset(args.eval_data) if args.eval_data else train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _params(args.ckpt, config)
    targets = None
    if config.pbr:
        if args.prototypes:
            targets = storage.read_prototypes(args.prototypes)
        else:
            src = source_params(params)
            targets = build_target_prototypes(train, lambda im: encode(im, src), src.stride)
        storage.write_prototypes(targets, out / "prototypes.tnsr")
    res = run_adaptation(train, held_out, config, params=params, target_prototypes=targets)
    storage.write_checkpoint(res.params, out, seed=config.seed, steps=res.steps)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_csv(out / "history.csv", HISTORY_COLUMNS,
               [[h["epoch"]] + [_fmt(h[c]) for c in HISTORY_COLUMNS[1:]] for h in res.history])
    last = res.history[-1]
    print(f"steps {res.steps}  final mIoU {last['mIoU']:.4f}  F1 {last['F1']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _ = storage.read_checkpoint(args.ckpt)
    scenes = _with_points(storage.read_dataset(args.data), args.points, args.seed)
    ev = evaluate_scenes(scenes, params)
    _write_csv(args.out, EVAL_COLUMNS, [(s, i, _fmt(iou), _fmt(d)) for s, i, iou, d in ev["rows"]])
    print(f"mIoU {ev['mIoU']:.4f}  F1 {ev['F1']:.4f}  instances {len(ev['rows'])}", file=sys.stderr)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    params, _ = storage.read_checkpoint(args.ckpt)
    scene = storage.read_scene(args.scene)
    rng = substream(args.seed, "npc-select")

    def forward(fmap, prompts):
        return predict_mask(fmap, prompts, params)

    r = calibrate_detailed(forward, encode(scene.image, params), scene.prompt_sets, args.tau, args.k, rng)
    instances = []
    for inst, ps, cands, init, ref in zip(scene.instances, r.prompt_sets, r.candidates, r.initial, r.refined):
        instances.append({
            "id": inst.instance_id,
            "candidates": len(cands),
            "selected_negatives": [[p.x, p.y] for p in ps.negatives] if cands else [],
            "iou_before": mask_iou(init, inst.gt_mask),
            "iou_after": mask_iou(ref, inst.gt_mask),
            "refined_rle": storage.rle_encode(ref),
        })
    report = {
        "scene_id": scene.scene_id,
        "tau_iou": args.tau,
        "k": args.k,
        "height": scene.height,
        "width": scene.width,
        "mIoU_before": evaluate(r.initial, scene.gt_masks)["mIoU"],
        "mIoU_after": evaluate(r.refined, scene.gt_masks)["mIoU"],
        "instances": instances,
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_boxgen(args) -> int:
    masks = storage.read_masks(args.masks)
    storage.write_boxes_csv(args.out, [min_enclosing_box(m) for m in masks])
    print(f"wrote {len(masks)} boxes to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradcheck.summarize(gradcheck.run_all(args.configs))
    _write_csv(args.out, ("suite", "name", "worst_config", "max_rel_error", "passed"),
               [(r["suite"], r["name"], r["worst_config"], _fmt(r["max_rel_error"]), r["passed"]) for r in rows])
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_DATA


def _parse_values(text, kind):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values list {text!r}") from exc


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    if args.param == "tau_iou":
        taus = _parse_values(args.values, float) if args.values else list(experiments.DEFAULT_TAUS)
        if args.data:
            scenes = storage.read_dataset(args.data)
        else:
            scenes = generate_dataset(GeneratorSpec(), args.count, args.seed)
        rows = experiments.tau_sweep(scenes, _params(args.ckpt, config), taus, args.k, args.seed)
        keys = list(rows[0])
        _write_csv(args.out, keys, [[_fmt(r[k]) for k in keys] for r in rows])
        return EXIT_OK
    values = _parse_values(args.values, int) if args.values else [1, 2, 3]
    seeds = _parse_values(args.seeds, int)
    rows = experiments.points_sweep(values, seeds, config=config)
    _write_csv(args.out, ("points", "config", "seed", "mIoU", "F1"),
               [(r["points"], r["config"], r["seed"], _fmt(r["mIoU"]), _fmt(r["F1"])) for r in rows])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptadapt", description="Point-supervised adaptation of a toy promptable segmenter.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a seeded scene dataset")
    g.add_argument("--spec", help="GeneratorSpec JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=1)
    g.set_defaults(fn=cmd_gen)

    i = sub.add_parser("init", help="write the untrained source model as a checkpoint")
    i.add_argument("--config")
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_init)

    pr = sub.add_parser("prototypes", help="extract target prototypes with the frozen source model")
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--ckpt")
    pr.add_argument("--config")
    pr.set_defaults(fn=cmd_prototypes)

    a = sub.add_parser("adapt", help="run self-training and write a checkpoint")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--eval-data", help="held-out scenes for the per-epoch history")
    a.add_argument("--ckpt", help="start from this checkpoint instead of the source init")
    a.add_argument("--prototypes", help="precomputed target prototypes")
    a.set_defaults(fn=cmd_adapt)

    e = sub.add_parser("eval", help="per-instance IoU / Dice CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--points", type=int)
    e.add_argument("--seed", type=int, default=0, help="prompt resampling seed when --points differs")
    e.add_argument("--out", default="-")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("calibrate", help="negative prompt calibration on one scene")
    c.add_argument("--scene", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--tau", type=float, default=DEFAULT_TAU_IOU)
    c.add_argument("--k", type=int, default=DEFAULT_K)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_calibrate)

    b = sub.add_parser("boxgen", help="minimum enclosing boxes of masks")
    b.add_argument("--masks", required=True, help="tensor file with an (H, W) or (N, H, W) mask")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_boxgen)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--configs", type=int, default=gradcheck.CONFIGS)
    gc.add_argument("--out", default="-")
    gc.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sweep", help="NPC threshold sweep or number-of-points comparison")
    s.add_argument("--param", required=True, choices=("tau_iou", "points"))
    s.add_argument("--values")
    s.add_argument("--data", help="scenes for the tau_iou sweep (generated if omitted)")
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--ckpt")
    s.add_argument("--config")
    s.add_argument("--k", type=int, default=DEFAULT_K)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", default="1,2,3")
    s.add_argument("--out", default="-")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"ptadapt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError, TypeError) as exc:
        print(f"ptadapt: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
