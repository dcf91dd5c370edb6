"""Command-line entry point: ``hsi-fewshot {convert,train,evaluate,map,embed}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hsi_fewshot import evaluator, plotting
from hsi_fewshot.config import RunConfig, load_config
from hsi_fewshot.errors import ConfigError, HsiError
from hsi_fewshot.sampling import PatchBatch, extract_patches
from hsi_fewshot.scene_store import convert_raw, load_scene
from hsi_fewshot.trainer import load_checkpoint, prepare_target, read_log, run_training

log = logging.getLogger("hsi_fewshot")


def parse_seeds(text: str | None) -> list[int] | None:
    """``"10"`` means seeds 0..9; ``"3,7,11"`` is an explicit list."""
    if text is None:
        return None
    text = text.strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise ConfigError("--seeds needs at least one seed")
    return list(range(n))


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "episodes", None) is not None:
        overrides.append(f"train.episodes={args.episodes}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"out={json.dumps(str(args.out))}")
    return cfg.with_overrides(overrides)


def _palette(cfg: RunConfig, args, num_classes: int):
    path = getattr(args, "palette", None) or cfg.eval.palette
    return evaluator.load_palette(path) if path else evaluator.default_palette(num_classes)


def _progress(every: int):
    def report(row):
        if (row["step"] + 1) % every == 0:
            log.info("step %d  total=%.4f  l_con=%.4f  l_fsl=%.4f  l_d=%.4f  acc=%.3f  (%s)",
                     row["step"] + 1, row["total"], row["l_con"], row["l_fsl"], row["l_d"],
                     row["query_accuracy"], row["domain"])
    return report


def cmd_convert(args) -> int:
    out = convert_raw(args.cube, args.labels, args.shape, args.out)
    scene = load_scene(out)
    print(json.dumps({"scene": str(out), "height": scene.height, "width": scene.width, "bands": scene.bands,
                      "classes": scene.num_classes}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = Path(cfg.out)
    state, data = run_training(cfg, run_dir, progress=_progress(args.log_every))
    plotting.plot_training_curves(read_log(run_dir / "train.log.jsonl"), run_dir / "loss_curves.png")
    print(json.dumps({"run_dir": str(run_dir), "steps": state.step}))
    return 0


def _write_eval_outputs(report, pred_map, scene, cfg, args, out_dir: Path, model=None, support=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluator.write_metrics(report, out_dir / "metrics.json")
    evaluator.write_per_class_csv(report, scene.class_names, out_dir / "per_class.csv")
    plotting.plot_confusion(report.confusion, scene.class_names, out_dir / "confusion.png")
    if args.emit_map:
        palette = _palette(cfg, args, scene.num_classes)
        evaluator.render_class_map(pred_map, palette, out_dir / "class_map.png")
        plotting.plot_class_map(pred_map, palette, scene.class_names, out_dir / "class_map_figure.png",
                                title=f"{scene.scene_id}  OA={100 * report.oa:.2f}%")
    if args.emit_embeddings and model is not None:
        evaluator.export_embeddings(model, test_task_batch(scene, support, args.max_per_class, cfg.seed),
                                    out_dir / "embeddings.csv")


def test_task_batch(scene, support: PatchBatch, max_per_class: int | None, seed: int) -> PatchBatch:
    """Support patches plus query pixels (all, or up to ``max_per_class`` per class)."""
    rng = np.random.default_rng(seed)
    taken = set(map(tuple, support.pixel_coords))
    coords, labels = list(support.pixel_coords), (support.labels).tolist()
    for cls in range(1, scene.num_classes + 1):
        rows, cols = np.nonzero(scene.labels == cls)
        cand = [(r, c) for r, c in zip(rows.tolist(), cols.tolist()) if (r, c) not in taken]
        if max_per_class is not None and len(cand) > max_per_class:
            cand = [cand[i] for i in sorted(rng.choice(len(cand), max_per_class, replace=False))]
        coords.extend(cand)
        labels.extend([cls - 1] * len(cand))
    return PatchBatch(extract_patches(scene, coords, support.patches.shape[1]), labels, "target", coords)


def cmd_evaluate(args) -> int:
    seeds = parse_seeds(args.seeds)
    if args.checkpoint:
        state, cfg = load_checkpoint(args.checkpoint)
        cfg = cfg.with_overrides(args.set or [])
        target = load_scene(args.scene) if args.scene else None
        out_dir = Path(args.out) if args.out else Path(cfg.out) / "eval"
        reports = []
        for seed in seeds or [cfg.seed]:
            scene, support = prepare_target(cfg, target, seed=seed)
            pred_map, cm = evaluator.classify_scene(state.model, scene, support, cfg.eval.classifier,
                                                    cfg.eval.batch_size)
            report = evaluator.compute_metrics(cm, seed=seed)
            seed_dir = out_dir if seeds is None else out_dir / f"seed-{seed}"
            _write_eval_outputs(report, pred_map, scene, cfg, args, seed_dir, state.model, support)
            reports.append(report)
        agg = evaluator.aggregate(reports)
    else:
        if not args.config:
            raise ConfigError("evaluate needs --checkpoint or --config")
        cfg = resolve_config(args)
        out_dir = Path(cfg.out)
        agg = evaluator.multi_seed_evaluate(cfg, seeds or [cfg.seed], out_dir=out_dir,
                                            progress=_progress(args.log_every))
        if args.emit_map or args.emit_embeddings:
            for report in agg.runs:
                run_dir = out_dir / f"seed-{report.seed}"
                state, run_cfg = load_checkpoint(run_dir)
                scene, support = prepare_target(run_cfg)
                pred_map, _ = evaluator.classify_scene(state.model, scene, support, run_cfg.eval.classifier,
                                                       run_cfg.eval.batch_size)
                _write_eval_outputs(report, pred_map, scene, run_cfg, args, run_dir, state.model, support)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "aggregate.json").write_text(json.dumps(agg.as_dict(), indent=2), encoding="utf-8")
    print(json.dumps({"mean": agg.mean, "std": agg.std, "seeds": agg.seeds}))
    return 0


def cmd_map(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    cfg = cfg.with_overrides(args.set or [])
    scene, support = prepare_target(cfg, load_scene(args.scene) if args.scene else None)
    palette = _palette(cfg, args, scene.num_classes)
    pred_map, cm = evaluator.classify_scene(state.model, scene, support, cfg.eval.classifier, cfg.eval.batch_size)
    out = Path(args.out) if args.out else Path(cfg.out) / "class_map.png"
    evaluator.render_class_map(pred_map, palette, out)
    oa = evaluator.compute_metrics(cm).oa if cm.sum() else float("nan")
    plotting.plot_class_map(pred_map, palette, scene.class_names, out.with_name(out.stem + "_figure.png"),
                            title=f"{scene.scene_id}  OA={100 * oa:.2f}%")
    print(json.dumps({"map": str(out), "oa": oa}))
    return 0


def cmd_embed(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    cfg = cfg.with_overrides(args.set or [])
    scene, support = prepare_target(cfg, load_scene(args.scene) if args.scene else None)
    batch = test_task_batch(scene, support, args.max_per_class, cfg.seed)
    out = Path(args.out) if args.out else Path(cfg.out) / "embeddings.csv"
    evaluator.export_embeddings(state.model, batch, out, cfg.eval.batch_size)
    print(json.dumps({"embeddings": str(out), "rows": len(batch)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsi-fewshot", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="raw float32 cube + uint16 labels -> scene directory")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--shape", required=True, help="JSON with height, width, bands, class_names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    def common(p, checkpoint: bool):
        if checkpoint:
            p.add_argument("--checkpoint", help="archive, step directory or run directory")
            p.add_argument("--scene", help="target scene directory (defaults to the run's target)")
        p.add_argument("--config", help="JSON config file or preset name (ip, pu, sa)")
        p.add_argument("--out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")

    p = sub.add_parser("train", help="train a model")
    common(p, checkpoint=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint, or train+evaluate over seeds")
    common(p, checkpoint=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", help="count N (seeds 0..N-1) or comma-separated list")
    p.add_argument("--emit-map", action="store_true")
    p.add_argument("--emit-embeddings", action="store_true")
    p.add_argument("--palette")
    p.add_argument("--max-per-class", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("map", help="render the target classification map")
    common(p, checkpoint=True)
    p.add_argument("--palette")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("embed", help="export test-task embeddings as CSV")
    common(p, checkpoint=True)
    p.add_argument("--max-per-class", type=int)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command in ("map", "embed") and not args.checkpoint:
        print(f"error: ConfigError: {args.command} needs --checkpoint", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (HsiError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
