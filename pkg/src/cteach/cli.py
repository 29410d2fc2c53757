"""Command-line entry point: train / eval / pseudo / gradcheck.

Every run directory is self-describing: the resolved config (defaults
materialized), the seed, and the package version reproduce all outputs
byte for byte.  Outputs never leave the --out directory.

Exit codes: 0 ok, 2 invalid config, 3 checkpoint problem, 4 write
failure, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import glm, gradsuite, plm, segmenter, training, world
from .config import RunConfig, config_from_dict, dump_config
from .errors import ConfigError, CteachError, DataError
from .pgm import labels_to_gray, weights_to_gray, write_pgm
from .world import IGNORE


def _load_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    if path is None:
        cfg = config_from_dict({})
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        cfg = config_from_dict(doc)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return cfg.validate()


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CTEACH_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    n = _workers()
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed, args.out)
        if cfg.out is None:
            raise ConfigError("no output directory: set --out or the config 'out' key")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    world.write_vocabulary(world.make_vocabulary(cfg.world.num_seen, cfg.world.num_unseen),
                           out / "vocabulary.json")

    state = training.init_state(cfg)
    csv_path = out / "losses.csv"
    with open(csv_path, "w") as csv:
        csv.write("iteration," + ",".join(training.LOSS_PARTS) + ",total\n")

        def on_step(it, parts):
            csv.write(
                f"{it}," + ",".join(repr(parts[k]) for k in training.LOSS_PARTS)
                + f",{parts['total']!r}\n"
            )
            every = cfg.train.checkpoint_every
            if every > 0 and state.iteration % every == 0:
                training.save_checkpoint(state, out / f"checkpoint_{state.iteration:06d}.ctck")

        training.train_loop(state, on_step=on_step)

    training.save_checkpoint(state, out / "checkpoint_final.ctck")
    scenes = [training.eval_scene(state, i) for i in range(cfg.train.eval_scenes)]
    preds = _ordered_map(
        lambda sc: training.infer_scene(sc, state.seg, state.table, state.vocab, cfg.train.gamma),
        scenes,
    )
    report = training.evaluate(preds, [sc.gt_labels for sc in scenes], state.vocab)
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return 0


def cmd_eval(args) -> int:
    try:
        cfg = _load_config(args.config, None, None)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        state = training.load_checkpoint(args.checkpoint, cfg)
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3

    gamma = cfg.train.gamma if args.gamma is None else args.gamma
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)

    scenes = [training.eval_scene(state, i) for i in range(cfg.train.eval_scenes)]
    preds = _ordered_map(
        lambda sc: training.infer_scene(sc, state.seg, state.table, state.vocab, gamma), scenes
    )
    report = training.evaluate(preds, [sc.gt_labels for sc in scenes], state.vocab)
    (out / f"metrics_gamma{gamma:g}.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return 0


def _pseudo_scene_report(state, index: int, out: Path) -> dict:
    cfg = state.config
    sc = training.eval_scene(state, index)
    ignore = sc.seen_labels == IGNORE
    tag = f"scene{index:02d}"
    write_pgm(out / f"{tag}_gt.pgm", labels_to_gray(sc.gt_labels))
    write_pgm(out / f"{tag}_seen.pgm", labels_to_gray(sc.seen_labels, background=IGNORE))

    center_counts: dict[str, int] = {}
    for s in sorted(cfg.plm.scales):
        cs = plm.init_centers(sc.dense_tokens, [s], ignore)
        center_counts[str(s)] = len(cs)
        assign_map = np.zeros(sc.gt_labels.shape, dtype=np.int64)
        if len(cs) and ignore.any():
            toks = sc.dense_tokens[ignore]
            toks = toks / np.linalg.norm(toks, axis=1, keepdims=True)
            cn = cs.centers / np.maximum(
                np.linalg.norm(cs.centers, axis=1, keepdims=True), 1e-12
            )
            assign_map[ignore] = (toks @ cn.T).argmax(axis=1) + 1
        write_pgm(out / f"{tag}_scale{s}_centers.pgm", labels_to_gray(assign_map, background=0))

    purities: list[float] = []
    fused_count = 0
    if ignore.any():
        centers = plm.init_centers(sc.dense_tokens, cfg.plm.scales, ignore)
        ms = plm.kmeans_ignore(
            sc.dense_tokens, centers, ignore,
            max_iters=cfg.plm.kmeans_max_iters, distance=cfg.plm.kmeans_distance,
        )
        fused = plm.mask_fusion(ms.masks, ms.centers, cfg.plm.fusion_threshold)
        fused_count = len(fused)
        pl = plm.build_pseudo_labels(sc.seen_labels, fused, len(state.vocab))
        write_pgm(out / f"{tag}_pseudo.pgm", labels_to_gray(pl.labels))
        for mask in fused:
            gt = sc.gt_labels[mask]
            counts = np.bincount(gt)
            purities.append(float(counts.max() / gt.size))
    else:
        write_pgm(out / f"{tag}_pseudo.pgm", labels_to_gray(sc.seen_labels))

    feats = segmenter.segment_forward(sc.pixel_input[None], state.seg)
    _, weights = glm.attention_pool(sc.cls_token[None], feats)
    attn = weights.data[0].reshape(sc.height, sc.width)
    write_pgm(out / f"{tag}_attention.pgm", weights_to_gray(attn))

    return {
        "index": index,
        "center_counts": center_counts,
        "total_centers": sum(center_counts.values()),
        "fused_masks": fused_count,
        "purities": purities,
        "min_purity": min(purities) if purities else 1.0,
    }


def cmd_pseudo(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed, args.out)
        if cfg.out is None:
            raise ConfigError("no output directory: set --out or the config 'out' key")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        state = training.init_state(cfg)
        reports = _ordered_map(
            lambda i: _pseudo_scene_report(state, i, out), range(args.scenes)
        )
        summary = {"seed": cfg.seed, "scenes": reports}
        (out / "pseudo_summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n"
        )
    except (OSError, CteachError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradsuite.run_suite(args.seed)
    for name in sorted(errors):
        print(f"{name}: max relative error {errors[name]:.3e}")
    failing = gradsuite.failing_paths(errors)
    if failing:
        print(f"FAIL: {len(failing)} path(s) above {gradsuite.TOLERANCE:g}: "
              + ", ".join(sorted(failing)), file=sys.stderr)
        return 5
    print(f"OK: {len(errors)} paths below {gradsuite.TOLERANCE:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cteach",
        description="Teacher-guided zero-shot segmentation on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training loop and final evaluation")
    p_train.add_argument("--config", help="JSON run configuration")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out", help="output directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--gamma", type=float, help="override the unseen logit offset")
    p_eval.add_argument("--out", help="output directory (default: checkpoint directory)")
    p_eval.set_defaults(fn=cmd_eval)

    p_pseudo = sub.add_parser("pseudo", help="export pseudo-label and attention maps")
    p_pseudo.add_argument("--config", help="JSON run configuration")
    p_pseudo.add_argument("--seed", type=int, help="override the config seed")
    p_pseudo.add_argument("--out", help="output directory")
    p_pseudo.add_argument("--scenes", type=int, default=4, help="scenes to export")
    p_pseudo.set_defaults(fn=cmd_pseudo)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
