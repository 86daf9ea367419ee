"""
Command-line front door: data generation, training, matching, homography
evaluation, visualization, benchmarking, ablations and the property suite.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from config.settings import DATA_DIR, DEFAULT_JOBS, DEFAULT_SEED, FLOAT_DTYPE, LOG_LEVEL
from modules.checkpoint import load_checkpoint, load_resume_state, save_checkpoint
from modules.config_schema import (
    PRESETS,
    generate_schema,
    load_experiment_config,
    reference_config,
    save_schema,
    write_template,
)
from modules.errors import ConfigError, GeometryError, GlueError
from modules.evaluation import MATCHERS, attention_span, evaluate_homography, make_matcher
from modules.exporter import (
    export_pairs,
    load_attention,
    load_labels,
    load_manifest,
    load_matches,
    records_table,
    save_attention,
    save_json,
    save_manifest,
    save_matches,
    save_table,
    timestamped_path,
)
from modules.features import load_feature_set
from modules.matcher import DEFAULT_THRESHOLD
from modules.model import VARIANTS, match_pair
from modules.synthgen import DatasetManifest, SceneConfig, generate_pairs
from modules.training import run_ablation, train_loop

logger = logging.getLogger("main")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        scene = SceneConfig(
            num_points=args.num_points,
            image_size=tuple(args.image_size),
            descriptor_dim=args.descriptor_dim,
            descriptor_noise=args.noise,
            dropout_rate=args.dropout,
            num_distractors=args.distractors,
            repeated_distractors=args.repeated_distractors,
        )
    except GeometryError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = DatasetManifest(args.pairs, args.seed, scene)
    save_manifest(manifest, args.out)
    if args.export:
        export_pairs(manifest, args.export, args.jobs)
    return 0


def cmd_train(args) -> int:
    experiment = load_experiment_config(args.config)
    train_config = experiment.train
    if args.iterations is not None:
        train_config = dataclasses.replace(train_config, iterations=args.iterations)
    resume = load_resume_state(args.resume) if args.resume else None
    init_params = load_checkpoint(args.init).params if args.init else None
    result = train_loop(
        experiment.model,
        train_config,
        experiment.manifest,
        checkpoint_path=args.out,
        metrics_path=args.metrics or os.path.splitext(args.out)[0] + ".metrics.jsonl",
        resume=resume,
        init_params=init_params,
    )
    if args.final:
        save_checkpoint(result.model, args.final)
    logger.info("Training finished after %d iterations", result.iterations)
    return 0


def cmd_match(args) -> int:
    model = load_checkpoint(args.model)
    features_a = load_feature_set(args.features_a)
    features_b = load_feature_set(args.features_b)
    dtype = np.float32 if args.float32 else np.dtype(FLOAT_DTYPE)
    result = match_pair(
        model, features_a, features_b, args.threshold, args.record_attention is not None, dtype, args.sinkhorn_tolerance
    )
    save_matches(result.matches, args.out)
    logger.info(
        "%d matches, Sinkhorn column residual %.2e after %d iterations",
        len(result.matches), result.column_residual, result.sinkhorn_iterations,
    )
    if args.record_attention:
        spans = attention_span(result.attention, features_a.positions, features_b.positions, result.matches)
        save_attention(result.attention, spans, args.record_attention)
    return 0


def cmd_eval_homography(args) -> int:
    manifest = load_manifest(args.manifest)
    if not manifest.num_pairs:
        raise ConfigError(f"manifest {args.manifest} has no pairs to evaluate")
    if args.matcher == "superglue" and not args.model:
        raise ConfigError("--model is required for the superglue matcher")
    model = load_checkpoint(args.model) if args.model else None
    matcher = make_matcher(args.matcher, model, args.threshold, args.ratio, args.distance)
    pairs = generate_pairs(manifest, range(manifest.num_pairs), args.jobs)
    report = evaluate_homography(
        pairs, matcher, args.ransac_iterations, args.inlier_threshold, args.auc_threshold, args.seed, args.jobs
    )
    data = report.to_dict()
    data["matcher"] = args.matcher
    out = args.out or timestamped_path(os.path.join(DATA_DIR, "reports"), f"eval_{args.matcher}", "json")
    save_json(data, out)
    return 0


def cmd_viz(args) -> int:
    from modules.viz import render_attention_svg, render_matches_svg, save_svg

    features_a = load_feature_set(args.features_a)
    features_b = load_feature_set(args.features_b)
    if args.attention:
        attention = load_attention(args.attention)
        svg = render_attention_svg(features_a, features_b, attention, args.query, args.image, args.head)
    elif args.matches:
        labels = load_labels(args.labels) if args.labels else None
        svg = render_matches_svg(features_a, features_b, load_matches(args.matches), labels)
    else:
        raise ConfigError("viz needs --matches or --attention")
    save_svg(svg, args.out)
    return 0


def cmd_bench(args) -> int:
    from modules.bench import benchmark

    table = benchmark(load_checkpoint(args.model), args.keypoints, args.repeats, args.warmup, args.seed)
    print(table.to_string(index=False))
    if args.out:
        save_table(table, args.out)
    return 0


def cmd_ablate(args) -> int:
    experiment = load_experiment_config(args.config)
    test = dataclasses.replace(experiment.manifest, num_pairs=args.test_pairs, stream=2)
    test_pairs = generate_pairs(test, range(args.test_pairs), DEFAULT_JOBS)
    table = run_ablation(
        experiment.model,
        experiment.train,
        experiment.manifest,
        test_pairs,
        args.variants,
        args.seeds,
        args.extra_layers,
    )
    print(table.to_string(index=False))
    save_table(table, args.out + ".csv")
    save_json(table.to_dict(orient="records"), args.out + ".json")
    return 0


def cmd_properties(args) -> int:
    from modules.property_suite import run_all, write_reports

    model = load_checkpoint(args.model) if args.model else None
    suites = run_all(model, args.trials, args.gradient_trials, args.seed, args.jobs)
    report = write_reports(suites, args.json, args.junit)
    print(records_table([{"suite": name, "cases": len(cases), "failed": sum(1 for c in cases if not c.passed)}
                         for name, cases in suites.items()]).to_string(index=False))
    return 0 if report["failed"] == 0 else 1


def cmd_init_config(args) -> int:
    write_template(args.out, args.preset)
    if args.schema:
        save_schema(generate_schema(reference_config()), args.schema)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a regenerable dataset manifest")
    p.add_argument("--out", default=os.path.join(DATA_DIR, "manifest.json"))
    p.add_argument("--pairs", type=_non_negative_int, default=1024)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--num-points", type=_positive_int, default=50)
    p.add_argument("--descriptor-dim", type=_positive_int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--distractors", type=_non_negative_int, default=10)
    p.add_argument("--repeated-distractors", type=float, default=0.0, help="share of distractors copying a real descriptor")
    p.add_argument("--image-size", type=float, nargs=2, metavar=("W", "H"), default=(640.0, 480.0))
    p.add_argument("--export", metavar="DIR", help="also write SGFM pairs and labels")
    p.add_argument("--jobs", type=_positive_int, default=DEFAULT_JOBS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a matcher from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=os.path.join(DATA_DIR, "checkpoints", "model.sgwt"))
    p.add_argument("--metrics")
    p.add_argument("--resume", help="checkpoint (or its .state.npz) to continue from")
    p.add_argument("--init", help="checkpoint whose matching tensors initialize the model")
    p.add_argument("--final", help="also save the last iterate here")
    p.add_argument("--iterations", type=_non_negative_int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="match two feature files")
    p.add_argument("--model", required=True)
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--record-attention", metavar="PATH")
    p.add_argument("--float32", action="store_true")
    p.add_argument("--sinkhorn-tolerance", type=float, help="iterate Sinkhorn until the column residual is this small")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval-homography", help="homography AUC, precision and recall on a manifest")
    p.add_argument("--model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--matcher", choices=MATCHERS, default="superglue")
    p.add_argument("--threshold", type=float)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--distance", type=float, default=0.7)
    p.add_argument("--ransac-iterations", type=_positive_int, default=3000)
    p.add_argument("--inlier-threshold", type=float, default=3.0)
    p.add_argument("--auc-threshold", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=_positive_int, default=DEFAULT_JOBS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_homography)

    p = sub.add_parser("viz", help="render matches or recorded attention as SVG")
    p.add_argument("--matches")
    p.add_argument("--attention", metavar="PATH", help="recording written by match --record-attention")
    p.add_argument("--query", type=_non_negative_int, default=0, help="keypoint whose attention is drawn")
    p.add_argument("--image", choices=("a", "b"), default="a")
    p.add_argument("--head", type=_non_negative_int, help="single head instead of the head average")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("bench", help="time the GNN and matching stages")
    p.add_argument("--model", required=True)
    p.add_argument("--keypoints", type=_positive_int, nargs="+", default=[128, 256, 512, 1024])
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--warmup", type=_non_negative_int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train every variant under one budget")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--extra-layers", type=_positive_int, nargs="*", default=[])
    p.add_argument("--test-pairs", type=_positive_int, default=256)
    p.add_argument("--out", default=os.path.join(DATA_DIR, "ablation"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("properties", help="run the property suite")
    p.add_argument("--model")
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--gradient-trials", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=_positive_int, default=DEFAULT_JOBS)
    p.add_argument("--json")
    p.add_argument("--junit")
    p.set_defaults(func=cmd_properties)

    p = sub.add_parser("init-config", help="write an experiment config template")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", help="also write the reference JSON schema")
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except GlueError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
