# cli.py
"""Command-line front end: gen-data, gen-concepts, train, explain, project, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, NoReturn, override

import numpy as np

from rankcav.cav import accuracy_table, learn_cavs
from rankcav.config import RunConfig, load_config
from rankcav.exceptions import ArtifactError, ConfigError, RankcavError, UndefinedMetricError
from rankcav.metrics import kendall_tau
from rankcav.nn import init_encoder
from rankcav.projection import project_embeddings
from rankcav.storage import (
    load_concept_sets,
    load_pipeline,
    load_scenes,
    read_csv,
    read_json,
    save_cavs,
    save_concept_sets,
    save_pipeline,
    save_scenes,
    write_csv,
    write_json,
)
from rankcav.synth import (
    Scene,
    Split,
    build_concept_sets,
    build_task_dataset,
    in_split,
    stratified_split,
)
from rankcav.tcav import (
    Method,
    align_scenes,
    label_bins,
    layer_attributions,
    mean_tcav_score,
    normalize_magnitudes,
    profile_records,
    project_attributions,
    tcav_score,
)
from rankcav.training import EncoderTag, TrainedPipeline, embed, evaluate, latent_ordering, train_pipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    @override
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _layers(text: str) -> tuple[int, ...]:
    try:
        layers = tuple(int(item) for item in text.split(",") if item.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer indices, got {text!r}") from exc
    if not layers:
        raise argparse.ArgumentTypeError("empty layer list")
    return layers


# ============================================================================
# paths


def data_dir(out: Path) -> Path:
    return out / "data"


def concepts_dir(out: Path) -> Path:
    return out / "concepts"


def train_dir(out: Path) -> Path:
    return out / "train"


def explain_dir(out: Path) -> Path:
    return out / "explain"


def project_dir(out: Path) -> Path:
    return out / "project"


def checkpoint_path(out: Path, tag: EncoderTag | str) -> Path:
    return train_dir(out) / f"{EncoderTag(tag)}.json"


# ============================================================================
# commands


def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> None:
    dataset_config = config.dataset
    if args.n is not None or args.grid_size is not None:
        dataset_config = replace(
            dataset_config,
            n=dataset_config.n if args.n is None else args.n,
            grid_size=dataset_config.grid_size if args.grid_size is None else args.grid_size,
        )
    scenes = build_task_dataset(
        dataset_config.n,
        dataset_config.model,
        config.seed,
        grid_size=dataset_config.grid_size,
        concept_share=dataset_config.concept_share,
    )
    scenes = stratified_split(
        scenes,
        dataset_config.quantile_count,
        tuple(dataset_config.split_fractions),
        seed=config.seed,
    )
    save_scenes(data_dir(config.out), scenes, kind="task")


def cmd_gen_concepts(config: RunConfig, args: argparse.Namespace) -> None:
    n = config.concepts.n_per_concept if args.n_per_concept is None else args.n_per_concept
    grid_size = config.dataset.grid_size if args.grid_size is None else args.grid_size
    sets = build_concept_sets(n, config.seed, grid_size=grid_size, concepts=config.concepts.concepts)
    save_concept_sets(concepts_dir(config.out), sets)


def _metrics_block(pipeline: TrainedPipeline, dataset: Sequence[Scene], seed: int) -> dict[str, Any]:
    test = in_split(dataset, Split.TEST)
    return {
        "val": evaluate(pipeline, dataset, Split.VAL).as_dict(),
        "test": evaluate(pipeline, dataset, Split.TEST).as_dict(),
        "best_epoch": pipeline.best_epoch,
        "final_pretrain_loss": pipeline.pretrain_losses[-1] if pipeline.pretrain_losses else None,
        "latent_ordering": latent_ordering(pipeline.encoder, test, seed=seed),
    }


def cmd_train(config: RunConfig, args: argparse.Namespace) -> None:
    dataset = load_scenes(data_dir(config.out))
    out = train_dir(config.out)
    tags = [EncoderTag.RNC, EncoderTag.SUPERVISED] if args.baseline else [EncoderTag.RNC]
    metrics: dict[str, Any] = {}
    for tag in tags:
        logger.info("training %s", tag)
        pipeline = train_pipeline(dataset, config.train, tag)
        save_pipeline(checkpoint_path(config.out, tag), pipeline)
        write_csv(out / f"{tag}_losses.csv", "losses", ("step", "loss"), enumerate(pipeline.pretrain_losses))
        write_csv(out / f"{tag}_probe.csv", "probe", ("epoch", "val_r2"), enumerate(pipeline.probe_val_r2))
        metrics[tag] = _metrics_block(pipeline, dataset, config.seed)

    train = in_split(dataset, Split.TRAIN)
    untrained = init_encoder((train[0].features.shape[0], *config.train.encoder_widths), config.seed)
    metrics[EncoderTag.RANDOM] = {
        "latent_ordering": latent_ordering(untrained, in_split(dataset, Split.TEST), seed=config.seed)
    }
    write_json(out / "metrics.json", "metrics", metrics)


SENSITIVITY_COLUMNS = ("scene_id", "label", "concept", "layer", "method", "S", "S_normalized", "bin")
PROFILE_COLUMNS = ("concept", "layer", "method", "bin", "lower", "upper", "mean", "count")


def cmd_explain(config: RunConfig, args: argparse.Namespace) -> None:
    tag = EncoderTag(args.tag)
    pipeline = load_pipeline(checkpoint_path(config.out, tag))
    dataset = load_scenes(data_dir(config.out))
    stored = load_concept_sets(concepts_dir(config.out))
    concept_sets = {str(c): stored[str(c)] for c in config.concepts.concepts if str(c) in stored}
    if len(concept_sets) < 2:
        raise ArtifactError("Fewer than two concept sets on disk", context={"found": sorted(stored)})

    tcav_config = config.tcav
    if args.layers is not None:
        tcav_config = replace(tcav_config, layers=args.layers)
    if args.method is not None:
        tcav_config = replace(tcav_config, methods=(args.method,))
    layers = tcav_config.resolve_layers(pipeline.encoder.depth)
    scenes = in_split(dataset, tcav_config.split)
    if not scenes:
        raise ArtifactError("Evaluation split is empty", context={"split": str(tcav_config.split)})
    out = explain_dir(config.out)

    cavs = learn_cavs(pipeline.encoder, concept_sets, layers, config.concepts.cav, config.seed)
    save_cavs(out / "cavs.json", cavs.values())
    write_csv(out / "accuracy.csv", "accuracy", ("concept", "layer", "accuracy"), accuracy_table(cavs))
    reruns = [
        learn_cavs(pipeline.encoder, concept_sets, layers, config.concepts.cav, config.seed + k)
        for k in range(1, tcav_config.cav_seeds)
    ]

    _, bins = label_bins([scene.target for scene in scenes], tcav_config.bins)
    summary, sensitivity_rows, profile_rows = [], [], []
    for layer in layers:
        for method in tcav_config.methods:
            attributions = layer_attributions(pipeline, scenes, layer, method, tcav_config.ig)
            for concept in concept_sets:
                records = normalize_magnitudes(project_attributions(scenes, attributions, cavs[concept, layer], method))
                score = tcav_score(records)
                rerun_scores = [
                    tcav_score(project_attributions(scenes, attributions, run[concept, layer], method))
                    for run in reruns
                ]
                repeated = mean_tcav_score([score, *rerun_scores])
                summary.append(
                    {
                        "concept": concept,
                        "layer": layer,
                        "method": str(method),
                        "score": score.score,
                        "positive": score.positive,
                        "n": score.n,
                        "mean": repeated.mean,
                        "std": repeated.std,
                        "runs": repeated.runs,
                    }
                )
                sensitivity_rows.extend(
                    (r.scene_id, r.label, r.concept, r.layer, str(r.method), r.value, r.normalized, int(b))
                    for r, b in zip(records, bins)
                )
                profile_rows.extend(
                    (concept, layer, str(method), *row) for row in profile_records(records, tcav_config.bins)
                )
    write_json(out / "tcav.json", "tcav", summary)
    write_csv(out / "sensitivities.csv", "sensitivities", SENSITIVITY_COLUMNS, sensitivity_rows)
    write_csv(out / "profiles.csv", "profiles", PROFILE_COLUMNS, profile_rows)

    alignment_layer = max(layers)
    alignment = align_scenes(pipeline, scenes, [cavs[concept, alignment_layer] for concept in concept_sets])
    names = list(concept_sets)
    write_csv(
        out / "alignment.csv",
        "alignment",
        ("scene_id", "label", "layer", "best", *(f"cos_{n}" for n in names), *(f"norm_{n}" for n in names)),
        ((a.scene_id, a.label, alignment_layer, a.best, *a.cosines, *a.normalized) for a in alignment),
    )


PROJECTION_COLUMNS = ("scene_id", "label", "x", "y", "tag")


def cmd_project(config: RunConfig, args: argparse.Namespace) -> None:
    tag = EncoderTag(args.tag)
    dataset = load_scenes(data_dir(config.out))
    scenes = in_split(dataset, Split(args.split)) if args.split != "all" else dataset
    if len(scenes) < 3:
        raise ConfigError("Projection needs at least three instances", context={"n": len(scenes)})
    match tag:
        case EncoderTag.RANDOM:
            encoder = init_encoder((scenes[0].features.shape[0], *config.train.encoder_widths), config.seed)
        case _:
            encoder = load_pipeline(checkpoint_path(config.out, tag)).encoder
    projections = project_embeddings(
        embed(encoder, scenes), [s.id for s in scenes], [s.target for s in scenes], str(tag)
    )
    write_csv(
        project_dir(config.out) / f"{tag}.csv",
        "projection",
        PROJECTION_COLUMNS,
        ((p.scene_id, p.label, p.x, p.y, p.tag) for p in projections),
    )


def _projection_summary(out: Path) -> dict[str, float]:
    summary = {}
    for tag in EncoderTag:
        path = project_dir(out) / f"{tag}.csv"
        if not path.exists():
            continue
        rows = read_csv(path, "projection")
        try:
            tau = kendall_tau([float(r["x"]) for r in rows], [float(r["label"]) for r in rows])
        except UndefinedMetricError:
            tau = float("nan")
        summary[str(tag)] = abs(tau)
    return summary


def cmd_report(config: RunConfig, args: argparse.Namespace) -> None:
    out = config.out
    report: dict[str, Any] = {"seed": config.seed, "metrics": read_json(train_dir(out) / "metrics.json", "metrics")}
    missing = []

    accuracy_path = explain_dir(out) / "accuracy.csv"
    if accuracy_path.exists():
        by_layer: dict[str, dict[str, float]] = {}
        for row in read_csv(accuracy_path, "accuracy"):
            by_layer.setdefault(row["layer"], {})[row["concept"]] = float(row["accuracy"])
        report["concept_accuracy"] = {
            layer: {"mean": float(np.mean(list(values.values()))), "concepts": values}
            for layer, values in by_layer.items()
        }
    else:
        missing.append("concept_accuracy")

    tcav_path = explain_dir(out) / "tcav.json"
    if tcav_path.exists():
        report["tcav"] = read_json(tcav_path, "tcav")
    else:
        missing.append("tcav")

    report["projection_abs_tau"] = _projection_summary(out)
    report["missing"] = missing
    write_json(out / "report.json", "report", report)


# ============================================================================
# parser


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", type=Path, help="output root (default: $RANKCAV_OUT or ./runs)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="rankcav", description="RNC pretraining and TCAV analysis on synthetic land-cover scenes")
    commands = parser.add_subparsers(dest="command", required=True)

    gen_data = commands.add_parser("gen-data", parents=[common], help="generate the task dataset")
    gen_data.add_argument("--n", type=int, help="number of scenes")
    gen_data.add_argument("--grid-size", type=int)
    gen_data.set_defaults(handler=cmd_gen_data)

    gen_concepts = commands.add_parser("gen-concepts", parents=[common], help="generate concept sets")
    gen_concepts.add_argument("--n-per-concept", type=int)
    gen_concepts.add_argument("--grid-size", type=int)
    gen_concepts.set_defaults(handler=cmd_gen_concepts)

    train = commands.add_parser("train", parents=[common], help="pretrain, probe and evaluate")
    train.add_argument("--baseline", action="store_true", help="also train the supervised L1 baseline")
    train.set_defaults(handler=cmd_train)

    explain = commands.add_parser("explain", parents=[common], help="CAVs, TCAV scores, profiles and alignment")
    explain.add_argument("--method", choices=[m.value for m in Method])
    explain.add_argument("--layers", type=_layers, help="comma-separated 0-based layer indices")
    explain.add_argument(
        "--tag", default=EncoderTag.RNC.value, choices=[EncoderTag.RNC.value, EncoderTag.SUPERVISED.value]
    )
    explain.set_defaults(handler=cmd_explain)

    project = commands.add_parser("project", parents=[common], help="2-D PCA projection of embeddings")
    project.add_argument("--tag", default=EncoderTag.RNC.value, choices=[t.value for t in EncoderTag])
    splits = [s.value for s in Split if s is not Split.UNASSIGNED]
    project.add_argument("--split", default="all", choices=["all", *splits])
    project.set_defaults(handler=cmd_project)

    report = commands.add_parser("report", parents=[common], help="consolidated JSON report")
    report.set_defaults(handler=cmd_report)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    return config.with_overrides(seed=args.seed, out=args.out)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    handler: Callable[[RunConfig, argparse.Namespace], None] = args.handler
    try:
        handler(_run_config(args), args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (RankcavError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK
