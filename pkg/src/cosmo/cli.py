"""Open-set multi-target domain adaptation with learnable prompts over frozen dual encoders.

Commands:
    split   choose known/unknown classes and domains, print target statistics
    train   learn prompts and the bias network, then evaluate on blended targets
    eval    evaluate a checkpoint or the zero-shot threshold baseline
    params  print trainable parameter counts
"""
import argparse
import dataclasses
import importlib.metadata
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
import torch
import yaml
from pathy import Pathy

from cosmo.bias_net import count_model_params, format_param_count
from cosmo.core import SplitSpec, load_config, save_config, validate_config
from cosmo.data import (
    ExampleRecord,
    blend_targets,
    build_source_pool,
    count_known_unknown,
    group_by_domain,
    make_open_set_split,
    scan_dataset,
)
from cosmo.encoders import CLIP_REGISTRY, EncoderBackend, clip_adapter, encode_records, toy_backend
from cosmo.evaluation import (
    DEFAULT_THRESHOLD,
    EMBEDDINGS_DIR,
    build_zero_shot_classifier,
    compute_domain_metrics,
    evaluate_features,
    export_embeddings,
    format_metrics_table,
    save_metrics,
    zero_shot_baseline,
)
from cosmo.exceptions import CosmoError, LabelSpaceError, ValidationError
from cosmo.log import LOGGER, set_verbosity
from cosmo.trainer import (
    CHECKPOINTS_DIR,
    DTYPES,
    STEPS_FILE,
    encode_pools,
    fit,
    latest_checkpoint,
    load_checkpoint,
)

DISTRIBUTION = "cosmo-osmtda"
RUN_MANIFEST = "manifest.yaml"
SPLIT_MANIFEST_SUFFIX = ".manifest.yaml"
RUN_CONFIG = "config.yaml"
PARAM_SWEEP = (4, 8, 16)
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunManifest:
    """Everything needed to re-run a command on the same backend."""

    command: str
    config: dict[str, tp.Any]
    split_file: str
    seed: int
    backend: dict[str, tp.Any]
    checkpoint_dir: str | None = None
    report_paths: dict[str, str] = field(default_factory=dict)
    tool_version: str = ""

    def __post_init__(self) -> None:
        if not self.tool_version:
            try:
                self.tool_version = importlib.metadata.version(DISTRIBUTION)
            except importlib.metadata.PackageNotFoundError:
                self.tool_version = "unknown"

    def save(self, path: Path) -> None:
        path.write_text(yaml.safe_dump(dataclasses.asdict(self), sort_keys=False))


def split_manifest_path(split_path: Path) -> Path:
    """`splits/office.yaml` -> `splits/office.manifest.yaml`"""
    return split_path.with_name(split_path.stem + SPLIT_MANIFEST_SUFFIX)


def _make_backend(
    name: str,
    feature_dim: int,
    class_names: tp.Sequence[str],
    dtype: torch.dtype,
    token_dim: int | None = None,
    backend_seed: int = 0,
    checkpoint_ref: str = "ViT-B/16",
) -> EncoderBackend:
    if name == "toy":
        return toy_backend(feature_dim, token_dim or feature_dim, backend_seed, class_names, dtype)
    return clip_adapter(checkpoint_ref, class_names)


def _feature_dim(records: tp.Sequence[ExampleRecord], default: int = 512) -> int:
    features = [r.feature for r in records if r.feature is not None]
    return len(features[0]) if features else default


def _read_split_records(split: SplitSpec) -> dict[str, list[ExampleRecord]]:
    if split.dataset_root is None:
        raise ValidationError("Split file has no dataset_root to read records from.")
    root = Pathy.fluid(split.dataset_root)
    return group_by_domain(scan_dataset(root, [split.source_domain, *split.target_domains]))


def cmd_split(
    data_dir_path: str,
    n_known: int,
    source: str,
    targets: tp.Sequence[str],
    seed: int,
    out: str,
    dataset_name: str = "",
) -> pd.DataFrame:
    """Write a split file and print known/unknown target counts per domain."""
    data_dir_path_obj = Pathy.fluid(data_dir_path)
    LOGGER.info("Reading dataset...")
    records = scan_dataset(data_dir_path_obj, [source, *targets])
    split = make_open_set_split(
        {tp.cast(str, r.class_name) for r in records},
        n_known,
        source,
        targets,
        seed,
        dataset_name=dataset_name or data_dir_path_obj.name,
        dataset_root=str(data_dir_path_obj.resolve()),
    )
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    split.save(out_path)
    LOGGER.info(
        f"Saved split with {len(split.known_classes)} known and {len(split.unknown_classes)} "
        f"unknown classes to {out_path}"
    )
    RunManifest(
        command="split",
        config={
            "data_dir_path": split.dataset_root,
            "n_known": n_known,
            "source": source,
            "targets": list(targets),
            "dataset_name": split.dataset_name,
        },
        split_file=str(out_path.resolve()),
        seed=seed,
        backend={},
    ).save(split_manifest_path(out_path))

    by_domain = group_by_domain(records)
    statistics = pd.DataFrame(
        [{"domain": domain} | count_known_unknown(by_domain.get(domain, []), split) for domain in targets]
    )
    statistics = pd.concat(
        [statistics, pd.DataFrame([{"domain": "total", **statistics[["known", "unknown"]].sum().to_dict()}])],
        ignore_index=True,
    )
    print(f"Target statistics (source {source}):")
    print(statistics.to_string(index=False))
    return statistics


def cmd_train(
    config: str,
    split: str,
    backend: str,
    out: str,
    seed: int | None = None,
    resume: bool = False,
    token_dim: int | None = None,
    backend_seed: int = 0,
    checkpoint_ref: str = "ViT-B/16",
) -> RunManifest:
    """Train on the split's source and blended targets, then evaluate."""
    cfg = load_config(Pathy.fluid(config), {"seed": seed})
    split_spec = SplitSpec.load(Pathy.fluid(split))
    run_dir = Path(out)
    run_dir.mkdir(parents=True, exist_ok=True)

    LOGGER.info("Reading dataset...")
    records = _read_split_records(split_spec)
    source_pool = build_source_pool(records, split_spec)
    target_pool = blend_targets(records, split_spec)
    LOGGER.info(f"Source pool: {len(source_pool)} images, blended target pool: {len(target_pool)} images.")

    label_space = split_spec.label_space
    dtype, _ = DTYPES[cfg.precision]
    encoder_backend = _make_backend(
        backend, _feature_dim(source_pool), label_space.known_classes, dtype, token_dim, backend_seed, checkpoint_ref
    )
    pools = encode_pools(source_pool, target_pool, encoder_backend, label_space, dtype)

    save_config(cfg, run_dir / RUN_CONFIG)
    manifest = RunManifest(
        command="train",
        config=cfg.to_dict(),
        split_file=str(Pathy.fluid(split).resolve()),
        seed=cfg.seed,
        backend=encoder_backend.description,
        checkpoint_dir=str(run_dir / CHECKPOINTS_DIR),
    )
    manifest.save(run_dir / RUN_MANIFEST)

    LOGGER.info("Training...")
    state, report = fit(pools, encoder_backend, label_space, cfg, run_dir, resume)

    LOGGER.info("Evaluating on blended targets...")
    predictions = evaluate_features(state, pools.target_features, target_pool.unseal())
    reports = compute_domain_metrics(predictions)
    json_path, table_path = save_metrics(reports, run_dir)
    print(format_metrics_table(reports))

    manifest.report_paths = {
        "steps": str(run_dir / STEPS_FILE),
        "metrics": str(json_path),
        "metrics_table": str(table_path),
    }
    manifest.save(run_dir / RUN_MANIFEST)
    LOGGER.info(f"Run finished, final parameter checksum {report.final_checksum[:16]}.")
    return manifest


def cmd_eval(
    split: str,
    out: str,
    checkpoint: str | None = None,
    pool: str = "targets",
    baseline: str = "none",
    threshold: float = DEFAULT_THRESHOLD,
    backend: str = "toy",
    token_dim: int | None = None,
    backend_seed: int = 0,
    checkpoint_ref: str = "ViT-B/16",
    export: bool = False,
) -> dict[str, tp.Any]:
    """Metrics of a trained checkpoint, or of the zero-shot baseline, on one pool."""
    split_spec = SplitSpec.load(Pathy.fluid(split))
    label_space = split_spec.label_space
    records = _read_split_records(split_spec)
    if pool == "source":
        eval_records = [r for r in records.get(split_spec.source_domain, []) if r.class_name in set(split_spec.known_classes)]
    else:
        eval_records = blend_targets(records, split_spec).unseal()
    out_dir = Path(out)

    if baseline == "zero-shot":
        encoder_backend = _make_backend(
            backend, _feature_dim(eval_records), label_space.known_classes, torch.float32, token_dim, backend_seed, checkpoint_ref
        )
        v = encode_records(eval_records, encoder_backend.image_encoder)
        classifier = build_zero_shot_classifier(encoder_backend, label_space.known_classes)
        predictions = zero_shot_baseline(v, classifier, threshold, eval_records, label_space)
        seed, backend_description, checkpoint_dir = backend_seed, encoder_backend.description, None
    else:
        if checkpoint is None:
            raise ValidationError("Evaluating a trained model needs --checkpoint.")
        checkpoint_path = Path(checkpoint)
        if not (checkpoint_path / "metadata.json").exists():
            checkpoint_path = latest_checkpoint(checkpoint_path) or checkpoint_path
        state = load_checkpoint(checkpoint_path)
        if state.label_space != label_space:
            raise LabelSpaceError(
                f"Checkpoint was trained on {list(state.label_space.known_classes)}, "
                f"split has known classes {list(label_space.known_classes)}."
            )
        dtype, _ = DTYPES[state.config.precision]
        v = encode_records(eval_records, state.backend.image_encoder).to(dtype)
        predictions = evaluate_features(state, v, eval_records)
        if export:
            export_embeddings(state, v, eval_records, out_dir / EMBEDDINGS_DIR)
        seed, backend_description, checkpoint_dir = state.config.seed, state.backend.description, str(checkpoint_path)

    reports = compute_domain_metrics(predictions)
    json_path, table_path = save_metrics(reports, out_dir)
    print(format_metrics_table(reports))

    report_paths = {"metrics": str(json_path), "metrics_table": str(table_path)}
    if export and baseline != "zero-shot":
        report_paths["embeddings"] = str(out_dir / EMBEDDINGS_DIR)
    RunManifest(
        command="eval",
        config={"pool": pool, "baseline": baseline, "threshold": threshold, "export_embeddings": export},
        split_file=str(Pathy.fluid(split).resolve()),
        seed=seed,
        backend=backend_description,
        checkpoint_dir=checkpoint_dir,
        report_paths=report_paths,
    ).save(out_dir / RUN_MANIFEST)
    return {pool_name: report.to_dict() for pool_name, report in reports.items()}


def cmd_params(
    config: str | None = None, feature_dim: int = 512, token_dim: int = 512
) -> pd.DataFrame:
    """Trainable parameter counts for the configured context length and the usual sweep."""
    cfg = load_config(Pathy.fluid(config)) if config else validate_config(None)
    lengths = sorted({cfg.context_length, *PARAM_SWEEP})
    table = pd.DataFrame(
        [
            {
                "m": m,
                "configured": "*" if m == cfg.context_length else "",
                "trainable_params": format_param_count(
                    count_model_params(
                        m, feature_dim, token_dim, cfg.hidden_width, cfg.separate_prompts, cfg.use_bias_net
                    )
                ),
            }
            for m in lengths
        ]
    )
    print(table.to_string(index=False))
    return table


def _add_backend_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backend",
        help="Frozen dual encoder: 'toy' needs no weights, 'clip' loads published CLIP weights.",
        choices=["toy", "clip"],
        default="toy",
    )
    parser.add_argument(
        "--token_dim", help="Token embedding dimension of the toy backend, defaults to the feature dimension.", type=int
    )
    parser.add_argument("--backend_seed", help="Seed of the toy backend's frozen weights.", default=0, type=int)
    parser.add_argument(
        "--checkpoint_ref",
        help=f"CLIP weights: one of {sorted(CLIP_REGISTRY)} or a checkpoint path.",
        default="ViT-B/16",
        type=str,
    )


# pylint: disable=missing-docstring
def main(arguments: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", help="Log debug messages.", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)

    split_parser = subparsers.add_parser("split", help="Create an open-set split file.")
    split_parser.add_argument(
        "--data_dir_path",
        help="""Dataset root laid out as domain/class/image, or a feature cache directory
        with index.json and features.bin.""",
        required=True,
        type=str,
    )
    split_parser.add_argument("--n_known", help="Number of known classes.", required=True, type=int)
    split_parser.add_argument("--source", help="Labelled source domain.", required=True, type=str)
    split_parser.add_argument("--targets", help="Unlabelled target domains.", required=True, nargs="+")
    split_parser.add_argument("--seed", help="Seed of the target pool shuffle.", default=0, type=int)
    split_parser.add_argument("--dataset_name", help="Name recorded in the split file.", default="", type=str)
    split_parser.add_argument("--out", help="Path of the split file to write.", required=True, type=str)

    train_parser = subparsers.add_parser("train", help="Train prompts and the bias network.")
    train_parser.add_argument("--config", help="YAML file with TrainConfig keys.", required=True, type=str)
    train_parser.add_argument("--split", help="Split file written by `cosmo split`.", required=True, type=str)
    train_parser.add_argument("--out", help="Run directory.", required=True, type=str)
    train_parser.add_argument("--seed", help="Overrides the config seed.", type=int)
    train_parser.add_argument(
        "--resume",
        help="Continue from the latest checkpoint in the run directory.",
        default=False,
        action=argparse.BooleanOptionalAction,
    )
    _add_backend_arguments(train_parser)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint or the zero-shot baseline.")
    eval_parser.add_argument("--split", help="Split file written by `cosmo split`.", required=True, type=str)
    eval_parser.add_argument("--out", help="Directory for metrics.json and metrics.txt.", required=True, type=str)
    eval_parser.add_argument(
        "--checkpoint", help="Checkpoint directory, or a run directory to use its latest checkpoint.", type=str
    )
    eval_parser.add_argument(
        "--pool",
        help="'targets' evaluates the blended targets, 'source' the known-class source images.",
        choices=["targets", "source"],
        default="targets",
    )
    eval_parser.add_argument(
        "--baseline",
        help="'zero-shot' evaluates fixed 'a {class}' prompts with a rejection threshold instead of a checkpoint.",
        choices=["none", "zero-shot"],
        default="none",
    )
    eval_parser.add_argument(
        "--threshold",
        help="Zero-shot baseline predicts unknown when the top probability is below this value.",
        default=DEFAULT_THRESHOLD,
        type=float,
    )
    eval_parser.add_argument(
        "--export_embeddings",
        help="Also write text and image embeddings in the feature cache format.",
        default=False,
        action=argparse.BooleanOptionalAction,
    )
    _add_backend_arguments(eval_parser)

    params_parser = subparsers.add_parser("params", help="Print trainable parameter counts.")
    params_parser.add_argument("--config", help="YAML file with TrainConfig keys.", type=str)
    params_parser.add_argument("--feature_dim", help="Image feature dimension d_v.", default=512, type=int)
    params_parser.add_argument("--token_dim", help="Token embedding dimension d_t.", default=512, type=int)

    args = parser.parse_args(arguments)
    set_verbosity(args.verbose)
    LOGGER.debug(f"Running with the following args: {args}")
    try:
        if args.command == "split":
            cmd_split(args.data_dir_path, args.n_known, args.source, args.targets, args.seed, args.out, args.dataset_name)
        elif args.command == "train":
            cmd_train(
                args.config,
                args.split,
                args.backend,
                args.out,
                args.seed,
                args.resume,
                args.token_dim,
                args.backend_seed,
                args.checkpoint_ref,
            )
        elif args.command == "eval":
            cmd_eval(
                args.split,
                args.out,
                args.checkpoint,
                args.pool,
                args.baseline,
                args.threshold,
                args.backend,
                args.token_dim,
                args.backend_seed,
                args.checkpoint_ref,
                args.export_embeddings,
            )
        else:
            cmd_params(args.config, args.feature_dim, args.token_dim)
    except ValidationError as e:
        LOGGER.error(f"Invalid input: {e}")
        return EXIT_VALIDATION
    except (CosmoError, OSError) as e:
        LOGGER.error(f"Command {args.command} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
