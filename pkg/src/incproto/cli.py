"""Experiment orchestration: prepare, train, eval, plot, ablate.

Every command takes ``--config experiment.yaml`` plus optional
``--set dotted.key=value`` overrides. Outputs land under the config's
output directory; reports are written per evaluation seed with a seed
aggregate next to them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .bundle import build_bundle, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import FeatureError, IncprotoError
from .evaluation import (
    aggregate_reports,
    load_report,
    run_finetune,
    run_incremental,
    write_report,
)
from .features import AudioFeatureStore, SyntheticFeatureStore, synthetic_manifests
from .plotting import accuracy_figure, save_figure
from .protocol import SessionSchedule, SplitManifest, build_schedule, load_manifest
from .training import train_base


def _resolve_cache_dir(config: ExperimentConfig) -> Path:
    env = os.environ.get("INCPROTO_CACHE")
    if env:
        return Path(env)
    if config.features.cache_dir:
        return Path(config.features.cache_dir)
    return Path(config.output_dir) / "features"


def _load_data(config: ExperimentConfig):
    """Feature store plus raw (base, incremental) manifests."""
    if config.dataset.kind == "synthetic":
        layout = config.dataset.layout()
        store = SyntheticFeatureStore(layout)
        base, incrementals = synthetic_manifests(layout)
        return store, base, incrementals
    manifests = config.dataset.manifest_config()
    store = AudioFeatureStore(
        manifests.audio_root, config.features.fbank(), _resolve_cache_dir(config)
    )
    base = load_manifest(manifests.base_manifest)
    incrementals = [load_manifest(p) for p in manifests.incremental_manifests]
    return store, base, incrementals


def _schedule_for_seed(
    config: ExperimentConfig,
    base: SplitManifest,
    incrementals: list[SplitManifest],
    seed: int,
) -> SessionSchedule:
    return build_schedule(
        base, incrementals, config.train.n_way, config.train.k_shot, seed=seed
    )


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(config: ExperimentConfig) -> int:
    store, base, incrementals = _load_data(config)
    if config.dataset.kind == "manifests":
        # Fail fast on missing/broken audio, filling the cache as we go.
        for manifest in [base, *incrementals]:
            for ref, _ in manifest.train + manifest.test:
                try:
                    store.get(ref)
                except FeatureError as exc:
                    raise FeatureError(f"prepare failed on {ref!r}: {exc}") from exc
    schedule = _schedule_for_seed(config, base, incrementals, config.train.seed)
    out = _out_dir(config)
    schedule_path = out / "schedule.json"
    schedule_path.write_text(json.dumps(schedule.to_dict(), indent=2, sort_keys=True) + "\n")
    n_classes = sum(s.n_classes for s in schedule.sessions)
    print(
        f"prepared {len(schedule.sessions)} sessions, {n_classes} classes, "
        f"schedule -> {schedule_path}"
    )
    return 0


def cmd_train(config: ExperimentConfig) -> int:
    store, base, incrementals = _load_data(config)
    schedule = _schedule_for_seed(config, base, incrementals, config.train.seed)
    base_session = schedule.sessions[0]

    bundle = build_bundle(
        config.model,
        list(base_session.label_space),
        config.train.seed,
        feature_fingerprint=store.fingerprint,
    )
    out = _out_dir(config)
    checkpoint_path = out / "checkpoint.pt"

    def periodic(b, iteration):
        save_checkpoint(
            b, checkpoint_path, config_snapshot=config.to_dict(), seed=config.train.seed
        )

    train_base(
        bundle,
        base_session.train_manifest,
        store,
        config.train,
        use_refiner=not config.ablation.no_refine,
        episodic=not config.ablation.no_episodic,
        log_path=out / "train_log.jsonl",
        checkpoint_callback=periodic if config.train.checkpoint_every else None,
    )
    save_checkpoint(
        bundle, checkpoint_path, config_snapshot=config.to_dict(), seed=config.train.seed
    )
    print(f"trained {config.train.max_iterations} iterations, checkpoint -> {checkpoint_path}")
    return 0


def _eval_one_seed(config_dict: dict, method: str, seed: int, checkpoint: str) -> dict:
    """Worker: evaluate one seed; fully rebuilt from plain picklable args."""
    from .config import config_from_dict

    config = config_from_dict(config_dict)
    store, base, incrementals = _load_data(config)
    schedule = _schedule_for_seed(config, base, incrementals, seed)
    bundle, _, _ = load_checkpoint(checkpoint)
    if method == "finetune":
        report = run_finetune(
            bundle,
            schedule,
            store,
            config.finetune,
            batch_size=config.evaluation.batch_size,
            config_snapshot=config.to_dict(),
            seed=seed,
        )
    else:
        report = run_incremental(
            bundle,
            schedule,
            store,
            use_refiner=not config.ablation.no_refine,
            carry=config.evaluation.carry,
            batch_size=config.evaluation.batch_size,
            config_snapshot=config.to_dict(),
            seed=seed,
        )
    return report.to_dict() | {
        "_meta": report.meta_dict(),
        "_started": report.started_at,
        "_finished": report.finished_at,
    }


def _experiment_id(config: ExperimentConfig, method: str) -> str:
    suffix = "" if method == "proposed" else f"-{method}"
    return f"{config.experiment}{suffix}"


def cmd_eval(config: ExperimentConfig, checkpoint: str | None = None) -> int:
    out = _out_dir(config)
    checkpoint = checkpoint or str(out / "checkpoint.pt")
    if not Path(checkpoint).exists():
        raise IncprotoError(f"checkpoint not found: {checkpoint} (run train first)")

    methods = (
        ["proposed", "finetune"]
        if config.evaluation.method == "both"
        else [config.evaluation.method]
    )
    for method in methods:
        exp_id = _experiment_id(config, method)
        seeds = list(config.evaluation.seeds)
        results: list[dict] = []
        if config.evaluation.parallel > 1:
            with ProcessPoolExecutor(max_workers=config.evaluation.parallel) as pool:
                futures = [
                    pool.submit(_eval_one_seed, config.to_dict(), method, s, checkpoint)
                    for s in seeds
                ]
                results = [f.result() for f in futures]
        else:
            results = [
                _eval_one_seed(config.to_dict(), method, s, checkpoint) for s in seeds
            ]

        reports = []
        for seed, payload in zip(seeds, results):
            meta = payload.pop("_meta")
            payload.pop("_started", None)
            payload.pop("_finished", None)
            report_dir = out / exp_id / str(seed)
            report_dir.mkdir(parents=True, exist_ok=True)
            report_path = report_dir / "report.json"
            report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
            (report_dir / "report.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
            reports.append(payload)
            accs = [s["accuracy"] for s in payload["sessions"]]
            print(
                f"[{exp_id}] seed={seed} aa={payload['aa']:.4f} pd={payload['pd']:.4f} "
                f"sessions={['%.3f' % a for a in accs]}"
            )

        aggregate = aggregate_reports(reports)
        agg_path = out / exp_id / "aggregate.json"
        agg_path.write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n")
        print(
            f"[{exp_id}] mean_aa={aggregate['mean_aa']:.4f} "
            f"mean_pd={aggregate['mean_pd']:.4f} -> {agg_path}"
        )
    return 0


def cmd_plot(report_paths: list[str], out_path: str) -> int:
    if not report_paths:
        raise IncprotoError("cmd_plot needs at least one report")
    reports = []
    for path in report_paths:
        try:
            reports.append(load_report(path))
        except (OSError, json.JSONDecodeError) as exc:
            raise IncprotoError(f"unreadable report {path}: {exc}") from exc
    fig = accuracy_figure(reports)
    save_figure(fig, out_path)
    print(f"plot -> {out_path}")
    return 0


def cmd_ablate(config: ExperimentConfig, no_refine: bool, no_episodic: bool) -> int:
    if not (no_refine or no_episodic):
        raise IncprotoError("ablate requires --no-refine and/or --no-episodic")
    config.ablation.no_refine = no_refine
    config.ablation.no_episodic = no_episodic
    tags = [t for t, on in (("no-refine", no_refine), ("no-episodic", no_episodic)) if on]
    suffix = "_".join(tags)
    config.experiment = f"{config.experiment}-{suffix}"
    config.output_dir = str(Path(config.output_dir) / f"ablate_{suffix}")
    rc = cmd_train(config)
    if rc != 0:
        return rc
    return cmd_eval(config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="incproto",
        description="Few-shot class-incremental audio classification experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY.PATH=VALUE",
            help="override a config key (repeatable)",
        )

    add_config_args(sub.add_parser("prepare", help="validate data, build caches and schedule"))
    add_config_args(sub.add_parser("train", help="train the base-session model"))
    p_eval = sub.add_parser("eval", help="run incremental evaluation over seeds")
    add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint path override")
    p_plot = sub.add_parser("plot", help="accuracy-vs-session plot from reports")
    p_plot.add_argument("reports", nargs="+", help="report.json / aggregate.json paths")
    p_plot.add_argument("--out", required=True, help="output image path")
    p_ablate = sub.add_parser("ablate", help="train+eval an ablation variant")
    add_config_args(p_ablate)
    p_ablate.add_argument("--no-refine", action="store_true", help="bypass refinement")
    p_ablate.add_argument(
        "--no-episodic", action="store_true", help="plain minibatch base training"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args.reports, args.out)
        config = load_config(args.config, args.overrides)
        if args.command == "prepare":
            return cmd_prepare(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(config, args.no_refine, args.no_episodic)
        raise IncprotoError(f"unknown command {args.command!r}")
    except IncprotoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
