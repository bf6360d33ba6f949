"""Command-line orchestration: generate / train / infer / evaluate / report.

The CLI is a thin shell over the library modules; no numerical logic lives
here. Every run writes its outputs under `output_dir/run-<digest>/` along
with a manifest of input digests sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .adaptation import ModelState, init_model
from .config import (
    ConfigError,
    RunConfig,
    config_digest,
    load_config,
    to_canonical_dict,
)
from .dataset import (
    DatasetError,
    DatasetManifest,
    load_image_record,
    load_manifest,
    split_manifest,
)
from .features import BackboneSpec, FeatureExtractor
from .inference import AnomalyScorer, write_map_outputs
from .metrics import MetricsReport, evaluate, format_table
from .synthesis import (
    POOL_MANIFEST,
    AugmentationPool,
    DiffusionClient,
    MaskParams,
    SynthesisError,
    generate_pool,
)
from .training import LossConfig, TrainConfig, TrainingAborted, train

LOGGER = logging.getLogger(__name__)

COMMANDS = ("generate", "train", "infer", "evaluate", "report")


def validate_config(config_path, overrides=None) -> RunConfig:
    """Parse + validate a config file, returning the normalized RunConfig."""
    cfg, _ = load_config(config_path, overrides)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadfusion",
        description="Pavement-defect anomaly detection pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override (repeatable)",
        )
        p.add_argument(
            "--dataset-adapter",
            default=None,
            help="dataset layout adapter (shortcut for --set dataset.adapter=...)",
        )
        p.add_argument("--jobs", type=int, default=None, help="worker parallelism")
        p.add_argument(
            "--seed", type=int, default=None,
            help="override dataset/synthesis/train seeds",
        )
        p.add_argument("--force", action="store_true",
                       help="proceed despite config digest mismatch")
        p.add_argument("--emit-overlays", action="store_true",
                       help="write heatmap overlay images")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to compare")
    return parser


def _resolve_config(args) -> tuple[RunConfig, dict, str]:
    overrides = list(args.overrides)
    if args.dataset_adapter:
        overrides.append(f"dataset.adapter={args.dataset_adapter}")
    if args.seed is not None:
        overrides += [
            f"dataset.seed={args.seed}",
            f"synthesis.seed={args.seed}",
            f"train.seed={args.seed}",
        ]
    cfg, provenance = load_config(args.config, overrides)
    return cfg, provenance, config_digest(cfg)


def _run_dir(cfg: RunConfig, digest: str) -> Path:
    run_dir = Path(cfg.output_dir) / f"run-{digest[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_echo(run_dir: Path, cfg: RunConfig, provenance: dict, digest: str):
    payload = {
        "config": to_canonical_dict(cfg),
        "provenance": provenance,
        "digest": digest,
    }
    (run_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _update_run_manifest(run_dir: Path, **digests):
    path = run_dir / "run_manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update({k: v for k, v in digests.items() if v is not None})
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _dataset_manifest(cfg: RunConfig, run_dir: Path) -> DatasetManifest:
    """Load or build the split manifest for this run (deterministic)."""
    if cfg.dataset.manifest:
        manifest = DatasetManifest.load(cfg.dataset.manifest)
        if all(e.split for e in manifest.entries):
            return manifest
    elif cfg.dataset.root:
        manifest = load_manifest(cfg.dataset.root, cfg.dataset.adapter)
    else:
        raise ConfigError("set dataset.root or dataset.manifest in the config")
    manifest = split_manifest(manifest, cfg.dataset.ratios, cfg.dataset.seed)
    manifest.save(run_dir / "manifest.jsonl")
    return manifest


def _backbone_spec(cfg: RunConfig) -> BackboneSpec:
    return BackboneSpec(
        architecture=cfg.model.architecture,
        levels=tuple(cfg.model.levels),
        weights_id=cfg.model.weights_id,
    )


def _extractor(cfg: RunConfig) -> FeatureExtractor:
    return FeatureExtractor(
        _backbone_spec(cfg),
        input_size=cfg.model.input_size,
        patchsize=cfg.model.patchsize,
    )


def _load_checkpoint(run_dir: Path, digest: str, force: bool) -> tuple[ModelState, bool]:
    ckpt_dir = run_dir / "checkpoints"
    path = ckpt_dir / "best.ckpt"
    if not path.exists():
        path = ckpt_dir / "last.ckpt"
    if not path.exists():
        raise ConfigError(
            f"no checkpoint under {ckpt_dir}; run the train command first"
        )
    model = ModelState.load(path)
    mismatched = model.config_digest != digest
    if mismatched and not force:
        raise ConfigError(
            f"checkpoint config digest {model.config_digest[:12]} does not match "
            f"current config {digest[:12]}; re-train or pass --force"
        )
    return model, mismatched


def _cmd_generate(cfg: RunConfig, args, run_dir: Path, digest: str) -> int:
    manifest = _dataset_manifest(cfg, run_dir)
    s = cfg.synthesis
    pool = generate_pool(
        manifest,
        run_dir / "pool",
        count_per_image=s.count_per_image,
        backend=s.backend,
        prompt_bank=tuple(s.prompts),
        negative_prompt=s.negative_prompt,
        mask_kind=s.mask_kind,
        mask_params=MaskParams(s.mask_min_area, s.mask_max_area),
        base_seed=s.seed,
        client=DiffusionClient(s.endpoint, s.timeout_s, s.retries),
        jobs=args.jobs if args.jobs else (os.cpu_count() or 1),
    )
    _update_run_manifest(
        run_dir,
        config_digest=digest,
        dataset_manifest_digest=manifest.digest(),
        pool_digest=pool.digest(),
    )
    print(f"generated {len(pool.entries)} anomalous images under {run_dir / 'pool'}")
    return 0


def _cmd_train(cfg: RunConfig, args, run_dir: Path, digest: str) -> int:
    manifest = _dataset_manifest(cfg, run_dir)
    pool_path = run_dir / "pool" / POOL_MANIFEST
    if not pool_path.exists():
        raise SynthesisError(
            f"no augmentation pool at {pool_path}; run the generate command first"
        )
    pool = AugmentationPool.load(pool_path)
    extractor = _extractor(cfg)
    model = init_model(
        _backbone_spec(cfg),
        seed=cfg.train.seed,
        hidden_width=cfg.model.hidden_width,
        config_digest=digest,
    )
    t = cfg.train
    model, stats = train(
        manifest,
        pool,
        model,
        TrainConfig(
            lr_adaptors=t.lr_adaptors,
            lr_discriminator=t.lr_discriminator,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            epochs=t.epochs,
            seed=t.seed,
        ),
        LossConfig(
            tau_plus=t.tau_plus,
            tau_minus=t.tau_minus,
            kind=t.loss,
            anomalous_masking=t.anomalous_masking,
        ),
        extractor,
        log_path=run_dir / "training_log.jsonl",
        checkpoint_dir=run_dir / "checkpoints",
    )
    _update_run_manifest(
        run_dir,
        config_digest=digest,
        dataset_manifest_digest=manifest.digest(),
        pool_digest=pool.digest(),
        checkpoint_digest=model.digest(),
    )
    print(
        f"trained {len(stats)} epoch(s); final loss {stats[-1].mean_loss:.5f}; "
        f"checkpoints under {run_dir / 'checkpoints'}"
    )
    return 0


def _cmd_infer(cfg: RunConfig, args, run_dir: Path, digest: str) -> int:
    manifest = _dataset_manifest(cfg, run_dir)
    model, _ = _load_checkpoint(run_dir, digest, args.force)
    scorer = AnomalyScorer(
        model,
        _extractor(cfg),
        sigma=cfg.inference.sigma,
        image_score_from=cfg.inference.image_score_from,
    )
    maps_dir = run_dir / "maps"
    entries = manifest.split("test")
    if not entries:
        raise DatasetError("manifest has no test split to infer on")
    with open(run_dir / "scores.tsv", "w") as scores_file:
        for entry in entries:
            record = load_image_record(entry, manifest.root)
            amap = scorer.infer_record(record)
            write_map_outputs(
                amap, record.image, maps_dir, scores_file,
                emit_overlay=args.emit_overlays,
            )
    _update_run_manifest(run_dir, checkpoint_digest=model.digest())
    print(f"scored {len(entries)} images; maps under {maps_dir}")
    return 0


def _cmd_evaluate(cfg: RunConfig, args, run_dir: Path, digest: str) -> int:
    manifest = _dataset_manifest(cfg, run_dir)
    model, mismatched = _load_checkpoint(run_dir, digest, args.force)
    scorer = AnomalyScorer(
        model,
        _extractor(cfg),
        sigma=cfg.inference.sigma,
        image_score_from=cfg.inference.image_score_from,
    )
    flags = ("config-mismatch",) if mismatched else ()
    report = evaluate(scorer, manifest, config_digest=digest, flags=flags)
    (run_dir / "report.json").write_text(report.to_json())
    (run_dir / "report.txt").write_text(report.to_text())
    if args.emit_overlays:
        from .inference import save_overlay

        for entry in manifest.split("test"):
            record = load_image_record(entry, manifest.root)
            amap = scorer.infer_record(record)
            save_overlay(
                record.image, amap.scores,
                run_dir / "overlays" / f"{entry.id}_overlay.png",
            )
    _update_run_manifest(
        run_dir,
        config_digest=digest,
        dataset_manifest_digest=manifest.digest(),
        checkpoint_digest=model.digest(),
    )
    print(format_table([(run_dir.name, report)]))
    return 0


def _cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        path = Path(run) / "report.json"
        if not path.exists():
            raise ConfigError(f"no report.json under {run}; run evaluate first")
        rows.append((Path(run).name, MetricsReport.from_json(path.read_text())))
    if not rows:
        raise ConfigError("report needs at least one run directory")
    print(format_table(rows))
    return 0


_DISPATCH = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(message)s"
    )
    args = build_parser().parse_args(argv)
    if args.jobs is not None:
        if args.jobs < 1:
            print("error: --jobs must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.jobs)
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg, provenance, digest = _resolve_config(args)
        run_dir = _run_dir(cfg, digest)
        _write_echo(run_dir, cfg, provenance, digest)
        return _DISPATCH[args.command](cfg, args, run_dir, digest)
    except (ConfigError, DatasetError, SynthesisError, TrainingAborted) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
