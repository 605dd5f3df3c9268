"""Command-line entry point chaining the full pipeline.

One subcommand per stage: synthesize data, train the two blocks, generate
views, and run the evaluations. Every run writes a ``runspec.txt`` with the
fully resolved configuration so any numeric output can be reproduced, and
the output directory is guarded by a lock file while a command runs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from filelock import FileLock
from PIL import Image

from . import __version__
from .data import (
    DatasetManifest,
    ManifestRecord,
    denormalize_image,
    generate_pairs,
    load_samples,
    read_manifest,
    split_train_test,
    validate_manifest,
    write_manifest,
)
from .evaluation import (
    ClassifierConfig,
    average_test_error,
    export_embeddings,
    generate_class_corpus,
    low_shot_eval,
    read_embeddings_csv,
    render_projection,
    silhouette,
    write_embeddings_csv,
)
from .model import describe, load_checkpoint
from .synth import synth_generate
from .training import (
    TrainConfig,
    extract_embeddings,
    load_embedding_map,
    save_embedding_map,
    train_predictor,
    train_vanilla,
)
from .tsne import tsne


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def _read_config_file(path: str | Path) -> dict:
    """Plain key=value lines; '#' starts a comment."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed config line: {line!r}")
        out[key.strip()] = _coerce(value.strip())
    return out


def _resolve_train_config(args) -> TrainConfig:
    """Defaults, then config file, then --set overrides, then direct flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(_read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _coerce(value.strip())
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "adam_betas" in values and isinstance(values["adam_betas"], str):
        values["adam_betas"] = tuple(float(v) for v in values["adam_betas"].split(":"))
    config = TrainConfig(**values)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "loss", None):
        config.loss_mode = args.loss
    config.validate()
    return config


def _write_runspec(out_dir: Path, args, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"version": __version__}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        resolved[key] = value
    for key, value in sorted((extra or {}).items()):
        resolved[key] = value
    lines = [f"{k}={v}" for k, v in resolved.items()]
    path = out_dir / "runspec.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _load_predictor(path):
    model, meta = load_checkpoint(path)
    if model.kind != "predictor":
        raise ValueError(f"{path} is a {model.kind} checkpoint, expected a predictor")
    return model, meta


def _build_pairs(args):
    manifest = read_manifest(args.manifest)
    validate_manifest(manifest)
    samples = load_samples(manifest)
    pairs = generate_pairs(
        samples,
        max_delta_deg=args.max_delta_deg,
        cross_regime=args.cross_regime,
        angular_step_deg=manifest.angular_step_deg,
    )
    return manifest, samples, pairs


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth_data(args) -> None:
    manifest = synth_generate(args.classes, args.views, args.regimes, args.seed, args.out)
    _write_runspec(Path(args.out), args, {"records": len(manifest.records)})
    print(f"wrote {len(manifest.records)} views under {args.out}")


def _cmd_train_vanilla(args) -> None:
    out = Path(args.out)
    config = _resolve_train_config(args)
    manifest = read_manifest(args.manifest)
    validate_manifest(manifest)
    samples = load_samples(manifest)
    _write_runspec(out, args, {f"train.{k}": v for k, v in asdict(config).items()})
    model, run = train_vanilla(
        samples, config, log_path=out / "train_vanilla.log", checkpoint_dir=out
    )
    final = run.epoch_records[-1]
    print(f"trained on {len(samples)} views for {len(run.epoch_records)} epochs")
    print(f"final reconstruction mse {final.output_mse:.6e}")
    print(f"checkpoint {run.checkpoint_path}")


def _cmd_extract_embeddings(args) -> None:
    out = Path(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    validate_manifest(manifest)
    samples = load_samples(manifest)
    embeddings = extract_embeddings(model, samples)
    path = save_embedding_map(embeddings, out / "embeddings.npz")
    _write_runspec(out, args, {"embeddings": len(embeddings)})
    print(f"wrote {len(embeddings)} embeddings to {path}")


def _cmd_train_predictor(args) -> None:
    out = Path(args.out)
    config = _resolve_train_config(args)
    _, _, pairs = _build_pairs(args)
    train, test = split_train_test(pairs, args.test_fraction, args.split_seed)
    embeddings = load_embedding_map(args.embeddings)
    _write_runspec(
        out,
        args,
        {
            **{f"train.{k}": v for k, v in asdict(config).items()},
            "pairs.train": len(train),
            "pairs.test": len(test),
        },
    )
    model, run = train_predictor(
        train,
        embeddings,
        config,
        val_pairs=test,
        log_path=out / "train_predictor.log",
        checkpoint_dir=out,
    )
    final = run.epoch_records[-1]
    print(f"trained on {len(train)} pairs ({len(test)} held out) for {len(run.epoch_records)} epochs")
    print(f"final train total mse {final.total_mse:.6e}, val total mse {final.val_total_mse:.6e}")
    print(f"checkpoint {run.checkpoint_path}")


def _cmd_generate(args) -> None:
    out = Path(args.out)
    model, _ = _load_predictor(args.checkpoint)
    manifest = read_manifest(args.manifest)
    samples = load_samples(manifest)
    seeds = [
        s
        for s in samples
        if s.class_id == args.class_id
        and s.azimuth_deg == args.input_azimuth
        and s.day_night == args.input_day_night
    ]
    if not seeds:
        raise ValueError(
            f"no view with class {args.class_id}, azimuth {args.input_azimuth}, "
            f"regime {args.input_day_night} in the manifest"
        )
    step = manifest.angular_step_deg
    target_dn = args.target_day_night if args.target_day_night is not None else args.input_day_night
    poses = [(i * step, target_dn) for i in range(int(round(360 / step)))]
    generated = generate_class_corpus(model, seeds[:1], poses)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in generated:
        name = f"gen_az{int(round(sample.azimuth_deg * 10)):04d}_{'n' if sample.day_night else 'd'}.png"
        Image.fromarray(denormalize_image(sample.image), mode="L").save(out / name)
        records.append(
            ManifestRecord(
                path=name,
                class_id=sample.class_id,
                azimuth_deg=sample.azimuth_deg,
                day_night=sample.day_night,
                range_m=sample.range_m,
            )
        )
    write_manifest(
        DatasetManifest(records=records, angular_step_deg=step, root=out, meta={"generated": "1"}),
        out / "manifest.txt",
    )
    _write_runspec(out, args, {"generated": len(generated)})
    print(f"wrote {len(generated)} generated views under {out}")


def _cmd_evaluate(args) -> None:
    out = Path(args.out)
    model, meta = _load_predictor(args.checkpoint)
    _, _, pairs = _build_pairs(args)
    _, test = split_train_test(pairs, args.test_fraction, args.split_seed)
    embeddings = load_embedding_map(args.embeddings)
    report = average_test_error(
        model,
        test,
        embeddings,
        metadata={
            "checkpoint": str(args.checkpoint),
            "checkpoint_seed": str(meta["seed"]),
            "loss_mode": str(meta["extra"].get("loss_mode", "")),
        },
    )
    text_path, csv_path = report.write(out)
    _write_runspec(out, args, {"pairs.test": report.n_pairs})
    print(report.to_text())
    print(f"wrote {text_path} and {csv_path}")


def _cmd_low_shot(args) -> None:
    out = Path(args.out)
    model, _ = _load_predictor(args.checkpoint)
    manifest = read_manifest(args.manifest)
    samples = load_samples(manifest)
    class_samples = sorted(
        (s for s in samples if s.class_id == args.class_id), key=lambda s: s.key()
    )
    if not class_samples:
        raise ValueError(f"class {args.class_id} not present in the manifest")
    regimes = sorted({s.day_night for s in class_samples})
    step = manifest.angular_step_deg
    views = int(round(360 / step))
    generated = []
    for dn in regimes:
        seeds = [s for s in class_samples if s.day_night == dn][:1]
        poses = [(i * step, dn) for i in range(views)]
        generated.extend(generate_class_corpus(model, seeds, poses))
    result = low_shot_eval(
        samples,
        args.class_id,
        generated,
        ClassifierConfig(epochs=args.classifier_epochs),
        seed=args.seed,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion_substituted.txt").write_text(result.confusion_substituted.to_text())
    (out / "confusion_all_real.txt").write_text(result.confusion_all_real.to_text())
    summary = (
        f"substituted_class={args.class_id}\n"
        f"accuracy_substituted={result.accuracy_substituted:.4f}\n"
        f"accuracy_all_real={result.accuracy_all_real:.4f}\n"
        f"substituted_recall={result.confusion_substituted.recall(args.class_id):.4f}\n"
    )
    (out / "low_shot.txt").write_text(summary)
    _write_runspec(out, args, {"generated": len(generated)})
    print(summary)


def _cmd_embed_export(args) -> None:
    out = Path(args.out)
    model, _ = _load_predictor(args.checkpoint)
    manifest = read_manifest(args.manifest)
    samples = load_samples(manifest)
    offsets = [float(v) for v in args.offsets.split(",")] if args.offsets else [0.0]
    records = export_embeddings(model, samples, pose_offsets_deg=offsets)
    path = write_embeddings_csv(records, out / "embeddings.csv")
    _write_runspec(out, args, {"records": len(records)})
    print(f"wrote {len(records)} embedding records to {path}")


def _cmd_project(args) -> None:
    out = Path(args.out)
    records = read_embeddings_csv(args.embeddings_csv)
    out.mkdir(parents=True, exist_ok=True)
    summary_lines = []
    for stage in ("pre_fusion", "post_fusion"):
        stage_records = [r for r in records if r.stage == stage]
        if not stage_records:
            continue
        x = np.stack([r.vector for r in stage_records])
        result = tsne(x, perplexity=args.perplexity, n_iter=args.iterations, seed=args.seed)
        points_path = out / f"tsne_{stage}.csv"
        with open(points_path, "w", encoding="utf-8") as fh:
            fh.write("class_id,day_night,x,y\n")
            for r, (px, py) in zip(stage_records, result.points):
                fh.write(f"{r.class_id},{r.day_night},{px:.8e},{py:.8e}\n")
        render_projection(
            result.points,
            [r.class_id for r in stage_records],
            out / f"tsne_{stage}.png",
            day_night=[r.day_night for r in stage_records],
            title=stage,
        )
        score = silhouette(stage_records, label_key="class_day_night")
        summary_lines.append(f"{stage}: silhouette(class x day_night)={score:.4f}")
    (out / "projection_summary.txt").write_text("\n".join(summary_lines) + "\n")
    _write_runspec(out, args)
    print("\n".join(summary_lines))


def _cmd_describe(args) -> None:
    model, meta = load_checkpoint(args.checkpoint)
    print(f"kind={meta['kind']} seed={meta['seed']} version={meta['version']}")
    print(describe(model))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irview",
        description="Novel-view prediction pipeline for infrared-style imagery.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, manifest=True, checkpoint=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="random seed")
        if manifest:
            p.add_argument("--manifest", required=True, help="corpus manifest file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")

    def add_train_flags(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (repeatable)")

    def add_pair_flags(p):
        p.add_argument("--max-delta-deg", type=float, default=360.0, dest="max_delta_deg")
        p.add_argument("--cross-regime", action="store_true", dest="cross_regime")
        p.add_argument("--test-fraction", type=float, default=0.25, dest="test_fraction")
        p.add_argument("--split-seed", type=int, default=0, dest="split_seed")

    p = sub.add_parser("synth-data", help="render the synthetic corpus")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--views", type=int, default=72)
    p.add_argument("--regimes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train-vanilla", help="train the plain autoencoder")
    add_common(p)
    add_train_flags(p)
    p.set_defaults(func=_cmd_train_vanilla)

    p = sub.add_parser("extract-embeddings", help="freeze stage 1 and export reference embeddings")
    add_common(p, checkpoint=True)
    p.set_defaults(func=_cmd_extract_embeddings)

    p = sub.add_parser("train-predictor", help="train the pose-conditioned predictor")
    add_common(p)
    add_train_flags(p)
    add_pair_flags(p)
    p.add_argument("--embeddings", required=True, help="embeddings .npz from extract-embeddings")
    p.add_argument("--loss", choices=["mse_only", "embedding_plus_mse"], default=None)
    p.set_defaults(func=_cmd_train_predictor)

    p = sub.add_parser("generate", help="predict a full circle of views from one image")
    add_common(p, checkpoint=True)
    p.add_argument("--class-id", type=int, required=True, dest="class_id")
    p.add_argument("--input-azimuth", type=float, default=0.0, dest="input_azimuth")
    p.add_argument("--input-day-night", type=int, default=0, dest="input_day_night")
    p.add_argument("--target-day-night", type=int, default=None, dest="target_day_night")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="average test error report")
    add_common(p, checkpoint=True)
    add_pair_flags(p)
    p.add_argument("--embeddings", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("low-shot", help="classification with one class substituted by generated views")
    add_common(p, checkpoint=True)
    p.add_argument("--class-id", type=int, required=True, dest="class_id")
    p.add_argument("--classifier-epochs", type=int, default=30, dest="classifier_epochs")
    p.set_defaults(func=_cmd_low_shot)

    p = sub.add_parser("embed-export", help="export pre/post-fusion embeddings to CSV")
    add_common(p, checkpoint=True)
    p.add_argument("--offsets", default="0", help="comma-separated pose offsets in degrees")
    p.set_defaults(func=_cmd_embed_export)

    p = sub.add_parser("project", help="t-SNE projection of exported embeddings")
    p.add_argument("--embeddings-csv", required=True, dest="embeddings_csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("describe", help="print checkpoint layer shapes and parameter count")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_describe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = 0
    out = getattr(args, "out", None)
    try:
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            lock = FileLock(str(Path(out) / ".irview.lock"))
            with lock.acquire(timeout=300):
                args.func(args)
        else:
            args.func(args)
    except Exception as exc:  # surface a diagnostic, not a traceback
        print(f"irview: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
