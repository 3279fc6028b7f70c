"""Command line for the whole pipeline: corpus generation, pretraining,
fine-tuning, estimator fitting, prediction, evaluation, gradient
verification, and ablation sweeps.

Every run writes a JSON-lines log next to its primary artifact (or to
--log); anything printed to the console is also in that log. Usage
errors exit 2, runtime failures exit 1 with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Sequence

import numpy as np

from .checkpoint import load_model, load_pipeline, save_estimator, save_model
from .config import Settings, build_settings, config_help, settings_from_file
from .data import (
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_image,
    load_images,
    load_manifest,
)
from .elm import fit_age_estimator, predict_age
from .errors import ConfigError, GraphAgeError
from .gradcheck import run_gradcheck
from .metrics import cumulative_score, epsilon_error, linear_probe, mae
from .training import extract_embeddings, init_model, run_finetune, run_pretrain

__all__ = ["main"]


def _json_safe(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON-serializable: {type(value).__name__}")


class JsonlLog:
    """Append-only JSON-lines sink; records carry no timestamps so two
    identical runs produce identical logs."""

    def __init__(self, path: str):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        self.path = path
        self.fh = open(path, "w")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True, default=_json_safe) + "\n")

    def __enter__(self) -> "JsonlLog":
        return self

    def __exit__(self, *exc) -> None:
        self.fh.close()


def _settings_for(args: argparse.Namespace) -> Settings:
    if getattr(args, "config", None):
        return settings_from_file(args.config)
    return build_settings()


def _flat_settings(settings: Settings) -> dict:
    return {
        key: list(value) if isinstance(value, tuple) else value
        for key, value in settings.as_flat_dict().items()
    }


def _check_image_size(image: np.ndarray, settings: Settings) -> None:
    want = (settings.model.image_size, settings.model.image_size, settings.model.channels)
    if image.shape != want:
        raise ConfigError(
            f"corpus images are {image.shape}, config expects {want}; "
            "adjust model.image_size/model.channels"
        )


def _train_images(manifest: DatasetManifest) -> list[np.ndarray]:
    return load_images(manifest, manifest.train_idx)


def _format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [
        max(len(str(headers[i])), max((len(r[i]) for r in rows), default=0))
        for i in range(len(headers))
    ]
    head = "  ".join(str(h).ljust(w) for h, w in zip(headers, widths))
    rule = "  ".join("-" * w for w in widths)
    body = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join([head, rule] + body)


# ----------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace, log: JsonlLog) -> int:
    spec = SyntheticSpec(count=args.count, size=args.size, seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    log.write(
        {
            "event": "synth",
            "out": args.out,
            "count": spec.count,
            "size": spec.size,
            "seed": spec.seed,
            "n_train": int(manifest.train_idx.size),
            "n_test": int(manifest.test_idx.size),
        }
    )
    print(f"wrote {spec.count} images ({spec.size}x{spec.size}) to {args.out}")
    return 0


def cmd_pretrain(args: argparse.Namespace, log: JsonlLog) -> int:
    settings = _settings_for(args)
    manifest = load_manifest(args.data)
    images = _train_images(manifest)
    _check_image_size(images[0], settings)
    log.write({"event": "config", "settings": _flat_settings(settings)})
    model = init_model(settings.model, seed=settings.train.seed)
    _, reports = run_pretrain(
        images, model, settings.train, settings.aug, settings.loss, log_fh=log.fh
    )
    save_model(
        model,
        args.out,
        extra={"stage": "pretrain", "settings": _flat_settings(settings),
               "steps": len(reports)},
    )
    last = reports[-1]
    log.write(
        {
            "event": "summary",
            "steps": len(reports),
            "L_rc": last.l_rc,
            "L_cl": last.l_cl,
            "L_MC": last.l_mc,
            "out": args.out,
        }
    )
    print(
        f"pretrained {len(reports)} steps on {len(images)} images; "
        f"final L_MC {last.l_mc:.4f} -> {args.out}"
    )
    return 0


def cmd_finetune(args: argparse.Namespace, log: JsonlLog) -> int:
    settings = _settings_for(args)
    model, _ = load_model(args.ckpt)
    manifest = load_manifest(args.data)
    images = _train_images(manifest)
    _check_image_size(images[0], settings)
    ages = manifest.ages[manifest.train_idx]
    log.write({"event": "config", "settings": _flat_settings(settings)})
    head, losses = run_finetune(images, ages, model, settings.train, log_fh=log.fh)
    head_arrays = {
        "head.w1": head.w1.data, "head.b1": head.b1.data,
        "head.w2": head.w2.data, "head.b2": head.b2.data,
    }
    save_model(
        model,
        args.out,
        extra={"stage": "finetune", "settings": _flat_settings(settings),
               "steps": len(losses)},
        extra_arrays=head_arrays,
    )
    log.write({"event": "summary", "steps": len(losses), "loss": losses[-1],
               "out": args.out})
    print(f"fine-tuned {len(losses)} steps; final L1 {losses[-1]:.4f} -> {args.out}")
    return 0


def cmd_fit_elm(args: argparse.Namespace, log: JsonlLog) -> int:
    settings = _settings_for(args)
    model, _ = load_model(args.ckpt)
    manifest = load_manifest(args.data)
    images = _train_images(manifest)
    _check_image_size(images[0], settings)
    ages = manifest.ages[manifest.train_idx]
    log.write({"event": "config", "settings": _flat_settings(settings)})
    feats = extract_embeddings(images, model)
    estimator = fit_age_estimator(feats, ages, settings.elm)
    save_estimator(
        estimator,
        args.out,
        extra={"stage": "fit-elm", "settings": _flat_settings(settings)},
        embedder=model,
    )
    train_mae = mae(ages, predict_age(estimator, feats))
    log.write(
        {
            "event": "fit_elm",
            "lam": estimator.lam,
            "hidden": estimator.hidden,
            "groups": len(estimator.regressors),
            "train_mae": train_mae,
            "n": int(ages.size),
            "out": args.out,
        }
    )
    print(
        f"fitted estimator (lam={estimator.lam:g}, hidden={estimator.hidden}); "
        f"train MAE {train_mae:.3f} -> {args.out}"
    )
    return 0


def cmd_predict(args: argparse.Namespace, log: JsonlLog) -> int:
    model, estimator, _ = load_pipeline(args.est)
    image = load_image(args.image)
    feats = extract_embeddings([image], model)
    age = float(predict_age(estimator, feats)[0])
    result = {"image": args.image, "age": age}
    log.write({"event": "predict", **result})
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_evaluate(args: argparse.Namespace, log: JsonlLog) -> int:
    model, estimator, _ = load_pipeline(args.est)
    manifest = load_manifest(args.data)
    idx = manifest.test_idx
    images = load_images(manifest, idx)
    feats = extract_embeddings(images, model)
    ages = manifest.ages[idx]
    preds = predict_age(estimator, feats)
    result = {
        "mae": float(mae(ages, preds)),
        "cs": {str(level): float(cumulative_score(ages, preds, level))
               for level in range(11)},
        "n": int(idx.size),
    }
    records = [manifest.records[int(i)] for i in idx]
    if records and all(r.mu is not None and r.sigma is not None for r in records):
        mu = np.array([r.mu for r in records])
        sigma = np.array([r.sigma for r in records])
        result["epsilon_error"] = float(epsilon_error(preds, mu, sigma))
    log.write({"event": "evaluate", **result})
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_gradcheck(args: argparse.Namespace, log: JsonlLog) -> int:
    report = run_gradcheck(seeds=args.seeds)
    for result in report.results:
        log.write({"event": "check", "name": result.name,
                   "max_rel_error": result.max_rel_error})
    log.write(
        {
            "event": "summary",
            "worst": report.worst,
            "tolerance": report.tolerance,
            "passed": report.passed,
        }
    )
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


# ----------------------------------------------------------------------
# ablations


def _probe_after_pretrain(
    images: list[np.ndarray],
    ages: np.ndarray,
    settings: Settings,
    epochs: int,
    seed: int,
    mask_ratio: float,
    drop_ratio: float,
    mu: float,
) -> float:
    """Pretrain one arm from scratch and score its frozen embeddings
    with a held-out ridge probe."""
    model = init_model(settings.model, seed=seed)
    train_cfg = dataclasses.replace(settings.train, seed=seed, epochs=epochs)
    aug = dataclasses.replace(settings.aug, mask_ratio=mask_ratio, drop_ratio=drop_ratio)
    weights = dataclasses.replace(settings.loss, mu=mu)
    run_pretrain(images, model, train_cfg, aug, weights)
    feats = extract_embeddings(images, model)
    return linear_probe(feats, ages, lam=100.0)


def _augmentation_arms(axis: str, settings: Settings) -> list[tuple[str, float, float, float]]:
    mask = settings.aug.mask_ratio
    drop = settings.aug.drop_ratio
    mu = settings.loss.mu
    if axis == "mask":
        return [
            ("mask only", mask, 0.0, mu),
            ("drop only", 0.0, drop, mu),
            ("mask+drop", mask, drop, mu),
            ("ratio 0.25", 0.25, drop, mu),
            ("ratio 0.95", 0.95, drop, mu),
        ]
    if axis == "drop":
        return [(f"drop {d:.1f}", mask, d, mu) for d in (0.0, 0.1, 0.2, 0.4)]
    # loss: reconstruction-only, joint, contrastive-only
    return [(f"mu {m:.1f}", mask, drop, m) for m in (1.0, 0.5, 0.0)]


def cmd_ablate(args: argparse.Namespace, log: JsonlLog) -> int:
    settings = _settings_for(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError(f"no seeds in {args.seeds!r}")
    manifest = load_manifest(args.data)
    train_idx = manifest.train_idx[: args.limit] if args.limit else manifest.train_idx
    images = load_images(manifest, train_idx)
    _check_image_size(images[0], settings)
    ages = manifest.ages[train_idx]
    log.write({"event": "config", "settings": _flat_settings(settings),
               "axis": args.axis, "seeds": seeds, "epochs": args.epochs,
               "n_images": len(images)})

    seed_cols = [f"seed {s}" for s in seeds]
    if args.axis in ("mask", "drop", "loss"):
        headers = ["arm", "mask", "drop", "mu", *seed_cols, "mean"]
        rows = []
        for label, mask_ratio, drop_ratio, mu in _augmentation_arms(args.axis, settings):
            maes = []
            for seed in seeds:
                value = _probe_after_pretrain(
                    images, ages, settings, args.epochs, seed, mask_ratio,
                    drop_ratio, mu,
                )
                log.write(
                    {
                        "event": "ablate",
                        "axis": args.axis,
                        "arm": label,
                        "seed": seed,
                        "mask_ratio": mask_ratio,
                        "drop_ratio": drop_ratio,
                        "mu": mu,
                        "probe_mae": value,
                    }
                )
                maes.append(value)
            rows.append(
                [label, f"{mask_ratio:.2f}", f"{drop_ratio:.2f}", f"{mu:.2f}"]
                + [f"{v:.3f}" for v in maes]
                + [f"{float(np.mean(maes)):.3f}"]
            )
        table = _format_table(headers, rows)
    else:  # elm: estimator variants over one pretrained embedding per seed
        test_idx = manifest.test_idx[: args.limit] if args.limit else manifest.test_idx
        test_images = load_images(manifest, test_idx)
        test_ages = manifest.ages[test_idx]
        variants = [
            ("grouped ml-ielm", {}),
            ("no hidden path", {"use_hidden": False}),
            ("pooled regressor", {"shared_regressor": True}),
            ("single group", {"cuts": (0.0,)}),
        ]
        results: dict[str, list[float]] = {label: [] for label, _ in variants}
        for seed in seeds:
            model = init_model(settings.model, seed=seed)
            train_cfg = dataclasses.replace(settings.train, seed=seed, epochs=args.epochs)
            run_pretrain(images, model, train_cfg, settings.aug, settings.loss)
            feats = extract_embeddings(images, model)
            test_feats = extract_embeddings(test_images, model)
            for label, overrides in variants:
                cfg = dataclasses.replace(settings.elm, seed=seed, **overrides)
                estimator = fit_age_estimator(feats, ages, cfg)
                value = mae(test_ages, predict_age(estimator, test_feats))
                log.write({"event": "ablate", "axis": "elm", "arm": label,
                           "seed": seed, "test_mae": value})
                results[label].append(value)
        headers = ["arm", *seed_cols, "mean"]
        rows = [
            [label] + [f"{v:.3f}" for v in vals] + [f"{float(np.mean(vals)):.3f}"]
            for label, vals in results.items()
        ]
        table = _format_table(headers, rows)

    print(table)
    return 0


# ----------------------------------------------------------------------
# wiring


def _default_log_path(args: argparse.Namespace) -> str:
    if args.command == "synth":
        return args.out.rstrip("/") + ".log.jsonl"
    if args.command in ("pretrain", "finetune", "fit-elm"):
        return args.out + ".log.jsonl"
    if args.command == "predict":
        return args.est + ".predict.jsonl"
    if args.command == "evaluate":
        return args.est + ".evaluate.jsonl"
    if args.command == "ablate":
        return args.data.rstrip("/") + f".{args.axis}-ablation.jsonl"
    return "gradcheck.log.jsonl"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphage",
        description="Self-supervised patch-graph pretraining with a grouped "
        "closed-form age estimator.",
        epilog="graphage --help-config lists every config key with its default.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("fit-elm", help="fit the grouped age estimator on frozen features")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="self-contained estimator file")
    p.set_defaults(handler=cmd_fit_elm)

    p = sub.add_parser("predict", help="predict the age for one image")
    p.add_argument("--est", required=True, help="estimator file from fit-elm")
    p.add_argument("--image", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics JSON over a corpus test split")
    p.add_argument("--est", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one axis and print a results table")
    p.add_argument("--axis", required=True, choices=("mask", "drop", "loss", "elm"))
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--limit", type=int, default=0,
                   help="cap on images per split (0 = all)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.set_defaults(handler=cmd_ablate)

    for sp in sub.choices.values():
        sp.add_argument("--log", help="JSON-lines log path (default: next to the output)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--help-config" in argv:
        print(config_help())
        return 0
    args = _build_parser().parse_args(argv)  # exits 2 on usage errors
    log_path = args.log or _default_log_path(args)
    try:
        with JsonlLog(log_path) as log:
            log.write(
                {
                    "event": "start",
                    "command": args.command,
                    "args": {
                        k: v for k, v in vars(args).items()
                        if k not in ("handler", "command") and v is not None
                    },
                }
            )
            try:
                code = args.handler(args, log)
            except (GraphAgeError, OSError) as exc:
                log.write({"event": "error", "message": str(exc)})
                raise
            log.write({"event": "exit", "code": code})
            return code
    except (GraphAgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
