"""Command-line entry point wiring synthesis, training, and evaluation.

Artifacts land under the run directory given by ``--out``: the effective
configuration (``config.json``), per-epoch history (``history.jsonl``),
checkpoints, CSV tables, and a ``summary.json`` with the headline numbers.
Re-running a command with the same seed and ``--jobs 1`` reproduces every
artifact byte for byte; nothing time- or host-dependent is written.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as configmod
from .data import load_manifest, synth_generate, validate_dataset, write_manifest
from .errors import ConfigError, DataError, NumericalError
from .evalsuite import ablate_caba, mask_importance, run_kfold, split_scenario_table
from .mixer import load_checkpoint, save_checkpoint
from .splits import SplitSpec, holdout_by_group, kfold_by_subject
from .trainer import DA_MODES, grid_search, train_fold


class _Parser(argparse.ArgumentParser):
    """Parser whose failures raise ConfigError instead of exiting."""

    def error(self, message: str):
        raise ConfigError(message)


def _add_common(sub: argparse.ArgumentParser, with_data: bool = True) -> None:
    sub.add_argument("--config", metavar="FILE",
                     help="JSON config file merged over the defaults")
    if with_data:
        sub.add_argument("--data", metavar="DIR",
                         help="dataset directory holding dataset.json")
    sub.add_argument("--out", metavar="DIR",
                     help="run directory for all artifacts")
    sub.add_argument("--seed", type=int, default=None,
                     help="run seed (falls back to config, then CABA_SEED, then 0)")
    sub.add_argument("--jobs", type=int, default=None,
                     help="worker processes for folds and grid points")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="cabada",
        description="Workload classification with class-aware block-aware "
                    "domain adaptation.",
    )
    commands = parser.add_subparsers(dest="command", required=True,
                                     metavar="COMMAND")

    synth = commands.add_parser("synth", help="generate a synthetic corpus")
    _add_common(synth, with_data=False)
    synth.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
    synth.set_defaults(func=cmd_synth)

    train = commands.add_parser("train", help="train one model with a "
                                              "validation carve-out")
    _add_common(train)
    train.add_argument("--alpha", type=float, default=None,
                       help="discrepancy weight")
    train.add_argument("--da-mode", choices=DA_MODES, default=None,
                       help="adaptation flavor")
    train.set_defaults(func=cmd_train)

    grid = commands.add_parser("gridsearch", help="exhaustive hyperparameter "
                                                  "sweep over k folds")
    _add_common(grid)
    grid.add_argument("--k", type=int, default=None, help="fold count")
    grid.set_defaults(func=cmd_gridsearch)

    kfold = commands.add_parser("kfold", help="cross-subject k-fold evaluation")
    _add_common(kfold)
    kfold.add_argument("--k", type=int, default=None, help="fold count")
    kfold.add_argument("--alpha", type=float, default=None,
                       help="discrepancy weight")
    kfold.add_argument("--da-mode", choices=DA_MODES, default=None,
                       help="adaptation flavor")
    kfold.set_defaults(func=cmd_kfold)

    ablate = commands.add_parser("ablate", help="paired k-fold run with and "
                                                "without the block term")
    _add_common(ablate)
    ablate.add_argument("--k", type=int, default=None, help="fold count")
    ablate.add_argument("--alpha", type=float, default=None,
                        help="discrepancy weight")
    ablate.add_argument("--da-mode", choices=DA_MODES, default=None,
                        help="adaptation flavor")
    ablate.set_defaults(func=cmd_ablate)

    diagnose = commands.add_parser("diagnose", help="accuracy and shift per "
                                                    "split scenario")
    _add_common(diagnose)
    diagnose.add_argument("--wd-on", choices=configmod.WD_CHOICES, default=None,
                          help="feature space for the shift diagnostic")
    diagnose.set_defaults(func=cmd_diagnose)

    mask = commands.add_parser("mask", help="channel-masking importance "
                                            "analysis")
    _add_common(mask)
    mask.add_argument("--checkpoint", metavar="FILE", default=None,
                      help="trained model checkpoint (trains one when absent)")
    mask.add_argument("--bootstrap", type=int, default=None,
                      help="bootstrap resamples for the confidence band")
    mask.set_defaults(func=cmd_mask)

    return parser


# --- config assembly ---------------------------------------------------------


def _cli_overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    for key in ("data", "out"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    if getattr(args, "force", False):
        overrides["force"] = True
    if getattr(args, "wd_on", None) is not None:
        overrides["wd_on"] = args.wd_on
    if getattr(args, "checkpoint", None) is not None:
        overrides["checkpoint"] = args.checkpoint
    train_over = {}
    if getattr(args, "alpha", None) is not None:
        train_over["alpha"] = args.alpha
    if getattr(args, "da_mode", None) is not None:
        train_over["da_mode"] = args.da_mode
    if train_over:
        overrides["train"] = train_over
    if getattr(args, "k", None) is not None:
        overrides["kfold"] = {"k": args.k}
    if getattr(args, "bootstrap", None) is not None:
        overrides["mask"] = {"bootstrap": args.bootstrap}
    return overrides


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags; seed resolved and validated."""
    cfg = copy.deepcopy(configmod.DEFAULT_CONFIG)
    if args.config:
        cfg = configmod.merge_config(cfg, configmod.load_config(args.config))
    cfg = configmod.merge_config(cfg, _cli_overrides(args))
    cfg["seed"] = configmod.resolve_seed(args.seed, cfg["seed"])
    configmod.validate_config(cfg)
    return cfg


def _out_dir(cfg: dict) -> Path:
    if not cfg["out"]:
        raise ConfigError("an output directory is required "
                          "(--out or config key 'out')")
    return Path(cfg["out"])


def _load_data(cfg: dict):
    if not cfg["data"]:
        raise ConfigError("a dataset directory is required "
                          "(--data or config key 'data')")
    index = load_manifest(cfg["data"])
    report = validate_dataset(index)
    if not report.passed:
        raise DataError(
            f"dataset {cfg['data']} fails validation: {report.violations[0]}"
        )
    return index


# --- artifact writers ----------------------------------------------------------


def _jsonable(obj):
    """Plain JSON types only; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    return obj


def write_json(path: Path, payload) -> None:
    path.write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def write_jsonl(path: Path, rows: list) -> None:
    lines = [json.dumps(_jsonable(row), sort_keys=True) for row in rows]
    path.write_text("".join(line + "\n" for line in lines))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# --- commands ----------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    if out.exists() and any(out.iterdir()) and not cfg["force"]:
        raise ConfigError(
            f"output directory {out} is not empty (pass --force to overwrite)"
        )
    out.mkdir(parents=True, exist_ok=True)
    index = synth_generate(configmod.build_synth_config(cfg, cfg["seed"]))
    write_manifest(index, out)
    report = validate_dataset(index)
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", {
        "samples": len(index),
        "subjects": len(index.subjects()),
        "class_count": index.class_count,
        "shape": list(index.shape),
        "passed": report.passed,
    })
    print(f"wrote {len(index)} windows to {out}")
    return 0


def _train_once(cfg: dict, index):
    """Shared train-with-carve-out path for cmd_train and cmd_mask."""
    mcfg = configmod.build_mixer_config(cfg, index)
    tcfg = configmod.build_train_config(cfg, cfg["seed"])
    kernel_cfg = configmod.build_kernel_config(cfg)
    fit, val = holdout_by_group(index, seed=tcfg.seed,
                                fraction=cfg["kfold"]["val_fraction"])
    params, history = train_fold(fit, val, mcfg, tcfg, kernel_cfg)
    return params, replace(mcfg, dropout=tcfg.dropout), history


def cmd_train(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    index = _load_data(cfg)
    params, model_cfg, history = _train_once(cfg, index)
    save_checkpoint(out / "best.ckpt", params, model_cfg)
    write_jsonl(out / "history.jsonl", history)
    best_epoch = min(range(len(history)), key=lambda i: history[i]["val_ce"])
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", {
        "epochs": len(history),
        "best_epoch": history[best_epoch]["epoch"],
        "val_ce": history[best_epoch]["val_ce"],
        "val_accuracy": history[best_epoch]["val_acc"],
    })
    print(f"trained {len(history)} epochs, "
          f"best validation accuracy {history[best_epoch]['val_acc']:.4f}")
    return 0


def cmd_gridsearch(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    index = _load_data(cfg)
    mcfg = configmod.build_mixer_config(cfg, index)
    base = configmod.build_train_config(cfg, cfg["seed"])
    kernel_cfg = configmod.build_kernel_config(cfg)
    plan = kfold_by_subject(index, cfg["kfold"]["k"], seed=cfg["seed"])
    best, rows, alpha_curve = grid_search(index, plan, mcfg, base, cfg["grid"],
                                          kernel_cfg, jobs=cfg["jobs"])
    write_csv(out / "grid.csv",
              ["learning_rate", "dropout", "alpha", "mean_accuracy", "status"],
              [[r["learning_rate"], r["dropout"], r["alpha"],
                r["mean_accuracy"], r["status"]] for r in rows])
    write_csv(out / "alpha_curve.csv", ["alpha", "accuracy"],
              [[r["alpha"], r["accuracy"]] for r in alpha_curve])
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", {
        "best": best.to_dict(),
        "rows": rows,
        "alpha_curve": alpha_curve,
    })
    print(f"best grid point: lr={best.learning_rate} "
          f"dropout={best.dropout} alpha={best.alpha}")
    return 0


def cmd_kfold(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    index = _load_data(cfg)
    mcfg = configmod.build_mixer_config(cfg, index)
    tcfg = configmod.build_train_config(cfg, cfg["seed"])
    kernel_cfg = configmod.build_kernel_config(cfg)
    plan = kfold_by_subject(index, cfg["kfold"]["k"], seed=cfg["seed"])
    mean, results = run_kfold(index, plan, mcfg, tcfg, kernel_cfg,
                              val_fraction=cfg["kfold"]["val_fraction"],
                              jobs=cfg["jobs"])
    for result in results:
        fold_dir = out / f"fold{result.fold_id}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(fold_dir / "history.jsonl", result.history)
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", {
        "mean_accuracy": mean,
        "k": plan.k,
        "fold_members": plan.fold_members,
        "folds": [r.to_dict() for r in results],
    })
    print(f"mean accuracy over {plan.k} folds: {mean:.4f}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    index = _load_data(cfg)
    mcfg = configmod.build_mixer_config(cfg, index)
    tcfg = configmod.build_train_config(cfg, cfg["seed"])
    kernel_cfg = configmod.build_kernel_config(cfg)
    plan = kfold_by_subject(index, cfg["kfold"]["k"], seed=cfg["seed"])
    arms = ablate_caba(index, plan, mcfg, tcfg, kernel_cfg, jobs=cfg["jobs"])
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", arms)
    print(f"accuracy with block term {arms['with_caba']['mean_accuracy']:.4f} "
          f"vs without {arms['without_caba']['mean_accuracy']:.4f} "
          f"(delta {arms['delta']:+.4f})")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    index = _load_data(cfg)
    mcfg = configmod.build_mixer_config(cfg, index)
    tcfg = configmod.build_train_config(cfg, cfg["seed"])
    scenarios = [SplitSpec(axis=axis, test_fraction=cfg["split"]["test_fraction"],
                           seed=cfg["seed"])
                 for axis in cfg["split"]["axes"]]
    rows = split_scenario_table(index, mcfg, tcfg, scenarios,
                                wd_on=cfg["wd_on"],
                                batches=cfg["diagnose"]["batches"],
                                batch_size=cfg["diagnose"]["batch_size"],
                                val_fraction=cfg["kfold"]["val_fraction"])
    write_csv(out / "diagnose.csv", ["axis", "accuracy", "wd"],
              [[r["axis"], r["accuracy"], r["wd"]] for r in rows])
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", {"rows": rows})
    for row in rows:
        print(f"split by {row['axis']}: accuracy {row['accuracy']:.4f} "
              f"wd {row['wd']:.4f}")
    return 0


def _auto_masks(groups: int) -> list[list[int]]:
    """Empty mask, each single channel, then all channels at once."""
    masks: list[list[int]] = [[]]
    masks.extend([g] for g in range(groups))
    if groups > 1:
        masks.append(list(range(groups)))
    return masks


def cmd_mask(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    index = _load_data(cfg)
    if cfg["checkpoint"]:
        params, model_cfg = load_checkpoint(cfg["checkpoint"])
        if model_cfg.classes != index.class_count:
            raise DataError(
                f"checkpoint was trained for {model_cfg.classes} classes "
                f"but the dataset has {index.class_count}"
            )
    else:
        params, model_cfg, _ = _train_once(cfg, index)
        save_checkpoint(out / "best.ckpt", params, model_cfg)
    masks = cfg["mask"]["masks"]
    if masks == "auto":
        masks = _auto_masks(model_cfg.groups)
    report = mask_importance(params, model_cfg, index, masks,
                             bootstrap=cfg["mask"]["bootstrap"])
    write_csv(out / "masks.csv", ["mask", "accuracy"],
              [[json.dumps(m), a]
               for m, a in zip(report.masks, report.accuracies)])
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", report.to_dict())
    print(f"unmasked accuracy {report.unmasked_accuracy:.4f}, "
          f"masked mean {report.mean_masked:.4f} "
          f"[{report.ci_lower:.4f}, {report.ci_upper:.4f}]")
    return 0


# --- entry point ------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
