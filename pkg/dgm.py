#!/usr/bin/env python3
"""
Command-line front end: dataset generation, training, evaluation, ablation grids and gradient checks.

Exit codes: 0 success, 1 usage or configuration problem, 2 runtime failure.
"""

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

from config import Config
from services.synthetic_data import SynthConfig, checksums, generate_splits
from services.training_service import (AblationGrid, RunConfig, TrainingService, evaluate_checkpoint,
                                       run_ablation, run_gradcheck)
from utils.errors import ConfigurationError, DGMError, UsageError, ValidationError
from utils.logger import logger
from utils.validation import validation_manager

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """Argument errors become UsageError so they share the usage exit code"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _require(check):
    ok, message = check
    if not ok:
        raise UsageError(message)


def _read_json(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}")


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# === subcommands ===

def cmd_generate(args) -> int:
    settings = _read_json(args.config)
    sizes = [settings.pop(name, default) for name, default in
             (("train_videos", Config.TRAIN_VIDEOS), ("val_videos", Config.VAL_VIDEOS), ("test_videos", Config.TEST_VIDEOS))]
    for i, flag in enumerate((args.train, args.val, args.test)):
        if flag is not None:
            sizes[i] = flag
    overrides = {
        "seed": args.seed,
        "dominance": args.dominance,
        "noise_scale": args.noise_scale,
        "density": args.density,
        "snippets": args.snippets,
        "classes": args.classes,
        "audio_dim": args.audio_dim,
        "visual_dim": args.visual_dim,
    }
    settings.update({k: v for k, v in overrides.items() if v is not None})
    settings["videos"] = int(sum(sizes))
    cfg = SynthConfig.from_dict(settings)
    _require(validation_manager.validate_dominance(cfg.dominance))
    for name, size in zip(("train", "val", "test"), sizes):
        _require(validation_manager.validate_positive(f"{name} videos", size))

    out = args.out or Config.DATA_DIR
    parts = generate_splits(cfg, sizes, out)
    summary = {
        "out": out,
        "config": cfg.to_dict(),
        "splits": {name: len(part) for name, part in parts.items()},
        "checksums": {name: checksums(os.path.join(out, name)) for name in parts},
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _run_overrides(args) -> Dict[str, Any]:
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "dgm": args.dgm,
        "gamma": args.gamma,
        "noise": None if args.noise is None else args.noise == "on",
        "out_dir": args.out,
        "data_dir": getattr(args, "data", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "optimizer": getattr(args, "optimizer", None),
        "adam_modulation": getattr(args, "adam_modulation", None),
        "run_id": getattr(args, "run_id", None),
    }
    if getattr(args, "force_unit_omega", False):
        overrides["force_unit_omega"] = True
    if args.gamma is not None:
        _require(validation_manager.validate_positive("gamma", args.gamma))
    return overrides


def cmd_train(args) -> int:
    run = RunConfig.from_file(args.config, _run_overrides(args))
    report = TrainingService(run).train(resume=args.resume)
    last = report.losses[-1] if report.losses else {}
    print(json.dumps({
        "run_id": report.run_id,
        "out": run.out_dir,
        "final_losses": last,
        "balance_gap": report.balance_gap,
        "test_metrics": report.test_metrics,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    overrides: Dict[str, Any] = {}
    if args.averaging:
        overrides["averaging"] = args.averaging
    if args.no_gate:
        overrides["gate_by_video"] = False
    if args.threshold is not None:
        _require(validation_manager.validate_probability("threshold", args.threshold))
        overrides["threshold"] = args.threshold
    metrics, accuracy = evaluate_checkpoint(args.checkpoint, args.split, overrides)
    payload = {"metrics": metrics.to_dict(), "video_accuracy": accuracy}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid_settings = _read_json(args.grid)
    for key, value in (("arms", args.arms), ("modes", args.modes), ("gammas", args.gammas),
                       ("seeds", args.seeds), ("workers", args.workers)):
        if value is not None:
            grid_settings[key] = value
    grid = AblationGrid.from_dict(grid_settings)
    for gamma in grid.gammas:
        _require(validation_manager.validate_positive("gamma", gamma))

    base = RunConfig.from_file(args.config, {
        "data_dir": args.data,
        "epochs": args.epochs,
        "noise": None if args.noise is None else args.noise == "on",
    })
    out = args.out or os.path.join(Config.OUTPUT_DIR, "ablation")
    table = run_ablation(grid, base, out)
    print(f"{len(table)} cells, {int((table['status'] == 'ok').sum())} succeeded; table in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _require(validation_manager.validate_positive("tolerance", args.tolerance))
    _require(validation_manager.validate_positive("step", args.step))
    results = run_gradcheck(tolerance=args.tolerance, h=args.step, instances=args.instances, seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  max rel err {r.max_error:.3e}  (tol {r.tolerance:.1e})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"All {len(results)} checks passed")
    return EXIT_OK


# === parser ===

def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--mode", choices=["traditional", "msdu"])
    parser.add_argument("--dgm", choices=["off", "score", "discrepancy", "fusion"])
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--noise", choices=["on", "off"])


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON document with settings; flags override its fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="dgm", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("generate", parents=[common], help="generate a synthetic dataset with train/val/test splits")
    gen.add_argument("--dominance", type=float)
    gen.add_argument("--noise-scale", type=float)
    gen.add_argument("--density", type=float)
    gen.add_argument("--snippets", type=int)
    gen.add_argument("--classes", type=int)
    gen.add_argument("--audio-dim", type=int)
    gen.add_argument("--visual-dim", type=int)
    gen.add_argument("--train", type=int)
    gen.add_argument("--val", type=int)
    gen.add_argument("--test", type=int)
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", parents=[common], help="train one configuration")
    _add_run_flags(train)
    train.add_argument("--data", help="dataset directory")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--optimizer", choices=["sgd", "adam"])
    train.add_argument("--adam-modulation", choices=["gradient", "update"],
                       help="scale the raw gradient before the Adam moments, or the normalized Adam step")
    train.add_argument("--run-id")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--force-unit-omega", action="store_true")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset split")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--split", required=True, help="dataset split directory")
    evaluate.add_argument("--averaging", choices=["micro", "macro"])
    evaluate.add_argument("--threshold", type=float)
    evaluate.add_argument("--no-gate", action="store_true", help="do not mask snippets by the video prediction")
    evaluate.set_defaults(func=cmd_evaluate)

    ablate = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    ablate.add_argument("--grid", help="JSON grid: arms, modes, gammas, seeds, workers, retries")
    ablate.add_argument("--arms", type=_str_list)
    ablate.add_argument("--modes", type=_str_list)
    ablate.add_argument("--gammas", type=_float_list)
    ablate.add_argument("--seeds", type=_int_list)
    ablate.add_argument("--workers", type=int)
    ablate.add_argument("--data", help="dataset directory")
    ablate.add_argument("--epochs", type=int)
    ablate.add_argument("--noise", choices=["on", "off"])
    ablate.set_defaults(func=cmd_ablate)

    check = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every gradient")
    check.add_argument("--tolerance", type=float, default=Config.GRADCHECK_TOLERANCE)
    check.add_argument("--step", type=float, default=Config.GRADCHECK_STEP)
    check.add_argument("--instances", type=int, default=100)
    check.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        validation = Config.validate_config()
        for warning in validation["warnings"]:
            logger.warning(warning)
        if not validation["is_valid"]:
            raise ConfigurationError(f"invalid environment settings: {', '.join(validation['missing_required'])}")
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigurationError, ValidationError) as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=False)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DGMError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=False)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
