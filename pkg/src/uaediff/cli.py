"""Command-line entry point: ``uaediff {make-dataset,train,attack,evaluate,sweep,ablate-saliency}``.

Exit codes: 0 success, 2 bad input (missing files, bad parameters), 3 a
training gate or validation failed, 4 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from . import __version__
from .errors import AttackError, CapabilityError, GateError, IngestionError, InvariantError, ParameterError
from .harness import evaluate_runs, run_attack, run_saliency_ablation, run_sweep, train_models
from .io import RunConfig, apply_overrides, default_config, load_config, read_manifest

EXIT_OK, EXIT_INPUT, EXIT_GATE, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("uaediff")

# shortcut flags -> config keys
SHORTCUTS = {
    "seed": ("run", "seed"), "tag": ("run", "tag"), "workers": ("run", "workers"),
    "s_a": ("guidance", "s_a"), "t_star": ("guidance", "T_star"), "n_cycles": ("guidance", "N"),
    "s_n": ("guidance", "s_n"), "s_c": ("guidance", "s_c"), "n_attacks": ("attack", "n_attacks"),
    "surrogate": ("attack", "surrogate"), "reference": ("attack", "reference_path"),
    "saliency": ("attack", "saliency_method"), "mode": ("attack", "mode"),
}


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    apply_overrides(cfg, args.set or [])
    for flag, (section, key) in SHORTCUTS.items():
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "reference":
                value = str(Path(value).resolve())
            cfg.set(section, key, value)
    return cfg


def cmd_make_dataset(args) -> int:
    from .models.data import write_dataset

    cfg = _config(args)
    manifest = cfg.path("data", "manifest")
    path = write_dataset(manifest.parent, int(cfg.get("data", "train_per_class")),
                         int(cfg.get("data", "test_per_class")), seed=int(cfg.get("run", "seed")))
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    gates = train_models(_config(args))
    for name, g in gates.items():
        print(f"{name}: {g}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    run_dir = run_attack(cfg, Path(args.out) if args.out else None)
    print(run_dir)
    return EXIT_OK


def _targets(value: Optional[str], cfg: RunConfig, mode: str) -> List[str]:
    if value:
        return [t.strip() for t in value.split(",") if t.strip()]
    if mode == "recognition":
        return [cfg.get("attack", "surrogate")]
    return [t.strip() for t in cfg.get("evaluate", "targets").split(",") if t.strip()]


def cmd_evaluate(args) -> int:
    run_dirs = [Path(d) for d in args.run_dirs]
    manifest = read_manifest(run_dirs[0])
    cfg = load_config(run_dirs[0] / "manifest.json") if not args.config else load_config(args.config)
    apply_overrides(cfg, args.set or [])
    targets = args.targets
    if not targets and len(run_dirs) == 1 and "evaluation" in manifest.get("details", {}):
        # re-evaluation from the manifest alone: reuse the recorded inputs
        ev = manifest["details"]["evaluation"]
        run_dirs = [Path(d) for d in ev["runs"]]
        targets = ",".join(ev["targets"])
    report = evaluate_runs(run_dirs, _targets(targets, cfg, cfg.get("attack", "mode")), cfg,
                           Path(args.out) if args.out else None)
    for s, row in zip(report["surrogates"], report["transfer_matrix"]):
        print(s, " ".join(f"{v:.3f}" for v in row))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    param = args.param or cfg.get("sweep", "param")
    grid = args.grid or cfg.get("sweep", "grid")
    print(run_sweep(cfg, param, grid, Path(args.out) if args.out else None))
    return EXIT_OK


def cmd_ablate_saliency(args) -> int:
    cfg = _config(args)
    print(run_saliency_ablation(cfg, Path(args.out) if args.out else None))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uaediff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="INI config or a run manifest.json")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--seed", type=int)
        return sp

    def attack_flags(sp):
        sp.add_argument("--tag")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--s-a", dest="s_a", type=float)
        sp.add_argument("--s-n", dest="s_n", type=float)
        sp.add_argument("--s-c", dest="s_c", type=float)
        sp.add_argument("--t-star", dest="t_star", type=int)
        sp.add_argument("--n-cycles", dest="n_cycles", type=int)
        sp.add_argument("--n-attacks", dest="n_attacks", type=int)
        sp.add_argument("--surrogate")
        sp.add_argument("--mode", choices=("classification", "recognition"))
        sp.add_argument("--reference", help="PNG used as the reference image for every attack")
        sp.add_argument("--saliency", choices=("scorecam", "gradcam", "gradcampp"))
        sp.add_argument("--out", help="exact output directory (default: a new timestamped run directory)")
        return sp

    common(sub.add_parser("make-dataset", help="render the procedural toy dataset")).set_defaults(
        fn=cmd_make_dataset)
    common(sub.add_parser("train", help="train all desk-scale models and check their gates")).set_defaults(
        fn=cmd_train)
    attack_flags(common(sub.add_parser("attack", help="run a batch of guided attacks"))).set_defaults(
        fn=cmd_attack)
    ev = sub.add_parser("evaluate", help="ASR, transfer matrix and quality metrics for attack runs")
    ev.add_argument("run_dirs", nargs="+")
    ev.add_argument("--targets", help="comma-separated target models")
    ev.add_argument("--config")
    ev.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    ev.add_argument("--out", help="directory for report.json/report.csv (default: first run)")
    ev.set_defaults(fn=cmd_evaluate)
    sw = attack_flags(common(sub.add_parser("sweep", help="attack + evaluate over a parameter grid")))
    sw.add_argument("--param", choices=("t_star", "n_cycles", "s_a", "s_n"))
    sw.add_argument("--grid", help="comma-separated values")
    sw.set_defaults(fn=cmd_sweep)
    ab = attack_flags(common(sub.add_parser("ablate-saliency", help="compare saliency methods on paired seeds")))
    ab.set_defaults(fn=cmd_ablate_saliency)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (IngestionError, ParameterError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        for k, v in (exc.diagnostics or {}).items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_GATE
    except (AttackError, InvariantError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - last-resort exit code contract
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
