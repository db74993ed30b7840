"""``cosmos`` command-line entry point.

All outputs of one configuration live under ``<runs root>/<run id>/``. The
runs root is ``--out``, else ``$COSMOS_RUNS_DIR``, else ``./runs``; the run
id is ``--run-id``, else a prefix of the effective config's hash, so
``generate``, ``translate`` and ``selftrain`` invoked with the same config
find each other's outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, echo_config, load_run_config
from .metrics import score_dataset
from .pipeline import (VARIANTS, PrerequisiteError, run_ablation, run_id_for, runs_root, stage_generate,
                       stage_selftrain, stage_translate)
from .report import emit_report, iteration_of, read_csv

EXIT_CONFIG = 2
EXIT_PREREQ = 3

log = logging.getLogger("cosmos")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--deterministic", action="store_true", help="deterministic kernels, one thread")
    common.add_argument("--run-id", help="run directory name (default: config hash prefix)")
    common.add_argument("--out", type=Path, help="runs root (default: $COSMOS_RUNS_DIR or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cosmos", description="Cross-modality domain adaptation pipeline on phantoms.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the phantom dataset")
    sub.add_parser("translate", parents=[common], help="train translators and write pseudo-target data")
    sp = sub.add_parser("selftrain", parents=[common], help="teacher plus K self-training iterations")
    sp.add_argument("--K", type=int, help="override selftrain.K")
    ap = sub.add_parser("ablation", parents=[common], help="train and score ablation variants")
    ap.add_argument("--variants", default=",".join(VARIANTS),
                    help=f"comma-separated subset of {','.join(VARIANTS)}")
    ep = sub.add_parser("evaluate", parents=[common], help="score a directory of predictions")
    ep.add_argument("--pred", type=Path, required=True, help="directory of <case id>.nii label maps")
    ep.add_argument("--split", default="validation", choices=["validation", "source", "target"])
    ep.add_argument("--method", default="method", help="method name for the report row")
    pp = sub.add_parser("plot", parents=[common], help="render SVG plots from a report CSV")
    pp.add_argument("--csv", type=Path, required=True)
    return p


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config).with_overrides(args.seed, args.deterministic or None)
    run_dir = runs_root(args.out) / (args.run_id or run_id_for(cfg))
    echo_config(cfg, run_dir)
    return cfg, run_dir


def _manifest(run_dir: Path) -> Path:
    p = run_dir / "data" / "manifest.json"
    if not p.exists():
        raise PrerequisiteError(f"no dataset at {p}; run `cosmos generate` with the same config first")
    return p


def cmd_generate(args) -> int:
    cfg, run_dir = _resolve(args)
    print(stage_generate(cfg, run_dir / "data"))
    return 0


def cmd_translate(args) -> int:
    cfg, run_dir = _resolve(args)
    print(stage_translate(cfg, _manifest(run_dir), run_dir / "translate_seg"))
    return 0


def cmd_selftrain(args) -> int:
    cfg, run_dir = _resolve(args)
    pm = run_dir / "translate_seg" / "pseudo_manifest.json"
    if not pm.exists():
        _manifest(run_dir)
        raise PrerequisiteError(f"no pseudo-target dataset at {pm}; run `cosmos translate` with the same config first")
    K = cfg.selftrain.K if args.K is None else args.K
    state = stage_selftrain(cfg, pm, run_dir / f"selftrain_k{K}", K)
    print(Path(state.run_dir) / "state.json")
    return 0


def cmd_ablation(args) -> int:
    cfg, run_dir = _resolve(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {list(VARIANTS)}", "variants")
    reports = run_ablation(cfg, run_dir, variants, manifest_path=_manifest(run_dir))
    for r in reports:
        print(f"{r.method:12s} mean Dice {r.mean_dice:.3f}")
    print(run_dir / "ablation.csv")
    return 0


def cmd_evaluate(args) -> int:
    from .volume import load_manifest
    cfg, run_dir = _resolve(args)
    m = load_manifest(_manifest(run_dir))
    if not args.pred.is_dir():
        raise PrerequisiteError(f"prediction directory {args.pred} does not exist")
    _, report = score_dataset(args.pred, m.split(args.split), m.resolve, args.method)
    paths = emit_report([report], run_dir / "evaluate", ["csv"], stem=args.method)
    for r in report.rows:
        print(f"{r.cls:8s} Dice {r.dice_mean:.3f}±{r.dice_std:.3f}  ASSD {r.assd_mean:.3f}±{r.assd_std:.3f} mm")
    print(paths["csv"])
    return 0


def cmd_plot(args) -> int:
    if not args.csv.exists():
        raise PrerequisiteError(f"no report at {args.csv}; run `cosmos ablation` or `cosmos evaluate` first")
    rows = read_csv(args.csv)
    formats = ["scatter"] + (["trend"] if any(iteration_of(r.method) is not None for r in rows) else [])
    paths = emit_report(rows, args.csv.parent, formats, stem=args.csv.stem)
    for p in paths.values():
        print(p)
    return 0


COMMANDS = {"generate": cmd_generate, "translate": cmd_translate, "selftrain": cmd_selftrain,
            "ablation": cmd_ablation, "evaluate": cmd_evaluate, "plot": cmd_plot}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"cosmos: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"cosmos: {exc}", file=sys.stderr)
        return EXIT_PREREQ


if __name__ == "__main__":
    sys.exit(main())
