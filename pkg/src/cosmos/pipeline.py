"""Stage orchestration shared by the command line and the acceptance suite.

Every stage writes into its own directory and drops a ``stamp.json`` with
the hash of the configuration that produced it; re-running a stage whose
stamp matches is skipped as up to date.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, canonical_json, dataclass_hash, echo_config
from .metrics import StudyReport, report_from_dict, report_to_dict
from .phantom import generate_dataset
from .report import emit_report
from .segmentation import load_seg_model
from .selftrain import (SelfTrainConfig, evaluate_models, load_cases, run_self_training, student_seed,
                        train_ensemble)
from .translation import train_translation, translate_dataset
from .volume import CaseEntry, DatasetManifest, atomic_write_text, load_manifest

log = logging.getLogger(__name__)

VARIANTS = ("source_only", "da_no_seg", "da_seg", "st1", "st2", "st3")
STAMP = "stamp.json"


class PrerequisiteError(RuntimeError):
    """A stage's inputs are missing; the message names the command that makes them."""


def runs_root(out=None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get("COSMOS_RUNS_DIR", "runs"))


def _stamp_ok(stage_dir: Path, key: str) -> bool:
    p = stage_dir / STAMP
    return p.exists() and json.loads(p.read_text()).get("key") == key


def _write_stamp(stage_dir: Path, key: str, **info) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(stage_dir / STAMP, json.dumps({"key": key, **info}, indent=2, sort_keys=True) + "\n")


def _key(*parts) -> str:
    import hashlib
    return hashlib.sha256(canonical_json(list(parts)).encode()).hexdigest()[:16]


def rebase_manifest(m: DatasetManifest, new_root) -> DatasetManifest:
    """Same cases with paths rewritten relative to ``new_root``."""
    new_root = Path(new_root).resolve()

    def fix(e: CaseEntry) -> CaseEntry:
        def rel(p):
            return None if p is None else os.path.relpath(m.resolve(p).resolve(), new_root)
        return CaseEntry(e.id, rel(e.volume), rel(e.label), e.provenance)

    return DatasetManifest(*[[fix(e) for e in m.split(s)] for s in ("source", "target", "validation",
                                                                   "pseudo_target")], root=new_root)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_generate(cfg: RunConfig, data_dir) -> Path:
    """Phantom dataset under ``data_dir``; returns the manifest path."""
    data_dir = Path(data_dir)
    key = _key("generate", cfg.phantom.to_dict())
    if _stamp_ok(data_dir, key):
        return data_dir / "manifest.json"
    generate_dataset(cfg.phantom, data_dir)
    _write_stamp(data_dir, key)
    return data_dir / "manifest.json"


def _need_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"no dataset manifest at {path}; run `cosmos generate` first")
    return load_manifest(path)


def stage_translate(cfg: RunConfig, manifest_path, stage_dir, segmentor_weight: float | None = None) -> Path:
    """Train the translators and write the pseudo-target dataset.

    ``segmentor_weight`` overrides the segmentor term's weight (0 gives the
    variant without the segmentation decoders). Returns the path of the
    pseudo manifest, which carries every split plus ``pseudo_target``.
    """
    stage_dir = Path(stage_dir)
    tcfg = cfg.translation
    if segmentor_weight is not None:
        tcfg = replace(tcfg, weights=replace(tcfg.weights, segmentor=segmentor_weight))
    manifest = _need_manifest(manifest_path)
    key = _key("translate", tcfg.to_dict(), Path(manifest_path).read_text())
    out = stage_dir / "pseudo_manifest.json"
    if _stamp_ok(stage_dir, key) and out.exists():
        return out
    t0 = time.perf_counter()
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "loss_history.jsonl").unlink(missing_ok=True)
    res = train_translation(manifest, tcfg, stage_dir)
    pseudo = translate_dataset(res.models, manifest, stage_dir / "pseudo")
    rebase_manifest(pseudo, stage_dir).save(out)
    _write_stamp(stage_dir, key, seconds=round(time.perf_counter() - t0, 1))
    return out


def stage_train_eval(cfg: RunConfig, manifest_path, split: str, stage_dir, method: str) -> StudyReport:
    """Train a fold ensemble on one labelled split and score it on validation."""
    stage_dir = Path(stage_dir)
    manifest = _need_manifest(manifest_path)
    entries = manifest.split(split)
    if not entries:
        raise PrerequisiteError(f"{manifest_path} has no {split!r} cases; run `cosmos translate` first")
    key = _key("seg", cfg.segmentation.to_dict(), cfg.evaluation.tta, split, Path(manifest_path).read_text())
    metrics_path = stage_dir / "metrics.json"
    if _stamp_ok(stage_dir, key) and metrics_path.exists():
        return report_from_dict(method, json.loads(metrics_path.read_text())["validation"])
    t0 = time.perf_counter()
    cases = load_cases(entries, manifest.resolve, cfg.segmentation)
    ckpts = train_ensemble(cases, cfg.segmentation, stage_dir / "checkpoints", student_seed(cfg.seed, 0))
    models = [load_seg_model(p) for p in ckpts]
    _, report = evaluate_models(models, manifest.validation, manifest.resolve, cfg.segmentation, method,
                                cfg.evaluation.tta, stage_dir / "predictions")
    atomic_write_text(metrics_path, json.dumps({"method": method, "validation": report_to_dict(report)},
                                               indent=2, sort_keys=True) + "\n")
    _write_stamp(stage_dir, key, seconds=round(time.perf_counter() - t0, 1))
    return report


def stage_selftrain(cfg: RunConfig, pseudo_manifest_path, stage_dir, K: int | None = None):
    """Teacher plus ``K`` self-training iterations (resumable). Returns the state."""
    manifest = _need_manifest(pseudo_manifest_path)
    if not manifest.pseudo_target:
        raise PrerequisiteError(f"{pseudo_manifest_path} has no pseudo_target cases; run `cosmos translate` first")
    K = cfg.selftrain.K if K is None else K
    st_cfg = replace(cfg.selftrain, K=K, eval_tta=cfg.evaluation.tta)
    stage_dir = Path(stage_dir)
    key = _key("selftrain", cfg.segmentation.to_dict(), SelfTrainConfig.__name__, st_cfg.__dict__,
               Path(pseudo_manifest_path).read_text())
    state_file = stage_dir / "state.json"
    if stage_dir.exists() and state_file.exists() and not (_stamp_ok(stage_dir, key) or _partial_ok(stage_dir, key)):
        raise PrerequisiteError(f"{stage_dir} holds a self-training run with a different configuration; "
                                "use another --run-id or remove it")
    stage_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(stage_dir / "key.txt", key + "\n")
    state, _ = run_self_training(manifest, cfg.segmentation, stage_dir, K, st_cfg, seed=cfg.seed)
    _write_stamp(stage_dir, key)
    return state


def _partial_ok(stage_dir: Path, key: str) -> bool:
    p = stage_dir / "key.txt"
    return p.exists() and p.read_text().strip() == key


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def run_ablation(cfg: RunConfig, run_dir, variants=VARIANTS, manifest_path=None) -> list[StudyReport]:
    """Train and score the requested variants; writes ``ablation.csv`` and plots.

    Layout under ``run_dir``: ``data/`` (unless ``manifest_path`` is given),
    ``translate_seg/``, ``translate_noseg/``, ``source_only/``, ``da_no_seg/``,
    ``selftrain/``. Reports come back in the canonical variant order.
    """
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown ablation variants {bad}; choose from {list(VARIANTS)}")
    run_dir = Path(run_dir)
    echo_config(cfg, run_dir)
    if manifest_path is None:
        manifest_path = stage_generate(cfg, run_dir / "data")
    timings: dict[str, float] = {}
    reports: dict[str, StudyReport] = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[name] = round(time.perf_counter() - t0, 1)
        return out

    if "source_only" in variants:
        reports["source_only"] = timed("source_only", lambda: stage_train_eval(
            cfg, manifest_path, "source", run_dir / "source_only", "source_only"))
    if "da_no_seg" in variants:
        pm = timed("translate_noseg", lambda: stage_translate(cfg, manifest_path, run_dir / "translate_noseg", 0.0))
        reports["da_no_seg"] = timed("da_no_seg", lambda: stage_train_eval(
            cfg, pm, "pseudo_target", run_dir / "da_no_seg", "da_no_seg"))
    st_wanted = [v for v in variants if v == "da_seg" or v.startswith("st")]
    if st_wanted:
        pm = timed("translate_seg", lambda: stage_translate(cfg, manifest_path, run_dir / "translate_seg"))
        K = max([int(v[2:]) for v in st_wanted if v.startswith("st")] or [0])
        state = timed("selftrain", lambda: stage_selftrain(cfg, pm, run_dir / f"selftrain_k{K}", K))
        for v in st_wanted:
            k = 0 if v == "da_seg" else int(v[2:])
            val = state.metrics[str(k)].get("validation")
            if val is None:
                raise PrerequisiteError("the dataset has no labelled validation cases to score")
            reports[v] = report_from_dict(v, val)

    ordered = [reports[v] for v in VARIANTS if v in reports]
    formats = ["csv", "scatter"] + (["trend"] if any(v.startswith("st") for v in reports) else [])
    emit_report(ordered, run_dir, formats, stem="ablation")
    atomic_write_text(run_dir / "timings.json", json.dumps(timings, indent=2) + "\n")
    return ordered


def run_id_for(cfg: RunConfig, *extra) -> str:
    """Content-bearing run id: a prefix of the hash of the effective config."""
    return dataclass_hash({"config": cfg.to_dict(), "extra": list(extra)})
