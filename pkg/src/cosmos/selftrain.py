"""Iterative self-training: teacher on pseudo-target data, then K rounds of
pseudo-labelling the real target cases and training a fresh student on the
union of both."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256
from .metrics import aggregate, report_to_dict, score_case
from .segmentation import SegConfig, load_seg_model, postprocess_vs, predict, preprocess, save_seg_model
from .segmentation.training import preprocess_label, train_segmentation
from .volume import (CaseEntry, DatasetManifest, LabelMap, atomic_write_text, load_labelmap, load_volume,
                     save_labelmap)

log = logging.getLogger(__name__)

STATE_FILE = "state.json"
FILTER_LOG = "filter_log.csv"
PSEUDO_IMAGE = "pseudo-image"
PSEUDO_LABEL = "pseudo-label"
REASONS = {1: "VS missing", 2: "cochlea missing"}


class SelfTrainError(RuntimeError):
    pass


@dataclass
class SelfTrainConfig:
    K: int = 3
    # None samples every case uniformly; a float gives the pseudo-labelled
    # real-target cases that share of the sampling mass
    pseudo_label_share: float | None = None
    tta: bool = True
    eval_tta: bool = True
    # the last student's labels have no consumer; skip them unless asked
    infer_final: bool = False

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.pseudo_label_share is not None and not 0.0 < self.pseudo_label_share < 1.0:
            raise ValueError("pseudo_label_share must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SelfTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown self-train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SelfTrainState:
    """On-disk progress of one run. ``k`` is the last completed iteration
    (-1 before the teacher exists); iteration 0 is the teacher. Each finished
    student is promoted, so ``teacher_checkpoint`` always names the ensemble
    of iteration ``k``."""

    run_dir: str
    K: int
    k: int = -1
    teacher_checkpoint: list[str] = field(default_factory=list)
    pseudo_label_dirs: dict[str, str] = field(default_factory=dict)
    manifests: dict[str, str] = field(default_factory=dict)
    filter_log: list[dict] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    failed: list[dict] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return Path(self.run_dir) / STATE_FILE

    def save(self) -> Path:
        Path(self.run_dir).mkdir(parents=True, exist_ok=True)
        d = asdict(self)
        d.pop("run_dir")
        atomic_write_text(self.path, json.dumps(d, indent=2, sort_keys=True) + "\n")
        _write_filter_log(Path(self.run_dir) / FILTER_LOG, self.filter_log)
        return self.path

    @classmethod
    def load(cls, run_dir) -> "SelfTrainState":
        d = json.loads((Path(run_dir) / STATE_FILE).read_text())
        return cls(run_dir=str(run_dir), **d)


def _write_filter_log(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["case_id", "iteration", "reason"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def ensemble_hash(checkpoints) -> str:
    """Identity of a fold ensemble: hash over its checkpoint file hashes, in fold order."""
    h = hashlib.sha256()
    for p in checkpoints:
        h.update(file_sha256(p).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Pseudo-labels
# ---------------------------------------------------------------------------

def infer_pseudo_labels(models, entries: list[CaseEntry], resolve, seg_cfg: SegConfig, out_dir=None,
                        tta: bool = True, producer: str | None = None):
    """Label every target case with the ensemble (TTA + VS post-processing).

    Returns ``(labels, failed)``: ``labels`` is a list of ``(case id,
    LabelMap)`` in input order; a case whose image cannot be read lands in
    ``failed`` as ``(case id, message)`` and the rest still run. With
    ``out_dir`` each label is written to ``<out_dir>/<id>.nii`` and
    ``lineage.json`` records ``producer`` (the ensemble hash).
    """
    labels, failed = [], []
    for e in entries:
        try:
            v = load_volume(resolve(e.volume))
        except (OSError, ValueError) as exc:
            log.warning("pseudo-labelling %s failed: %s", e.id, exc)
            failed.append((e.id, f"{type(exc).__name__}: {exc}"))
            continue
        pred, _ = predict(models, preprocess(v, seg_cfg), tta=tta)
        lm = postprocess_vs(pred)
        labels.append((e.id, LabelMap(lm.data, v.spacing, e.id) if seg_cfg.target_spacing is None
                       else _back_to_grid(lm, v, e.id)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for cid, lm in labels:
            save_labelmap(lm, out_dir / f"{cid}.nii")
        lineage = {"producer": producer,
                   "cases": {cid: {"counts": {str(c): n for c, n in lm.counts().items()}} for cid, lm in labels},
                   "failed": {cid: msg for cid, msg in failed}}
        atomic_write_text(out_dir / "lineage.json", json.dumps(lineage, indent=2, sort_keys=True) + "\n")
    return labels, failed


def _back_to_grid(lm: LabelMap, v, case_id: str) -> LabelMap:
    from .volume import resample_to_shape
    out = resample_to_shape(lm, v.shape, v.spacing)
    return LabelMap(out.data, v.spacing, case_id)


def filter_pseudo_labels(labels, iteration: int | None = None):
    """Keep a label iff it holds at least one VS and one cochlea voxel.

    Returns ``(kept, excluded)``; ``excluded`` is a list of ``(case id,
    [reasons])`` with reasons drawn from "VS missing" / "cochlea missing".
    """
    kept, excluded = [], []
    for cid, lm in labels:
        counts = lm.counts() if isinstance(lm, LabelMap) else {c: int((np.asarray(lm) == c).sum()) for c in (1, 2)}
        reasons = [REASONS[c] for c in (1, 2) if counts.get(c, 0) < 1]
        if reasons:
            excluded.append((cid, reasons))
        else:
            kept.append((cid, lm))
    return kept, excluded


# ---------------------------------------------------------------------------
# Combined dataset
# ---------------------------------------------------------------------------

@dataclass
class CombinedDataset:
    """Labelled pseudo-target cases followed by kept pseudo-labelled target cases.

    Paths are absolute in memory and written relative to the snapshot's
    directory.
    """

    cases: list[CaseEntry]

    @property
    def n_pseudo_image(self) -> int:
        return sum(e.provenance == PSEUDO_IMAGE for e in self.cases)

    @property
    def n_pseudo_label(self) -> int:
        return sum(e.provenance == PSEUDO_LABEL for e in self.cases)

    def __len__(self) -> int:
        return len(self.cases)

    def case_weights(self, pseudo_label_share: float | None = None) -> list[float]:
        """Per-case sampling weights. Uniform by default; otherwise the
        pseudo-label group gets ``pseudo_label_share`` of the total mass."""
        if pseudo_label_share is None or not self.n_pseudo_label:
            return [1.0] * len(self.cases)
        a = (1 - pseudo_label_share) / self.n_pseudo_image
        b = pseudo_label_share / self.n_pseudo_label
        return [a if e.provenance == PSEUDO_IMAGE else b for e in self.cases]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()

        def rel(p):
            return os.path.relpath(Path(p).resolve(), base)

        d = {"cases": [CaseEntry(e.id, rel(e.volume), rel(e.label), e.provenance).to_dict() for e in self.cases]}
        atomic_write_text(path, json.dumps(d, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CombinedDataset":
        path = Path(path)
        d = json.loads(path.read_text())
        base = path.parent
        cases = [CaseEntry(c["id"], str((base / c["volume"]).resolve()), str((base / c["label"]).resolve()),
                           c.get("provenance")) for c in d["cases"]]
        for e in cases:
            if e.provenance == PSEUDO_LABEL:
                lm = load_labelmap(e.label)
                if not filter_pseudo_labels([(e.id, lm)])[0]:
                    raise SelfTrainError(f"{path}: pseudo-label {e.id!r} lacks a foreground class")
        return cls(cases)


def build_combined_dataset(pseudo_manifest: DatasetManifest, kept, pseudo_label_dir) -> CombinedDataset:
    """Union of every labelled pseudo-target case and every kept real-target
    case (image from the target split, label from ``pseudo_label_dir``)."""
    if not pseudo_manifest.pseudo_target:
        raise SelfTrainError("manifest has no pseudo_target cases; run the translate stage first")
    cases = [CaseEntry(e.id, str(pseudo_manifest.resolve(e.volume).resolve()),
                       str(pseudo_manifest.resolve(e.label).resolve()), PSEUDO_IMAGE)
             for e in pseudo_manifest.pseudo_target]
    targets = {e.id: e for e in pseudo_manifest.target}
    if not kept:
        log.warning("no pseudo-labels survived filtering; training on pseudo-target cases only")
    for cid, _ in kept:
        if cid not in targets:
            raise SelfTrainError(f"pseudo-label for unknown target case {cid!r}")
        cases.append(CaseEntry(cid, str(pseudo_manifest.resolve(targets[cid].volume).resolve()),
                               str((Path(pseudo_label_dir) / f"{cid}.nii").resolve()), PSEUDO_LABEL))
    return CombinedDataset(cases)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def load_cases(entries, resolve, seg_cfg: SegConfig):
    """Preprocessed ``(Volume, LabelMap)`` pairs for entries with labels."""
    out = []
    for e in entries:
        v = preprocess(load_volume(resolve(e.volume)), seg_cfg)
        lm = preprocess_label(load_labelmap(resolve(e.label)), seg_cfg)
        out.append((v, lm))
    return out


def train_ensemble(cases, seg_cfg: SegConfig, ckpt_dir, seed: int, case_weights=None) -> list[Path]:
    """Train every fold and write ``fold_<f>.pt`` plus its JSON-lines log."""
    ckpt_dir = Path(ckpt_dir)
    paths = []
    for fold in range(seg_cfg.folds):
        res = train_segmentation(cases, seg_cfg, fold, case_weights, ckpt_dir / f"fold_{fold}_log.jsonl", seed)
        paths.append(save_seg_model(ckpt_dir / f"fold_{fold}.pt", res.model, res.best_epoch,
                                    {"best_val_dice": res.best_dice, "seed": seed}))
    return paths


def evaluate_models(models, entries, resolve, seg_cfg: SegConfig, method: str, tta: bool = True,
                    pred_dir=None):
    """Score the ensemble on labelled entries; returns ``(case scores, StudyReport)``."""
    scores = []
    for e in entries:
        v = load_volume(resolve(e.volume))
        pred, _ = predict(models, preprocess(v, seg_cfg), tta=tta)
        pred = postprocess_vs(pred)
        gt = load_labelmap(resolve(e.label))
        if seg_cfg.target_spacing is not None:
            pred = _back_to_grid(pred, v, e.id)
        pred = LabelMap(pred.data, gt.spacing, e.id)
        if pred_dir is not None:
            save_labelmap(pred, Path(pred_dir) / f"{e.id}.nii")
        scores.append(score_case(pred, gt, e.id))
    return scores, aggregate(method, scores)


def student_seed(seed: int, k: int) -> int:
    """Fresh, iteration-specific training seed so each student starts from a new draw."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _iter_dir(run_dir: Path, k: int) -> Path:
    return run_dir / f"iter_{k}"


def run_self_training(manifest: DatasetManifest, seg_cfg: SegConfig, run_dir, K: int | None = None,
                      st_cfg: SelfTrainConfig | None = None, seed: int | None = None,
                      stop_after: int | None = None) -> tuple[SelfTrainState, list]:
    """Teacher, then ``K`` student iterations; resumes from ``state.json``.

    Layout: ``<run_dir>/iter_<k>/{checkpoints, pseudo_labels, manifest.json,
    metrics.json}``, ``state.json`` and ``filter_log.csv``. Iteration k's
    student trains on labels produced by the iteration k-1 ensemble. With
    validation labels, each iteration's ensemble is scored on them.
    ``stop_after`` ends the call once that iteration completes (used to
    exercise resumption). Returns the state and the final ensemble.
    """
    st_cfg = st_cfg or SelfTrainConfig()
    K = st_cfg.K if K is None else K
    seed = seg_cfg.seed if seed is None else seed
    run_dir = Path(run_dir)
    if not manifest.pseudo_target:
        raise SelfTrainError("manifest has no pseudo_target cases; run the translate stage first")
    if (run_dir / STATE_FILE).exists():
        state = SelfTrainState.load(run_dir)
        if state.K != K:
            raise SelfTrainError(f"{run_dir} holds a run with K={state.K}; asked for K={K}")
        log.info("resuming self-training in %s after iteration %d", run_dir, state.k)
    else:
        state = SelfTrainState(str(run_dir), K)
        state.save()

    models = None
    for k in range(state.k + 1, K + 1):
        it_dir = _iter_dir(run_dir, k)
        if k == 0:
            data = CombinedDataset([CaseEntry(e.id, str(manifest.resolve(e.volume).resolve()),
                                              str(manifest.resolve(e.label).resolve()), PSEUDO_IMAGE)
                                    for e in manifest.pseudo_target])
            weights = None
        else:
            prev = _iter_dir(run_dir, k - 1) / "pseudo_labels"
            lineage = json.loads((prev / "lineage.json").read_text())
            labels = [(cid, load_labelmap(prev / f"{cid}.nii")) for cid in sorted(lineage["cases"])]
            kept, excluded = filter_pseudo_labels(labels, k)
            state.filter_log.extend({"case_id": cid, "iteration": k, "reason": r}
                                    for cid, reasons in excluded for r in reasons)
            data = build_combined_dataset(manifest, kept, prev)
            weights = data.case_weights(st_cfg.pseudo_label_share)
        data.save(it_dir / "manifest.json")
        cases = load_cases(data.cases, Path, seg_cfg)
        ckpts = train_ensemble(cases, seg_cfg, it_dir / "checkpoints", student_seed(seed, k), weights)
        models = [load_seg_model(p) for p in ckpts]
        producer = ensemble_hash(ckpts)

        metrics = {"iteration": k, "checkpoint_hash": producer, "n_pseudo_image": data.n_pseudo_image,
                   "n_pseudo_label": data.n_pseudo_label}
        if k > 0:
            metrics["trained_on_labels_from"] = lineage["producer"]
        if manifest.validation and all(e.label for e in manifest.validation):
            _, report = evaluate_models(models, manifest.validation, manifest.resolve, seg_cfg,
                                        "teacher" if k == 0 else f"st{k}", st_cfg.eval_tta)
            metrics["validation"] = report_to_dict(report)
        if k < K or st_cfg.infer_final:
            _, failed = infer_pseudo_labels(models, manifest.target, manifest.resolve, seg_cfg,
                                            it_dir / "pseudo_labels", st_cfg.tta, producer)
            state.failed.extend({"case_id": cid, "iteration": k, "error": msg} for cid, msg in failed)
            state.pseudo_label_dirs[str(k)] = str((it_dir / "pseudo_labels").relative_to(run_dir))
        atomic_write_text(it_dir / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")

        state.k = k
        state.teacher_checkpoint = [str(Path(p).relative_to(run_dir)) for p in ckpts]
        state.manifests[str(k)] = str((it_dir / "manifest.json").relative_to(run_dir))
        state.metrics[str(k)] = metrics
        state.save()
        log.info("self-training iteration %d done: %s", k, metrics.get("validation", {}).get("Mean"))
        if stop_after is not None and k >= stop_after:
            break

    if models is None:
        models = [load_seg_model(run_dir / p) for p in state.teacher_checkpoint]
    return state, models
