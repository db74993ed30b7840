"""Dice, average symmetric surface distance, and Table-style report rows."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import CLASS_NAMES, CaseEntry, LabelMap, load_labelmap

_SIX = ndimage.generate_binary_structure(3, 1)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def dice(pred, gt, cls: int) -> float:
    """2|P∩G| / (|P|+|G|) for one class; 1.0 when both sets are empty."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    p, g = p == cls, g == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour in background.

    Voxels outside the array count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def empty_sentinel(shape, spacing) -> float:
    """ASSD assigned when exactly one of the two masks is empty: the volume diagonal in mm."""
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def assd(pred, gt, cls: int, spacing=None) -> float:
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, LabelMap) else (1.0, 1.0, 1.0)
    spacing = tuple(float(s) for s in spacing)
    if not all(s > 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    sp, sg = surface_mask(p == cls), surface_mask(g == cls)
    n_p, n_g = int(sp.sum()), int(sg.sum())
    if n_p == 0 and n_g == 0:
        return 0.0
    if n_p == 0 or n_g == 0:
        return empty_sentinel(p.shape, spacing)
    # exact Euclidean distance (in mm) from every voxel to the nearest surface voxel
    dist_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    total = dist_to_g[sp].sum() + dist_to_p[sg].sum()
    return float(total / (n_p + n_g))


@dataclass
class CaseScore:
    case_id: str
    dice: dict[int, float]
    assd: dict[int, float]
    missing: bool = False


@dataclass
class ReportRow:
    """One (method, class) line of a study report. ``std`` is the population std."""

    method: str
    cls: str
    dice_mean: float
    dice_std: float
    assd_mean: float
    assd_std: float
    n_cases: int


@dataclass
class StudyReport:
    method: str
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, cls: str) -> ReportRow:
        for r in self.rows:
            if r.cls == cls:
                return r
        raise KeyError(cls)

    @property
    def mean_dice(self) -> float:
        return self.row("Mean").dice_mean


def report_to_dict(report: StudyReport) -> dict:
    return {r.cls: {"dice_mean": r.dice_mean, "dice_std": r.dice_std, "assd_mean": r.assd_mean,
                    "assd_std": r.assd_std, "n_cases": r.n_cases} for r in report.rows}


def report_from_dict(method: str, d: dict) -> StudyReport:
    return StudyReport(method, [ReportRow(method, cls, v["dice_mean"], v["dice_std"], v["assd_mean"],
                                          v["assd_std"], int(v["n_cases"])) for cls, v in d.items()])


def score_case(pred: LabelMap | None, gt: LabelMap, case_id: str | None = None) -> CaseScore:
    case_id = case_id or gt.id
    if pred is None:
        sentinel = empty_sentinel(gt.shape, gt.spacing)
        return CaseScore(case_id, {c: 0.0 for c in CLASS_NAMES}, {c: sentinel for c in CLASS_NAMES}, True)
    return CaseScore(case_id,
                     {c: dice(pred, gt, c) for c in CLASS_NAMES},
                     {c: assd(pred, gt, c, gt.spacing) for c in CLASS_NAMES})


def aggregate(method: str, scores: list[CaseScore]) -> StudyReport:
    """Mean ± population std per class, plus a "Mean" row averaging the classes."""
    if not scores:
        raise ValueError("no case scores to aggregate")
    report = StudyReport(method)
    per_class_d = {c: np.array([s.dice[c] for s in scores]) for c in CLASS_NAMES}
    per_class_a = {c: np.array([s.assd[c] for s in scores]) for c in CLASS_NAMES}
    for c, name in CLASS_NAMES.items():
        d, a = per_class_d[c], per_class_a[c]
        report.rows.append(ReportRow(method, name, float(d.mean()), float(d.std()),
                                     float(a.mean()), float(a.std()), len(scores)))
    # per-case average over classes; its mean equals the mean of the class means
    d_case = np.mean([per_class_d[c] for c in CLASS_NAMES], axis=0)
    a_case = np.mean([per_class_a[c] for c in CLASS_NAMES], axis=0)
    vs, co = report.rows
    report.rows.append(ReportRow(method, "Mean",
                                 (vs.dice_mean + co.dice_mean) / 2.0, float(d_case.std()),
                                 (vs.assd_mean + co.assd_mean) / 2.0, float(a_case.std()),
                                 len(scores)))
    return report


def score_dataset(pred_dir, entries: list[CaseEntry], resolve=None,
                  method: str = "method") -> tuple[list[CaseScore], StudyReport]:
    """Score ``<pred_dir>/<case id>.nii`` against the labels in ``entries``.

    ``resolve`` maps manifest-relative label paths to real paths (normally
    ``DatasetManifest.resolve``). Cases without a prediction score Dice 0 and
    the ASSD sentinel and are flagged ``missing``.
    """
    pred_dir = Path(pred_dir)
    resolve = resolve or Path
    labelled = [e for e in entries if e.label is not None]
    found = [e for e in labelled if (pred_dir / f"{e.id}.nii").exists()]
    if not found:
        raise ValueError(f"no predictions in {pred_dir} match any of {len(labelled)} labelled cases")
    scores = []
    for e in labelled:
        gt = load_labelmap(resolve(e.label))
        p = pred_dir / f"{e.id}.nii"
        pred = load_labelmap(p) if p.exists() else None
        scores.append(score_case(pred, gt, e.id))
    return scores, aggregate(method, scores)
