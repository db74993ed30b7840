"""Synthetic two-contrast phantoms with VS-like and cochlea-like structures.

Every case is an ellipsoidal "head" holding one tumour-sized ellipsoid and a
much smaller one placed next to it. Anatomy comes from an integer seed; the
contrast map decides how the tissues are painted, so the same anatomy can be
rendered in either domain.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import CaseEntry, DatasetManifest, LabelMap, Volume, save_labelmap, save_volume

TISSUES = ("background", "head", "vs", "cochlea")


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastMap:
    name: str
    means: dict[str, float]
    sigmas: dict[str, float]

    def check(self) -> None:
        for t in TISSUES:
            if t not in self.means or t not in self.sigmas:
                raise PhantomConfigError(f"contrast map {self.name!r} lacks tissue {t!r}")
            if self.sigmas[t] < 0:
                raise PhantomConfigError(f"contrast map {self.name!r}: negative sigma for {t!r}")
        for other in ("background", "head"):
            if self.means["vs"] == self.means[other]:
                raise PhantomConfigError(
                    f"contrast map {self.name!r}: VS mean equals {other} mean; the phantom is untrainable")
        if self.means["cochlea"] == self.means["head"]:
            raise PhantomConfigError(f"contrast map {self.name!r}: cochlea mean equals head mean")

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastMap":
        return cls(d["name"], dict(d["means"]), dict(d["sigmas"]))


# T1-like: tumour brighter than the head. T2-like: tumour darker than the
# head. That flip is what makes a source-only model fail. The cochlea is the
# brightest tissue in both domains, so min-max scaling pins it to the same
# value on either side and the remaining means stay pairwise distinct: a
# voxelwise intensity map between the domains exists that is also the
# identity on target intensities.
SOURCE_CONTRAST = ContrastMap(
    "source",
    means={"background": 0.0, "head": 90.0, "vs": 170.0, "cochlea": 250.0},
    sigmas={"background": 2.0, "head": 6.0, "vs": 6.0, "cochlea": 6.0},
)
TARGET_CONTRAST = ContrastMap(
    "target",
    means={"background": 0.0, "head": 90.0, "vs": 30.0, "cochlea": 250.0},
    sigmas={"background": 2.0, "head": 6.0, "vs": 6.0, "cochlea": 6.0},
)


@dataclass(frozen=True)
class PhantomConfig:
    volume_shape: tuple[int, int, int] = (32, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_source: int = 8
    n_target: int = 8
    n_validation: int = 4
    vs_radius_range: tuple[float, float] = (4.0, 7.0)
    cochlea_radius_range: tuple[float, float] = (2.5, 3.5)
    head_fraction: float = 0.44
    source_contrast_map: ContrastMap = SOURCE_CONTRAST
    target_contrast_map: ContrastMap = TARGET_CONTRAST
    bias_field: bool = True
    bias_strength: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("volume_shape", "spacing", "vs_radius_range", "cochlea_radius_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("source_contrast_map", "target_contrast_map"):
            cm = getattr(self, name)
            if isinstance(cm, dict):
                object.__setattr__(self, name, ContrastMap.from_dict(cm))

    def check(self) -> None:
        for name in ("vs_radius_range", "cochlea_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise PhantomConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.cochlea_radius_range[1] >= self.vs_radius_range[0]:
            raise PhantomConfigError("cochlea_radius_range must lie strictly below vs_radius_range")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise PhantomConfigError(f"bad volume_shape {self.volume_shape}")
        if min(self.n_source, self.n_target, self.n_validation) < 0:
            raise PhantomConfigError("case counts must be non-negative")
        self.source_contrast_map.check()
        self.target_contrast_map.check()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Anatomy:
    head_center: np.ndarray
    head_axes: np.ndarray
    vs_center: np.ndarray
    vs_axes: np.ndarray
    cochlea_center: np.ndarray
    cochlea_axes: np.ndarray
    bias: np.ndarray | None = field(default=None, repr=False)


def _ellipsoid_mask(shape, spacing, center, axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = 0.0
    for g, s, c, a in zip(grids, spacing, center, axes):
        acc = acc + ((g * s - c) / a) ** 2
    return acc <= 1.0


def sample_anatomy(anatomy_seed: int, cfg: PhantomConfig, max_tries: int = 200) -> Anatomy:
    rng = np.random.default_rng(anatomy_seed)
    spacing = np.asarray(cfg.spacing, dtype=np.float64)
    extent = np.asarray(cfg.volume_shape) * spacing
    # voxel centres live at index * spacing, so the grid spans [0, extent - spacing]
    head_center = (extent - spacing) / 2.0
    head_axes = extent * cfg.head_fraction
    gap_lo, gap_hi = 1.0, 2.0
    for _ in range(max_tries):
        vs_axes = rng.uniform(*cfg.vs_radius_range, size=3)
        co_axes = rng.uniform(*cfg.cochlea_radius_range, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = rng.uniform(-1, 1, size=3) * head_axes
        vs_center = head_center + offset
        dist = vs_axes.max() + co_axes.max() + rng.uniform(gap_lo, gap_hi)
        co_center = vs_center + direction * dist
        # bounding spheres shrunk into the head ellipsoid keep both structures inside it
        ok = all(
            np.sum(((c - head_center) / (head_axes - r)) ** 2) <= 1.0 and np.all(head_axes > r)
            for c, r in ((vs_center, vs_axes.max()), (co_center, co_axes.max()))
        )
        if ok:
            break
    else:
        raise PhantomConfigError(
            f"could not fit VS and cochlea inside the head after {max_tries} tries; "
            "shrink the radius ranges or enlarge volume_shape")
    bias = None
    if cfg.bias_field and cfg.bias_strength > 0:
        coarse = rng.normal(size=(4, 4, 4))
        field_ = ndimage.zoom(coarse, np.asarray(cfg.volume_shape) / 4.0, order=3, grid_mode=True, mode="nearest")
        field_ = field_[tuple(slice(0, n) for n in cfg.volume_shape)]
        field_ = field_ / (np.abs(field_).max() + 1e-12)
        bias = 1.0 + cfg.bias_strength * field_
    return Anatomy(head_center, head_axes, vs_center, vs_axes, co_center, co_axes, bias)


def render_case(anatomy_seed: int, contrast_map: ContrastMap, cfg: PhantomConfig,
                case_id: str | None = None) -> tuple[Volume, LabelMap]:
    """Render one phantom case under ``contrast_map``.

    The label map depends only on ``anatomy_seed``; the noise depends on the
    seed and the contrast map name.
    """
    cfg.check()
    an = sample_anatomy(anatomy_seed, cfg)
    shape, spacing = cfg.volume_shape, cfg.spacing
    head = _ellipsoid_mask(shape, spacing, an.head_center, an.head_axes)
    vs = _ellipsoid_mask(shape, spacing, an.vs_center, an.vs_axes)
    co = _ellipsoid_mask(shape, spacing, an.cochlea_center, an.cochlea_axes)

    label = np.zeros(shape, dtype=np.uint8)
    label[vs] = 1
    label[co] = 2
    tissue = np.zeros(shape, dtype=np.int64)
    tissue[head] = 1
    tissue[vs] = 2
    tissue[co] = 3

    noise_rng = np.random.default_rng([anatomy_seed, zlib.crc32(contrast_map.name.encode())])
    means = np.array([contrast_map.means[t] for t in TISSUES])
    sigmas = np.array([contrast_map.sigmas[t] for t in TISSUES])
    img = means[tissue]
    if np.any(sigmas > 0):
        img = img + sigmas[tissue] * noise_rng.standard_normal(shape)
    if an.bias is not None:
        img = img * an.bias
    case_id = case_id if case_id is not None else f"case_{anatomy_seed}"
    return Volume(img.astype(np.float32), spacing, case_id), LabelMap(label, spacing, case_id)


def case_seed(seed: int, case_index: int) -> int:
    """Per-case anatomy seed; distinct case indices never collide for one seed."""
    return int(seed) ^ int(case_index)


def generate_dataset(cfg: PhantomConfig, out_dir) -> DatasetManifest:
    """Write an unpaired source/target/validation phantom dataset.

    Case indices run over source, then target, then validation, so no target
    case shares an anatomy seed with a source case.
    """
    cfg.check()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PhantomConfigError(f"output directory {out_dir} is not writable: {exc}") from exc

    manifest = DatasetManifest(root=out_dir)
    report = {"config": cfg.to_dict(), "cases": []}
    plan = [("source", "src", cfg.n_source, cfg.source_contrast_map, True),
            ("target", "tgt", cfg.n_target, cfg.target_contrast_map, False),
            ("validation", "val", cfg.n_validation, cfg.target_contrast_map, True)]
    index = 0
    for split, prefix, n, cmap, with_label in plan:
        for i in range(n):
            cid = f"{prefix}_{i:03d}"
            aseed = case_seed(cfg.seed, index)
            index += 1
            vol, lab = render_case(aseed, cmap, cfg, case_id=cid)
            counts = lab.counts()
            if counts[1] < 1 or counts[2] < 1:
                raise PhantomConfigError(f"case {cid} lacks a foreground class: {counts}")
            vpath = f"{split}/{cid}_img.nii"
            save_volume(vol, out_dir / vpath)
            entry = CaseEntry(cid, vpath)
            if with_label:
                lpath = f"{split}/{cid}_lbl.nii"
                save_labelmap(lab, out_dir / lpath)
                entry.label = lpath
            manifest.split(split).append(entry)
            report["cases"].append({"id": cid, "split": split, "anatomy_seed": aseed,
                                    "contrast": cmap.name,
                                    "voxel_counts": {"background": counts[0], "VS": counts[1],
                                                     "cochlea": counts[2]}})
    (out_dir / "generation_report.json").write_text(json.dumps(report, indent=2) + "\n")
    manifest.save(out_dir / "manifest.json")
    return manifest
