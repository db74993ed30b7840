"""Volume and label containers, NIfTI I/O, dataset manifests and the
preprocessing primitives shared by translation and segmentation.

Arrays are stored in (z, y, x) order. On disk they are written in the NIfTI
(x, y, z) convention with the voxel size in ``pixdim``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import nibabel as nib
import numpy as np
from scipy import ndimage

N_CLASSES = 3
CLASS_NAMES = {1: "VS", 2: "cochlea"}


class VolumeError(ValueError):
    """Raised when a volume, label map or file violates its contract."""


class DegenerateInputError(VolumeError):
    """Raised by the normalizers on constant-intensity input."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise VolumeError(f"spacing must have 3 components, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.id)


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"label data must be a non-empty 3D array, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= N_CLASSES):
            bad = np.unique(data[(data < 0) | (data >= N_CLASSES)])
            raise VolumeError(f"label values must be in {{0, 1, 2}}, found {bad.tolist()}")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.spacing, self.id)

    def counts(self) -> dict[int, int]:
        c = np.bincount(self.data.ravel(), minlength=N_CLASSES)
        return {k: int(c[k]) for k in range(N_CLASSES)}


AnyVolume = Union[Volume, LabelMap]


# ---------------------------------------------------------------------------
# NIfTI I/O
# ---------------------------------------------------------------------------

def _save(obj: AnyVolume, path, dtype) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(obj.data.astype(dtype).transpose(2, 1, 0))
    sz, sy, sx = obj.spacing
    img = nib.Nifti1Image(arr, np.diag([sx, sy, sz, 1.0]))
    hdr = img.header
    hdr.set_data_dtype(dtype)
    hdr.set_zooms((sx, sy, sz))
    hdr.set_xyzt_units("mm")
    hdr["descrip"] = obj.id.encode()[:79]
    # make the header deterministic and independent of nibabel defaults
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    img.to_filename(str(path))
    return path


def save_volume(v: Volume, path) -> Path:
    """Write a Volume as a single-file NIfTI-1 with float32 voxels."""
    return _save(v, path, np.float32)


def save_labelmap(lm: LabelMap, path) -> Path:
    """Write a LabelMap as a single-file NIfTI-1 with uint8 voxels."""
    return _save(lm, path, np.uint8)


def _read(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    # nibabel silently repairs some header fields on load; validate the raw bytes first
    try:
        with open(path, "rb") as f:
            hdr = nib.Nifti1Header.from_fileobj(f, check=False)
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeError(f"{path}: malformed NIfTI header ({exc})") from exc
    if int(hdr["sizeof_hdr"]) != 348:
        raise VolumeError(f"{path}: header field 'sizeof_hdr' is {int(hdr['sizeof_hdr'])}, expected 348")
    if hdr["magic"].item() != b"n+1":
        raise VolumeError(f"{path}: header field 'magic' is {hdr['magic'].item()!r}, expected single-file NIfTI-1")
    dims = hdr["dim"]
    if dims[0] != 3:
        raise VolumeError(f"{path}: header field 'dim' declares {dims[0]} dimensions, expected 3")
    # pixdim is float32 on disk; its shortest decimal form gives back the
    # float64 spacing that was written (0.41 rather than 0.4099999964)
    zooms = [float(str(np.float32(z))) for z in hdr["pixdim"][1:4]]
    if not all(np.isfinite(z) and z > 0 for z in zooms):
        raise VolumeError(f"{path}: header field 'pixdim' (spacing) must be positive, got {zooms}")
    try:
        img = nib.Nifti1Image.from_filename(str(path))
        data = np.asanyarray(img.dataobj).transpose(2, 1, 0)
    except Exception as exc:
        raise VolumeError(f"{path}: unreadable voxel data ({exc})") from exc
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"{path}: field 'data' contains non-finite values")
    spacing = (zooms[2], zooms[1], zooms[0])
    descrip = hdr["descrip"].item()
    case_id = descrip.decode(errors="replace").strip("\x00 ") if isinstance(descrip, bytes) else str(descrip)
    if not case_id:
        case_id = path.name.split(".")[0]
    return np.ascontiguousarray(data), spacing, case_id


def load_volume(path) -> Volume:
    data, spacing, case_id = _read(path)
    return Volume(data.astype(np.float32), spacing, case_id)


def load_labelmap(path) -> LabelMap:
    data, spacing, case_id = _read(path)
    return LabelMap(data, spacing, case_id)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class CaseEntry:
    id: str
    volume: str
    label: str | None = None
    provenance: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "volume": self.volume}
        if self.label is not None:
            d["label"] = self.label
        if self.provenance is not None:
            d["provenance"] = self.provenance
        return d


SPLITS = ("source", "target", "validation", "pseudo_target")


@dataclass
class DatasetManifest:
    """Index of cases per split. Paths are relative to ``root`` unless absolute.

    ``pseudo_target`` holds translated source cases paired with the source
    labels; it is empty until the translation stage has run.
    """

    source: list[CaseEntry] = field(default_factory=list)
    target: list[CaseEntry] = field(default_factory=list)
    validation: list[CaseEntry] = field(default_factory=list)
    pseudo_target: list[CaseEntry] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def n_source(self) -> int:
        return len(self.source)

    @property
    def n_target(self) -> int:
        return len(self.target)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def split(self, name: str) -> list[CaseEntry]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def validate(self, check_files: bool = True) -> None:
        seen: dict[str, str] = {}
        for name in ("source", "target", "validation"):
            for e in self.split(name):
                if e.id in seen:
                    raise VolumeError(f"case id {e.id!r} appears in both {seen[e.id]!r} and {name!r}")
                seen[e.id] = name
        if not check_files:
            return
        for name in SPLITS:
            for e in self.split(name):
                for rel in (e.volume, e.label):
                    if rel is not None and not self.resolve(rel).exists():
                        raise FileNotFoundError(f"manifest {name} case {e.id!r}: missing file {rel}")
        for e in self.source:
            if e.label is None:
                raise VolumeError(f"source case {e.id!r} has no label")

    def to_dict(self) -> dict:
        d = {name: [e.to_dict() for e in self.split(name)] for name in ("source", "target", "validation")}
        if self.pseudo_target:
            d["pseudo_target"] = [e.to_dict() for e in self.pseudo_target]
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    unknown = set(raw) - set(SPLITS)
    if unknown:
        raise VolumeError(f"{path}: unknown manifest keys {sorted(unknown)}")
    splits = {}
    for name in SPLITS:
        splits[name] = [CaseEntry(**e) for e in raw.get(name, [])]
    m = DatasetManifest(**splits, root=path.parent)
    m.validate(check_files=check_files)
    return m


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def minmax_normalize(v: Volume) -> Volume:
    """Affinely map intensities onto [0, 1]; min goes to 0 and max to 1."""
    x = v.data.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        raise DegenerateInputError(f"volume {v.id!r} is constant; min-max normalization undefined")
    out = (x - lo) / (hi - lo)
    out = np.clip(out, 0.0, 1.0)
    return v.with_data(out.astype(np.float32))


def zscore_normalize(v: Volume) -> Volume:
    x = v.data.astype(np.float64)
    std = x.std()
    if not std > 0:
        raise DegenerateInputError(f"volume {v.id!r} has zero variance; z-score undefined")
    return v.with_data(((x - x.mean()) / std).astype(np.float32))


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    # voxel-centre alignment: output i samples input floor((i + 0.5) * n_in / n_out)
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def _spline_inplane(data: np.ndarray, out_yx: tuple[int, int]) -> np.ndarray:
    ny, nx = data.shape[1:]
    if (ny, nx) == tuple(out_yx):
        return data
    zoom = (out_yx[0] / ny, out_yx[1] / nx)
    out = np.empty((data.shape[0], *out_yx), dtype=np.float32)
    for z in range(data.shape[0]):
        out[z] = ndimage.zoom(data[z].astype(np.float64), zoom, order=3, mode="grid-mirror", grid_mode=True)
    return out


def resample_to_shape(v: AnyVolume, out_shape: Sequence[int], spacing=None) -> AnyVolume:
    """Resample onto a grid of ``out_shape`` covering the same field of view.

    Volumes get third-order splines in-plane (y, x) and nearest neighbour
    along z; label maps use nearest neighbour on every axis.
    """
    out_shape = tuple(int(s) for s in out_shape)
    if any(s < 1 for s in out_shape):
        raise VolumeError(f"resampled shape {out_shape} has an empty dimension")
    if spacing is None:
        spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.shape, out_shape))
    data = v.data
    if out_shape == v.shape:
        return type(v)(data.copy(), spacing, v.id)
    iz = _nearest_indices(v.shape[0], out_shape[0])
    data = data[iz]
    if isinstance(v, LabelMap):
        data = data[:, _nearest_indices(v.shape[1], out_shape[1])]
        data = data[:, :, _nearest_indices(v.shape[2], out_shape[2])]
        return LabelMap(data, spacing, v.id)
    data = _spline_inplane(data, out_shape[1:])
    return Volume(data.astype(np.float32), spacing, v.id)


def resample(v: AnyVolume, target_spacing) -> AnyVolume:
    target_spacing = _check_spacing(target_spacing)
    if np.allclose(target_spacing, v.spacing, rtol=0, atol=1e-9):
        return type(v)(v.data.copy(), target_spacing, v.id)
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(v.shape, v.spacing, target_spacing))
    if any(s < 1 for s in out_shape):
        raise VolumeError(f"resampling {v.shape} at {v.spacing} to {target_spacing} gives empty shape {out_shape}")
    return resample_to_shape(v, out_shape, target_spacing)


def crop_or_pad_array(arr: np.ndarray, patch_shape, center, fill=0) -> np.ndarray:
    """Extract ``patch_shape`` voxels centred on ``center``; outside is ``fill``.

    Works on the trailing three axes, so channel-first arrays are fine.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    if any(p < 1 for p in patch_shape):
        raise VolumeError(f"patch shape must be positive, got {patch_shape}")
    spatial = arr.shape[-3:]
    out = np.full(arr.shape[:-3] + patch_shape, fill, dtype=arr.dtype)
    src, dst = [], []
    for n, p, c in zip(spatial, patch_shape, center):
        start = int(c) - p // 2
        lo, hi = max(start, 0), min(start + p, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[(..., *dst)] = arr[(..., *src)]
    return out


def crop_or_pad(v: AnyVolume, patch_shape, center) -> AnyVolume:
    return v.with_data(crop_or_pad_array(v.data, patch_shape, center))
