"""Run configuration: one file with a section per stage, strict about keys."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .phantom import PhantomConfig
from .segmentation.unet import SegConfig
from .selftrain import SelfTrainConfig
from .translation.losses import TranslationLossWeights
from .translation.training import TranslationConfig


class ConfigError(ValueError):
    """Bad configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class EvalConfig:
    tta: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, deterministic: bool | None = None) -> "RunConfig":
        d = self.to_dict()
        for key, value in (("seed", seed), ("deterministic", True if deterministic else None)):
            if value is None:
                continue
            d[key] = value
            for name in SECTIONS:
                if key in d[name]:
                    d[name][key] = value
        return run_config_from_dict(d)

    def stage_seeds(self) -> dict:
        """The global seed and determinism flag pushed into every stage config."""
        return {"seed": self.seed, "deterministic": self.deterministic}


SECTIONS = {"phantom": PhantomConfig, "translation": TranslationConfig, "segmentation": SegConfig,
            "selftrain": SelfTrainConfig, "evaluation": EvalConfig}
# keys whose values are dataclasses in their own right
NESTED = {("translation", "weights"): TranslationLossWeights}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(d) -> str:
    return json.dumps(_plain(d), sort_keys=True, separators=(",", ":"))


def _check_keys(d: dict, cls, prefix: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping, got {type(d).__name__}", prefix or None)
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            key = f"{prefix}.{k}" if prefix else k
            raise ConfigError(f"unknown config key {key!r}", key)


def run_config_from_dict(d: dict | None) -> RunConfig:
    """Merge ``d`` over the defaults. Any unknown key raises ConfigError naming it."""
    d = dict(d or {})
    _check_keys(d, RunConfig, "")
    seed = d.get("seed", 0)
    deterministic = bool(d.get("deterministic", False))
    built = {}
    for name, cls in SECTIONS.items():
        sec = dict(d.get(name) or {})
        _check_keys(sec, cls, name)
        for (sname, key), sub in NESTED.items():
            if sname == name and key in sec:
                _check_keys(sec[key], sub, f"{name}.{key}")
        if name != "phantom" and "seed" in {f.name for f in fields(cls)}:
            sec.setdefault("seed", seed)
        if "deterministic" in {f.name for f in fields(cls)}:
            sec.setdefault("deterministic", deterministic)
        if name == "phantom":
            sec.setdefault("seed", seed)
        try:
            obj = cls(**sec)
            if hasattr(obj, "check"):
                obj.check()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}", name) from exc
        built[name] = obj
    return RunConfig(seed=seed, deterministic=deterministic, **built)


def load_run_config(path=None) -> RunConfig:
    """Read YAML or JSON (JSON is valid YAML); no path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return run_config_from_dict(raw or {})


def echo_config(cfg: RunConfig, run_dir) -> Path:
    """Write the effective (defaults-merged) config into the run directory."""
    from .volume import atomic_write_text
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def dataclass_hash(obj) -> str:
    d = asdict(obj) if is_dataclass(obj) else obj
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:12]
