"""Run configuration (single JSON file) and manifest hashing."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .inference import InferenceConfig
from .model import HyperPriors
from .signal import DEFAULT_BANDS

OUTPUT_ROOT_ENV = "HDPSLEEP_OUTPUT_ROOT"

__all__ = [
    "ConfigError",
    "SubjectInput",
    "ClusterConfig",
    "EvaluationConfig",
    "RunConfig",
    "canonical_hash",
    "file_sha256",
    "OUTPUT_ROOT_ENV",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectInput:
    id: str
    input: str
    format: str = "csv"  # "csv" or "f32"
    hypnogram: str | None = None
    epoch_seconds: float = 30.0

    def __post_init__(self):
        if self.format not in ("csv", "f32"):
            raise ConfigError(f"subject {self.id}: unknown input format {self.format!r}")


@dataclass(frozen=True)
class ClusterConfig:
    C: int = 9
    restarts: int = 20
    seed: int = 0
    max_iter: int = 500
    sweep: tuple = ()

    def __post_init__(self):
        if self.C < 1 or self.restarts < 1:
            raise ConfigError("clustering needs C >= 1 and restarts >= 1")


@dataclass(frozen=True)
class EvaluationConfig:
    alpha_band: tuple = (10.5, 12.5)


@dataclass(frozen=True)
class RunConfig:
    subjects: tuple
    fs: float = 200.0
    window_seconds: float = 15.0
    bands: tuple = DEFAULT_BANDS
    TW: float = 4.0
    M: int = 5
    artifact_percentile: float | None = 95.0
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output_dir: str = "run"
    checkpoint_every: int = 100
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        d = dict(d)
        try:
            subjects = tuple(SubjectInput(**s) for s in d.pop("subjects"))
            inf = dict(d.pop("inference", {}))
            if "hyperpriors" in inf:
                inf["hyperpriors"] = HyperPriors(**inf["hyperpriors"])
            cl = dict(d.pop("clustering", {}))
            if "sweep" in cl:
                cl["sweep"] = tuple(cl["sweep"])
            ev = dict(d.pop("evaluation", {}))
            if "alpha_band" in ev:
                ev["alpha_band"] = tuple(ev["alpha_band"])
            if "bands" in d:
                d["bands"] = tuple(tuple(map(float, b)) for b in d["bands"])
            cfg = cls(
                subjects=subjects,
                inference=InferenceConfig(**inf),
                clustering=ClusterConfig(**cl),
                evaluation=EvaluationConfig(**ev),
                base_dir=str(base_dir),
                **d,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not subjects:
            raise ConfigError("config lists no subjects")
        if len({s.id for s in subjects}) != len(subjects):
            raise ConfigError("subject ids must be unique")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["inference"] = self.inference.to_dict()
        return json.loads(json.dumps(d))

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            return Path(root) / Path(self.output_dir).name
        return self.resolve(self.output_dir)

    def subject(self, sid: str) -> SubjectInput:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise ConfigError(f"unknown subject {sid!r}")

    # sections of the config each stage depends on
    def spectra_section(self) -> dict:
        return {
            "fs": self.fs,
            "window_seconds": self.window_seconds,
            "bands": [list(b) for b in self.bands],
            "TW": self.TW,
            "M": self.M,
            "artifact_percentile": self.artifact_percentile,
        }


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
