"""Feature records, JSON-Lines ingestion, chronological splits, synthetic data.

On-disk layout of a dataset directory::

    dataset.json     {"modalities": [{"name", "dim", "tokens"}, ...], "n": int, ...}
    features.jsonl   {"id", "ts", "label", "features": {"<name>": [[floats]...]}} per line

The synthetic generator is one concrete model of modality disruption:
informative modalities carry a class-dependent mean, disruptive ones carry a
loud, label-independent "style" signal whose spread grows with
``disruption_strength``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InvalidArgumentError

FEATURES_FILE = "features.jsonl"
HEADER_FILE = "dataset.json"
STYLE_COMPONENTS = 4
# style amplitude = 1 + STYLE_GAIN * strength (times the centre norm)
STYLE_GAIN = 10.0


@dataclass
class FeatureRecord:
    id: str
    ts: int
    label: int
    features: dict[str, np.ndarray]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.id == other.id and self.ts == other.ts and self.label == other.label
            and self.features.keys() == other.features.keys()
            and all(np.array_equal(self.features[k], other.features[k]) for k in self.features)
        )

    def to_json(self) -> str:
        feats = {name: mat.tolist() for name, mat in self.features.items()}
        return json.dumps({"id": self.id, "ts": self.ts, "label": self.label, "features": feats},
                          separators=(",", ":"))


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int = 16
    tokens: int = 4


@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int = 2000
    modalities: tuple[ModalitySpec, ...] = tuple(
        ModalitySpec(name) for name in ("text", "audio_vgg", "audio_w2v", "image", "video")
    )
    informative: tuple[str, ...] = ("text", "audio_vgg", "audio_w2v", "image")
    disruptive: tuple[str, ...] = ("video",)
    disruption_strength: float = 0.8
    class_separation: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        mods = tuple(m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "informative", tuple(self.informative))
        object.__setattr__(self, "disruptive", tuple(self.disruptive))
        names = [m.name for m in mods]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names: {names}")
        if not self.informative:
            raise ConfigError("at least one modality must be informative")
        overlap = set(self.informative) & set(self.disruptive)
        if overlap:
            raise ConfigError(f"modalities both informative and disruptive: {sorted(overlap)}")
        unknown = (set(self.informative) | set(self.disruptive)) - set(names)
        if unknown:
            raise ConfigError(f"unknown modalities in subsets: {sorted(unknown)}")
        if not 0.0 <= self.disruption_strength <= 1.0:
            raise ConfigError("disruption_strength must lie in [0, 1]")
        if self.class_separation <= 0 or self.noise_sigma <= 0:
            raise ConfigError("class_separation and noise_sigma must be positive")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be non-negative")

    @property
    def modality_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    def header(self) -> dict:
        return {
            "modalities": [{"name": m.name, "dim": m.dim, "tokens": m.tokens} for m in self.modalities],
            "n": self.n_samples,
            "generator": {
                "informative": list(self.informative), "disruptive": list(self.disruptive),
                "disruption_strength": self.disruption_strength, "class_separation": self.class_separation,
                "noise_sigma": self.noise_sigma, "seed": self.seed,
            },
        }


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic(config: SyntheticConfig) -> list[FeatureRecord]:
    """Deterministic synthetic dataset; record ``i`` depends only on (seed, i)."""
    shared = np.random.default_rng([config.seed, 0])
    directions = {m.name: _unit(shared.normal(size=m.dim)) for m in config.modalities}
    centres = {m.name: shared.normal(size=(STYLE_COMPONENTS, m.dim)) for m in config.modalities}
    amplitude = 1.0 + STYLE_GAIN * config.disruption_strength
    informative, disruptive = set(config.informative), set(config.disruptive)
    sigma = config.noise_sigma

    records = []
    for i in range(config.n_samples):
        rng = np.random.default_rng([config.seed, 1, i])
        label = int(rng.integers(0, 2))
        sign = 1.0 if label else -1.0
        feats = {}
        for m in config.modalities:
            noise = rng.normal(0.0, sigma, size=(m.tokens, m.dim))
            if m.name in informative:
                feats[m.name] = sign * config.class_separation * directions[m.name] + noise
            elif m.name in disruptive:
                comp = int(rng.integers(0, STYLE_COMPONENTS))
                style = amplitude * (centres[m.name][comp] + rng.normal(size=m.dim))
                feats[m.name] = style + noise
            else:
                feats[m.name] = noise
        records.append(FeatureRecord(id=f"s{i:06d}", ts=i, label=label, features=feats))
    return records


def _read_header(path: Path) -> dict | None:
    header_path = path.parent / HEADER_FILE
    if header_path.exists():
        with open(header_path, encoding="utf-8") as fh:
            return json.load(fh)
    return None


def _resolve(path) -> Path:
    path = Path(path)
    return path / FEATURES_FILE if path.is_dir() else path


def load_features(path, header: dict | None = None) -> list[FeatureRecord]:
    """Read and validate a features JSON-Lines file (or a dataset directory).

    Shapes are checked against ``header`` (default: the sibling
    ``dataset.json`` if present, else the first record).
    """
    path = _resolve(path)
    if not path.exists():
        raise DataError(f"no such features file: {path}")
    if header is None:
        header = _read_header(path)
    expected = None
    if header is not None:
        expected = {m["name"]: (int(m["tokens"]), int(m["dim"])) for m in header["modalities"]}

    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_record(obj, path, lineno)
            if expected is None:
                expected = {k: v.shape for k, v in rec.features.items()}
            if set(rec.features) != set(expected):
                raise DataError(f"{path}:{lineno}: modalities {sorted(rec.features)} != {sorted(expected)}")
            for name, shape in expected.items():
                if rec.features[name].shape != tuple(shape):
                    raise DataError(f"{path}:{lineno}: modality {name!r} has shape "
                                    f"{rec.features[name].shape}, expected {tuple(shape)}")
            records.append(rec)
    return records


def _parse_record(obj, path: Path, lineno: int) -> FeatureRecord:
    where = f"{path}:{lineno}"
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("id", "ts", "label", "features"):
        if key not in obj:
            raise DataError(f"{where}: missing field {key!r}")
    label = obj["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise DataError(f"{where}: label must be 0 or 1, got {label!r}")
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise DataError(f"{where}: ts must be an integer, got {ts!r}")
    if not isinstance(obj["features"], dict):
        raise DataError(f"{where}: features must be an object")
    feats = {}
    for name, rows in obj["features"].items():
        try:
            mat = np.array(rows, dtype=np.float64)
        except (TypeError, ValueError):
            raise DataError(f"{where}: modality {name!r} is not a rectangular float matrix") from None
        if mat.ndim != 2 or not np.all(np.isfinite(mat)):
            raise DataError(f"{where}: modality {name!r} must be a finite 2-D matrix")
        feats[name] = mat
    return FeatureRecord(id=str(obj["id"]), ts=ts, label=int(label), features=feats)


def save_features(records: Iterable[FeatureRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def save_dataset(records: Sequence[FeatureRecord], directory, header: dict) -> Path:
    """Write ``dataset.json`` and ``features.jsonl`` into ``directory``."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    header = dict(header)
    header["n"] = len(records)
    with open(directory / HEADER_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_features(records, directory / FEATURES_FILE)
    return directory


def chronological_split(records: Sequence[FeatureRecord], percents=(70, 15)):
    """Sort by (ts, id); first floor(0.7n) train, next floor(0.15n) val, rest test."""
    n = len(records)
    if n < 3:
        raise InvalidArgumentError(f"need at least 3 records to split, got {n}")
    ordered = sorted(records, key=lambda r: (r.ts, r.id))
    # integer arithmetic: 0.7 * n in floating point can land just below an integer
    n_train = n * percents[0] // 100
    n_val = n * percents[1] // 100
    return ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:]
