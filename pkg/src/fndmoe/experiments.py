"""Multi-seed experiment protocols and their CSV reports.

Every report starts with ``#`` comment lines holding the resolved
configuration, its hash and the seeds, followed by plain CSV. Numbers are
printed with a fixed precision so reruns of the same spec are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import FeatureRecord, chronological_split
from .errors import ConfigError
from .gating import GATE_MODES
from .model import ModelConfig, gate_dump
from .training import STREAM_EVAL, Metrics, TrainConfig, evaluate, train

METRIC_COLUMNS = ("acc", "f1", "pre", "rec")
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def records_hash(records: Sequence[FeatureRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]


def metric_cells(m: Metrics) -> list[str]:
    return [f"{m.acc:.6f}", f"{m.f1:.6f}", f"{m.precision:.6f}", f"{m.recall:.6f}"]


def render_report(header: dict, rows: Iterable[Sequence]) -> str:
    """Comment header (one ``# key: value`` line per entry) followed by CSV."""
    buf = io.StringIO()
    for key, value in header.items():
        text = value if isinstance(value, str) else canonical_json(value)
        buf.write(f"# {key}: {text}\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def read_report(path) -> tuple[dict[str, str], list[list[str]]]:
    """Inverse of :func:`render_report` (header values stay as raw strings)."""
    header, body = {}, []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition(": ")
                header[key] = value
            else:
                body.append(line)
    return header, list(csv.reader(body))


@dataclass
class RunResult:
    seed: int
    metrics: Metrics
    params: dict
    history: list
    model_config: ModelConfig
    test: list


def run_once(records: Sequence[FeatureRecord], model_config: ModelConfig, train_config: TrainConfig,
             seed: int) -> RunResult:
    """Chronological split, train with ``seed``, score the best checkpoint on test."""
    tr, va, te = chronological_split(records)
    tc = replace(train_config, seed=seed)
    params, history = train(tr, va, model_config, tc)
    return RunResult(seed, evaluate(params, te, model_config, tc.eval_seed), params, history, model_config, te)


def init_fingerprint(records, model_config: ModelConfig, train_config: TrainConfig, seed: int) -> str:
    """Hash of everything except the gate: equal across the modes of one gate ablation."""
    cfg = model_config.to_dict()
    cfg.pop("gate")
    return config_hash({"data": records_hash(records), "model": cfg,
                        "train": replace(train_config, seed=seed).to_dict()})


# -- gate ablation --------------------------------------------------------

def ablate_gates(records, model_config: ModelConfig, train_config: TrainConfig,
                 seeds: Sequence[int] = DEFAULT_SEEDS, modes: Sequence[str] = GATE_MODES,
                 k_overrides: dict[str, int] | None = None) -> list[tuple[str, int, Metrics, str]]:
    """One model per (mode, seed) on the same data and init seed; rows ``(mode, seed, metrics, init hash)``."""
    if not seeds:
        raise ConfigError("at least one seed is required")
    k_overrides = k_overrides or {}
    out = []
    for mode in modes:
        gate = replace(model_config.gate, mode=mode, k=k_overrides.get(mode, model_config.gate.k))
        cfg = replace(model_config, gate=gate)
        for seed in seeds:
            res = run_once(records, cfg, train_config, seed)
            out.append((mode, seed, res.metrics, init_fingerprint(records, cfg, train_config, seed)))
    return out


def summarise(rows, key_index: int = 0) -> list[list[str]]:
    """Mean and population std of each metric per group, groups in first-seen order."""
    groups: dict[str, list[Metrics]] = {}
    for row in rows:
        groups.setdefault(row[key_index], []).append(row[2])
    table = [["group", "n"] + [f"{c}_{s}" for c in METRIC_COLUMNS for s in ("mean", "std")]]
    for name, ms in groups.items():
        cells = [name, str(len(ms))]
        for attr in ("acc", "f1", "precision", "recall"):
            vals = [getattr(m, attr) for m in ms]
            cells += [f"{statistics.fmean(vals):.6f}", f"{statistics.pstdev(vals):.6f}"]
        table.append(cells)
    return table


def gate_report(rows, header: dict) -> str:
    body = [["mode", "seed", *METRIC_COLUMNS, "init_hash"]]
    body += [[mode, str(seed), *metric_cells(m), h] for mode, seed, m, h in rows]
    return render_report(header, body)


# -- modality ablation ----------------------------------------------------

def default_subsets(modalities: Sequence[str]) -> list[tuple[str, ...]]:
    """Singletons, every subset of size N-1, and the full set (deduplicated, in that order)."""
    n = len(modalities)
    out: list[tuple[str, ...]] = [(m,) for m in modalities]
    if n > 2:
        out += list(combinations(modalities, n - 1))
    out.append(tuple(modalities))
    seen, unique = set(), []
    for s in out:
        if s not in seen:
            seen.add(s)
            unique.append(s)
    return unique


def subset_name(subset: Sequence[str]) -> str:
    return "+".join(subset)


def parse_subset(text: str, modalities: Sequence[str]) -> tuple[str, ...]:
    names = [t for t in text.split("+") if t]
    if not names:
        raise ConfigError("a modality subset needs at least one member")
    unknown = set(names) - set(modalities)
    if unknown:
        raise ConfigError(f"unknown modalities {sorted(unknown)}")
    return tuple(m for m in modalities if m in names)


def ablate_modalities(records, model_config: ModelConfig, train_config: TrainConfig,
                      seeds: Sequence[int] = DEFAULT_SEEDS,
                      subsets: Sequence[Sequence[str]] | None = None) -> list[tuple[str, int, Metrics]]:
    if not seeds:
        raise ConfigError("at least one seed is required")
    if subsets is None:
        subsets = default_subsets(model_config.modalities)
    out = []
    for subset in subsets:
        cfg = model_config.restrict(subset)
        for seed in seeds:
            out.append((subset_name(cfg.modalities), seed, run_once(records, cfg, train_config, seed).metrics))
    return out


def modality_report(rows, header: dict) -> str:
    body = [["subset", "seed", *METRIC_COLUMNS]]
    body += [[name, str(seed), *metric_cells(m)] for name, seed, m in rows]
    return render_report(header, body)


def best_subset(rows, seed: int) -> str:
    """Highest test accuracy for ``seed``; ties go to the smaller subset, then to report order."""
    cands = [(i, name, m) for i, (name, s, m) in enumerate(rows) if s == seed]
    _, name, _ = max(cands, key=lambda c: (c[2].acc, -len(c[1].split("+")), -c[0]))
    return name


# -- gate retention -------------------------------------------------------

def retention(result: RunResult, eval_seed: int = 0) -> list[tuple[str, float, float, float]]:
    """Per-pair gate statistics of a trained model over its test split."""
    rng = np.random.default_rng([eval_seed, STREAM_EVAL])
    return gate_dump(result.test, result.params, result.model_config, rng)


def retention_gap(rows, disruptive: Iterable[str]) -> float:
    """Mean retention of informative-only pairs minus mean retention of pairs touching ``disruptive``."""
    bad = set(disruptive)
    touching, clean = [], []
    for label, _, _, kept in rows:
        (touching if set(label.split("→")) & bad else clean).append(kept)
    if not touching or not clean:
        raise ConfigError("need pairs both with and without the disruptive modalities")
    return statistics.fmean(clean) - statistics.fmean(touching)


def markdown_table(table: Sequence[Sequence[str]]) -> str:
    head, *rest = table
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(r) + " |" for r in rest]
    return "\n".join(lines) + "\n"
