"""Command-line front end: ``fndmoe <command> [options]``.

Exit status is 0 on success, 1 on data or runtime errors and 2 on usage or
configuration errors. All reports are UTF-8 CSV with LF line endings and a
``#`` comment header carrying the resolved configuration, its hash and the
seed(s).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as E
from .data import (FEATURES_FILE, HEADER_FILE, SyntheticConfig, chronological_split, generate_synthetic,
                   load_features, save_dataset)
from .errors import ConfigError, FndMoeError
from .gating import GATE_MODES, GateConfig
from .model import ModelConfig, gate_dump, gate_dump_csv
from .training import STREAM_EVAL, TrainConfig, evaluate, history_rows, params_from_json, params_to_json, train

COMMANDS = ("generate", "train", "evaluate", "ablate-gates", "ablate-modalities", "gate-dump")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with 'synthetic', 'model', 'gate', 'train' sections")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    modelling = argparse.ArgumentParser(add_help=False)
    modelling.add_argument("--k", type=int)
    modelling.add_argument("--tau", type=float)
    modelling.add_argument("--gate-mode", choices=GATE_MODES)
    modelling.add_argument("--epochs", type=int)
    modelling.add_argument("--batch-size", type=int)

    data_arg = argparse.ArgumentParser(add_help=False)
    data_arg.add_argument("--data", type=Path, required=True, help="dataset directory or features.jsonl")

    model_arg = argparse.ArgumentParser(add_help=False)
    model_arg.add_argument("--model", type=Path, required=True, help="checkpoint written by 'train'")
    model_arg.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    seeds = argparse.ArgumentParser(add_help=False)
    seeds.add_argument("--seed", "--seeds", dest="seeds", type=_seeds, default=None,
                       help="one seed or a comma-separated list")

    parser = argparse.ArgumentParser(prog="fndmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    gen = sub.add_parser("generate", parents=[common, seeds], help="write a synthetic dataset")
    gen.add_argument("--n-samples", type=int)
    gen.add_argument("--disruption-strength", type=float)

    sub.add_parser("train", parents=[common, data_arg, modelling, seeds], help="train one model")
    sub.add_parser("evaluate", parents=[common, data_arg, model_arg, seeds], help="score a checkpoint")
    sub.add_parser("gate-dump", parents=[common, data_arg, model_arg, seeds], help="per-pair gate statistics")
    for name, text in (("ablate-gates", "compare gate mechanisms"), ("ablate-modalities", "sweep modality subsets")):
        p = sub.add_parser(name, parents=[common, data_arg, modelling, seeds], help=text)
        p.add_argument("--markdown", action="store_true", help="also write a Markdown summary table")
        if name == "ablate-modalities":
            p.add_argument("--subsets", help="comma-separated subsets such as 'text,text+image'")
    return parser


# -- config resolution ----------------------------------------------------

def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise FndMoeError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = set(cfg) - {"synthetic", "model", "gate", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return cfg


def _build(cls, section: dict, what: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from None


def resolve_synthetic(args, cfg: dict) -> SyntheticConfig:
    section = dict(cfg.get("synthetic", {}))
    if args.n_samples is not None:
        section["n_samples"] = args.n_samples
    if args.disruption_strength is not None:
        section["disruption_strength"] = args.disruption_strength
    if args.seeds:
        section["seed"] = args.seeds[0]
    return _build(SyntheticConfig, section, "synthetic")


def _dataset_shape(data: Path, records) -> dict:
    header_path = (data if data.is_dir() else data.parent) / HEADER_FILE
    if header_path.exists():
        with open(header_path, encoding="utf-8") as fh:
            mods = json.load(fh)["modalities"]
        return {"modalities": [m["name"] for m in mods], "input_dims": [m["dim"] for m in mods],
                "tokens_per_modality": mods[0]["tokens"]}
    first = records[0].features
    return {"modalities": list(first), "input_dims": [v.shape[1] for v in first.values()],
            "tokens_per_modality": next(iter(first.values())).shape[0]}


def resolve_model(args, cfg: dict, data: Path, records) -> ModelConfig:
    section = _dataset_shape(data, records)
    section.update(cfg.get("model", {}))
    gate = dict(section.pop("gate", {}))
    gate.update(cfg.get("gate", {}))
    for flag, key in (("k", "k"), ("tau", "tau"), ("gate_mode", "mode")):
        value = getattr(args, flag, None)
        if value is not None:
            gate[key] = value
    section["gate"] = _build(GateConfig, gate, "gate")
    return _build(ModelConfig, section, "model")


def resolve_train(args, cfg: dict) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    for flag in ("epochs", "batch_size"):
        value = getattr(args, flag, None)
        if value is not None:
            section[flag] = value
    return _build(TrainConfig, section, "train")


def _load_records(data: Path):
    records = load_features(data)
    if not records:
        raise FndMoeError(f"{data}: no records")
    return records


def _header(command: str, resolved: dict, seeds, records=None) -> dict:
    head = {"command": command, "config": resolved, "config_hash": E.config_hash(resolved),
            "seed": ",".join(str(s) for s in seeds)}
    if records is not None:
        head["data_hash"] = E.records_hash(records)
    return head


def _pick_split(records, split: str):
    if split == "all":
        return records
    tr, va, te = chronological_split(records)
    return {"train": tr, "val": va, "test": te}[split]


# -- commands -------------------------------------------------------------

def cmd_generate(args, cfg) -> None:
    syn = resolve_synthetic(args, cfg)
    records = generate_synthetic(syn)
    header = syn.header()
    header["config_hash"] = E.config_hash(header["generator"] | {"modalities": header["modalities"]})
    save_dataset(records, args.out, header)
    print(f"wrote {len(records)} records to {args.out / FEATURES_FILE}")


def cmd_train(args, cfg) -> None:
    records = _load_records(args.data)
    mc, tc = resolve_model(args, cfg, args.data, records), resolve_train(args, cfg)
    seed = (args.seeds or [1])[0]
    tc = replace(tc, seed=seed)
    tr, va, te = chronological_split(records)
    params, history = train(tr, va, mc, tc)
    resolved = {"model": mc.to_dict(), "train": tc.to_dict()}
    header = _header("train", resolved, [seed], records)
    E.write_text(args.out / "model.json", params_to_json(params, meta=header))
    E.write_text(args.out / "history.csv", E.render_report(header, history_rows(history)))
    metrics = evaluate(params, te, mc, tc.eval_seed)
    E.write_text(args.out / "metrics.csv", E.render_report(
        header, [["split", *E.METRIC_COLUMNS], ["test", *E.metric_cells(metrics)]]))
    print(f"test acc {metrics.acc:.4f} f1 {metrics.f1:.4f}")


def _load_checkpoint(args):
    try:
        text = args.model.read_text(encoding="utf-8")
    except OSError as exc:
        raise FndMoeError(f"cannot read model {args.model}: {exc.strerror}") from None
    try:
        params, meta = params_from_json(text)
        config = meta["config"]
        mc = ModelConfig.from_dict(config["model"])
        tc = TrainConfig(**{**config["train"], "betas": tuple(config["train"]["betas"])})
    except (KeyError, TypeError, ValueError) as exc:
        raise FndMoeError(f"{args.model}: not a checkpoint written by 'train' ({exc})") from None
    return params, mc, tc, meta


def cmd_evaluate(args, cfg) -> None:
    records = _pick_split(_load_records(args.data), args.split)
    params, mc, tc, meta = _load_checkpoint(args)
    eval_seed = args.seeds[0] if args.seeds else tc.eval_seed
    metrics = evaluate(params, records, mc, eval_seed)
    resolved = {"model": mc.to_dict(), "train": tc.to_dict(), "split": args.split,
                "checkpoint_hash": meta.get("config_hash", "")}
    header = _header("evaluate", resolved, [eval_seed], records)
    E.write_text(args.out / "metrics.csv", E.render_report(
        header, [["split", *E.METRIC_COLUMNS], [args.split, *E.metric_cells(metrics)]]))
    print(f"{args.split} acc {metrics.acc:.4f} f1 {metrics.f1:.4f}")


def cmd_gate_dump(args, cfg) -> None:
    records = _pick_split(_load_records(args.data), args.split)
    params, mc, tc, meta = _load_checkpoint(args)
    eval_seed = args.seeds[0] if args.seeds else tc.eval_seed
    rows = gate_dump(records, params, mc, np.random.default_rng([eval_seed, STREAM_EVAL]))
    resolved = {"model": mc.to_dict(), "split": args.split, "checkpoint_hash": meta.get("config_hash", "")}
    header = _header("gate-dump", resolved, [eval_seed], records)
    E.write_text(args.out / "gate_dump.csv", E.render_report(header, []) + gate_dump_csv(rows))
    print(f"wrote {len(rows)} pair rows")


def _write_summary(args, name: str, header: dict, rows, key_label: str) -> None:
    table = E.summarise(rows)
    table[0][0] = key_label
    E.write_text(args.out / f"{name}_summary.csv", E.render_report(header, table))
    if args.markdown:
        E.write_text(args.out / f"{name}.md", E.markdown_table(table))
    for line in table[1:]:
        print(f"{line[0]:<40} acc {line[2]} ± {line[3]}")


def cmd_ablate_gates(args, cfg) -> None:
    records = _load_records(args.data)
    mc, tc = resolve_model(args, cfg, args.data, records), resolve_train(args, cfg)
    seeds = args.seeds or list(E.DEFAULT_SEEDS)
    rows = E.ablate_gates(records, mc, tc, seeds)
    header = _header("ablate-gates", {"model": mc.to_dict(), "train": tc.to_dict(), "modes": list(GATE_MODES)},
                     seeds, records)
    for mode in GATE_MODES:
        header[f"init_hash[{mode}]"] = ",".join(h for m, _, _, h in rows if m == mode)
    E.write_text(args.out / "ablate_gates.csv", E.gate_report(rows, header))
    _write_summary(args, "ablate_gates", header, rows, "mode")


def cmd_ablate_modalities(args, cfg) -> None:
    records = _load_records(args.data)
    mc, tc = resolve_model(args, cfg, args.data, records), resolve_train(args, cfg)
    seeds = args.seeds or list(E.DEFAULT_SEEDS)
    if args.subsets:
        subsets = [E.parse_subset(s, mc.modalities) for s in args.subsets.split(",")]
    else:
        subsets = E.default_subsets(mc.modalities)
    rows = E.ablate_modalities(records, mc, tc, seeds, subsets)
    resolved = {"model": mc.to_dict(), "train": tc.to_dict(), "subsets": [E.subset_name(s) for s in subsets]}
    header = _header("ablate-modalities", resolved, seeds, records)
    E.write_text(args.out / "ablate_modalities.csv", E.modality_report(rows, header))
    _write_summary(args, "ablate_modalities", header, rows, "subset")


HANDLERS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "gate-dump": cmd_gate_dump,
    "ablate-gates": cmd_ablate_gates, "ablate-modalities": cmd_ablate_modalities,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args, _load_config(args.config))
    except ConfigError as exc:
        print(f"fndmoe {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (FndMoeError, OSError) as exc:
        print(f"fndmoe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
