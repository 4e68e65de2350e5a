"""Config-driven command line: synth | prep | train | eval | compare.

One JSON config file drives every stage; ``--set a.b.c=value`` patches
individual keys. Each command writes a ``config.echo.json`` with the
effective configuration next to its artifacts. All randomness derives
from the single top-level seed through fixed role offsets: +1 raw data
synthesis, +2 preprocessing, +3 embedding synthesis, +4 training (the
trainer further derives its projector-init and per-epoch streams).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bilevel, dataio, embed, evalmetrics, recmodel, synthdata

log = logging.getLogger("bifair")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "synth": {
        "num_users": 1000,
        "num_items": 600,
        "num_genres": 4,
        "genre_weights": None,
        "d_sem": 16,
        "group_noise_scale": [0.05, 0.2, 0.4, 0.6],
        "signal_scale": 0.35,
        "affinity_sharpness": 8.0,
        "user_quirk": 0.25,
        "min_interactions": 28,
        "max_interactions": 56,
        "valid_fraction": 0.85,
        "popularity_skew": 0.8,
        "popularity_strength": 1.0,
        "genre_concentration": 0.3,
    },
    "data": {
        "interactions": None,   # default: <out_dir>/raw/interactions.csv
        "metadata": None,       # default: <out_dir>/raw/item_meta.csv
        "embeddings": None,     # default: <out_dir>/embeddings.bin
        "dataset_dir": None,    # default: <out_dir>/dataset
        "min_rating": 3.0,
        "min_user_interactions": 20,
        "split_ratio": [4, 3, 3],
        "top_pop_fraction": 0.1,
        "split_mode": "random",
        "fixpoint": False,
        "normalize_embeddings": False,
    },
    "train": {
        "grouping": "genre",     # or "popularity"
        "train_z": None,         # auto: True for bifair, False for baselines
        "checkpoint_dir": None,  # default: <out_dir>/checkpoint
        # remaining keys mirror bilevel.TrainConfig defaults
    },
    "eval": {
        "k": 20,
        "metric": "recall",
        "epsilons": [0.05, 0.1],
        "split": "test",
        "strict": False,
        "measure_runtime": False,
        "checkpoint_dir": None,
        "report_dir": None,      # default: <out_dir>/report
    },
    "compare": {
        "methods": ["plain", "reweight", "groupdro", "bifair"],
        "seeds": [0, 1, 2],
        "dir": None,             # default: <out_dir>/compare
    },
}

_TRAIN_FIELD_NAMES = {f.name for f in fields(bilevel.TrainConfig)}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(cfg: dict, expr: str) -> None:
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {part!r} in {key!r}")
    node[parts[-1]] = value


def load_config(path: str | None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user_cfg, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = deep_merge(cfg, user_cfg)
    for expr in overrides:
        apply_override(cfg, expr)
    return cfg


def _paths(cfg: dict) -> dict:
    out = Path(cfg["out_dir"])
    d = cfg["data"]
    return {
        "out": out,
        "interactions": Path(d["interactions"] or out / "raw" / "interactions.csv"),
        "metadata": Path(d["metadata"] or out / "raw" / "item_meta.csv"),
        "embeddings": Path(d["embeddings"] or out / "embeddings.bin"),
        "dataset": Path(d["dataset_dir"] or out / "dataset"),
        "checkpoint": Path(cfg["train"]["checkpoint_dir"] or out / "checkpoint"),
        "report": Path(cfg["eval"]["report_dir"] or out / "report"),
        "compare": Path(cfg["compare"]["dir"] or out / "compare"),
    }


def _prep_config(cfg: dict) -> dataio.PreprocessConfig:
    d = cfg["data"]
    pc = dataio.PreprocessConfig(
        min_rating=float(d["min_rating"]),
        min_user_interactions=int(d["min_user_interactions"]),
        split_ratio=tuple(float(x) for x in d["split_ratio"]),
        top_pop_fraction=float(d["top_pop_fraction"]),
        seed=int(cfg["seed"]) + 2,
        split_mode=d["split_mode"],
        fixpoint=bool(d["fixpoint"]),
    )
    pc.validate()
    return pc


def _train_config(cfg: dict, fairness: str | None = None,
                  seed: int | None = None) -> bilevel.TrainConfig:
    t = dict(cfg["train"])
    t.pop("grouping", None)
    t.pop("checkpoint_dir", None)
    train_z = t.pop("train_z", None)
    unknown = set(t) - _TRAIN_FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown train option(s): {sorted(unknown)}")
    if "adam_betas" in t:
        t["adam_betas"] = tuple(t["adam_betas"])
    tc = bilevel.TrainConfig(**t)
    if fairness is not None:
        tc.fairness = fairness
    tc.seed = int(cfg["seed"]) + 4 if seed is None else int(seed)
    if train_z is None:
        tc.train_z = tc.fairness == "bifair"
    else:
        tc.train_z = bool(train_z)
    tc.validate()
    return tc


def _echo(cfg: dict, where: Path) -> None:
    where.mkdir(parents=True, exist_ok=True)
    (where / "config.echo.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


def _load_groupings(cfg: dict, ds: dataio.Dataset, need_genre: bool,
                    paths: dict) -> dict[str, dataio.GroupAssignment]:
    groupings = {"popularity": dataio.assign_popularity_groups(
        ds, cfg["data"]["top_pop_fraction"])}
    if paths["metadata"].exists():
        metadata = dataio.load_item_metadata(paths["metadata"])
        groupings["genre"] = dataio.assign_attribute_groups(metadata, ds)
    elif need_genre:
        raise ConfigError(f"metadata file required for genre grouping: {paths['metadata']}")
    return groupings


def cmd_synth(cfg: dict) -> None:
    paths = _paths(cfg)
    s = cfg["synth"]
    sd_cfg = synthdata.SynthDataConfig(
        num_users=int(s["num_users"]), num_items=int(s["num_items"]),
        num_genres=int(s["num_genres"]),
        genre_weights=None if s.get("genre_weights") is None
        else tuple(float(x) for x in s["genre_weights"]),
        d_sem=int(s["d_sem"]),
        signal_scale=float(s["signal_scale"]),
        affinity_sharpness=float(s["affinity_sharpness"]),
        user_quirk=float(s["user_quirk"]),
        min_interactions=int(s["min_interactions"]),
        max_interactions=int(s["max_interactions"]),
        valid_fraction=float(s["valid_fraction"]),
        popularity_skew=float(s["popularity_skew"]),
        popularity_strength=float(s["popularity_strength"]),
        genre_concentration=float(s["genre_concentration"]), seed=int(cfg["seed"]) + 1)
    sd_cfg.validate()
    data = synthdata.generate(sd_cfg)
    synthdata.write_raw_files(data, paths["interactions"].parent)
    log.info("synth: %d interactions over %d users", len(data.interactions), s["num_users"])

    raw = dataio.load_interactions(paths["interactions"])
    ds = dataio.preprocess(raw, _prep_config(cfg))
    ds.save(paths["dataset"])

    scales = [float(x) for x in s["group_noise_scale"]]
    if len(scales) < int(s["num_genres"]):
        raise ConfigError("group_noise_scale needs one entry per genre")
    Z = synthdata.benchmark_embeddings(data, ds, scales[: int(s["num_genres"])],
                                       seed=int(cfg["seed"]) + 3)
    embed.save_embeddings(paths["embeddings"], Z)
    _echo(cfg, paths["out"])
    log.info("synth: dataset %d users x %d items, embeddings %s",
             ds.num_users, ds.num_items, paths["embeddings"])


def cmd_prep(cfg: dict) -> None:
    paths = _paths(cfg)
    raw = dataio.load_interactions(paths["interactions"])
    ds = dataio.preprocess(raw, _prep_config(cfg))
    ds.save(paths["dataset"])
    _echo(cfg, paths["dataset"])
    log.info("prep: %d users x %d items -> %s", ds.num_users, ds.num_items, paths["dataset"])


def _load_dataset_and_z(cfg: dict, paths: dict):
    ds = dataio.Dataset.load(paths["dataset"])
    Z0 = embed.load_embeddings(paths["embeddings"], ds.num_items,
                               normalize=bool(cfg["data"]["normalize_embeddings"]))
    return ds, Z0


def _run_training(cfg: dict, paths: dict, tc: bilevel.TrainConfig,
                  checkpoint_dir: Path) -> bilevel.TrainedModel:
    ds, Z0 = _load_dataset_and_z(cfg, paths)
    grouping = cfg["train"]["grouping"]
    groupings = _load_groupings(cfg, ds, need_genre=grouping == "genre", paths=paths)
    if grouping not in groupings:
        raise ConfigError(f"unknown training grouping {grouping!r}")
    model = bilevel.train(ds, groupings[grouping], Z0, tc)
    bilevel.save_checkpoint(checkpoint_dir, model, tc, config_echo=cfg)
    return model


def cmd_train(cfg: dict) -> None:
    paths = _paths(cfg)
    tc = _train_config(cfg)
    model = _run_training(cfg, paths, tc, paths["checkpoint"])
    log.info("train: best epoch %d, %d epochs total", model.best_epoch, len(model.history))


def _evaluate_checkpoint(cfg: dict, paths: dict, checkpoint_dir: Path) -> dict:
    ds = dataio.Dataset.load(paths["dataset"])
    theta = recmodel.load_model(checkpoint_dir)
    Zm = embed.load_embeddings(checkpoint_dir / "z.bin", ds.num_items)
    groupings = _load_groupings(cfg, ds, need_genre=False, paths=paths)
    e = cfg["eval"]
    ks = e["k"] if isinstance(e["k"], list) else [e["k"]]
    opts = evalmetrics.ReportOptions(
        K=int(ks[0]), metric=e["metric"], epsilons=tuple(float(x) for x in e["epsilons"]),
        split=e["split"], strict=bool(e["strict"]), tau=float(cfg["train"].get("tau", 0.1)),
        pooling=cfg["train"].get("pooling", "mean"), scoring=cfg["train"].get("scoring", "cosine"),
        measure_runtime=bool(e["measure_runtime"]), config_echo=cfg)
    report = evalmetrics.build_report(theta, Zm.Z, ds, groupings, opts)
    if len(ks) > 1:
        report["by_k"] = {}
        for k in ks[1:]:
            sub = evalmetrics.build_report(theta, Zm.Z, ds, groupings,
                                           evalmetrics.ReportOptions(
                                               K=int(k), metric=e["metric"],
                                               epsilons=tuple(float(x) for x in e["epsilons"]),
                                               split=e["split"], strict=bool(e["strict"]),
                                               tau=opts.tau, pooling=opts.pooling,
                                               scoring=opts.scoring))
            report["by_k"][str(k)] = {"overall": sub["overall"], "groupings": sub["groupings"]}
    return report


def cmd_eval(cfg: dict) -> None:
    paths = _paths(cfg)
    checkpoint = Path(cfg["eval"]["checkpoint_dir"] or paths["checkpoint"])
    if not (checkpoint / "model.json").exists():
        raise ConfigError(f"no trained checkpoint at {checkpoint}")
    report = _evaluate_checkpoint(cfg, paths, checkpoint)
    evalmetrics.write_report(report, paths["report"])
    _echo(cfg, paths["report"])
    log.info("eval: report at %s", paths["report"] / "report.json")


_COMPARE_COLUMNS = ["recall", "ndcg", "hr", "pop_cv", "pop_min", "genre_cv", "genre_min"]


def _report_row(report: dict) -> dict:
    row = {
        "recall": report["overall"]["recall"],
        "ndcg": report["overall"]["ndcg"],
        "hr": report["overall"]["hr"],
    }
    for name, prefix in (("popularity", "pop"), ("genre", "genre")):
        entry = report["groupings"].get(name, {})
        row[f"{prefix}_cv"] = entry.get("cv")
        row[f"{prefix}_min"] = entry.get("min_bottom")
    return row


def cmd_compare(cfg: dict) -> None:
    paths = _paths(cfg)
    methods = cfg["compare"]["methods"]
    seeds = [int(s) for s in cfg["compare"]["seeds"]]
    for m in methods:
        if m not in ("plain", "reweight", "groupdro", "bifair", "separate"):
            raise ConfigError(f"unknown compare method {m!r}")
    cells: dict[str, list[dict]] = {m: [] for m in methods}
    for method in methods:
        for seed in seeds:
            sub = copy.deepcopy(cfg)
            fairness = "bifair" if method == "separate" else method
            tc = _train_config(sub, fairness=fairness, seed=seed)
            if method == "separate":
                tc.separate = True
            cell_dir = paths["compare"] / method / f"seed{seed}"
            _run_training(sub, paths, tc, cell_dir)
            sub["eval"] = dict(sub["eval"])
            report = _evaluate_checkpoint(sub, paths, cell_dir)
            evalmetrics.write_report(report, cell_dir)
            cells[method].append(_report_row(report))
            log.info("compare: %s seed %d done", method, seed)

    table: list[dict] = []
    for method in methods:
        row: dict = {"method": method}
        for col in _COMPARE_COLUMNS:
            vals = [c[col] for c in cells[method] if c[col] is not None]
            row[col] = float(np.median(vals)) if vals else None
        table.append(row)
    paths["compare"].mkdir(parents=True, exist_ok=True)
    detail = {"seeds": seeds, "cells": cells, "table": table}
    (paths["compare"] / "compare.json").write_text(json.dumps(detail, indent=1, sort_keys=True))
    with open(paths["compare"] / "compare.csv", "w", newline="") as fh:
        import csv as _csv
        writer = _csv.writer(fh)
        writer.writerow(["method"] + _COMPARE_COLUMNS)
        for row in table:
            writer.writerow([row["method"]] + [
                "" if row[c] is None else f"{row[c]:.6g}" for c in _COMPARE_COLUMNS])
    _echo(cfg, paths["compare"])
    log.info("compare: table at %s", paths["compare"] / "compare.csv")


_COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def run(command: str, config_path: str | None = None, overrides=()) -> int:
    """Execute one pipeline command; returns a process exit status."""
    level = os.environ.get("BIFAIR_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    if command not in _COMMANDS:
        print(json.dumps({"error": f"unknown command {command!r}", "command": command}),
              file=sys.stderr)
        return 2
    try:
        cfg = load_config(config_path, overrides)
        # fail fast on invalid nested configs before touching any files
        _prep_config(cfg)
        if command in ("train", "eval", "compare"):
            _train_config(cfg)
    except (ConfigError, ValueError, TypeError) as exc:
        print(json.dumps({"error": str(exc), "command": command}), file=sys.stderr)
        return 2
    try:
        _COMMANDS[command](cfg)
    except (ConfigError,) as exc:
        print(json.dumps({"error": str(exc), "command": command}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map to machine-readable failure
        print(json.dumps({"error": str(exc), "command": command,
                          "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bifair",
        description="fairness-aware two-level training for embedding-based recommenders")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="path to a JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (dotted path)")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
