"""On-disk formats: environments, dataset directories, model checkpoints, reports.

Every writer goes through ``atomic_write`` and emits deterministic bytes
(sorted JSON keys, fixed float formatting), so equal inputs give identical
files.  See FORMATS.md for the layouts.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .config import ConfigError, from_mapping, to_plain
from .dataset_gen import Dataset, DatasetConfig, Question, answer_vocab, word_vocab
from .grid_env import GridEnvironment, SceneObject, check_invariants
from .nav_policy import nav_model_from_store
from .qa_model import BlindfoldModel, qa_model_from_store

ENV_FORMAT = "gridqa-env"
ENV_VERSION = 1
DATASET_FORMAT = "gridqa-dataset"
DATASET_VERSION = 1
ROOM_CHARS = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


class FormatError(ValueError):
    """A file is malformed or of an unsupported version."""


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _check_header(doc: dict, fmt: str, version: int, path) -> None:
    if doc.get("format") != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, found {doc.get('format')!r}")
    if doc.get("version") != version:
        raise FormatError(f"{path}: {fmt} version {doc.get('version')!r} is not supported (expected {version})")


# ---------------------------------------------------------------- environments

def env_to_dict(env: GridEnvironment) -> dict:
    if len(env.rooms) > len(ROOM_CHARS):
        raise FormatError(f"too many rooms to serialise ({len(env.rooms)})")
    terrain = ["".join("." if f else "#" for f in row) for row in env.free.tolist()]
    rooms = ["".join("#" if r < 0 else ROOM_CHARS[r] for r in row) for row in env.room_map.tolist()]
    return {
        "format": ENV_FORMAT,
        "version": ENV_VERSION,
        "env_id": env.env_id,
        "seed": int(env.seed),
        "terrain": terrain,
        "room_map": rooms,
        "rooms": [[int(i), label] for i, label in env.rooms],
        "objects": [
            {"id": o.object_id, "type": o.type_token, "color": o.color_token, "x": o.position[0],
             "y": o.position[1], "marker": o.is_marker}
            for o in env.objects
        ],
        "type_vocab": list(env.type_vocab),
        "color_vocab": list(env.color_vocab),
        "view_depth": env.view_depth,
        "view_width": env.view_width,
    }


def env_from_dict(doc: dict, source="<env>") -> GridEnvironment:
    _check_header(doc, ENV_FORMAT, ENV_VERSION, source)
    try:
        terrain = doc["terrain"]
        free = np.array([[c == "." for c in row] for row in terrain], dtype=bool)
        room_map = np.array([[-1 if c == "#" else ROOM_CHARS.index(c) for c in row] for row in doc["room_map"]],
                            dtype=np.int64)
        objects = tuple(
            SceneObject(int(o["id"]), o["type"], o["color"], (int(o["x"]), int(o["y"])), bool(o["marker"]))
            for o in doc["objects"]
        )
        env = GridEnvironment(
            env_id=doc["env_id"], seed=int(doc["seed"]), free=free, room_map=room_map,
            rooms=tuple((int(i), str(label)) for i, label in doc["rooms"]), objects=objects,
            type_vocab=tuple(doc["type_vocab"]), color_vocab=tuple(doc["color_vocab"]),
            view_depth=int(doc["view_depth"]), view_width=int(doc["view_width"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed environment ({exc})") from None
    check_invariants(env)
    return env


def question_to_dict(q: Question) -> dict:
    return {"qid": q.qid, "tokens": list(q.tokens), "qtype": q.qtype, "target": q.target_object_id,
            "answer": q.answer_token, "env_id": q.env_id}


def question_from_dict(d: dict) -> Question:
    return Question(d["qid"], tuple(d["tokens"]), d["qtype"], int(d["target"]), d["answer"], d["env_id"])


def save_env(path, env: GridEnvironment, questions=None) -> None:
    doc = env_to_dict(env)
    if questions is not None:
        doc["questions"] = [question_to_dict(q) for q in questions]
    atomic_write(path, dumps(doc))


def load_env(path) -> tuple[GridEnvironment, list[Question] | None]:
    doc = _read_json(path)
    env = env_from_dict(doc, path)
    qs = doc.get("questions")
    return env, None if qs is None else [question_from_dict(q) for q in qs]


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


# ---------------------------------------------------------------- datasets

def save_dataset(directory, ds: Dataset, config_snapshot: str | None = None) -> None:
    directory = Path(directory)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": to_plain(ds.config),
        "word_vocab": list(ds.word_vocab),
        "answer_vocab": list(ds.answer_vocab),
        "splits": {},
    }
    for split in ("train", "val", "test"):
        files = []
        for env, qs in ds.split(split):
            rel = f"envs/{env.env_id}.json"
            save_env(directory / rel, env, qs)
            files.append(rel)
        manifest["splits"][split] = files
    if config_snapshot is not None:
        atomic_write(directory / "config.yaml", config_snapshot)
    atomic_write(directory / "manifest.json", dumps(manifest))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{directory}: no manifest.json (not a dataset directory)")
    doc = _read_json(path)
    _check_header(doc, DATASET_FORMAT, DATASET_VERSION, path)
    try:
        cfg = from_mapping(DatasetConfig, doc["config"])
    except ConfigError as exc:
        raise FormatError(f"{path}: bad dataset config ({exc})") from None
    parts = {}
    for split in ("train", "val", "test"):
        parts[split] = []
        for rel in doc["splits"][split]:
            env, qs = load_env(directory / rel)
            parts[split].append((env, qs or []))
    wv, av = tuple(doc["word_vocab"]), tuple(doc["answer_vocab"])
    if wv != word_vocab(cfg.env) or av != answer_vocab(cfg.env):
        raise FormatError(f"{path}: vocabularies disagree with the stored config")
    return Dataset(parts["train"], parts["val"], parts["test"], wv, av, cfg)


# ---------------------------------------------------------------- models

def save_model(path, model) -> None:
    nn.save_checkpoint(path, model.store, model.checkpoint_config())


def load_model(path):
    """Load a checkpoint written by ``save_model``; the kind is read from its header."""
    store, cfg = nn.load_checkpoint(path)
    kind = cfg.get("kind")
    if kind == "nav":
        return nav_model_from_store(store, cfg)
    if kind == "qa":
        return qa_model_from_store(store, cfg)
    if kind == "blindfold":
        return BlindfoldModel(store, tuple(cfg["word_vocab"]), tuple(cfg["answer_vocab"]))
    raise nn.CheckpointError(f"{path}: unknown model kind {kind!r}")


def expect_kind(model, kind: type, path) -> None:
    if not isinstance(model, kind):
        raise nn.CheckpointError(f"{path}: expected a {kind.__name__} checkpoint, got {type(model).__name__}")


# ---------------------------------------------------------------- tables

def _fmt(v):
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else str(v)
    return v


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write(path, csv_text(header, rows))


def write_jsonl(path, records) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_rows(report) -> tuple[list[str], list[list]]:
    header = ["k", "n", "skipped", "mean_d_delta", "mean_d_delta_m", "qa_accuracy", "stop_rate", "mean_length"]
    rows = [[getattr(t, h) for h in header] for t in report.tiers.values()]
    return header, rows


def save_report(directory, report, stem: str = "report") -> None:
    directory = Path(directory)
    doc = report.to_dict()
    atomic_write(directory / f"{stem}.json", dumps(_json_safe(doc)))
    write_csv(directory / f"{stem}.csv", *report_rows(report))
    write_jsonl(directory / f"{stem}_predictions.jsonl", report.records)


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj
