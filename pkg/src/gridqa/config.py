"""Run configuration: one YAML document of nested dataclass blocks.

Unknown keys and type mismatches are rejected with the offending key path
and its line number.  ``key.path=value`` overrides (from the command line)
are applied after the file is parsed.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field, replace

import yaml

from .calibration import CalibrationConfig
from .dataset_gen import DatasetConfig
from .e2e_trainer import JointConfig
from .eval_harness import DEFAULT_TIERS
from .nav_policy import NavTrainConfig
from .qa_model import QATrainConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the key and, if known, the line."""


@dataclass(frozen=True)
class EvalConfig:
    tiers: tuple[int, ...] = DEFAULT_TIERS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    split: str = "test"
    lambdas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5, 0.8, 1.0)
    lambda_split: str = "val"
    marker_counts: tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 0
    out_dir: str = "runs/default"
    jobs: int = 1
    data: DatasetConfig = field(default_factory=DatasetConfig)
    nav: NavTrainConfig = field(default_factory=NavTrainConfig)
    qa: QATrainConfig = field(default_factory=QATrainConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        # the top-level seed is the single source for data generation
        if self.data.master_seed != self.master_seed:
            object.__setattr__(self, "data", replace(self.data, master_seed=self.master_seed))


# keys that exist on a dataclass but are owned elsewhere in the document
_HIDDEN = {("data", "master_seed")}


def _where(marks, path) -> str:
    line = marks.get(path)
    key = ".".join(path) or "<root>"
    return f"line {line}: {key}" if line else key


def _compose(text: str, source: str = "<config>"):
    """YAML to plain python plus a {key path: line number} map."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    marks: dict[tuple, int] = {}
    loader = yaml.SafeLoader("")

    def walk(node, path):
        marks.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for knode, vnode in node.value:
                key = str(loader.construct_object(knode))
                if key in out:
                    raise ConfigError(f"line {knode.start_mark.line + 1}: duplicate key {'.'.join(path + (key,))}")
                marks[path + (key,)] = knode.start_mark.line + 1
                out[key] = walk(vnode, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [walk(v, path) for v in node.value]
        return loader.construct_object(node)

    return ({} if root is None else walk(root, ())), marks


def _coerce(tp, value, path, marks):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        errors = []
        for a in inner:
            try:
                return _coerce(a, value, path, marks)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if dataclasses.is_dataclass(tp):
        return from_mapping(tp, value, path, marks)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{_where(marks, path)}: expected a list, got {value!r}")
        elem = args[0] if args else typing.Any
        return tuple(_coerce(elem, v, path, marks) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{_where(marks, path)}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{_where(marks, path)}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{_where(marks, path)}: expected a number, got {value!r}")
        try:
            return float(value)  # YAML 1.1 reads "1e-3" as a string
        except (TypeError, ValueError):
            raise ConfigError(f"{_where(marks, path)}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{_where(marks, path)}: expected a string, got {value!r}")
        return value
    return value


def from_mapping(cls, data, path: tuple = (), marks=None):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    marks = marks or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(marks, path)}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if path + (f.name,) not in _HIDDEN}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{_where(marks, path + (key,))}: unknown key (allowed: {', '.join(sorted(names))})")
        kwargs[key] = _coerce(hints[key], value, path + (key,), marks)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(marks, path)}: {exc}") from None


def apply_overrides(data: dict, overrides) -> dict:
    """``["nav.epochs=5", ...]`` applied onto a parsed document (values are YAML scalars)."""
    data = dict(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            child = node.get(p)
            node[p] = dict(child) if isinstance(child, dict) else {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
    return data


def parse_run_config(text: str, overrides=(), source: str = "<config>") -> RunConfig:
    data, marks = _compose(text, source)
    data = apply_overrides(data, overrides)
    try:
        return from_mapping(RunConfig, data, (), marks)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_run_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        return parse_run_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_run_config(text, overrides, str(path))


def to_plain(cfg) -> dict:
    """Dataclass tree to lists/dicts/scalars (for YAML or JSON)."""

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    out = conv(asdict(cfg))
    if isinstance(cfg, RunConfig):
        out["data"].pop("master_seed", None)
    return out


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_plain(cfg), sort_keys=False, default_flow_style=None)
