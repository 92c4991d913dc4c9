"""Run configuration files.

A run config is a YAML mapping with the blocks ``problem``, ``model``,
``train``, ``eval`` and ``io``. Bundled configs live in the package's
``configs`` directory and are addressed by name (``poisson1d-uno``). A
config may carry ``scales: {desk: {...}, paper: {...}}`` whose entries are
dotted-path overrides applied when that scale is selected; ``desk`` is the
default. Command-line ``--set a.b=c`` overrides are applied last and their
values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import os
import re
from importlib import resources

import yaml

from .errors import ConfigError

SCALES = ("desk", "paper")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+][0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _load_yaml(text):
    return yaml.load(text, Loader=_Loader)
BLOCKS = ("problem", "model", "train", "eval", "io")


def bundled_names():
    root = resources.files("gfmm") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read(source):
    if isinstance(source, dict):
        return copy.deepcopy(source)
    if os.path.isfile(source):
        path = source
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    else:
        res = resources.files("gfmm") / "configs" / f"{source}.yaml"
        if not res.is_file():
            raise ConfigError(f"no config file or bundled config named {source!r} "
                              f"(bundled: {', '.join(bundled_names())})", "config")
        text = res.read_text(encoding="utf-8")
    try:
        data = _load_yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}", "config") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", "config")
    return data


def set_path(cfg, path, value):
    """Assign ``value`` at dotted ``path``; integer parts index lists."""
    parts = path.split(".")
    node = cfg
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"invalid list index {part!r}", ".".join(parts[:i + 1])) from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = value
            else:
                node = node.setdefault(part, {})
        else:
            raise ConfigError("cannot descend into a scalar", ".".join(parts[:i + 1]))


def get_path(cfg, path, default=None):
    node = cfg
    for part in path.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
            node = node[int(part)]
        else:
            return default
    return node


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like a.b=value", "--set")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key", "--set")
    try:
        value = _load_yaml(raw) if raw.strip() else None
    except yaml.YAMLError:
        value = raw
    return key, value


def load_config(source, overrides=(), scale="desk", seed=None):
    """Resolve a config: file or bundled name, then scale, then overrides.

    The returned dict has no ``scales`` entry and records ``scale``; it is
    self-contained and reproduces the run when loaded again.
    """
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}", "scale")
    cfg = _read(source)
    scales = cfg.pop("scales", {}) or {}
    for key, value in (scales.get(scale) or {}).items():
        set_path(cfg, key, copy.deepcopy(value))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_path(cfg, key, value)
    if seed is not None:
        set_path(cfg, "train.seed", int(seed))
    if scales:
        cfg["scale"] = scale
    else:
        cfg.setdefault("scale", scale)
    validate(cfg)
    return cfg


def validate(cfg):
    """Raise :class:`ConfigError` with a field path if ``cfg`` is invalid."""
    from .problems import make_problem
    from .train import make_model_for

    unknown = set(cfg) - set(BLOCKS) - {"name", "scale", "description"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}", "config")
    for block in ("problem", "model"):
        if not isinstance(cfg.get(block), dict):
            raise ConfigError("missing or not a mapping", block)
    problem = make_problem(cfg["problem"])
    train = train_config(cfg)
    ev = cfg.get("eval", {}) or {}
    if not isinstance(ev, dict):
        raise ConfigError("must be a mapping", "eval")
    for s in ev.get("schemes", []) or []:
        if s not in ("solution", "rhs"):
            raise ConfigError(f"unknown scheme {s!r}", "eval.schemes")
    for d in ev.get("distributions", []) or []:
        dists = getattr(problem, "distributions", (None,))
        if d is not None and d not in dists:
            raise ConfigError(f"unknown distribution {d!r} for {problem.name}", "eval.distributions")
    make_model_for(cfg["model"], problem, train)  # structural validation
    return True


def train_config(cfg):
    from .train import TrainConfig

    block = dict(cfg.get("train", {}) or {})
    dist = (cfg.get("problem") or {}).get("distribution")
    scheme = dict(block.pop("scheme", {}) or {})
    if dist is not None:
        scheme.setdefault("distribution", dist)
    known = set(TrainConfig.__dataclass_fields__)
    extra = set(block) - known
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", "train")
    try:
        return TrainConfig(scheme=scheme, **block)
    except TypeError as exc:
        raise ConfigError(str(exc), "train") from None


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
