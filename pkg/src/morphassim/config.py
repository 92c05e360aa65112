"""Run configuration: TOML sections bound onto dataclasses with key-level error messages."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import sys
import types
import typing
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

THREADS_ENV = "MORPHASSIM_THREADS"


class ConfigError(ValueError):
    """Schema violation; ``key`` is the dotted name of the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def input_path(default=dataclasses.MISSING, *, optional: bool = False):
    """Dataclass field holding a path that must exist when the config is validated."""
    meta = {"path": "input"}
    if optional:
        return dataclasses.field(default=None, metadata=meta)
    return dataclasses.field(default=default, metadata=meta)


@dataclasses.dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int | None = None
    deterministic: bool = False
    output: str = "out"

    def __post_init__(self):
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")


# ---------------------------------------------------------------------------
# documents


def read_document(path: str | Path) -> dict:
    """Parse a TOML config, or a run manifest (JSON) whose ``config`` entry is reused verbatim."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid manifest JSON ({exc})") from None
        if "config" not in doc:
            raise ConfigError("--config", "manifest has no 'config' entry")
        return {"__base__": str(p.parent.resolve()), **doc["config"]}
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("--config", f"invalid TOML ({exc})") from None
    return {"__base__": str(p.parent.resolve()), **doc}


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare strings need no quotes on the command line


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` assignments; values use TOML syntax."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(key, "override key must be section.key")
        sec, name = parts
        if sec in out and not isinstance(out[sec], dict):
            raise ConfigError(key, f"{sec} is not a section")
        out.setdefault(sec, {})[name] = _parse_value(val.strip())
    return out


# ---------------------------------------------------------------------------
# binding


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        errors = []
        for a in inner:
            try:
                return _coerce(value, a, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(key, "; ".join(errors))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected an array, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(key, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    raise ConfigError(key, f"unsupported field type {tp!r}")  # pragma: no cover


def _resolve(base: Path, value: str) -> str:
    p = Path(value)
    return str(p if p.is_absolute() else (base / p).resolve())


def bind(cls, doc: Mapping[str, Any], section: str, base: Path | None = None):
    """Instantiate dataclass ``cls`` from ``doc[section]``; unknown, missing or
    mistyped keys raise ``ConfigError`` naming the key."""
    raw = doc.get(section, {})
    if not isinstance(raw, Mapping):
        raise ConfigError(section, "expected a table")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    kwargs = {}
    for name, f in fields.items():
        key = f"{section}.{name}"
        if name not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(key, "required key is missing")
            continue
        val = _coerce(raw[name], hints[name], key)
        if f.metadata.get("path") == "input" and val is not None:
            paths = val if isinstance(val, tuple) else (val,)
            resolved = []
            for i, pv in enumerate(paths):
                rp = _resolve(base or Path.cwd(), pv)
                if not Path(rp).exists():
                    raise ConfigError(key if not isinstance(val, tuple) else f"{key}[{i}]",
                                      f"path does not exist: {rp}")
                resolved.append(rp)
            val = tuple(resolved) if isinstance(val, tuple) else resolved[0]
        kwargs[name] = val
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(section, str(exc)) from None


def to_plain(obj) -> Any:
    """JSON-ready view of (nested) dataclasses."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, Mapping):
        return {str(k): to_plain(v) for k, v in obj.items()}
    return obj


def config_hash(resolved: Mapping[str, Any]) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def resolve_threads(flag: int | None, run: RunSection) -> int:
    """Thread count from the flag, then ``run.threads``, then the environment, else 1."""
    if run.deterministic:
        return 1
    for source, v in (("--threads", flag), ("run.threads", run.threads)):
        if v is not None:
            if v < 1:
                raise ConfigError(source, "thread count must be >= 1")
            return int(v)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(THREADS_ENV, f"not an integer: {env!r}") from None
        if n < 1:
            raise ConfigError(THREADS_ENV, "thread count must be >= 1")
        return n
    return 1


def versions() -> dict[str, str]:
    import numpy
    import scipy

    from . import __version__

    return {"morphassim": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(outdir: Path, command: str, resolved: Mapping[str, Any], seed: int, threads: int,
                   outputs: list[str]) -> Path:
    """Deterministic run record: no timestamps, sorted keys; reusable as ``--config``."""
    doc = {
        "command": command,
        "config": resolved,
        "config_hash": config_hash(resolved),
        "outputs": sorted(outputs),
        "seed": seed,
        "threads": threads,
        "versions": versions(),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
