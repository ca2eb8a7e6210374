"""Flat ``key = value`` config files.

Lines starting with ``#`` are comments. Dotted keys (``speed_mean.vehicle``)
group per-class values. Values are parsed as int, float, bool, comma tuples
or left as strings.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any, Mapping


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return tuple(parse_value(p) for p in text.split(",") if p.strip())
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_kv(text: str, source: str = "<string>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_kv(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def dump_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def nest(flat: Mapping[str, Any]) -> dict[str, Any]:
    """Fold dotted keys one level: ``{'a.b': 1}`` -> ``{'a': {'b': 1}}``."""
    out: dict[str, Any] = {}
    for key, value in flat.items():
        if "." in key:
            head, tail = key.split(".", 1)
            out.setdefault(head, {})[tail] = value
        else:
            out[key] = value
    return out


def flatten(nested: Mapping[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in nested.items():
        if isinstance(value, Mapping):
            for sub, v in value.items():
                out[f"{key}.{sub}"] = v
        else:
            out[key] = value
    return out


def preset_path(name: str) -> Path:
    return Path(str(resources.files("t4p") / "presets" / f"{name}.cfg"))


def preset_names() -> list[str]:
    folder = Path(str(resources.files("t4p") / "presets"))
    return sorted(p.stem for p in folder.glob("*.cfg"))


def resolve_preset(name_or_path: str | Path) -> dict[str, Any]:
    """Load a shipped preset by name, or any config file by path."""
    path = Path(name_or_path)
    if path.suffix == ".cfg" or path.exists():
        if not path.exists():
            raise FileNotFoundError(path)
        return load_kv(path)
    candidate = preset_path(str(name_or_path))
    if not candidate.exists():
        raise KeyError(f"unknown preset {name_or_path!r}; available: {', '.join(preset_names())}")
    return load_kv(candidate)
