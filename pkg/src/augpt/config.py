"""Flat ``dotted.key = value`` configuration files.

Every key of :class:`~augpt.harness.ExperimentConfig` is addressable by its
dotted path (``distill.augment.n_views``).  Values are parsed against the
type of the default at that path; unknown keys are errors.
"""

from __future__ import annotations

import os
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import ParameterError
from .harness import ExperimentConfig, SyntheticDatasetSpec


class ConfigError(ParameterError):
    """Malformed configuration text or an unknown key."""


# Keys whose default is None or whose type cannot be read off the default.
_SPECIAL = {
    "distill.augment.fixed_a": "optional-float",
    "shots": "shots",
    "base_classes": "int-list",
    "new_classes": "int-list",
}


def flatten(d: dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def unflatten(flat: Dict[str, object]) -> dict:
    root: dict = {}
    for key, v in flat.items():
        node = root
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return root


def default_flat() -> Dict[str, object]:
    """Every settable key with its default value (target.* included)."""
    flat = flatten(ExperimentConfig().to_dict())
    flat.pop("target")
    flat.update(flatten(SyntheticDatasetSpec().to_dict(), "target."))
    return flat


def _kind(key: str, default) -> str:
    if key in _SPECIAL:
        return _SPECIAL[key]
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    if isinstance(default, (list, tuple)):
        return "float-list" if any(isinstance(x, float) for x in default) else "int-list"
    return "str"


def parse_value(key: str, text: str, default):
    text = text.strip()
    kind = _kind(key, default)
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "optional-float":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "shots":
            return "full" if text.lower() == "full" else int(text)
        if kind == "int-list":
            return [int(x) for x in text.replace("x", ",").split(",") if x.strip()]
        if kind == "float-list":
            return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> List[Tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(flat: Dict[str, object], pairs: Iterable[Tuple[str, str]], source: str = "<config>") -> None:
    defaults = default_flat()
    for key, value in pairs:
        if key not in defaults:
            raise ConfigError(f"{source}: unknown key {key!r}")
        flat[key] = parse_value(key, value, defaults[key])


def build(flat: Dict[str, object]) -> ExperimentConfig:
    """ExperimentConfig from a flat mapping; ``target.*`` only counts if set."""
    flat = dict(flat)
    defaults = default_flat()
    target_set = any(k.startswith("target.") and flat[k] != defaults[k] for k in flat)
    nested = unflatten(flat)
    if not target_set:
        nested.pop("target", None)
    return ExperimentConfig.from_dict(nested)


def load(path: Optional[str], overrides: Iterable[Tuple[str, str]] = ()) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``overrides`` (flags win)."""
    flat = default_flat()
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            apply_pairs(flat, parse_lines(fh, path), path)
    apply_pairs(flat, overrides, "command line")
    return build(flat)


def render(cfg: ExperimentConfig) -> str:
    """Fully resolved config text: every key, sorted, defaults expanded."""
    flat = flatten(cfg.to_dict())
    if flat.get("target") is None:
        flat.pop("target", None)
    return "".join(f"{k} = {format_value(flat[k])}".rstrip() + "\n" for k in sorted(flat))


def toy_path() -> str:
    """Path of the bundled toy reference configuration."""
    from importlib import resources

    return str(resources.files("augpt") / "configs" / "toy.cfg")


def toy(overrides: Iterable[Tuple[str, str]] = ()) -> ExperimentConfig:
    return load(toy_path(), overrides)
