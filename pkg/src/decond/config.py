"""Run configuration files and seed substreams.

A run configuration is an INI file with sections ``[data]``, ``[model]``,
``[train]`` and ``[eval]``. Every key has a default; unknown sections or keys
are rejected. Explicit kernels are given as sections ``[k.0]``, ``[k.1]``,
... (field kernel) and ``[l.0]``, ... (covariate kernel) with keys
``family``, ``variance``, ``lengthscales`` and ``features``;
``lengthscales = auto`` asks for median-heuristic initialisation.
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "bags": "bags.csv",
        "aggregates": "aggregates.csv",
        "inputs": "",
        "truth": "",
    },
    "model": {
        "name": "cmp",
        "lambda": "0.001",
        "agg_noise_sd": "0.1",
        "hr_noise_sd": "0.0",
        "prior_mean": "0.0",
        "mode": "shrinkage",
        "n_inducing": "64",
        "k_kernel": "gaussian",
        "l_kernel": "gaussian",
        "standardize": "true",
        "variational_baselines": "auto",
        "rff_features": "0",
    },
    "train": {
        "steps": "100",
        "variational_steps": "400",
        "learning_rate": "0.05",
        "points_per_bag": "0",
        "train_inducing": "false",
        "start_search": "true",
        "seed": "0",
    },
    "eval": {
        "predictions": "predictions.csv",
        "scores": "scores.csv",
    },
}

KERNEL_KEYS = ("family", "variance", "lengthscales", "features")
_KERNEL_SECTION = re.compile(r"^(k|l)\.(\d+)$")
_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def substream(seed: int, name: str) -> int:
    """Independent integer seed for the named substream of ``seed``."""
    tag = [ord(c) for c in name]
    return int(np.random.SeedSequence([int(seed)] + tag).generate_state(1)[0])


@dataclass
class RunConfig:
    sections: dict[str, dict[str, str]] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        merged = {s: dict(v) for s, v in DEFAULTS.items()}
        for name, values in self.sections.items():
            values = {str(k).strip().lower(): str(v).strip() for k, v in values.items()}
            if name in DEFAULTS:
                unknown = set(values) - set(DEFAULTS[name])
                if unknown:
                    raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
                merged[name].update(values)
            elif _KERNEL_SECTION.match(name):
                unknown = set(values) - set(KERNEL_KEYS)
                missing = {"family", "features"} - set(values)
                if unknown:
                    raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
                if missing:
                    raise ConfigError(f"[{name}] is missing {', '.join(sorted(missing))}")
                merged[name] = values
            else:
                raise ConfigError(f"unknown section [{name}]")
        self.sections = merged

    # ---- typed access
    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]

    def get_float(self, section: str, key: str) -> float:
        v = self.get(section, key)
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {v!r} is not a number") from None

    def get_int(self, section: str, key: str) -> int:
        v = self.get(section, key)
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {v!r} is not an integer") from None

    def get_bool(self, section: str, key: str) -> bool:
        v = self.get(section, key).lower()
        if v not in _BOOL:
            raise ConfigError(f"[{section}] {key} = {v!r} is not a boolean")
        return _BOOL[v]

    def path(self, section: str, key: str) -> Path | None:
        v = self.get(section, key)
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def kernel_sections(self, prefix: str) -> dict[str, dict[str, str]]:
        return {s: v for s, v in self.sections.items() if s.startswith(prefix + ".")}

    # ---- serialisation
    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in sorted(self.sections, key=_section_order):
            cp[name] = self.sections[name]
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, base_dir=None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                       comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        sections = {s: dict(cp[s]) for s in cp.sections()}
        return cls(sections, Path(base_dir) if base_dir else Path.cwd())

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, path.parent)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _section_order(name: str):
    fixed = list(DEFAULTS)
    if name in fixed:
        return (0, fixed.index(name), 0)
    m = _KERNEL_SECTION.match(name)
    return (1, m.group(1), int(m.group(2))) if m else (2, name, 0)
