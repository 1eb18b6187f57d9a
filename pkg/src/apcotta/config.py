"""Sectioned ``key = value`` run configuration (INI), with CLI overrides.

Recognised sections and keys::

    [paths]     checkpoint, manifest, report_dir
    [run]       method, seed, batches_per_domain, dtype
    [adapt]     S0, tau, alpha, p, T, lr, momentum, dstl, ebcl, rpi,
                entropy_mode, stop_gradient_weak, predict_view
    [geometry]  b, n_points, radius
    [pretrain]  epochs, steps_per_epoch, lr, momentum, bn_momentum
    [scene]     extent, buildings, trees, cars, poles, intensity_noise,
                terrain_amplitude, density_<class> (points per m^2)

Unknown sections or keys are rejected so that typos do not pass silently.
"""
from __future__ import annotations

import configparser
from dataclasses import fields, replace

from .harness import RunConfig
from .scenes import CLASS_NAMES, SyntheticSceneSpec
from .train import PretrainConfig


class ConfigError(ValueError):
    pass


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}

ADAPT_KEYS = ("S0", "tau", "alpha", "p", "T", "lr", "momentum", "dstl", "ebcl", "rpi",
              "entropy_mode", "stop_gradient_weak", "predict_view")
SECTIONS = {
    "paths": ("checkpoint", "manifest", "report_dir"),
    "run": ("method", "seed", "batches_per_domain", "dtype"),
    "adapt": ADAPT_KEYS,
    "geometry": ("b", "n_points", "radius"),
    "pretrain": ("epochs", "steps_per_epoch", "lr", "momentum", "bn_momentum"),
    "scene": ("extent", "buildings", "trees", "cars", "poles", "intensity_noise",
              "terrain_amplitude") + tuple(f"density_{c}" for c in CLASS_NAMES),
}


def _coerce(raw: str, like, where: str):
    try:
        if isinstance(like, bool):
            return _BOOL[raw.strip().lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw.strip()


def _apply(obj, values: dict, section: str):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced to field types."""
    current = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {k: _coerce(v, current[k], f"[{section}] {k}") for k, v in values.items()}
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def read_sections(path) -> dict:
    """Parse the file into ``{section: {key: raw string}}`` and check names."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (S0, T)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc.message.splitlines()[0]}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        items = dict(parser.items(section))
        unknown = sorted(set(items) - set(SECTIONS[section]))
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
        out[section] = items
    return out


def merge(sections: dict, overrides: dict) -> dict:
    """Overlay ``{section: {key: value}}`` overrides (None values are skipped)."""
    out = {s: dict(v) for s, v in sections.items()}
    for section, values in overrides.items():
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            out.setdefault(section, {})[key] = str(value)
    return out


def run_config(sections: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    flat = {**sections.get("paths", {}), **sections.get("run", {})}
    cfg = _apply(cfg, flat, "run")
    cfg = replace(cfg, adapt=_apply(cfg.adapt, sections.get("adapt", {}), "adapt"),
                  geometry=_apply(cfg.geometry, sections.get("geometry", {}), "geometry"))
    return cfg


def pretrain_config(sections: dict, base: PretrainConfig | None = None) -> PretrainConfig:
    cfg = _apply(base or PretrainConfig(), sections.get("pretrain", {}), "pretrain")
    geometry = _apply(cfg.geometry, sections.get("geometry", {}), "geometry")
    return replace(cfg, geometry=geometry)


def scene_spec(sections: dict) -> SyntheticSceneSpec:
    values = dict(sections.get("scene", {}))
    densities = dict(SyntheticSceneSpec().densities)
    for name in CLASS_NAMES:
        raw = values.pop(f"density_{name}", None)
        if raw is not None:
            densities[name] = _coerce(raw, 0.0, f"[scene] density_{name}")
    spec = replace(_apply(SyntheticSceneSpec(), values, "scene"), densities=densities)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"[scene] {exc}") from None
    return spec


def load(path=None, overrides=None) -> dict:
    sections = read_sections(path) if path else {}
    return merge(sections, overrides or {})


def dump(cfg: RunConfig) -> str:
    """Render a RunConfig in the same format (handy as a starting template)."""
    lines = ["[paths]"]
    lines += [f"{k} = {getattr(cfg, k)}" for k in SECTIONS["paths"]]
    lines += ["", "[run]"] + [f"{k} = {getattr(cfg, k)}" for k in SECTIONS["run"]]
    lines += ["", "[adapt]"] + [f"{k} = {getattr(cfg.adapt, k)}" for k in ADAPT_KEYS]
    lines += ["", "[geometry]"] + [f"{k} = {getattr(cfg.geometry, k)}" for k in SECTIONS["geometry"]]
    return "\n".join(lines) + "\n"


__all__ = ["ConfigError", "dump", "load", "merge", "pretrain_config", "read_sections",
           "run_config", "scene_spec"]
