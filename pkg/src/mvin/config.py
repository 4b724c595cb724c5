"""Run configuration: an INI file with [data], [model], [train], [split], [eval],
[sweep], [synth] and [output] sections, plus per-dataset presets.

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .kg import SplitSpec
from .model import ABLATION_NAMES, AblationFlags, Hyperparams
from .synth import SynthSpec
from .trainer import TrainConfig

# dataset presets: model shape, L2 weight, and ingestion settings
PRESETS = {
    "ml-1m": dict(s=16, l_p=2, l_w=1, l_d=2, k_m=64, k_n=8, l2=1e-7, rating_threshold=4.0, g_core=1),
    "lfm-1b": dict(s=16, l_p=1, l_w=1, l_d=2, k_m=64, k_n=4, l2=5e-8, rating_threshold=0.0, g_core=20),
    "az-book": dict(s=16, l_p=2, l_w=2, l_d=2, k_m=16, k_n=8, l2=1e-7, rating_threshold=0.0, g_core=20),
    "synthetic": dict(s=16, l_p=1, l_w=1, l_d=2, k_m=16, k_n=4, l2=1e-5, rating_threshold=0.0, g_core=1),
}

DEFAULT_PRECISION_NS = (1, 2, 5, 10, 20, 50, 100)
SWEEP_AXES = ("k_m", "k_n", "l_p", "l_w", "l_d", "s")
_HP_KEYS = ("s", "l_p", "l_w", "l_d", "k_m", "k_n")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    kg_path: Optional[Path] = None
    ratings_path: Optional[Path] = None
    item_map_path: Optional[Path] = None
    rating_threshold: float = 0.0
    g_core: int = 1
    hp: Hyperparams = field(default_factory=Hyperparams)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    stagewise: bool = True
    out_dir: Path = Path("out")
    precision_ns: tuple = DEFAULT_PRECISION_NS
    sweep_param: Optional[str] = None
    sweep_values: tuple = ()
    synth: SynthSpec = field(default_factory=SynthSpec)
    synth_seed: int = 0

    def data_paths(self) -> dict:
        return {"kg": self.kg_path, "ratings": self.ratings_path, "item_map": self.item_map_path}

    def check_files(self) -> None:
        """Raise FileNotFoundError naming the first missing dataset file."""
        for key, path in self.data_paths().items():
            if path is None:
                raise ConfigError(f"[data] {key} is not set")
            if not Path(path).is_file():
                raise FileNotFoundError(f"{key} file not found: {path}")

    def check_sweep(self) -> None:
        if self.sweep_param not in SWEEP_AXES:
            raise ConfigError(f"[sweep] param must be one of {SWEEP_AXES}, got {self.sweep_param!r}")
        if not self.sweep_values:
            raise ConfigError("[sweep] values must be a nonempty list")

    def with_overrides(self, seed=None, ablate=(), stagewise=None, out=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=seed), synth_seed=seed)
        if ablate:
            cfg = replace(cfg, hp=replace(cfg.hp, ablation=cfg.hp.ablation.without(*ablate)))
        if stagewise is not None:
            cfg = replace(cfg, stagewise=stagewise)
        if out is not None:
            cfg = replace(cfg, out_dir=Path(out))
        return cfg


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _names(text: str) -> tuple:
    return tuple(x for x in text.replace(",", " ").split() if x)


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _typed(section, name, kind, default):
    if name not in section:
        return default
    raw = section[name]
    try:
        if kind is bool:
            return parse_bool(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {name}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read(path, encoding="utf-8")
    return config_from_parser(cp, path.parent)


def config_from_text(text: str, base_dir=".") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    return config_from_parser(cp, Path(base_dir))


def config_from_parser(cp: configparser.ConfigParser, base: Path) -> RunConfig:
    for name in ("data", "model", "train", "split", "eval", "sweep", "synth", "output"):
        if not cp.has_section(name):
            cp.add_section(name)
    data, model, train, split, ev, sweep, syn, out = (
        cp[n] for n in ("data", "model", "train", "split", "eval", "sweep", "synth", "output")
    )

    preset_name = data.get("preset", "").strip().lower()
    if preset_name and preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; expected one of {sorted(PRESETS)}")
    preset = PRESETS.get(preset_name, {})

    def path_of(key):
        if key not in data or not data[key].strip():
            return None
        p = Path(data[key].strip())
        return p if p.is_absolute() else base / p

    hp_base = Hyperparams()
    hp_kwargs = {k: _typed(model, k, int, preset.get(k, getattr(hp_base, k))) for k in _HP_KEYS}
    ablate = _names(model.get("ablate", ""))
    try:
        ablation = AblationFlags().without(*ablate)
        hp = Hyperparams(
            **hp_kwargs,
            projection_nonlinear=_typed(model, "projection_nonlinear", bool, True),
            ablation=ablation,
        )
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from exc

    tc_base = TrainConfig()
    kinds = {f.name: type(getattr(tc_base, f.name)) for f in fields(TrainConfig)}
    tc_kwargs = {}
    for name, kind in kinds.items():
        default = preset.get(name, getattr(tc_base, name))
        tc_kwargs[name] = _typed(train, name, kind, default)
    try:
        tc = TrainConfig(**tc_kwargs)
        sp = SplitSpec(
            _typed(split, "train", float, 0.6),
            _typed(split, "valid", float, 0.2),
            _typed(split, "test", float, 0.2),
            _typed(split, "seed", int, 0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    synth_base = SynthSpec()
    synth_kwargs = {f.name: _typed(syn, f.name, type(getattr(synth_base, f.name)), getattr(synth_base, f.name))
                    for f in fields(SynthSpec)}

    sweep_param = sweep.get("param", "").strip() or None
    out_dir = Path(out.get("dir", "out").strip())
    return RunConfig(
        kg_path=path_of("kg"),
        ratings_path=path_of("ratings"),
        item_map_path=path_of("item_map"),
        rating_threshold=_typed(data, "rating_threshold", float, preset.get("rating_threshold", 0.0)),
        g_core=_typed(data, "g_core", int, preset.get("g_core", 1)),
        hp=hp,
        train=tc,
        split=sp,
        stagewise=_typed(train, "stagewise", bool, True),
        out_dir=out_dir if out_dir.is_absolute() else base / out_dir,
        precision_ns=_ints(ev.get("precision_ns", "")) or DEFAULT_PRECISION_NS,
        sweep_param=sweep_param,
        sweep_values=_ints(sweep.get("values", "")),
        synth=SynthSpec(**synth_kwargs),
        synth_seed=_typed(syn, "seed", int, 0),
    )


__all__ = ["ABLATION_NAMES", "ConfigError", "PRESETS", "RunConfig", "load_config", "config_from_text", "parse_bool"]
