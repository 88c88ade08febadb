"""Run configuration: one JSON file drives synthesis, training, the engine,
and evaluation, so a (config, seed) pair pins down every artifact byte.

Defaults carry the pipeline constants: loss blend 0.9/0.1, silence rate
0.05, query-mode proportions 0.25/0.25/0.5, filter thresholds 10/15 dB, and
the 80/20 engine epoch schedule.  Every one of them can be overridden in the
file or by a CLI flag (flags win).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SourceClass, desk_classes, disjoint_classes
from .dsp import StftConfig

__all__ = [
    "OUT_ROOT_ENV",
    "CorpusSection",
    "StftSection",
    "SeparatorSection",
    "EngineSection",
    "RunConfig",
    "load_config",
    "save_config",
    "resolve_out_dir",
]

OUT_ROOT_ENV = "SEPKIT_OUT_ROOT"

CLASS_SETS = {"desk6": desk_classes, "disjoint3": disjoint_classes}


@dataclass
class CorpusSection:
    sample_rate: int = 8000
    duration_s: float = 2.0
    classes: object = "desk6"  # named set or explicit list of class dicts
    snr_range_db: tuple[float, float] = (-5.0, 5.0)
    singles_per_class: int = 10
    n_train: int = 200
    n_val: int = 40
    n_eval3: int = 30
    n_natural: int = 300
    m_range: tuple[int, int] = (2, 3)

    def resolve_classes(self) -> list[SourceClass]:
        if isinstance(self.classes, str):
            if self.classes not in CLASS_SETS:
                raise ValueError(
                    f"unknown class set {self.classes!r}; expected one of {sorted(CLASS_SETS)}"
                )
            return CLASS_SETS[self.classes]()
        out = []
        for d in self.classes:
            out.append(
                SourceClass(
                    id=int(d["id"]),
                    name=d["name"],
                    kind=d["kind"],
                    band_hz=tuple(d["band_hz"]),
                    params={k: tuple(v) if isinstance(v, list) else v
                            for k, v in d.get("params", {}).items()},
                )
            )
        return out


@dataclass
class StftSection:
    n_fft: int = 256
    hop: int = 64
    window: str = "hann"
    center_padding: bool = True

    def resolve(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop, self.window, self.center_padding)


@dataclass
class SeparatorSection:
    step_size: float = 0.05
    loss_lambda: float = 0.9
    silence_rate: float = 0.05
    epochs: int = 30
    mode_proportions: tuple[float, float, float] = (0.25, 0.25, 0.5)
    train_segment_s: float = 0.25  # 0 disables segmented training draws


@dataclass
class EngineSection:
    itt_db: float = 10.0
    sst_db: float = 15.0
    iterations: int = 3
    first_epochs: int = 80
    later_epochs: int = 20


@dataclass
class RunConfig:
    master_seed: int = 7
    out_dir: str = "run"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    stft: StftSection = field(default_factory=StftSection)
    separator: SeparatorSection = field(default_factory=SeparatorSection)
    engine: EngineSection = field(default_factory=EngineSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "corpus": CorpusSection,
    "stft": StftSection,
    "separator": SeparatorSection,
    "engine": EngineSection,
}


def _build_section(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown key(s) {unknown} in config section {where!r}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    top_known = {"master_seed", "out_dir", *_SECTIONS}
    unknown = sorted(set(data) - top_known)
    if unknown:
        raise ValueError(f"unknown top-level config key(s) {unknown}")
    if "master_seed" in data:
        cfg.master_seed = int(data["master_seed"])
    if "out_dir" in data:
        cfg.out_dir = str(data["out_dir"])
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, data[name], name))
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    """Persist the fully resolved config; same config -> same bytes."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def resolve_out_dir(cfg: RunConfig) -> Path:
    """Config out_dir, rooted at $SEPKIT_OUT_ROOT when that is set and the
    path is relative."""
    out = Path(cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out
