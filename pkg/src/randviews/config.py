"""Line-oriented ``key = value`` pipeline configuration.

Keys are dotted ``section.field``. Unknown keys are an error. ``to_text``
always emits every key in a fixed order, which is the canonical form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cnn import DEFAULT_ARCHITECTURE, TrainConfig
from .phantom import PhantomConfig
from .views import SamplerConfig
from .volume import WindowLevel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    root: str = "run"
    volumes: str = "volumes"
    candidates: str = "candidates.csv"
    patches: str = "patches.bin"
    models: str = "models"
    scores: str = "scores"
    reports: str = "reports"

    def resolve(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.root) / p


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 20


@dataclass(frozen=True)
class ExtractConfig:
    """View counts for training patches; 0 means reuse the sampler's count."""

    n_translations: int = 0
    n_rotations: int = 0


@dataclass(frozen=True)
class EvalConfig:
    k_folds: int = 3
    fp_per_volume: tuple[float, ...] = (3.0, 6.0)
    n_views_list: tuple[int, ...] = (1, 5, 100)
    baseline_score: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    architecture: str = DEFAULT_ARCHITECTURE
    paths: Paths = field(default_factory=Paths)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.eval.k_folds < 2:
            raise ConfigError("eval.k_folds must be >= 2")
        if any(n < 1 for n in self.eval.n_views_list):
            raise ConfigError("eval.n_views_list entries must be >= 1")
        if min(self.extract.n_translations, self.extract.n_rotations) < 0:
            raise ConfigError("extract counts must be >= 0")

    # seeds of the sub-configs are not file keys; they all follow the global seed
    def sampler_config(self) -> SamplerConfig:
        return replace(self.sampler, seed=self.seed)

    def extract_sampler_config(self) -> SamplerConfig:
        return replace(
            self.sampler_config(),
            n_translations=self.extract.n_translations or self.sampler.n_translations,
            n_rotations=self.extract.n_rotations or self.sampler.n_rotations,
        )

    def train_config(self, fold: int) -> TrainConfig:
        return replace(self.train, seed=self.seed * 1000 + fold)


_SECTIONS = ("paths", "cohort", "phantom", "sampler", "extract", "train", "eval")
_TOP = ("seed", "threads", "architecture")
_HIDDEN = {("phantom", "seed"), ("sampler", "seed"), ("train", "seed")}
_OPTIONAL = {"train.weight_init_stddev"}


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, WindowLevel):
        return f"{value.lo_hu!r},{value.hi_hu!r}"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, default, key: str):
    if key in _OPTIONAL and text == "auto":
        return None
    try:
        if isinstance(default, WindowLevel):
            lo, hi = (float(v) for v in text.split(","))
            return WindowLevel(lo, hi)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
        if default is None:
            return None if text == "auto" else float(text)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def _keys(cfg: PipelineConfig):
    for name in _TOP:
        yield name, None, name
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            if (section, f.name) in _HIDDEN:
                continue
            yield f"{section}.{f.name}", section, f.name


def to_text(cfg: PipelineConfig) -> str:
    lines = []
    for key, section, name in _keys(cfg):
        holder = cfg if section is None else getattr(cfg, section)
        lines.append(f"{key} = {_format(getattr(holder, name))}")
    return "\n".join(lines) + "\n"


def parse_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return apply_overrides(base or PipelineConfig(), raw)


def apply_overrides(cfg: PipelineConfig, raw: dict[str, str]) -> PipelineConfig:
    known = {key: (section, name) for key, section, name in _keys(cfg)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    top, per_section = {}, {s: {} for s in _SECTIONS}
    for key, text in raw.items():
        section, name = known[key]
        holder = cfg if section is None else getattr(cfg, section)
        value = _coerce(text, getattr(holder, name), key)
        (top if section is None else per_section[section])[name] = value
    try:
        updates = dict(top)
        for section, changes in per_section.items():
            if changes:
                updates[section] = replace(getattr(cfg, section), **changes)
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text())
