"""Strict YAML run configuration.

A config file is a mapping with up to five sections::

    schema: mipl-cdl/config-v1
    data:       {m, k, d, n_min, n_max, pos_min, pos_max, r, separation, noise, seed}
    model:      {hidden, activation, scorer_hidden, attention, sam_scale, tau0, tau_min}
    train:      {epochs, batch_size, lr, momentum, weight_decay, loss, gamma, unit_base, seed, debug_checks}
    experiment: {train_ratio, n_bins}
    theorem:    {n, seed, k_max, variants, gamma, gamma_cap}

Every key is optional; missing keys take the dataclass defaults.  Unknown
sections or keys raise :class:`ConfigurationError` listing all of them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from mipl_cdl.data import GenConfig
from mipl_cdl.errors import ConfigurationError
from mipl_cdl.training import ExperimentConfig, ModelSpec, TrainConfig

SCHEMA = "mipl-cdl/config-v1"


@dataclass(frozen=True)
class TheoremConfig:
    n: int = 10_000
    seed: int = 0
    k_max: int = 10
    variants: tuple = ("cc", "cn")
    gamma: int | None = None
    gamma_cap: int = 10

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("theorem.n must be >= 1")
        if self.k_max < 2:
            raise ConfigurationError("theorem.k_max must be >= 2")
        bad = [v for v in self.variants if v not in ("cc", "cn")]
        if bad or not self.variants:
            raise ConfigurationError(f"theorem.variants must be drawn from cc, cn (got {list(self.variants)})")
        if self.gamma is not None and (self.gamma < 1 or int(self.gamma) != self.gamma):
            raise ConfigurationError("theorem.gamma must be an integer >= 1")


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    theorem: TheoremConfig = field(default_factory=TheoremConfig)

    @property
    def data(self) -> GenConfig:
        return self.experiment.data

    @property
    def model(self) -> ModelSpec:
        return self.experiment.model

    @property
    def train(self) -> TrainConfig:
        return self.experiment.train

    def with_seeds(self, data_seed: int | None = None, run_seed: int | None = None) -> "RunConfig":
        exp = self.experiment
        if data_seed is not None:
            exp = replace(exp, data=replace(exp.data, seed=data_seed))
        if run_seed is not None:
            exp = replace(exp, train=replace(exp.train, seed=run_seed))
        return replace(self, experiment=exp)

    def to_dict(self) -> dict:
        """Fully resolved config; feeding it back to :func:`from_dict` is lossless."""
        exp = self.experiment
        model = asdict(exp.model)
        model["hidden"] = list(model["hidden"])
        theorem = asdict(self.theorem)
        theorem["variants"] = list(theorem["variants"])
        return {
            "schema": SCHEMA,
            "data": asdict(exp.data),
            "model": model,
            "train": asdict(exp.train),
            "experiment": {"train_ratio": exp.train_ratio, "n_bins": exp.n_bins},
            "theorem": theorem,
        }


_SECTIONS = {"data": GenConfig, "model": ModelSpec, "train": TrainConfig, "theorem": TheoremConfig}
_EXPERIMENT_KEYS = ("train_ratio", "n_bins")


def _build(cls, values, section: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    values = dict(values)
    for key in ("hidden", "variants"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"section {section!r}: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"experiment", "schema"})
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {', '.join(unknown)}")
    schema = raw.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigurationError(f"unsupported config schema {schema!r} (expected {SCHEMA!r})")
    parts = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    exp_raw = raw.get("experiment") or {}
    if not isinstance(exp_raw, dict):
        raise ConfigurationError("section 'experiment' must be a mapping")
    unknown = sorted(set(exp_raw) - set(_EXPERIMENT_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown keys in 'experiment': {', '.join(unknown)}")
    train_ratio = float(exp_raw.get("train_ratio", 0.7))
    n_bins = int(exp_raw.get("n_bins", 15))
    if not 0 < train_ratio < 1:
        raise ConfigurationError("experiment.train_ratio must lie in (0, 1)")
    if n_bins < 1:
        raise ConfigurationError("experiment.n_bins must be >= 1")
    exp = ExperimentConfig(parts["data"], parts["model"], parts["train"], train_ratio, n_bins)
    # surface model errors (unknown attention, bad activation) at load time
    exp.model.build(exp.data.d, exp.data.k)
    return RunConfig(exp, parts["theorem"])


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML: {exc}") from exc
    return from_dict(raw)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def dumps(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
