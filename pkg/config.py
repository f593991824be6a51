"""Experiment configuration files.

Config files are line-oriented `key = value` text with one section per module:

    [state_graph]        capacity, epsilon_d, eviction_policy, t_c
    [graph_autoencoder]  learning_rate, steps_per_phase, pair_sample_fraction, hidden, embedding_dim
    [gchrl]              alpha_h, alpha_l, k, beta, variants, episodes, max_steps, gamma,
                         learning_rate, epsilon_start, epsilon_end, map, reward_mode
    [scar]               alpha, kl_beta, placeholder, method, partition, segmentation,
                         delimiters, max_players, workers, game
    [transfer]           eps_lambda, eps_v, beta, gap_tol, mode, source_episodes,
                         target_episodes, graph_episodes, graph_source, epsilon_d,
                         eigensolver, map, compare_map
    [run]                seeds, max_workers, plot

Missing keys keep their defaults; unknown sections or keys raise `ConfigError`.
Lists are comma separated. An empty `placeholder` keeps the one named by the task file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from errors import ConfigError, ValidationError
from gchrl_shaping import AgentConfig, GraphSettings, ShapingConfig, Variant
from graph_autoencoder import DEFAULT_HIDDEN, TrainConfig
from gridworld import RewardMode
from shapley_credit import DEFAULT_DELIMITERS, EXACT_SHAPLEY_CAP, check_alpha
from spectral_transfer import DEFAULT_GAP_TOL
from state_graph import EvictionPolicy, create_graph
from transfer_experiment import GraphSource, ShapingMode, TransferSettings

OPTIONAL_INT_KEYS = {"embedding_dim"}
OPTIONAL_STR_KEYS = {"placeholder"}
SCAR_METHODS = ("exact", "owen", "hierarchical", "uniform")
SCAR_PARTITIONS = ("singletons", "sentences", "balanced")


@dataclass(frozen=True)
class StateGraphSection:
    capacity: int = 72
    epsilon_d: float = 0.05
    eviction_policy: str = EvictionPolicy.OLDEST.value
    t_c: int = 1


@dataclass(frozen=True)
class AutoencoderSection:
    learning_rate: float = 1e-2
    steps_per_phase: int = 1
    pair_sample_fraction: float = 1.0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    embedding_dim: int | None = None


@dataclass(frozen=True)
class GchrlSection:
    alpha_h: float = 0.01
    alpha_l: float = 0.01
    k: int = 5
    beta: float = 1.0
    variants: tuple[str, ...] = tuple(v.value for v in Variant)
    episodes: int = 500
    max_steps: int = 100
    gamma: float = 0.99
    learning_rate: float = 0.1
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    map: str = "data/four_rooms.map"
    reward_mode: str = RewardMode.SPARSE.value


@dataclass(frozen=True)
class ScarSection:
    alpha: float = 0.5
    kl_beta: float = 0.0
    # token rendered for absent units; None keeps the one declared by the task file
    placeholder: str | None = None
    method: str = "owen"
    partition: str = "sentences"
    segmentation: str = "token"
    delimiters: tuple[str, ...] = DEFAULT_DELIMITERS
    max_players: int = EXACT_SHAPLEY_CAP
    workers: int = 1
    game: str = "data/demo_task.json"


@dataclass(frozen=True)
class TransferSection:
    eps_lambda: float = 1e-6
    eps_v: float = 1e-6
    beta: float = 1.0
    gap_tol: float = DEFAULT_GAP_TOL
    mode: str = ShapingMode.POTENTIAL.value
    source_episodes: int = 300
    target_episodes: int = 200
    graph_episodes: int = 30
    graph_source: str = GraphSource.TRAJECTORY.value
    epsilon_d: float = 0.01
    eigensolver: str = "jacobi"
    map: str = "data/pillars.map"
    # structurally different maze used by `calibrate`
    compare_map: str = "data/corridors.map"


@dataclass(frozen=True)
class RunSection:
    seeds: int = 20
    max_workers: int = 1
    plot: bool = False


SECTIONS: dict[str, type] = {
    "state_graph": StateGraphSection,
    "graph_autoencoder": AutoencoderSection,
    "gchrl": GchrlSection,
    "scar": ScarSection,
    "transfer": TransferSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    state_graph: StateGraphSection = field(default_factory=StateGraphSection)
    graph_autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    gchrl: GchrlSection = field(default_factory=GchrlSection)
    scar: ScarSection = field(default_factory=ScarSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    run: RunSection = field(default_factory=RunSection)

    def graph_settings(self) -> GraphSettings:
        sg = self.state_graph
        ae = self.graph_autoencoder
        return GraphSettings(
            capacity=sg.capacity,
            epsilon_d=sg.epsilon_d,
            eviction_policy=EvictionPolicy(sg.eviction_policy),
            t_c=sg.t_c,
            hidden=ae.hidden,
            embedding_dim=ae.embedding_dim,
        )

    def train_config(self, seed: int = 0) -> TrainConfig:
        ae = self.graph_autoencoder
        return TrainConfig(ae.learning_rate, ae.steps_per_phase, ae.pair_sample_fraction, seed)

    def shaping_config(self) -> ShapingConfig:
        g = self.gchrl
        return ShapingConfig(alpha_h=g.alpha_h, alpha_l=g.alpha_l, K=g.k, beta=g.beta)

    def agent_config(self) -> AgentConfig:
        g = self.gchrl
        return AgentConfig(g.gamma, g.learning_rate, g.epsilon_start, g.epsilon_end, g.max_steps)

    def transfer_settings(self) -> TransferSettings:
        t = self.transfer
        return TransferSettings(
            eps_lambda=t.eps_lambda,
            eps_v=t.eps_v,
            beta=t.beta,
            gap_tol=t.gap_tol,
            mode=ShapingMode(t.mode),
            source_episodes=t.source_episodes,
            target_episodes=t.target_episodes,
            graph_episodes=t.graph_episodes,
            graph_source=GraphSource(t.graph_source),
            epsilon_d=t.epsilon_d,
            eigensolver=t.eigensolver,
        )

    def validate(self) -> ExperimentConfig:
        """Check every section against the preconditions of the module that consumes it."""
        try:
            settings = self.graph_settings()
            create_graph(settings.capacity, settings.epsilon_d, settings.eviction_policy, settings.t_c)
            self.train_config()
            self.shaping_config()
            self.agent_config()
            for v in self.gchrl.variants:
                Variant(v)
            RewardMode(self.gchrl.reward_mode)
            self.transfer_settings()
        except ValidationError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.gchrl.episodes < 1:
            raise ConfigError(f"gchrl.episodes must be >= 1, got {self.gchrl.episodes}")
        check_alpha(self.scar.alpha)
        if self.scar.kl_beta < 0:
            raise ValidationError(f"scar.kl_beta must be >= 0, got {self.scar.kl_beta}")
        if self.scar.method not in SCAR_METHODS:
            raise ConfigError(f"scar.method must be one of {SCAR_METHODS}, got {self.scar.method!r}")
        if self.scar.partition not in SCAR_PARTITIONS:
            raise ConfigError(
                f"scar.partition must be one of {SCAR_PARTITIONS}, got {self.scar.partition!r}"
            )
        if self.scar.segmentation not in ("token", "sentence", "span"):
            raise ConfigError(f"unknown scar.segmentation {self.scar.segmentation!r}")
        if self.scar.max_players < 1 or self.scar.workers < 1:
            raise ConfigError("scar.max_players and scar.workers must be >= 1")
        if self.run.seeds < 1 or self.run.max_workers < 1:
            raise ConfigError("run.seeds and run.max_workers must be >= 1")
        return self

    def with_overrides(self, overrides: dict[str, Any]) -> ExperimentConfig:
        """Apply `{"section.key": value}` overrides; `None` values are ignored."""
        sections = {name: getattr(self, name) for name in SECTIONS}
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in sections or key not in _field_names(SECTIONS[section]):
                raise ConfigError(f"unknown config key {dotted!r}")
            sections[section] = dataclasses.replace(sections[section], **{key: value})
        return ExperimentConfig(**sections)


def _field_names(cls: type) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _parse_value(section: str, key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if key in OPTIONAL_INT_KEYS:
            return None if text.lower() in ("", "none") else int(text)
        if key in OPTIONAL_STR_KEYS:
            return None if text.lower() in ("", "none") else text
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [item.strip() for item in text.replace(" ", ",").split(",") if item.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(item) for item in items)
            return tuple(items)
        return text
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    sections: dict[str, Any] = {}
    for name in parser.sections():
        cls = SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"{source}: unknown section [{name}]")
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        values: dict[str, Any] = {}
        for key, raw in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _parse_value(name, key, raw, defaults[key])
        sections[name] = cls(**values)
    return ExperimentConfig(**sections)


def load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))
