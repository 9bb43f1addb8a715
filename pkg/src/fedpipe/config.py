"""Declarative experiment configuration.

A config file is YAML with the sections below. Every field has a default;
unknown keys are rejected. ``validate`` reports every problem at once.
"""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .allocation import SELECTION_KINDS
from .combining import ATTACK_KINDS
from .data import PARTITION_KINDS
from .exceptions import ConfigError
from .model import LOSS_KINDS

DATA_SOURCES = ("synthetic-quadratic", "digits", "clustered-regression", "file", "arrays")
ENCODER_KINDS = ("identity", "topk", "mask", "qsgd", "uveqfed", "dp")
CHANNEL_KINDS = ("orthogonal", "ota")
COMBINERS = ("fedavg", "median", "trimmed-mean", "krum", "mixture")
LR_KINDS = ("constant", "diminishing", "box")
SUBSTREAMS = ("data", "partition", "init", "batches", "selection", "dither", "channel", "attack")


@dataclass
class DataConfig:
    source: str = "synthetic-quadratic"
    path: Optional[str] = None          # columnar text file for source "file"
    test_path: Optional[str] = None     # optional held-out file; else split by test_fraction
    n_samples: Optional[int] = None     # pool size; None: 1000 synthetic, 300 per cluster, all digits
    n_features: int = 5
    noise: float = 1.0                  # label noise std
    condition: float = 2.0              # feature covariance condition number (quadratic)
    test_fraction: float = 0.2
    n_clusters: int = 3                 # clustered-regression
    components: int = 3                 # Gaussian input components per cluster
    separation: float = 8.0             # distance between cluster centers
    spread: float = 2.0                 # component mean spread inside a cluster


@dataclass
class PartitionConfig:
    kind: str = "iid"                   # iid | label-shard | clustered
    shards_per_user: int = 2


@dataclass
class ModelConfig:
    kind: str = "quadratic-synthetic"   # quadratic-synthetic | squared-error | logistic | mlp
    reg: float = 0.0
    hidden: int = 50
    fit_intercept: bool = True


@dataclass
class ScheduleConfig:
    local_steps: int = 5                # E
    batch_size: int = 10                # B
    total_steps: int = 100              # T; the run has T // E rounds
    lr: str = "constant"                # constant | diminishing | box
    eta0: float = 0.05
    mu: float = 1.0                     # diminishing rule only
    gamma: float = 1.0                  # diminishing rule only


@dataclass
class SelectionConfig:
    kind: str = "full"                  # full | uniform | probabilistic | round-robin | bandit
    k: int = 1
    balance: float = 0.5                # norm-vs-distance mix of the probabilistic rule
    explore: float = math.sqrt(2.0)     # bandit exploration constant


@dataclass
class EncoderConfig:
    kind: str = "identity"              # identity | topk | mask | qsgd | uveqfed | dp
    k: int = 1                          # topk
    keep_prob: float = 0.5              # mask
    step: Optional[float] = None        # qsgd / uveqfed lattice step; None: derive from bits_per_param
    bits_per_param: float = 1.0
    lattice_dim: int = 1                # uveqfed
    zeta: float = 2.0
    normalize: bool = True              # qsgd: normalize by zeta * ||u|| like uveqfed
    epsilon: float = 0.5                # dp
    delta: float = 0.01
    exposures: int = 1
    clip: float = 1.0


@dataclass
class ChannelConfig:
    kind: str = "orthogonal"            # orthogonal | ota
    n_blocks: Optional[int] = None      # default: number of users
    bandwidth: float = 1e6
    power: float = 1.0
    noise_psd: float = 1e-9
    interference: Optional[list] = None # per block; default zeros
    distances: Optional[list] = None    # per user; default spread over [d_min, d_max]
    d_min: float = 1.0
    d_max: float = 2.0
    noise_var: float = 0.0              # ota per-coordinate noise
    precoder: str = "cotaf"             # cotaf | fixed
    fixed_alpha: Optional[float] = None
    pilot_sqnorm: Optional[float] = None  # round-1 energy estimate; None measures it
    safety: float = 1.1
    fading: bool = False                # ota: use geometric gains with channel inversion
    inversion_threshold: float = 1e-3
    slot_s: float = 1.0                 # duration of one over-the-air slot


@dataclass
class CombinerConfig:
    kind: str = "fedavg"                # fedavg | median | trimmed-mean | krum | mixture
    fedavg_mode: str = "literal"        # literal | delta
    beta: float = 0.1
    f: int = 1
    weighted: bool = False
    density_components: int = 3         # mixture gate components per cluster


@dataclass
class AttackConfig:
    fraction: float = 0.0
    kind: str = "sign-flip"
    magnitude: float = 1.0
    sigma: float = 1.0
    factor: float = 1.0
    reported_n: int = 1


@dataclass
class AnalysisConfig:
    bounds: bool = False
    probe_rounds: int = 20


@dataclass
class SeedConfig:
    master: int = 0
    overrides: dict = field(default_factory=dict)  # substream name -> seed

    def seed_for(self, name: str) -> int:
        return int(self.overrides.get(name, self.master))


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    metrics: str = "metrics.csv"
    model: str = "model.bin"
    manifest: str = "manifest.json"
    checkpoint_every: int = 0           # rounds; 0 disables checkpoints


@dataclass
class ExperimentConfig:
    n_users: int = 10
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    combiner: CombinerConfig = field(default_factory=CombinerConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    emit_excluded: bool = False         # non-selected users send zero-weight payloads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **paths) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"schedule.total_steps": 50})``."""
        out = copy.deepcopy(self)
        for path, value in paths.items():
            set_path(out, path, value)
        return out


def _build(cls, data: Any, where: str, errors: list):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            errors.append(f"{where + '.' if where else ''}{key}: unknown key")
            continue
        f = known[key]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value, f"{where + '.' if where else ''}{key}", errors)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def parse(data: Optional[dict]) -> tuple[ExperimentConfig, list[str]]:
    """Build a config and collect every problem: unknown keys and failed checks.

    Unknown keys are dropped from the returned config.
    """
    errors: list = []
    cfg = _build(ExperimentConfig, data or {}, "", errors)
    try:
        errors.extend(validate(cfg))
    except (TypeError, AttributeError) as exc:
        errors.append(f"malformed value: {exc}")
    return cfg, errors


def from_dict(data: Optional[dict]) -> ExperimentConfig:
    """Strict builder: unknown keys raise, values are checked later by :func:`check`."""
    errors: list = []
    cfg = _build(ExperimentConfig, data or {}, "", errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def read_yaml(path):
    with open(Path(path)) as fh:
        try:
            return yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc


def load_config(path) -> ExperimentConfig:
    return from_dict(read_yaml(path))


def set_path(cfg, path: str, value) -> None:
    *parents, leaf = path.split(".")
    obj = cfg
    for name in parents:
        if not hasattr(obj, name):
            raise ConfigError(f"{path}: unknown section {name!r}")
        obj = getattr(obj, name)
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"{path}: unknown key")
    setattr(obj, leaf, value)


def validate(cfg: ExperimentConfig) -> list[str]:
    """Every consistency problem in ``cfg``; empty when valid."""
    e: list[str] = []

    def need(cond, msg):
        if not cond:
            e.append(msg)

    N = cfg.n_users
    need(isinstance(N, int) and N >= 1, f"n_users must be a positive integer, got {N!r}")
    need(cfg.data.source in DATA_SOURCES, f"data.source must be one of {DATA_SOURCES}")
    need(cfg.data.source != "file" or cfg.data.path, "data.path is required for source 'file'")
    need(0.0 <= cfg.data.test_fraction < 1.0, "data.test_fraction must lie in [0, 1)")
    need(cfg.data.n_samples is None or cfg.data.n_samples >= 1, "data.n_samples must be positive")
    need(cfg.partition.kind in PARTITION_KINDS, f"partition.kind must be one of {PARTITION_KINDS}")
    need(cfg.model.kind in LOSS_KINDS, f"model.kind must be one of {LOSS_KINDS}")
    need(cfg.model.reg >= 0, "model.reg must be >= 0")

    s = cfg.schedule
    need(s.local_steps >= 1, "schedule.local_steps must be >= 1")
    need(s.batch_size >= 1, "schedule.batch_size must be >= 1")
    need(s.total_steps >= s.local_steps, "schedule.total_steps must be at least one round (>= local_steps)")
    need(s.local_steps < 1 or s.total_steps % s.local_steps == 0,
         "schedule.total_steps must be a multiple of local_steps")
    need(s.lr in LR_KINDS, f"schedule.lr must be one of {LR_KINDS}")
    need(s.lr != "constant" or s.eta0 > 0, "schedule.eta0 must be positive")
    need(s.lr != "box" or cfg.model.kind in ("quadratic-synthetic", "squared-error", "logistic"),
         "schedule.lr 'box' needs a strongly convex model")

    sel = cfg.selection
    need(sel.kind in SELECTION_KINDS, f"selection.kind must be one of {SELECTION_KINDS}")
    need(sel.kind == "full" or 1 <= sel.k <= (N if isinstance(N, int) else 0),
         f"selection.k must lie in [1, n_users], got {sel.k}")
    need(0.0 <= sel.balance <= 1.0, "selection.balance must lie in [0, 1]")

    enc = cfg.encoder
    need(enc.kind in ENCODER_KINDS, f"encoder.kind must be one of {ENCODER_KINDS}")
    need(enc.kind != "topk" or enc.k >= 1, "encoder.k must be >= 1")
    need(enc.kind != "mask" or 0 < enc.keep_prob <= 1, "encoder.keep_prob must lie in (0, 1]")
    need(enc.step is None or enc.step > 0, "encoder.step must be positive")
    need(enc.lattice_dim in (1, 2), "encoder.lattice_dim must be 1 or 2")
    need(enc.zeta > 0, "encoder.zeta must be positive")
    need(enc.bits_per_param > 0, "encoder.bits_per_param must be positive")
    need(enc.kind != "dp" or 0 < enc.epsilon < 1, "encoder.epsilon must lie in (0, 1)")
    need(enc.kind != "dp" or 0 < enc.delta < 1, "encoder.delta must lie in (0, 1)")
    need(enc.kind != "dp" or (enc.clip > 0 and enc.exposures >= 1), "encoder.clip and exposures must be positive")

    ch = cfg.channel
    need(ch.kind in CHANNEL_KINDS, f"channel.kind must be one of {CHANNEL_KINDS}")
    need(ch.kind != "ota" or enc.kind == "identity", "an ota channel needs the identity (dense) encoder")
    need(ch.kind != "ota" or cfg.combiner.kind in ("fedavg", "mixture"),
         "an ota channel computes the average itself; combiner must be fedavg")
    need(ch.precoder in ("cotaf", "fixed"), "channel.precoder must be cotaf or fixed")
    need(ch.noise_var >= 0, "channel.noise_var must be >= 0")
    need(ch.bandwidth > 0 and ch.power > 0, "channel.bandwidth and power must be positive")
    need((ch.pilot_sqnorm is None or ch.pilot_sqnorm > 0) and ch.safety > 0,
         "channel.pilot_sqnorm and safety must be positive")
    need(ch.fixed_alpha is None or ch.fixed_alpha > 0, "channel.fixed_alpha must be positive")
    need(ch.slot_s >= 0, "channel.slot_s must be >= 0")
    k_sel = N if sel.kind == "full" else sel.k
    blocks = N if ch.n_blocks is None else ch.n_blocks
    need(ch.kind != "orthogonal" or (isinstance(k_sel, int) and blocks >= k_sel),
         f"channel.n_blocks ({blocks}) must be at least the number of participants ({k_sel})")
    need(ch.interference is None or len(ch.interference) == blocks, "channel.interference needs one entry per block")
    need(ch.distances is None or len(ch.distances) == N, "channel.distances needs one entry per user")
    need(ch.distances is None or all(d > 0 for d in ch.distances), "channel.distances must be positive")
    need(0 < ch.d_min <= ch.d_max, "channel.d_min/d_max must satisfy 0 < d_min <= d_max")

    cb = cfg.combiner
    need(cb.kind in COMBINERS, f"combiner.kind must be one of {COMBINERS}")
    need(cb.fedavg_mode in ("literal", "delta"), "combiner.fedavg_mode must be literal or delta")
    need(cb.kind != "trimmed-mean" or 0 <= cb.beta < 0.5, "combiner.beta must lie in [0, 0.5)")
    need(cb.kind != "krum" or k_sel >= cb.f + 3, "krum needs at least f + 3 participants")
    need(cb.kind != "mixture" or cfg.partition.kind == "clustered", "combiner 'mixture' needs a clustered partition")
    need(cfg.partition.kind != "clustered" or cfg.data.source in ("clustered-regression", "arrays"),
         "clustered partition needs the clustered-regression source or arrays with cluster ids")

    at = cfg.attack
    need(0.0 <= at.fraction < 0.5, "attack.fraction must lie in [0, 0.5)")
    need(at.kind in ATTACK_KINDS, f"attack.kind must be one of {ATTACK_KINDS}")
    need(all(math.isfinite(v) for v in (at.magnitude, at.sigma, at.factor)), "attack parameters must be finite")
    need(not cfg.analysis.bounds or cfg.model.kind in ("quadratic-synthetic", "squared-error", "logistic"),
         "analysis.bounds needs a convex model")
    need(all(k in SUBSTREAMS for k in cfg.seeds.overrides), f"seeds.overrides keys must be in {SUBSTREAMS}")
    need(cfg.output.checkpoint_every >= 0, "output.checkpoint_every must be >= 0")
    return e


def check(cfg: ExperimentConfig) -> ExperimentConfig:
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg
