"""Run configuration: typed sections, INI round-trip, CLI overrides.

The config file is plain ``key = value`` under one section per pipeline
area. Every key maps to a dataclass field; unknown sections or keys are
rejected, and parse -> serialize -> parse is the identity. Values on the
command line override file values via ``section.key=value`` pairs.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .data import ANOMALY_KINDS


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | csv
    kind: str = "seasonal"
    train_points: int = 2000
    test_points: int = 400
    period: float = 50.0
    amplitude: float = 1.0
    noise_sigma: float = 0.08
    magnitude: float = 0.0  # 0 -> per-kind default
    trend_slope: float = 0.02
    anomaly_intervals: str = "auto"  # or "start:end,start:end" absolute indices
    csv_path: str = ""
    csv_timestamp: str = ""
    csv_label: str = ""
    csv_values: str = ""  # comma-separated; empty -> all remaining columns
    train_fraction: float = 0.7  # csv source only


@dataclass
class WindowSection:
    width: int = 20
    stride: int = 1


@dataclass
class Stage1Section:
    epochs: int = 30
    lr: float = 1e-3
    hidden: int = 32
    blocks: int = 2
    heads: int = 2
    ff_mult: int = 2
    batch_size: int = 32
    optimizer: str = "adam"


@dataclass
class Stage2RlSection:
    epochs: int = 3
    batch_size: int = 32
    history_len: int = 8
    buffer_capacity: int = 4096
    minibatch: int = 32
    agent_hidden: int = 32
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    explore_sigma: float = 0.2
    explore_decay: float = 0.95
    policy: str = "rl"  # rl | random
    pool_all: bool = False
    ephemeral_theta: bool = False
    reset_per_epoch: bool = True
    band_low_scale: float = 1.5  # x stage-1 final loss
    band_up_scale: float = 4.0
    band_low_min: float = 0.06  # absolute floor (z-scored units); 0 disables
    band_up_min: float = 0.25
    step_pos: float = 0.0  # 0 -> calibrated from a gradient probe at the band
    step_neg: float = 0.0
    action_min: float = 0.0
    action_max: float = 1.0


@dataclass
class Stage2TripletSection:
    epochs: int = 30
    margin: float = 0.5
    compact_weight: float = 0.1
    lr: float = 1e-3
    batch_size: int = 64
    hidden: int = 64
    embed_dim: int = 16
    jitter_sigma: float = 0.01
    scale_sigma: float = 0.05


@dataclass
class Stage3Section:
    count: int = 8
    temperature: float = 0.1
    margin: float = 0.5
    margin_anomaly: float = -1.0  # negative -> use shared margin
    margin_dispersion: float = -1.0
    weight_normal: float = 1.0
    weight_anomaly: float = 1.0
    weight_dispersion: float = 0.1
    weight_balance: float = 0.1
    epochs: int = 30
    lr: float = 5e-3
    encoder_lr_scale: float = 0.001
    batch_size: int = 64


@dataclass
class EvalSection:
    quantile: float = 0.99


@dataclass
class RunSection:
    seed: int = 0
    outdir: str = "runs/latest"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    window: WindowSection = field(default_factory=WindowSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2_rl: Stage2RlSection = field(default_factory=Stage2RlSection)
    stage2_triplet: Stage2TripletSection = field(default_factory=Stage2TripletSection)
    stage3: Stage3Section = field(default_factory=Stage3Section)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        d, w = self.data, self.window
        if d.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got '{d.source}'")
        if d.source == "synthetic" and d.kind not in ANOMALY_KINDS:
            raise ConfigError(f"data.kind must be one of {ANOMALY_KINDS}, got '{d.kind}'")
        if d.source == "csv" and not d.csv_path:
            raise ConfigError("data.csv_path is required when data.source = csv")
        if not 0.0 < d.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must be in (0, 1)")
        if d.train_points < 2 * w.width or d.test_points < w.width:
            raise ConfigError("train/test segments must cover at least one window")
        if w.width < 2 or w.stride < 1:
            raise ConfigError("window.width must be >= 2 and window.stride >= 1")
        if self.stage1.hidden % self.stage1.heads != 0:
            raise ConfigError("stage1.hidden must be divisible by stage1.heads")
        if self.stage2_rl.policy not in ("rl", "random"):
            raise ConfigError("stage2_rl.policy must be 'rl' or 'random'")
        if not self.stage2_rl.band_low_scale < self.stage2_rl.band_up_scale:
            raise ConfigError("stage2_rl.band_low_scale must be below band_up_scale")
        if not self.stage2_rl.band_low_min < max(self.stage2_rl.band_up_min, 1e-12):
            raise ConfigError("stage2_rl.band_low_min must be below band_up_min")
        if not 0.0 <= self.stage2_rl.action_min < self.stage2_rl.action_max:
            raise ConfigError("need 0 <= action_min < action_max")
        if self.stage3.count < 2:
            raise ConfigError("stage3.count must be >= 2")
        if self.stage3.temperature <= 0:
            raise ConfigError("stage3.temperature must be positive")
        if not 0.0 < self.eval.quantile <= 1.0:
            raise ConfigError("eval.quantile must be in (0, 1]")
        if self.run.seed < 0:
            raise ConfigError("run.seed must be nonnegative")

    def to_ini(self) -> str:
        out = io.StringIO()
        for name, section in self.sections().items():
            out.write(f"[{name}]\n")
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                out.write(f"{f.name} = {value}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"bad config syntax: {err}") from None
        cfg = cls()
        known = cfg.sections()
        for section_name in parser.sections():
            if section_name not in known:
                raise ConfigError(f"unknown config section [{section_name}]")
            section = known[section_name]
            field_types = {f.name: f.type for f in fields(section)}
            for key, raw in parser.items(section_name):
                if key not in field_types:
                    raise ConfigError(f"unknown key '{key}' in section [{section_name}]")
                setattr(section, key, _convert(raw, field_types[key], f"{section_name}.{key}"))
        cfg.validate()
        return cfg

    def apply_overrides(self, pairs: list[str]) -> None:
        known = self.sections()
        for pair in pairs:
            if "=" not in pair or "." not in pair.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got '{pair}'")
            target, raw = pair.split("=", 1)
            section_name, key = target.strip().split(".", 1)
            if section_name not in known:
                raise ConfigError(f"unknown config section '{section_name}'")
            section = known[section_name]
            field_types = {f.name: f.type for f in fields(section)}
            if key not in field_types:
                raise ConfigError(f"unknown key '{key}' in section [{section_name}]")
            setattr(section, key, _convert(raw.strip(), field_types[key], target))
        self.validate()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


class ConfigError(ValueError):
    pass


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _convert(raw: str, type_name, where: str):
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`; match on the name
    name = type_name if isinstance(type_name, str) else type_name.__name__
    raw = raw.strip()
    try:
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        if name == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        return raw
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def parse_intervals(text: str) -> list[tuple[int, int]]:
    """Parse 'start:end,start:end' (or bare indices) into interval tuples."""
    intervals = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            s, e = part.split(":", 1)
            intervals.append((int(s), int(e)))
        else:
            p = int(part)
            intervals.append((p, p + 1))
    return intervals
