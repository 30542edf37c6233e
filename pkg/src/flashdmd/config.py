"""Run configuration: a YAML key tree parsed strictly into dataclasses.

Only ``seed`` and ``train.max_iters`` are required. Every other key falls back
to the value in ``DEFAULTS`` (the dataclass defaults below); unknown keys are
rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

REQUIRED = ("seed", "train.max_iters")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key that failed."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class TeacherCfg:
    kind: str = "circle"  # circle | gaussian
    n_modes: int = 8
    radius: float = 1.0
    std: float = 0.05
    dim: int = 2
    n_groups: int = 2
    conditional: bool = False


@dataclass
class ScheduleCfg:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class GridCfg:
    taus: list = field(default_factory=lambda: [999, 749, 499, 249])
    low_noise: list = field(default_factory=lambda: [249])


@dataclass
class NetCfg:
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    temb_dim: int = 16


@dataclass
class DiscCfg:
    trunk: list = field(default_factory=lambda: [128, 128, 128])
    head_depths: list = field(default_factory=lambda: [1, 2, 3])
    head_hidden: int = 64
    input_scale: float = 4.0
    freeze_trunk: bool = True
    mode: str = "logistic"  # logistic | hinge


@dataclass
class InitCfg:
    pretrain_steps: int = 1500
    pretrain_batch: int = 256
    pretrain_lr: float = 2e-3


@dataclass
class TrainCfg:
    max_iters: int = 0
    batch: int = 256
    ttur: int = 1
    lambda_adv: float = 0.5
    ema: bool = True
    lambda_ema: float = 0.99
    dm_t_min: int = 0  # 0 = first timestep above the low-noise grid steps
    dm_t_max: int = 0  # 0 = T - 1
    dm_normalize: bool = True
    dm_steps: str = "all"  # grid steps the generator is trained at for DM: high | all


@dataclass
class OptimCfg:
    lr_gen: float = 1e-4
    lr_psi: float = 1e-3
    lr_disc: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass
class RlCfg:
    iters: int = 0
    k: int = 4
    groups: int = 64
    branch_steps: list = field(default_factory=lambda: [999, 749])
    beta: float = 4.0
    ratio: list = field(default_factory=lambda: [5, 1])
    rl_only: bool = False
    reward: str = "calibrated"
    bias_strength: float = 0.0
    favored_modes: list = field(default_factory=lambda: [0])
    pixelgan: bool = True
    eta: float = 1.0


@dataclass
class EvalCfg:
    interval: int = 250
    n: int = 10000
    n_tracking: int = 2000
    checkpoint_interval: int = 500


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    phase: str = "stage1"  # stage1 | both | stage2
    init_from: str = ""  # stage2 only: phase-1 checkpoint to start from
    teacher: TeacherCfg = field(default_factory=TeacherCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    grid: GridCfg = field(default_factory=GridCfg)
    net: NetCfg = field(default_factory=NetCfg)
    disc: DiscCfg = field(default_factory=DiscCfg)
    init: InitCfg = field(default_factory=InitCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    optim: OptimCfg = field(default_factory=OptimCfg)
    rl: RlCfg = field(default_factory=RlCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self) -> dict:
        """Everything that affects the computation; ``out_dir`` only says where files go,
        so it is left out and identical runs write identical checkpoints anywhere."""
        d = self.to_dict()
        del d["out_dir"]
        return d

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.ttur": 5})``."""
        d = self.to_dict()
        for key, val in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(key, "unknown key")
            node[parts[-1]] = val
        return from_dict(d, require=False)


DEFAULTS = RunConfig().to_dict()


def _coerce(value: Any, typ, path: str):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected list, got {value!r}")
        return list(value)
    raise TypeError(typ)


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        path = f"{prefix}{f.name}"
        typ = hints[f.name]
        if dataclasses.is_dataclass(typ):
            kwargs[f.name] = _build(typ, data[f.name], path + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], typ, path)
    return cls(**kwargs)


def _has(data: dict, dotted: str) -> bool:
    node = data
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return False
        node = node[p]
    return True


def from_dict(data: dict, require: bool = True) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if require:
        for key in REQUIRED:
            if not _has(data, key):
                raise ConfigError(key, "missing required field")
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def _int_list(values, path: str, min_len: int = 0) -> list[int]:
    if len(values) < min_len:
        raise ConfigError(path, f"needs at least {min_len} entries")
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}[{i}]", f"expected integer, got {v!r}")
    return list(values)


def validate(cfg: RunConfig) -> None:
    def need(cond: bool, path: str, msg: str):
        if not cond:
            raise ConfigError(path, msg)

    need(cfg.seed >= 0, "seed", "must be non-negative")
    need(cfg.phase in ("stage1", "both", "stage2"), "phase", "must be stage1, both, or stage2")
    need(cfg.phase != "stage2" or bool(cfg.init_from), "init_from", "stage2 needs a phase-1 checkpoint")

    t = cfg.teacher
    need(t.kind in ("circle", "gaussian"), "teacher.kind", "must be circle or gaussian")
    need(t.n_modes >= 1, "teacher.n_modes", "must be >= 1")
    need(t.std > 0, "teacher.std", "must be positive")
    need(t.dim >= 1, "teacher.dim", "must be >= 1")
    need(t.kind != "circle" or t.dim == 2, "teacher.dim", "circle teacher lives in 2 dimensions")
    need(t.n_groups >= 0, "teacher.n_groups", "must be >= 0")
    if t.conditional:
        need(t.kind == "circle" and t.n_groups >= 1 and t.n_modes % t.n_groups == 0,
             "teacher.n_groups", "conditional runs need a circle teacher with n_modes divisible by n_groups")

    s = cfg.schedule
    need(s.T >= 2, "schedule.T", "must be >= 2")
    need(0 < s.beta_start <= s.beta_end < 1, "schedule.beta_start", "need 0 < beta_start <= beta_end < 1")

    taus = _int_list(cfg.grid.taus, "grid.taus", 1)
    low = _int_list(cfg.grid.low_noise, "grid.low_noise")
    need(taus == sorted(set(taus), reverse=True), "grid.taus", "must be strictly descending")
    need(taus[0] < s.T and taus[-1] >= 1, "grid.taus", f"must lie in [1, {s.T})")
    need(set(low) <= set(taus), "grid.low_noise", "must be a subset of grid.taus")
    high = [x for x in taus if x not in low]
    need(bool(high), "grid.low_noise", "at least one grid step must be high-noise")
    need(not low or max(low) < min(high), "grid.low_noise", "low-noise steps must lie below high-noise steps")

    _int_list(cfg.net.hidden, "net.hidden", 1)
    need(all(h >= 1 for h in cfg.net.hidden), "net.hidden", "widths must be positive")
    need(cfg.net.temb_dim >= 2 and cfg.net.temb_dim % 2 == 0, "net.temb_dim", "must be a positive even number")

    dc = cfg.disc
    _int_list(dc.trunk, "disc.trunk", 1)
    need(all(h >= 1 for h in dc.trunk), "disc.trunk", "widths must be positive")
    depths = _int_list(dc.head_depths, "disc.head_depths", 2)
    need(len(set(depths)) == len(depths) and min(depths) >= 1 and max(depths) <= len(dc.trunk),
         "disc.head_depths", "need >= 2 distinct depths within the trunk")
    need(dc.head_hidden >= 1, "disc.head_hidden", "must be positive")
    need(dc.mode in ("logistic", "hinge"), "disc.mode", "must be logistic or hinge")

    need(cfg.init.pretrain_steps >= 0, "init.pretrain_steps", "must be >= 0")
    need(cfg.init.pretrain_batch >= 1, "init.pretrain_batch", "must be >= 1")

    tr = cfg.train
    need(tr.max_iters >= 0, "train.max_iters", "must be >= 0")
    need(tr.batch >= 1, "train.batch", "must be >= 1")
    need(tr.ttur >= 1, "train.ttur", "must be >= 1")
    need(tr.lambda_adv >= 0, "train.lambda_adv", "must be >= 0")
    need(0.0 <= tr.lambda_ema <= 1.0, "train.lambda_ema", "must be in [0, 1]")
    need(tr.dm_steps in ("high", "all"), "train.dm_steps", "must be high or all")
    floor = (max(low) + 1) if low else 1
    need(tr.dm_t_min == 0 or tr.dm_t_min >= floor, "train.dm_t_min",
         f"must be 0 (auto) or >= {floor}, above the low-noise grid steps")
    need(tr.dm_t_max == 0 or (max(tr.dm_t_min, floor) <= tr.dm_t_max < s.T), "train.dm_t_max",
         "must be 0 (auto) or within [dm_t_min, T)")

    o = cfg.optim
    for name in ("lr_gen", "lr_psi", "lr_disc", "eps"):
        need(getattr(o, name) > 0, f"optim.{name}", "must be positive")
    need(0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "optim.beta1", "Adam betas must lie in [0, 1)")

    rl = cfg.rl
    need(rl.iters >= 0, "rl.iters", "must be >= 0")
    need(rl.k >= 2, "rl.k", "must be >= 2")
    need(rl.groups >= 1, "rl.groups", "must be >= 1")
    branch = _int_list(rl.branch_steps, "rl.branch_steps", 1)
    for i, b in enumerate(branch):
        need(b in taus, f"rl.branch_steps[{i}]", "must be a grid step")
        need(b not in taus or taus.index(b) + 1 < len(taus), f"rl.branch_steps[{i}]",
             "the step after a branch point must be noisy (not the clean endpoint)")
    ratio = _int_list(rl.ratio, "rl.ratio", 2)
    need(len(ratio) == 2 and ratio[0] >= 1 and ratio[1] >= 1, "rl.ratio", "must be [rl_updates, dm_updates], both >= 1")
    need(rl.beta > 0, "rl.beta", "must be positive")
    need(rl.reward in ("calibrated", "norm_biased", "mode_biased"), "rl.reward", "unknown reward kind")
    need(rl.bias_strength >= 0, "rl.bias_strength", "must be >= 0")
    _int_list(rl.favored_modes, "rl.favored_modes")
    need(0 < rl.eta <= 1, "rl.eta", "must be in (0, 1] so candidate steps have a density")

    e = cfg.eval
    need(e.interval >= 1, "eval.interval", "must be >= 1")
    need(e.n >= 1000, "eval.n", "must be >= 1000")
    need(e.n_tracking >= 1000, "eval.n_tracking", "must be >= 1000")
    need(e.checkpoint_interval >= 1, "eval.checkpoint_interval", "must be >= 1")


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    """Canonical serialization: sorted keys, block style, defaults materialised."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
