"""Flat `key = value` experiment configuration.

The file grammar is a single flat namespace: one `key = value` per line,
`#` starts a comment, blank lines ignored, no nesting or quoting. Keys use
dotted names purely for readability. Every field has a default; numeric
solver defaults follow the reference operating point (200 anchor
iterations at lr 0.5, 50 refinement iterations at lr 1e-4, ball radius
sqrt(d)), which was tuned at production scale -- desk-size runs usually
override the two learning rates (see configs/desk.cfg).

One master seed (run.seed) expands deterministically into per-purpose
seeds; re-running any command with the same config is bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ENV_OUT = "GPRL_OUT"

TARGET_SOURCES = ("generator", "generator_patch", "blobs")
BALL_MODES = ("per_row", "flat")
GEN_MODES = ("fixed", "trained")
VARIANTS = ("anchor", "refined", "no_regu", "no_cross", "w_space", "no_anchor",
            "no_noise", "no_w", "no_g", "no_l1_ball")


@dataclass
class ExperimentConfig:
    # generator
    gen_mode: str = "fixed"
    gen_latent_dim: int = 16
    gen_layers: int = 3
    gen_channels: int = 8
    gen_mapping_hidden: int = 32
    gen_weights: str = "weights/generator.gprl"
    gen_train_images: int = 2000
    gen_train_epochs: int = 4
    gen_train_lr: float = 1e-3
    # flow
    flow_blocks: int = 3
    flow_hidden: int = 64
    flow_epochs: int = 50
    flow_train_samples: int = 20000
    flow_lr: float = 1e-3
    flow_batch: int = 256
    flow_weights: str = "weights/flow.gprl"
    # solver
    solver_lambda_w: float = 0.0002
    solver_lambda_g: float = 0.0004
    solver_lambda_c: float = 0.05
    solver_rls_iterations: int = 200
    solver_rls_lr: float = 0.5
    solver_init_samples: int = 10000
    solver_plus_iterations: int = 50
    solver_plus_lr: float = 1e-4
    solver_radius: float = 0.0          # 0 means sqrt(latent_dim)
    solver_trainable_layers: int = 0    # 0 means ceil(layers / 2)
    solver_ball_mode: str = "per_row"
    solver_patience: int = 0
    solver_diverse_init: bool = False
    # run
    run_factor: int = 8
    run_images: int = 20
    run_targets: str = "generator_patch"
    run_variant: str = "refined"
    run_corruption: str = "none"
    run_out: str = "out"
    run_seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.gen_mode not in GEN_MODES:
            raise ConfigError(f"gen.mode must be one of {GEN_MODES}")
        if self.gen_layers < 1:
            raise ConfigError("gen.layers must be >= 1")
        side = 4 * 2 ** self.gen_layers
        if self.run_factor < 1 or side % self.run_factor:
            raise ConfigError(
                f"run.factor {self.run_factor} does not divide image side {side}")
        if self.run_targets not in TARGET_SOURCES:
            raise ConfigError(f"run.targets must be one of {TARGET_SOURCES}")
        if self.run_variant not in VARIANTS:
            raise ConfigError(f"run.variant must be one of {VARIANTS}")
        if self.solver_ball_mode not in BALL_MODES:
            raise ConfigError(f"solver.ball_mode must be one of {BALL_MODES}")
        if self.run_images < 1:
            raise ConfigError("run.images must be >= 1")
        for name in ("solver_lambda_w", "solver_lambda_g", "solver_lambda_c"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{_key_of(name)} must be nonnegative")
        return self

    @property
    def side(self) -> int:
        return 4 * 2 ** self.gen_layers

    def out_root(self, explicit: str | None = None) -> Path:
        """Output root precedence: explicit flag > GPRL_OUT > config value."""
        if explicit:
            return Path(explicit)
        env = os.environ.get(ENV_OUT)
        return Path(env) if env else Path(self.run_out)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            out[_key_of(f.name)] = str(v)
        return out


def _key_of(field_name: str) -> str:
    prefix, _, rest = field_name.partition("_")
    return f"{prefix}.{rest}"


_FIELDS = {_key_of(f.name): f for f in dataclasses.fields(ExperimentConfig)}


def _convert(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    if f.type == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {_key_of(f.name)}: {raw!r}")
    try:
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad {f.type} for {_key_of(f.name)}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value pairs from the flat file grammar."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def config_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, raw in pairs.items():
        f = _FIELDS.get(key)
        if f is None:
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(cfg, f.name, _convert(f, raw))
    return cfg.validate()


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    pairs = parse_config_text(p.read_text())
    if overrides:
        pairs.update({k: str(v) for k, v in overrides.items()})
    return config_from_pairs(pairs)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.to_flat().items()]
    return "\n".join(lines) + "\n"
