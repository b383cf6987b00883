"""Run configuration: flat dotted-key text files with full-default echo.

One master seed in the file; every subsystem stream (world generation,
training, evaluation) is derived from it, so any piece can be reproduced
independently. Unknown keys are hard errors; the echo materializes every
default, and parse(echo(cfg)) == cfg.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import seeds
from .errors import ConfigError
from .evaluate import EvalConfig
from .flatkv import format_flat, parse_bool, parse_flat
from .losses import LossWeights
from .model import ModelConfig
from .train import TrainConfig
from .world import WorldConfig

COMMANDS = ("gen-world", "gen-data", "pretrain", "finetune", "scratch", "eval",
            "scaling", "ablate")

# train/eval seeds are derived from the master seed, never set directly
_EXCLUDED_FIELDS = {("train", "seed"), ("train", "weights"), ("train", "mixco_beta"),
                    ("eval", "seed")}

_SPECIAL_KEYS = {
    "seed": int,
    "command": str,
    "train.alpha1": float,
    "train.alpha2": float,
    "train.mixco_beta_a": float,
    "train.mixco_beta_b": float,
    "paths.out": str,
    "paths.data": str,
    "paths.checkpoint": str,
    "scaling.sessions": str,
    "scaling.arms": str,
    "ablate.variants": str,
}

_BLOCKS = {"world": WorldConfig, "model": ModelConfig, "train": TrainConfig,
           "eval": EvalConfig}


def _registry() -> dict[str, type]:
    reg: dict[str, type] = dict(_SPECIAL_KEYS)
    for block, cls in _BLOCKS.items():
        for f in fields(cls):
            if (block, f.name) in _EXCLUDED_FIELDS:
                continue
            caster = {"int": int, "float": float, "str": str, "bool": bool}.get(f.type)
            if caster is None:
                raise AssertionError(f"unhandled field type {f.type} for "
                                     f"{block}.{f.name}")
            reg[f"{block}.{f.name}"] = caster
    return reg


@dataclass
class RunConfig:
    command: str
    world: WorldConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    seed: int
    paths: dict[str, str]
    scaling_sessions: tuple[int, ...]
    scaling_arms: tuple[str, ...]
    ablate_variants: tuple[str, ...]

    @property
    def world_seed(self) -> int:
        return seeds.derive(self.seed, "world")


def _cast(key: str, raw: str, caster) -> object:
    if caster is bool:
        return parse_bool(raw, key)
    try:
        return caster(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected {caster.__name__}, "
                          f"got {raw!r}") from None


def _parse_int_list(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated integers, "
                          f"got {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Materialize a full RunConfig from flat text; unknown keys are errors."""
    raw = parse_flat(text)
    registry = _registry()
    values: dict[str, object] = {}
    for key, val in raw.items():
        if key not in registry:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _cast(key, val, registry[key])

    def block_kwargs(block: str, cls) -> dict:
        out = {}
        for f in fields(cls):
            if (block, f.name) in _EXCLUDED_FIELDS:
                continue
            key = f"{block}.{f.name}"
            if key in values:
                out[f.name] = values[key]
        return out

    master = int(values.get("seed", 0))
    try:
        world = WorldConfig(**block_kwargs("world", WorldConfig))
        model = ModelConfig(**block_kwargs("model", ModelConfig))
        weights = LossWeights(alpha1=float(values.get("train.alpha1", 0.033)),
                              alpha2=float(values.get("train.alpha2", 0.016)))
        beta = (float(values.get("train.mixco_beta_a", 0.15)),
                float(values.get("train.mixco_beta_b", 0.15)))
        train = TrainConfig(weights=weights, mixco_beta=beta,
                            seed=seeds.derive(master, "train"),
                            **block_kwargs("train", TrainConfig))
        ev = EvalConfig(seed=seeds.derive(master, "eval"),
                        **block_kwargs("eval", EvalConfig))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    world.validate()
    model.validate()
    train.validate()
    ev.validate()
    if ev.pool_size > world.n_shared:
        raise ConfigError(f"eval.pool_size = {ev.pool_size} exceeds the shared "
                          f"test set size world.n_shared = {world.n_shared}")

    command = str(values.get("command", ""))
    if command and command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    paths = {name: str(values.get(f"paths.{name}", ""))
             for name in ("out", "data", "checkpoint")}
    sessions = _parse_int_list(str(values.get("scaling.sessions", "1,2,4,8")),
                               "scaling.sessions")
    arms = tuple(t for t in str(values.get("scaling.arms", "pretrained,scratch")
                                ).split(",") if t)
    variants = tuple(t for t in str(values.get(
        "ablate.variants", "Prior,Prior+Low,Prior+Ret,Ret,Ret+Low,All")).split(",") if t)
    return RunConfig(command=command, world=world, model=model, train=train,
                     eval=ev, seed=master, paths=paths,
                     scaling_sessions=sessions, scaling_arms=arms,
                     ablate_variants=variants)


def echo_config(rc: RunConfig) -> str:
    """Full config echo with every default materialized."""
    items: dict[str, object] = {"seed": rc.seed}
    if rc.command:
        items["command"] = rc.command
    for block, cfg in (("world", rc.world), ("model", rc.model),
                       ("train", rc.train), ("eval", rc.eval)):
        for f in fields(type(cfg)):
            if (block, f.name) in _EXCLUDED_FIELDS:
                continue
            items[f"{block}.{f.name}"] = getattr(cfg, f.name)
    items["train.alpha1"] = rc.train.weights.alpha1
    items["train.alpha2"] = rc.train.weights.alpha2
    items["train.mixco_beta_a"] = rc.train.mixco_beta[0]
    items["train.mixco_beta_b"] = rc.train.mixco_beta[1]
    for name, value in rc.paths.items():
        # the output directory is wherever the echo lives, never baked in:
        # reruns into fresh directories must reproduce bit-identical trees
        if value and name != "out":
            items[f"paths.{name}"] = value
    items["scaling.sessions"] = ",".join(str(k) for k in rc.scaling_sessions)
    items["scaling.arms"] = ",".join(rc.scaling_arms)
    items["ablate.variants"] = ",".join(rc.ablate_variants)
    return format_flat(items)


def load_config(path: Path | None) -> RunConfig:
    """Parse a config file, or all defaults when no path is given."""
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text(encoding="utf-8"))


def with_overrides(rc: RunConfig, **kw) -> RunConfig:
    """Apply CLI-level overrides (command, seed, paths, subject, sessions...)."""
    command = kw.get("command", rc.command)
    master = kw.get("seed", rc.seed)
    train = rc.train
    if master != rc.seed:
        train = replace(train, seed=seeds.derive(master, "train"))
        ev = replace(rc.eval, seed=seeds.derive(master, "eval"))
    else:
        ev = rc.eval
    if "subject" in kw and kw["subject"]:
        train = replace(train, held_out_subject=kw["subject"])
    if "sessions" in kw and kw["sessions"] is not None:
        train = replace(train, n_finetune_sessions=int(kw["sessions"]))
    paths = dict(rc.paths)
    for name in ("out", "data", "checkpoint"):
        if kw.get(name):
            paths[name] = str(kw[name])
    return RunConfig(command=command, world=rc.world, model=rc.model, train=train,
                     eval=ev, seed=master, paths=paths,
                     scaling_sessions=kw.get("scaling_sessions", rc.scaling_sessions),
                     scaling_arms=kw.get("scaling_arms", rc.scaling_arms),
                     ablate_variants=kw.get("ablate_variants", rc.ablate_variants))
