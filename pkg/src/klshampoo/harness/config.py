"""Run descriptions shared by the CLI flags and the comparison config file.

A config file is flat ``key = value`` text split into ``[run]`` blocks. Keys
mirror the ``run`` subcommand's flags (without the leading dashes). A value
holding commas is a grid axis, and each block expands to the cartesian product
of its axes::

    [run]
    task = kron_quadratic
    optimizer = sgd, kl_shampoo
    gamma = 0.01, 0.02
    steps = 200
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from ..errors import InvalidInput
from ..optimizers import OptimizerConfig
from .tasks import TaskSpec

FLOAT_KEYS = {"gamma", "beta1", "beta2", "kappa", "power", "weight-decay", "epsilon"}
INT_KEYS = {"refresh-interval", "steps", "seed", "batch", "warmup"}
BOOL_KEYS = {"grafting", "bias-correction"}
STR_KEYS = {"task", "optimizer", "dims"}
KEYS = FLOAT_KEYS | INT_KEYS | BOOL_KEYS | STR_KEYS

DEFAULTS = {
    "task": "kron_quadratic",
    "optimizer": "kl_shampoo",
    "gamma": 1e-2,
    "beta1": 0.0,
    "beta2": 0.05,
    "kappa": 0.0,
    "power": 0.5,
    "refresh-interval": 10,
    "weight-decay": 0.0,
    "grafting": False,
    "bias-correction": False,
    "epsilon": 1e-8,
    "steps": 500,
    "seed": 0,
    "batch": 16,
    "dims": "",
    "warmup": 0,
}


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise InvalidInput(f"not a boolean: {text!r}")


def parse_dims(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(d) for d in text)
    text = str(text).strip()
    if not text:
        return ()
    try:
        return tuple(int(d) for d in text.lower().split("x"))
    except ValueError as e:
        raise InvalidInput(f"dims must look like 8x6, got {text!r}") from e


def _convert(key: str, text: str):
    if key not in KEYS:
        raise InvalidInput(f"unknown key {key!r}")
    try:
        if key in FLOAT_KEYS:
            return float(text)
        if key in INT_KEYS:
            return int(text)
    except ValueError as e:
        raise InvalidInput(f"bad value for {key}: {text!r}") from e
    if key in BOOL_KEYS:
        return parse_bool(text)
    return text.strip()


@dataclass(frozen=True)
class RunSpec:
    task: TaskSpec
    cfg: OptimizerConfig
    warmup: int = 0


def build(values: dict) -> RunSpec:
    v = {**DEFAULTS, **values}
    task = TaskSpec(v["task"], parse_dims(v["dims"]), v["seed"], v["steps"], v["batch"])
    cfg = OptimizerConfig(
        variant=v["optimizer"],
        gamma=v["gamma"],
        beta1=v["beta1"],
        beta2=v["beta2"],
        kappa=v["kappa"],
        p=v["power"],
        T=v["refresh-interval"],
        weight_decay=v["weight-decay"],
        grafting=v["grafting"],
        epsilon=v["epsilon"],
        bias_correction=v["bias-correction"],
    )
    return RunSpec(task, cfg, v["warmup"])


def parse_config(text: str) -> list[RunSpec]:
    blocks: list[dict] = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[run]":
            blocks.append({})
            continue
        if line.startswith("["):
            raise InvalidInput(f"line {n}: only [run] sections are allowed")
        if not blocks:
            raise InvalidInput(f"line {n}: key outside a [run] block")
        if "=" not in line:
            raise InvalidInput(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key in blocks[-1]:
            raise InvalidInput(f"line {n}: duplicate key {key!r}")
        blocks[-1][key] = [_convert(key, part) for part in val.split(",")]
    if not blocks:
        raise InvalidInput("config has no [run] blocks")
    runs = []
    for block in blocks:
        keys = sorted(block)
        for combo in itertools.product(*(block[k] for k in keys)):
            runs.append(build(dict(zip(keys, combo))))
    return runs
