"""Deterministic training loops, CSV emission and comparison sweeps."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import optimizers as op
from ..errors import InvalidInput, KLShampooError
from ..optimizers import OptimizerConfig
from .tasks import TaskSpec, make_task

CSV_HEADER = ("step", "loss", "grad_norm", "wall_ms", "optimizer", "seed")
DEFAULT_THRESHOLD = 1e-6


@dataclass(frozen=True)
class RunRecord:
    step: int
    loss: float
    grad_norm: float
    wall_ms: float
    optimizer: str
    seed: int
    diverged: bool = False


def _finite_state(st: op.ParamState) -> bool:
    bufs = [st.d, st.momentum, st.adam_v]
    for f in st.factors:
        bufs += [f.S, f.basis, f.values]
    return all(b is None or np.all(np.isfinite(b)) for b in bufs)


@dataclass
class TrainResult:
    records: list[RunRecord]
    params: list[np.ndarray]
    states: list[op.ParamState]
    task: object


def run_task(t: TaskSpec, cfg: OptimizerConfig, warmup: int = 0, timing: bool = False) -> list[RunRecord]:
    """Train ``t`` with ``cfg`` and log one record per step (see :func:`train`)."""
    return train(t, cfg, warmup, timing).records


def train(t: TaskSpec, cfg: OptimizerConfig, warmup: int = 0, timing: bool = False) -> TrainResult:
    """Train ``t`` with ``cfg``, keeping the final parameters and optimizer states.

    ``warmup > 0`` ramps the step size linearly over that many steps. Wall
    time is only measured with ``timing=True`` so that default output is
    byte-for-byte reproducible. A non-finite loss, parameter or optimizer
    buffer ends the run with a single ``diverged`` record whose loss is NaN.
    """
    if warmup < 0:
        raise InvalidInput("warmup must be non-negative")
    task = make_task(t)
    rng = np.random.default_rng(t.seed + 1)
    params = [p.copy() for p in task.params0]
    states = [op.init_state(p.shape, cfg) for p in params]
    name = cfg.variant.value
    records = []
    for k in range(1, t.steps + 1):
        c = cfg if warmup == 0 or k > warmup else replace(cfg, gamma=cfg.gamma * k / warmup)
        t0 = time.perf_counter()
        grads = task.grad(params, rng)
        gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        ok = np.isfinite(gnorm)
        if ok:
            try:
                with np.errstate(all="ignore"):
                    params = [op.step(s, p, g, c) for s, p, g in zip(states, params, grads)]
                    loss = task.loss(params)
            except (KLShampooError, np.linalg.LinAlgError):
                ok = False
        wall = (time.perf_counter() - t0) * 1e3 if timing else 0.0
        ok = ok and np.isfinite(loss) and all(np.all(np.isfinite(p)) for p in params)
        ok = ok and all(_finite_state(s) for s in states)
        if not ok:
            records.append(RunRecord(k, float("nan"), gnorm, wall, name, t.seed, diverged=True))
            break
        records.append(RunRecord(k, loss, gnorm, wall, name, t.seed))
    return TrainResult(records, params, states, task)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: r.step):
        w.writerow([r.step, repr(r.loss), repr(r.grad_norm), repr(r.wall_ms), r.optimizer, r.seed])
    return buf.getvalue()


def write_csv(records, path) -> None:
    Path(path).write_text(records_to_csv(records))


def summarize(records, threshold: float = DEFAULT_THRESHOLD) -> dict:
    losses = [r.loss for r in records if not r.diverged]
    hit = next((r.step for r in records if not r.diverged and r.loss <= threshold), None)
    return {
        "final_loss": losses[-1] if losses else None,
        "best_loss": min(losses) if losses else None,
        "steps_to_threshold": hit,
        "steps_run": len(records),
        "diverged": any(r.diverged for r in records),
    }


def _config_dict(cfg: OptimizerConfig) -> dict:
    d = asdict(cfg)
    d["variant"] = cfg.variant.value
    return d


def compare(tasks, cfgs, out_dir, threshold: float = DEFAULT_THRESHOLD, workers: int = 1, warmup: int = 0) -> dict:
    """Run every (task, config) pair; see :func:`run_grid`."""
    tasks, cfgs = list(tasks), list(cfgs)
    if not tasks or not cfgs:
        raise InvalidInput("compare needs at least one task and one config")
    return run_grid([(t, c, warmup) for t in tasks for c in cfgs], out_dir, threshold, workers)


def run_grid(runs, out_dir, threshold: float = DEFAULT_THRESHOLD, workers: int = 1) -> dict:
    """Run ``(task, config, warmup)`` triples, write one CSV each plus ``summary.json``.

    Runs are independent, so ``workers > 1`` spreads them over threads; the
    summary is sorted by run id and does not depend on completion order.
    """
    runs = list(runs)
    if not runs:
        raise InvalidInput("nothing to run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    jobs = [
        (f"{i:03d}_{t.kind.value}_{c.variant.value}_s{t.seed}", t, c, w) for i, (t, c, w) in enumerate(runs)
    ]

    def work(job):
        run_id, t, c, w = job
        recs = run_task(t, c, warmup=w)
        write_csv(recs, out / f"{run_id}.csv")
        entry = {
            "run": run_id,
            "csv": f"{run_id}.csv",
            "task": {**asdict(t), "kind": t.kind.value, "dims": list(t.dims)},
            "optimizer": c.variant.value,
            "config": _config_dict(c),
            "warmup": w,
            "seed": t.seed,
        }
        entry.update(summarize(recs, threshold))
        return entry

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            entries = list(ex.map(work, jobs))
    else:
        entries = [work(j) for j in jobs]
    entries.sort(key=lambda e: e["run"])
    summary = {"threshold": threshold, "runs": entries}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def tune_gamma(t: TaskSpec, cfg: OptimizerConfig, grid) -> tuple[float, TrainResult]:
    """Pick the step size from ``grid`` with the lowest final loss (diverged runs lose)."""
    best = None
    for g in grid:
        res = train(t, replace(cfg, gamma=g))
        last = res.records[-1]
        final = np.inf if last.diverged else last.loss
        if best is None or final < best[0]:
            best = (final, g, res)
    return best[1], best[2]
