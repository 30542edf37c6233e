"""Canned ablation suites: each runs a handful of configurations over a shared
seed set and writes a per-seed table plus one summary row per configuration."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import trainer
from .checkpoint import decode, encode
from .config import RunConfig

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
METRICS = ("mean_reward", "kl_gen_to_teacher", "mode_coverage", "w2", "psi_tracking_error",
           "disc_real_fake_gap")


@dataclass(frozen=True)
class Variant:
    label: str
    overrides: dict


@dataclass(frozen=True)
class Suite:
    name: str
    stage: str  # "stage1": variants change distillation; "stage2": variants share a phase-1 start
    variants: tuple[Variant, ...]
    description: str = ""


SUITES = {
    "ttur": Suite("ttur", "stage1", (
        Variant("ttur=1", {"train.ttur": 1}),
        Variant("ttur=2", {"train.ttur": 2}),
        Variant("ttur=5", {"train.ttur": 5}),
    ), "generator updated every 1, 2 or 5 score-estimator updates"),
    "ema": Suite("ema", "stage1", (
        Variant("ema", {"train.ema": True}),
        Variant("no_ema", {"train.ema": False}),
    ), "score estimator with and without EMA injection of generator weights"),
    "dm_only": Suite("dm_only", "stage1", (
        Variant("dm+gan", {}),
        Variant("dm_only", {"train.lambda_adv": 0.0, "train.dm_steps": "all"}),
    ), "distribution matching with and without the data-space adversarial loss"),
    "rl_ratio": Suite("rl_ratio", "stage2", (
        Variant("1:1", {"rl.ratio": [1, 1]}),
        Variant("2:1", {"rl.ratio": [2, 1]}),
        Variant("5:1", {"rl.ratio": [5, 1]}),
        Variant("10:1", {"rl.ratio": [10, 1]}),
    ), "preference:distillation update ratios"),
    "noise_range": Suite("noise_range", "stage2", (
        Variant("high_noise", {}),
        Variant("all_noise", {"rl.branch_steps": "all"}),
    ), "preference branching at the top grid steps only, or at every stochastic step"),
    "pixelgan": Suite("pixelgan", "stage2", (
        Variant("no_gan", {"rl.pixelgan": False}),
        Variant("+pixelgan", {"rl.pixelgan": True}),
    ), "phase-2 distillation updates with and without the adversarial branch"),
}


@dataclass
class SuiteResult:
    suite: str
    rows: list[dict] = field(default_factory=list)  # one per (variant, seed)
    summary: list[dict] = field(default_factory=list)  # one per variant

    def per_seed(self, label: str, metric: str) -> list[float]:
        return [r[metric] for r in self.rows if r["config"] == label]


def _resolve(base: RunConfig, overrides: dict) -> RunConfig:
    ov = dict(overrides)
    if ov.get("rl.branch_steps") == "all":
        taus = list(base.grid.taus)
        ov["rl.branch_steps"] = taus[:-1]  # every step whose successor is still noisy
    return base.replace(**ov) if ov else base


def _clone(state):
    return decode(encode(state))


def _record(suite: str, label: str, seed: int, state, wall: float) -> dict:
    rec = trainer.evaluate(state)
    row = {"suite": suite, "config": label, "seed": seed, "step": rec.step}
    for m in METRICS:
        row[m] = getattr(rec, m)
    row["gen_updates"] = state.counts.gen_updates
    row["psi_updates"] = state.counts.psi_updates
    row["rl_updates"] = state.counts.rl_updates
    row["rl_skipped"] = state.counts.rl_skipped
    row["wall_time"] = wall
    return row


def summarize(rows: list[dict], labels: list[str]) -> list[dict]:
    out = []
    for label in labels:
        sel = [r for r in rows if r["config"] == label]
        row = {"config": label, "n_seeds": len(sel)}
        for m in METRICS:
            vals = np.array([r[m] for r in sel], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_median"] = float(np.median(vals))
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def run_suite(name: str, base: RunConfig, seeds=DEFAULT_SEEDS,
              log: Callable[[str], None] | None = None, starts: dict | None = None) -> SuiteResult:
    """Run every variant of suite ``name`` on each seed.

    Phase-1 suites train ``base.train.max_iters`` iterations per variant. Phase-2 suites
    train phase 1 once per seed (or take it from ``starts[seed]``, left unmodified), then
    ``base.rl.iters`` phase-2 updates per variant.
    """
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    suite = SUITES[name]
    res = SuiteResult(name)
    say = log or (lambda msg: None)
    for seed in seeds:
        seeded = base.replace(seed=int(seed))
        start = None
        if suite.stage == "stage2" and starts and seed in starts:
            start = starts[seed]
        elif suite.stage == "stage2":
            t0 = time.perf_counter()
            start = trainer.init_state(seeded.replace(phase="stage1"))
            for _ in range(seeded.train.max_iters):
                trainer.phase1_iteration(start)
            say(f"[{name}] seed {seed}: phase 1 done in {time.perf_counter() - t0:.0f}s")
        for v in suite.variants:
            cfg = _resolve(seeded, v.overrides)
            t0 = time.perf_counter()
            if suite.stage == "stage1":
                state = trainer.init_state(cfg)
                for _ in range(cfg.train.max_iters):
                    trainer.phase1_iteration(state)
            else:
                state = _clone(start)
                trainer.restart_stage2(state, cfg)
                for _ in range(cfg.rl.iters):
                    trainer.phase2_iteration(state)
            wall = time.perf_counter() - t0
            row = _record(name, v.label, int(seed), state, wall)
            res.rows.append(row)
            say(f"[{name}] seed {seed} {v.label}: kl={row['kl_gen_to_teacher']:.4f} "
                f"coverage={row['mode_coverage']:.3f} reward={row['mean_reward']:.4f} ({wall:.0f}s)")
    res.summary = summarize(res.rows, [v.label for v in suite.variants])
    return res


def write_tables(res: SuiteResult, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fname, rows in ((f"{res.suite}_seeds.csv", res.rows), (f"{res.suite}_summary.csv", res.summary)):
        p = out / fname
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        paths.append(p)
    return paths[0], paths[1]
