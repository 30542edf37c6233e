"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The seeded training runs are shared through module-scoped fixtures, so the
whole file costs roughly half an hour on one core. Run it alone with
``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashdmd import ablation, losses, trainer
from flashdmd.config import from_dict
from flashdmd.diffusion import back_simulate, generator_step, sampling_variance_probe
from flashdmd.losses import LOG2, PreferencePair, select_preference_pair
from flashdmd.metrics import psi_tracking_error
from flashdmd.models import NetArch, init_net
from flashdmd.numerics import AdamState, GradientTape, Rng, Tensor, adam_step
from flashdmd.reward import norm_bias_crossover
from flashdmd.teacher import circle_teacher, standard_normal_teacher, teacher_posterior_mean, teacher_score

from gradcheck import central_diff, graph_check, pick, random_coords, rel_err
from test_teacher import SCHED, fd_score

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
PHASE1_ITERS = 2000
PHASE2_UPDATES = 2000
BIAS = 2.0  # norm-bias strength; the crossover for ||z|| = 3 against z = 0 is 1.5


def phase1_config(seed, **dotted):
    cfg = from_dict({"seed": seed, "train": {"max_iters": PHASE1_ITERS}})
    return cfg.replace(**dotted) if dotted else cfg


def train_phase1(cfg):
    t0 = time.perf_counter()
    state = trainer.init_state(cfg)
    for _ in range(cfg.train.max_iters):
        trainer.phase1_iteration(state)
    return state, time.perf_counter() - t0


def phase2_config(seed, **dotted):
    rl = {"iters": PHASE2_UPDATES, "reward": "norm_biased", "bias_strength": BIAS}
    cfg = from_dict({"seed": seed, "train": {"max_iters": PHASE1_ITERS}, "phase": "both", "rl": rl})
    return cfg.replace(**dotted) if dotted else cfg


def train_phase2(start, cfg):
    state = trainer.restart_stage2(ablation._clone(start), cfg)
    before = trainer.evaluate(state)
    for _ in range(cfg.rl.iters):
        trainer.phase2_iteration(state)
    return before, trainer.evaluate(state)


@pytest.fixture(scope="module")
def phase1():
    """Default phase-1 runs (ttur 1, batch 256, 2,000 iterations) on every seed."""
    runs = {}
    for seed in SEEDS:
        state, wall = train_phase1(phase1_config(seed))
        runs[seed] = {"state": state, "wall": wall, "metrics": trainer.evaluate(state)}
    return runs


# --- 1. autodiff ---------------------------------------------------------------------


def test_c1_autodiff(report, monkeypatch):
    t0 = time.perf_counter()
    graph_err = max(graph_check(seed) for seed in range(50))

    # full phase-1 generator loss: DM surrogate + weighted adversarial term, with the
    # stop-grad direction and every random draw frozen at the base parameters
    cfg = from_dict({"seed": 0, "train": {"max_iters": 20}, "init": {"pretrain_steps": 100}})
    state = trainer.init_state(cfg)
    for _ in range(20):
        trainer.phase1_iteration(state)
    gen, grid, sched, teacher = state.gen, state.grid, state.sched, state.teacher
    rng = Rng(1)
    z = Tensor(rng.normal((16, 2)))
    x_tau = back_simulate(gen, z, grid.taus[0], 499, grid, sched)
    x_clean = back_simulate(gen, x_tau, 499, 0, grid, sched)
    t_j = rng.integers(250, 1000, size=16)
    x_base = generator_step(gen, x_tau, 499, grid).data
    frozen = losses.dmd_direction(x_base, teacher, state.psi, t_j, sched, Rng(2))
    monkeypatch.setattr(losses, "dmd_direction", lambda *a, **k: frozen)

    def loss_fn():
        x = generator_step(gen, x_tau, 499, grid)
        dm = losses.dmd_surrogate_loss(x, teacher, state.psi, t_j, sched, Rng(2), grid)
        adv, _ = losses.gen_adv_loss(state.disc, gen, x_clean, 249, grid, sched, Rng(3))
        return losses.T.add(dm, losses.T.mul(adv, cfg.train.lambda_adv))

    with GradientTape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, gen.params)
    arrays = [p.data for p in gen.params]
    coords = random_coords(arrays, 60, np.random.default_rng(0))
    fd = central_diff(lambda: float(loss_fn().data), arrays, coords, h=1e-6)
    loss_err = rel_err(pick(grads, coords), fd)
    wall = time.perf_counter() - t0

    ok = graph_err < 1e-4 and loss_err < 1e-4 and wall < 30
    report(1, ok, f"50 graphs max rel err {graph_err:.1e}; phase-1 generator loss rel err {loss_err:.1e}; "
                  f"{wall:.1f}s")
    assert ok


# --- 2. oracle scores --------------------------------------------------------------------


def test_c2_oracle_scores(report):
    teacher = circle_teacher()
    rng = Rng(11)
    x = rng.normal((100, 2)) * 1.2
    ts = rng.integers(0, SCHED.T, size=100)
    worst = max(rel_err(teacher_score(teacher, x[i:i + 1], int(ts[i]), SCHED),
                        fd_score(teacher, x[i:i + 1], int(ts[i]))) for i in range(100))
    y = Rng(12).normal((64, 2))
    gauss = max(np.abs(teacher_score(standard_normal_teacher(), y, t, SCHED) + y).max()
                for t in (999, 749, 499, 249))
    ok = worst < 1e-6 and gauss < 1e-10
    report(2, ok, f"worst FD rel err {worst:.1e} over 100 points; N(0, I) |score + x| max {gauss:.1e}")
    assert ok


# --- 3. fixed point ------------------------------------------------------------------------


class PosteriorMean:
    def __init__(self, teacher):
        self.teacher = teacher

    def forward(self, x, t, cond=None):
        return Tensor(teacher_posterior_mean(self.teacher, x.data, t, SCHED, cond))


def test_c3_dmd_fixed_point(report):
    teacher = circle_teacher()
    grid = trainer.build_grid(phase1_config(0))
    gen = init_net(NetArch(), Rng(0))
    gen["w_out"].data[:] = Rng(1).normal(gen["w_out"].shape) * 0.3
    worst = 0.0
    for b in range(20):
        rng = Rng(100 + b)
        tau = int(grid.taus[rng.integers(0, len(grid.taus))])
        x_tau = back_simulate(gen, Tensor(rng.normal((64, 2))), grid.taus[0], tau, grid, SCHED)
        t_j = rng.integers(250, 1000, size=64)
        with GradientTape() as tape:
            x = generator_step(gen, x_tau, tau, grid)
            loss = losses.dmd_surrogate_loss(x, teacher, PosteriorMean(teacher), t_j, SCHED, rng, grid)
        g = tape.backward(loss, gen.params)
        worst = max(worst, float(np.sqrt(sum((a ** 2).sum() for a in g))))
    ok = worst < 1e-8
    report(3, ok, f"max generator-gradient norm {worst:.1e} over 20 batches")
    assert ok


# --- 4. phase-1 quality -----------------------------------------------------------------


def test_c4_phase1_quality(report, phase1):
    rows = [(s, r["metrics"].mode_coverage, r["metrics"].kl_gen_to_teacher, r["wall"]) for s, r in phase1.items()]
    good = sum(cov == 1.0 and kl < 0.15 for _, cov, kl, _ in rows)
    slowest = max(w for *_, w in rows)
    ok = good >= 4 and slowest < 600
    detail = "; ".join(f"seed {s}: cov {c:.3f} kl {k:.3f} {w:.0f}s" for s, c, k, w in rows)
    report(4, ok, f"{good}/5 seeds reach coverage 1.0 and kl < 0.15 ({detail})")
    assert ok


# --- 5. mode seeking ----------------------------------------------------------------------


def test_c5_mode_seeking(report, phase1):
    pairs = []
    for seed in SEEDS:
        dm_only, _ = train_phase1(phase1_config(seed, **{"train.lambda_adv": 0.0}))
        pairs.append((trainer.evaluate(dm_only).mode_coverage, phase1[seed]["metrics"].mode_coverage))
    ok = all(a <= b for a, b in pairs) and sum(a < b for a, b in pairs) >= 3
    report(5, ok, "coverage dm-only vs dm+gan per seed: " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in pairs))
    assert ok


# --- 6. TTUR accounting and stability ---------------------------------------------------------


def converged_tracking(state, steps=3000):
    """Tracking error of the live score estimator and of a copy trained to convergence
    on the frozen generator, measured on identical draws."""
    psi = state.psi.copy()
    opt = AdamState.for_params(psi.params, lr=1e-3, beta1=0.9, beta2=0.999)
    rng = Rng(7)
    for _ in range(steps):
        x, _ = trainer.generate(state, 512, rng)
        with GradientTape() as tape:
            loss = losses.diffusion_loss(psi, x, state.sched, rng)
        adam_step(psi.params, tape.backward(loss, psi.params), opt)
    x, _ = trainer.generate(state, 10_000, Rng(8))
    live = psi_tracking_error(state.psi, x, state.sched, Rng(9))
    floor = psi_tracking_error(psi, x, state.sched, Rng(9))
    return live, floor


def test_c6_ttur(report, phase1, make_config):
    exact = True
    for ttur in (1, 2, 5):
        state = trainer.init_state(make_config(**{"train.ttur": ttur, "train.max_iters": 20}))
        for _ in range(20):
            trainer.phase1_iteration(state)
        want = trainer.expected_counts(ttur, 20)
        got = {k: getattr(state.counts, k) for k in want}
        exact &= got == want
    live, floor = converged_tracking(phase1[0]["state"])
    ok = exact and live <= 2 * floor
    report(6, ok, f"counts exact for ttur 1/2/5: {exact}; ttur=1 run finished without abort; "
                  f"tracking {live:.4f} vs converged floor {floor:.4f} ({live / floor:.2f}x)")
    assert ok


# --- 7. EMA ablation ----------------------------------------------------------------------------


def test_c7_ema(report, phase1):
    with_ema = [phase1[s]["metrics"].psi_tracking_error for s in SEEDS]
    without = []
    for seed in SEEDS:
        state, _ = train_phase1(phase1_config(seed, **{"train.ema": False}))
        without.append(trainer.evaluate(state).psi_tracking_error)
    med_on, med_off = float(np.median(with_ema)), float(np.median(without))
    diffs = np.array(without) - np.array(with_ema)
    inverted = int((diffs < 0).sum())
    ok = med_on <= med_off
    report(7, ok, f"median tracking with EMA {med_on:.4f} vs without {med_off:.4f}; "
                  f"effect {med_off - med_on:+.4f} (mean paired diff {diffs.mean():+.4f}, "
                  f"{inverted}/5 seeds inverted)")
    assert ok


# --- 8. preference identities --------------------------------------------------------------------


def _affine_invariant_trials():
    failures = []

    @settings(max_examples=1000, database=None)
    @given(st.lists(st.integers(-5, 5), min_size=2, max_size=8), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
    def trial(raw, a, b):
        s = np.array(raw, dtype=np.float64)[None]
        same = all((x == y).all() for x, y in zip(select_preference_pair(s), select_preference_pair(a * s + b)))
        if not same:
            failures.append((raw, a, b))
        assert same

    trial()
    return failures


def test_c8_preference_identities(report):
    arch = NetArch()
    gen = init_net(arch, Rng(0))
    gen["w_out"].data[:] = Rng(1).normal(gen["w_out"].shape)
    ref = gen.copy(trainable=False)
    worst = 0.0
    for i in range(100):
        rng = Rng(i)
        pair = PreferencePair(rng.normal((8, 2)), rng.normal((8, 2)), rng.normal((8, 2)), 999, 749)
        worst = max(worst, abs(float(losses.preference_loss(gen, ref, pair, 5.0, SCHED).data) - LOG2))
    failures = _affine_invariant_trials()
    ok = worst < 1e-12 and not failures
    report(8, ok, f"max |loss - log 2| at theta = ref {worst:.1e} over 100 pairs; "
                  f"affine invariance 1000 trials, {len(failures)} failures")
    assert ok


# --- 9. reward hacking ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def phase2(phase1):
    out = {}
    for seed in SEEDS:
        start = phase1[seed]["state"]
        before, joint = train_phase2(start, phase2_config(seed))
        _, rl_only = train_phase2(start, phase2_config(seed, **{"rl.rl_only": True}))
        out[seed] = {"start": before, "joint": joint, "rl_only": rl_only}
    return out


def test_c9_reward_hacking(report, phase1, phase2):
    assert BIAS > norm_bias_crossover(3.0)
    lines, good = [], 0
    for seed in SEEDS:
        r = phase2[seed]
        kl1 = phase1[seed]["metrics"].kl_gen_to_teacher
        m0, m1 = r["start"].mean_reward, r["joint"].mean_reward
        gain = (m1 - m0) / abs(m0)
        kl_j, kl_r = r["joint"].kl_gen_to_teacher, r["rl_only"].kl_gen_to_teacher
        passed = gain >= 0.10 and kl_j <= 1.5 * kl1 and kl_r >= 2 * kl_j
        good += passed
        lines.append(f"seed {seed}: reward {gain:+.1%}, kl joint {kl_j:.2f} (phase-1 {kl1:.2f}), "
                     f"rl-only {kl_r:.2f} [{'ok' if passed else 'x'}]")
    ok = good >= 4
    report(9, ok, f"{good}/5 seeds meet all three conditions ({'; '.join(lines)})")
    assert ok


# --- 10. ratio ablation -----------------------------------------------------------------------------


def test_c10_ratio_ablation(report, phase1, tmp_path_factory):
    base = phase2_config(0)
    starts = {s: phase1[s]["state"] for s in SEEDS}
    res = ablation.run_suite("rl_ratio", base, SEEDS, starts=starts)
    per_seed, summary = ablation.write_tables(res, tmp_path_factory.mktemp("rl_ratio"))
    labels = ["1:1", "2:1", "5:1", "10:1"]
    med = {l: float(np.median(res.per_seed(l, "mean_reward"))) for l in labels}
    ok = per_seed.exists() and summary.exists() and med["1:1"] <= med["2:1"] <= med["5:1"]
    best = max(med, key=med.get)
    report(10, ok, "median mean_reward " + ", ".join(f"{l} {med[l]:.4f}" for l in labels)
           + f"; highest at {best} (reported, not gated)")
    assert ok


# --- 11. sampling-variance probe --------------------------------------------------------------------


def test_c11_variance_probe(report, phase1):
    rows = []
    for seed in SEEDS:
        st_ = phase1[seed]["state"]
        top = sampling_variance_probe(st_.gen, st_.grid, st_.sched, st_.grid.taus[0], 8, Rng(seed, 21))
        bottom = sampling_variance_probe(st_.gen, st_.grid, st_.sched, st_.grid.taus[-1], 8, Rng(seed, 21))
        rows.append((top, bottom))
    ok = all(t > b for t, b in rows)
    report(11, ok, "dispersion top/bottom per seed: " + ", ".join(f"{t:.3f}/{b:.4f}" for t, b in rows))
    assert ok


# --- 12. reproducibility ------------------------------------------------------------------------------


def test_c12_reproducibility(report, tmp_path):
    cfg = from_dict({"seed": 3, "phase": "both", "train": {"max_iters": 20}, "rl": {"iters": 20},
                     "eval": {"n": 1000, "n_tracking": 1000, "interval": 10, "checkpoint_interval": 10}})
    trainer.run(cfg, tmp_path / "a")
    trainer.run(cfg, tmp_path / "b")
    names = ["metrics.jsonl"] + [f"ckpt_{s}.bin" for s in (0, 10, 20, 30, 40)]
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)

    # resume from the middle of phase 1 and from the middle of phase 2
    resumed = True
    for mid in (10, 30):
        out = tmp_path / f"r{mid}"
        out.mkdir()
        for n in ["metrics.jsonl", f"ckpt_{mid}.bin"]:
            (out / n).write_bytes((tmp_path / "a" / n).read_bytes())
        trainer.run(cfg, out, resume=out / f"ckpt_{mid}.bin")
        resumed &= (out / "ckpt_40.bin").read_bytes() == (tmp_path / "a" / "ckpt_40.bin").read_bytes()
        resumed &= (out / "metrics.jsonl").read_bytes() == (tmp_path / "a" / "metrics.jsonl").read_bytes()
    ok = same and resumed
    report(12, ok, f"two runs bit-identical: {same}; resume mid phase 1 and mid phase 2 identical: {resumed}")
    assert ok
