"""Two-phase training: timestep-aware distillation, then joint preference optimisation."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .config import RunConfig
from .diffusion import (
    NoiseSchedule,
    StepGrid,
    ancestral_step,
    back_simulate,
    generator_step,
    high_noise_threshold,
    trajectory,
)
from .metrics import (
    MetricsRecord,
    kl_estimate,
    mode_coverage,
    psi_tracking_error,
    w2_gaussian,
)
from .models import (
    DenoiserNet,
    DiscArch,
    DiscriminatorNet,
    NetArch,
    ema_inject,
    freeze_reference,
    init_discriminator,
    init_net,
    logits_array,
)
from .numerics import AdamState, GradientTape, NonFiniteError, Rng, Tensor, adam_step, no_grad
from .reward import RewardModel, reward_score
from .teacher import (
    GmmTeacher,
    circle_teacher,
    standard_normal_teacher,
    teacher_sample,
    teacher_sample_components,
)

log = logging.getLogger(__name__)

# RNG stream ids under the run seed
STREAM_INIT, STREAM_TRAIN, STREAM_EVAL, STREAM_PHASE2 = 0, 1, 2, 3


class TrainingAborted(RuntimeError):
    """A non-finite loss or gradient; ``diagnostic`` describes where."""

    def __init__(self, msg: str, diagnostic: dict):
        super().__init__(msg)
        self.diagnostic = diagnostic


@dataclass
class Counts:
    gen_updates: int = 0
    psi_updates: int = 0
    disc_updates: int = 0
    ema_injections: int = 0
    rl_updates: int = 0
    rl_skipped: int = 0
    rl_skipped_groups: int = 0
    phase2_dm_updates: int = 0


@dataclass
class TrainState:
    cfg: RunConfig
    sched: NoiseSchedule
    grid: StepGrid
    teacher: GmmTeacher
    gen: DenoiserNet
    psi: DenoiserNet
    disc: DiscriminatorNet
    opt_gen: AdamState
    opt_psi: AdamState
    opt_disc: AdamState
    rng: Rng
    iteration: int = 0
    phase2_updates: int = 0
    stage: str = "stage1"
    ref: DenoiserNet | None = None
    counts: Counts = field(default_factory=Counts)
    last_losses: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.iteration + self.phase2_updates

    @property
    def conditional(self) -> bool:
        return self.cfg.teacher.conditional


# ---------------------------------------------------------------------------
# construction


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule(T=s.T, beta_start=s.beta_start, beta_end=s.beta_end)


def build_grid(cfg: RunConfig) -> StepGrid:
    return StepGrid(taus=tuple(cfg.grid.taus), low_noise=tuple(cfg.grid.low_noise))


def build_teacher(cfg: RunConfig) -> GmmTeacher:
    t = cfg.teacher
    if t.kind == "gaussian":
        return standard_normal_teacher(t.dim)
    return circle_teacher(t.n_modes, t.radius, t.std, t.n_groups)


def net_arch(cfg: RunConfig, teacher: GmmTeacher) -> NetArch:
    n_classes = teacher.n_groups if cfg.teacher.conditional else 0
    return NetArch(teacher.dim, tuple(cfg.net.hidden), cfg.net.temb_dim, n_classes)


def disc_arch(cfg: RunConfig, teacher: GmmTeacher) -> DiscArch:
    d = cfg.disc
    return DiscArch(teacher.dim, tuple(d.trunk), tuple(d.head_depths), d.head_hidden,
                    d.input_scale, d.freeze_trunk)


def sample_real(teacher: GmmTeacher, n: int, rng: Rng, cond=None) -> np.ndarray:
    if cond is None:
        return teacher_sample(teacher, n, rng)
    # per-row class: draw a component uniformly within each row's group
    comps = np.empty(n, dtype=np.int64)
    for g in np.unique(cond):
        rows = np.nonzero(cond == g)[0]
        members = np.nonzero(teacher.mode_groups == g)[0]
        p = teacher.weights[members] / teacher.weights[members].sum()
        comps[rows] = members[rng.choice(len(members), size=len(rows), p=p)]
    return teacher_sample_components(teacher, comps, rng)


def sample_conditions(state_or_cfg, teacher: GmmTeacher, n: int, rng: Rng):
    cfg = state_or_cfg.cfg if hasattr(state_or_cfg, "cfg") else state_or_cfg
    if not cfg.teacher.conditional:
        return None
    return rng.integers(0, teacher.n_groups, size=n)


def pretrain_denoiser(net: DenoiserNet, teacher: GmmTeacher, sched: NoiseSchedule, cfg: RunConfig,
                      rng: Rng) -> None:
    """Fit ``net`` as an x0-denoiser of teacher samples: the toy stand-in for the
    pretrained diffusion model both generator and score estimator start from."""
    ic = cfg.init
    opt = AdamState.for_params(net.params, lr=ic.pretrain_lr, beta1=0.9, beta2=0.999)
    for _ in range(ic.pretrain_steps):
        cond = sample_conditions(cfg, teacher, ic.pretrain_batch, rng)
        x0 = sample_real(teacher, ic.pretrain_batch, rng, cond)
        with GradientTape() as tape:
            loss = losses.diffusion_loss(net, x0, sched, rng, cond=cond)
        adam_step(net.params, tape.backward(loss, net.params), opt)


def init_state(cfg: RunConfig) -> TrainState:
    sched = build_schedule(cfg)
    grid = build_grid(cfg)
    teacher = build_teacher(cfg)
    init_rng = Rng(cfg.seed, STREAM_INIT)
    base = init_net(net_arch(cfg, teacher), init_rng)
    disc = init_discriminator(disc_arch(cfg, teacher), init_rng)
    pretrain_denoiser(base, teacher, sched, cfg, init_rng)
    gen = base.copy()
    psi = base.copy()
    o = cfg.optim

    def adam(params, lr):
        return AdamState.for_params(params, lr=lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)

    return TrainState(
        cfg=cfg, sched=sched, grid=grid, teacher=teacher, gen=gen, psi=psi, disc=disc,
        opt_gen=adam(gen.params, o.lr_gen), opt_psi=adam(psi.params, o.lr_psi),
        opt_disc=adam(disc.params, o.lr_disc), rng=Rng(cfg.seed, STREAM_TRAIN),
    )


# ---------------------------------------------------------------------------
# phase 1


def _finite(state: TrainState, name: str, loss: Tensor, grads) -> None:
    bad = not np.isfinite(loss.data).all() or any(not np.isfinite(g).all() for g in grads)
    if bad:
        diag = {"step": state.step, "iteration": state.iteration, "stage": state.stage,
                "loss": name, "value": float(np.asarray(loss.data).reshape(-1)[0])}
        raise TrainingAborted(f"non-finite {name} at step {state.step}", diag)


def _step(state: TrainState, name: str, params, grads, opt: AdamState) -> None:
    """Adam step, then abort if the update left any parameter non-finite."""
    adam_step(params, grads, opt)
    if any(not np.isfinite(p.data).all() for p in params):
        diag = {"step": state.step, "iteration": state.iteration, "stage": state.stage,
                "loss": name, "value": None}
        raise TrainingAborted(f"non-finite parameters after {name} update at step {state.step}", diag)


def dm_range(state: TrainState) -> tuple[int, int]:
    tr = state.cfg.train
    lo = tr.dm_t_min or high_noise_threshold(state.grid)
    hi = tr.dm_t_max or state.sched.T - 1
    return lo, hi


def phase1_iteration(state: TrainState) -> dict:
    """One distillation iteration; returns the losses it computed."""
    if state.stage != "stage1":
        raise RuntimeError("phase1_iteration requires stage1")
    state.iteration += 1
    out = distill_step(state, state.iteration, state.cfg.train.lambda_adv > 0)
    state.last_losses = out
    return out


def distill_step(state: TrainState, counter: int, adversarial: bool) -> dict:
    """Distribution matching + adversarial generator update (gated on ``counter mod ttur``),
    score-estimator update and discriminator update."""
    cfg, rng, grid, sched = state.cfg, state.rng, state.grid, state.sched
    tr = cfg.train
    B = tr.batch
    cond = sample_conditions(state, state.teacher, B, rng)
    z = Tensor(rng.normal((B, state.teacher.dim)))
    steps = grid.high_noise if tr.dm_steps == "high" else grid.taus
    tau_i = int(steps[rng.integers(0, len(steps))])
    x_real = sample_real(state.teacher, B, rng, cond)

    x_tau = back_simulate(state.gen, z, grid.taus[0], tau_i, grid, sched, cond)
    x_clean = back_simulate(state.gen, x_tau, tau_i, 0, grid, sched, cond)
    out = {}

    if counter % tr.ttur == 0:
        lo, hi = dm_range(state)
        t_j = rng.integers(lo, hi + 1, size=B)
        with GradientTape() as tape:
            x = generator_step(state.gen, x_tau, tau_i, grid, cond)
            loss_dm = losses.dmd_surrogate_loss(x, state.teacher, state.psi, t_j, sched, rng, grid,
                                                tr.dm_normalize, cond)
            total = loss_dm
            if adversarial:
                t_hat = int(grid.low_noise[rng.integers(0, len(grid.low_noise))])
                loss_adv, _ = losses.gen_adv_loss(state.disc, state.gen, x_clean, t_hat, grid,
                                                  sched, rng, cond)
                total = losses.T.add(loss_dm, losses.T.mul(loss_adv, tr.lambda_adv))
                out["gen_adv"] = loss_adv.item()
        grads = tape.backward(total, state.gen.params)
        _finite(state, "generator loss", total, grads)
        _step(state, "generator loss", state.gen.params, grads, state.opt_gen)
        state.counts.gen_updates += 1
        out["dm_surrogate"] = loss_dm.item()
        if tr.ema:
            ema_inject(state.psi, state.gen, tr.lambda_ema)
            state.counts.ema_injections += 1
        x_det = x.data.copy()
    else:
        with no_grad():
            x_det = generator_step(state.gen, x_tau, tau_i, grid, cond).data.copy()

    with GradientTape() as tape:
        loss_psi = losses.diffusion_loss(state.psi, x_det, sched, rng, cond=cond)
    grads = tape.backward(loss_psi, state.psi.params)
    _finite(state, "diffusion loss", loss_psi, grads)
    _step(state, "diffusion loss", state.psi.params, grads, state.opt_psi)
    state.counts.psi_updates += 1
    out["psi_diffusion"] = loss_psi.item()

    if adversarial:
        with GradientTape() as tape:
            loss_d = losses.disc_loss(state.disc, Tensor(x_real), x_clean, cfg.disc.mode)
        grads = tape.backward(loss_d, state.disc.params)
        _finite(state, "discriminator loss", loss_d, grads)
        _step(state, "discriminator loss", state.disc.params, grads, state.opt_disc)
        state.counts.disc_updates += 1
        out["disc"] = loss_d.item()
    return out


# ---------------------------------------------------------------------------
# phase 2


def reward_model(state: TrainState) -> RewardModel:
    rl = state.cfg.rl
    return RewardModel(state.teacher, state.sched, rl.reward, rl.bias_strength,
                       tuple(rl.favored_modes))


def enter_stage2(state: TrainState) -> None:
    if state.stage == "stage2":
        return
    state.ref = freeze_reference(state.gen)
    state.stage = "stage2"


def is_rl_slot(cfg: RunConfig, update_index: int) -> bool:
    """Round robin over ``r`` RL updates followed by ``m`` distillation updates."""
    if cfg.rl.rl_only:
        return True
    r, m = cfg.rl.ratio
    return update_index % (r + m) < r


def rl_update(state: TrainState) -> dict:
    cfg, rng, grid, sched = state.cfg, state.rng, state.grid, state.sched
    rl = cfg.rl
    G, k, d = rl.groups, rl.k, state.teacher.dim
    t_from = int(rl.branch_steps[rng.integers(0, len(rl.branch_steps))])
    t_to = grid.next_after(t_from)
    cond = sample_conditions(state, state.teacher, G, rng)
    z = Tensor(rng.normal((G, d)))
    z_t = back_simulate(state.gen, z, grid.taus[0], t_from, grid, sched, cond)
    tiled = Tensor(np.repeat(z_t.data, k, axis=0))
    cond_k = None if cond is None else np.repeat(cond, k)
    with no_grad():
        cand = ancestral_step(state.gen, tiled, t_from, t_to, sched, rng, rl.eta, cond_k).data
    scores = reward_score(reward_model(state), cand, t_to, cond_k).reshape(G, k)
    pair, n_skip = losses.build_pairs(z_t.data, cand.reshape(G, k, d), scores, t_from, t_to, cond)
    state.counts.rl_skipped_groups += n_skip
    if pair is None:
        state.counts.rl_skipped += 1
        return {"rl_skipped": 1.0}
    with GradientTape() as tape:
        loss = losses.preference_loss(state.gen, state.ref, pair, rl.beta, sched, rl.eta)
    grads = tape.backward(loss, state.gen.params)
    _finite(state, "preference loss", loss, grads)
    _step(state, "preference loss", state.gen.params, grads, state.opt_gen)
    state.counts.rl_updates += 1
    return {"preference": loss.item(), "pair_reward_gap": float(np.mean(pair.scores_win - pair.scores_lose))}


def phase2_iteration(state: TrainState) -> dict:
    """One Phase-2 update: an RL step or a full distillation iteration, per the ratio."""
    if state.stage != "stage2" or state.ref is None:
        raise RuntimeError("phase2_iteration requires stage2 with a frozen reference")
    slot = state.phase2_updates
    state.phase2_updates += 1
    if is_rl_slot(state.cfg, slot):
        out = rl_update(state)
    else:
        adversarial = state.cfg.rl.pixelgan and state.cfg.train.lambda_adv > 0
        state.counts.phase2_dm_updates += 1
        out = distill_step(state, state.counts.phase2_dm_updates, adversarial)
    state.last_losses = out
    return out


# ---------------------------------------------------------------------------
# evaluation


def generate(state: TrainState, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray | None]:
    cond = sample_conditions(state, state.teacher, n, rng)
    z = Tensor(rng.normal((n, state.teacher.dim)))
    return back_simulate(state.gen, z, state.grid.taus[0], 0, state.grid, state.sched, cond).data, cond


def mean_reward(state: TrainState, n: int, rng: Rng) -> float:
    """Mean reward of the generator's own latents at each RL scoring step (the grid step
    after every branch point), averaged over those steps."""
    rm = reward_model(state)
    cond = sample_conditions(state, state.teacher, n, rng)
    z = Tensor(rng.normal((n, state.teacher.dim)))
    traj = trajectory(state.gen, z, state.grid, state.sched, cond)
    targets = [state.grid.next_after(t) for t in state.cfg.rl.branch_steps]
    return float(np.mean([reward_score(rm, traj[t], t, cond).mean() for t in targets]))


def evaluate(state: TrainState, n: int | None = None) -> MetricsRecord:
    """All metrics from a fixed eval stream, so the result depends only on the weights."""
    cfg = state.cfg
    n = n or cfg.eval.n
    rng = Rng(cfg.seed, STREAM_EVAL)
    samples, cond = generate(state, n, rng)
    if cond is None:
        kl = kl_estimate(samples, state.teacher)
    else:
        # conditional: average the per-class KLs
        kl = float(np.mean([kl_estimate(samples[cond == g], state.teacher, min_n=1, condition=g)
                            for g in np.unique(cond)]))
    cov = mode_coverage(samples, state.teacher)
    w2 = w2_gaussian(samples, state.teacher)
    track_x = samples[: cfg.eval.n_tracking]
    track_c = None if cond is None else cond[: cfg.eval.n_tracking]
    track = psi_tracking_error(state.psi, track_x, state.sched, rng, cond=track_c)
    mr = mean_reward(state, min(n, 4096), rng)
    real = sample_real(state.teacher, 2048, rng)
    with no_grad():
        gap = float(logits_array(state.disc.forward(Tensor(real))).mean()
                    - logits_array(state.disc.forward(Tensor(samples[:2048]))).mean())
    return MetricsRecord(
        step=state.step, iteration=state.iteration, phase2_updates=state.phase2_updates,
        phase=state.stage, kl_gen_to_teacher=kl, w2=w2, mode_coverage=cov, mean_reward=mr,
        psi_tracking_error=track, disc_real_fake_gap=gap,
        losses={k: float(v) for k, v in sorted(state.last_losses.items())},
        counts=dict(vars(state.counts)), kl_flagged=kl < -0.05,
    )


def params_digest(net) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(net.arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def expected_counts(ttur: int, iters: int) -> dict:
    """Stage-1 update accounting: generator every ``ttur``-th iteration, score estimator
    and discriminator every iteration."""
    return {"gen_updates": iters // ttur, "psi_updates": iters, "disc_updates": iters}


def expected_phase2_counts(ratio: tuple[int, int], updates: int, rl_only: bool = False) -> dict:
    if rl_only:
        return {"rl": updates, "dm": 0}
    r, m = ratio
    full, rem = divmod(updates, r + m)
    rl = full * r + min(rem, r)
    return {"rl": rl, "dm": updates - rl}


# ---------------------------------------------------------------------------
# run loop


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop rows past ``step`` so a resumed run re-emits them exactly once."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


def restart_stage2(state: TrainState, cfg: RunConfig) -> TrainState:
    """Turn a phase-1 state into a phase-2 start under ``cfg``: weights, optimizer moments
    and counters carry over; hyperparameters come from ``cfg``; phase 2 draws from its own
    stream so variants sharing one start see identical noise."""
    if state.stage != "stage1":
        raise ValueError("phase-2 restarts need a phase-1 state")
    state.cfg = cfg
    o = cfg.optim
    for opt, lr in ((state.opt_gen, o.lr_gen), (state.opt_psi, o.lr_psi), (state.opt_disc, o.lr_disc)):
        opt.lr, opt.beta1, opt.beta2, opt.eps = lr, o.beta1, o.beta2, o.eps
    state.rng = Rng(cfg.seed, STREAM_PHASE2)
    enter_stage2(state)
    return state


def stage2_from(cfg: RunConfig, ckpt_path: str | Path) -> TrainState:
    """Phase-2 start from a phase-1 checkpoint on disk."""
    from .checkpoint import load_checkpoint

    return restart_stage2(load_checkpoint(ckpt_path), cfg)


def run(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
        state: TrainState | None = None) -> TrainState:
    """Train per ``cfg.phase``; write ``ckpt_{step}.bin``, ``metrics.jsonl`` and
    ``timing.jsonl`` under ``out_dir``. Deterministic per seed; resumable."""
    from .checkpoint import load_checkpoint, save_checkpoint

    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    if resume is not None:
        state = load_checkpoint(resume)
        if state.cfg.echo() != cfg.echo():
            raise ValueError("resume: config differs from the checkpoint's config echo")
        state.cfg = cfg
        _truncate_metrics(metrics_path, state.step)
        _truncate_metrics(timing_path, state.step)
    elif state is None:
        state = stage2_from(cfg, cfg.init_from) if cfg.phase == "stage2" else init_state(cfg)
        metrics_path.write_text("")
        timing_path.write_text("")
        save_checkpoint(state, out / f"ckpt_{state.step}.bin")

    n1 = cfg.train.max_iters if cfg.phase in ("stage1", "both") else 0
    n2 = cfg.rl.iters if cfg.phase in ("both", "stage2") else 0
    ev, ck = cfg.eval.interval, cfg.eval.checkpoint_interval
    t0 = time.perf_counter()

    def after_update(stage_end: bool) -> None:
        step = state.step
        if step % ev == 0 or stage_end:
            rec = evaluate(state)
            rec.wall_time = time.perf_counter() - t0
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"step": step, "wall_time": rec.wall_time}) + "\n")
            log.info("step %d kl=%.4f coverage=%.3f", step, rec.kl_gen_to_teacher, rec.mode_coverage)
        if step % ck == 0 or stage_end:
            save_checkpoint(state, out / f"ckpt_{step}.bin")

    try:
        while state.stage == "stage1" and state.iteration < n1:
            phase1_iteration(state)
            after_update(state.iteration == n1)
        if n2 and state.phase2_updates < n2:
            enter_stage2(state)
            while state.phase2_updates < n2:
                phase2_iteration(state)
                after_update(state.phase2_updates == n2)
    except (TrainingAborted, NonFiniteError) as exc:
        diag = getattr(exc, "diagnostic", None) or {
            "step": state.step, "iteration": state.iteration, "stage": state.stage, "error": str(exc)}
        diag["last_losses"] = dict(state.last_losses)
        (out / "diagnostic.json").write_text(json.dumps(diag, sort_keys=True, indent=2))
        if isinstance(exc, TrainingAborted):
            raise
        raise TrainingAborted(str(exc), diag) from exc
    return state


__all__ = [
    "Counts", "TrainState", "TrainingAborted", "init_state", "phase1_iteration", "phase2_iteration",
    "enter_stage2", "evaluate", "generate", "expected_counts", "expected_phase2_counts",
    "params_digest", "rl_update", "is_rl_slot", "pretrain_denoiser", "dm_range", "mean_reward",
    "run", "stage2_from", "restart_stage2", "distill_step",
]
