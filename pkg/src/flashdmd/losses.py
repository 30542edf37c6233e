"""Training objectives for both phases.

Loss routing is enforced here: the distribution-matching loss refuses noise
levels at or below the low-noise grid steps, and the generator's adversarial
loss refuses anything but a low-noise grid step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (
    NoiseSchedule,
    StepGrid,
    ancestral_mean,
    ancestral_variance,
    forward_diffuse,
    generator_step,
    high_noise_threshold,
    score_from_x0pred,
)
from .models import DenoiserNet, DiscriminatorNet
from .numerics import NonFiniteError, Rng, Tensor, no_grad
from .numerics import autodiff as T
from .teacher import GmmTeacher, teacher_posterior_mean, teacher_score

LOG2 = float(np.log(2.0))


class RoutingError(ValueError):
    """A loss was asked to act at a timestep outside its assigned noise regime."""


def _row_sums(x: Tensor) -> Tensor:
    """``[B, d] -> [B, 1]`` via a matmul against ones."""
    return T.matmul(x, T.constant(np.ones((x.shape[1], 1))))


# ---------------------------------------------------------------------------
# distribution matching


def dmd_direction(x: np.ndarray, teacher: GmmTeacher, mu_psi: DenoiserNet, t_j, sched: NoiseSchedule,
                  rng: Rng, normalize: bool = True, cond=None) -> np.ndarray:
    """Per-sample ``w_t * (s_gen - s_teacher)`` at ``x_t = diffuse(x, t_j)``.

    With ``normalize`` the weight is ``sigma^2 / sqrt(abar) * d / ||x - xhat0_teacher||_1``;
    otherwise ``w_t = 1``.
    """
    eps = rng.normal(x.shape)
    a, s = sched.coeffs(t_j)
    x_t = a * x + s * eps
    s_real = teacher_score(teacher, x_t, t_j, sched, cond)
    with no_grad():
        x0_fake = mu_psi.forward(Tensor(x_t), t_j, cond)
        s_fake = score_from_x0pred(Tensor(x_t), t_j, x0_fake, sched).data
    diff = s_fake - s_real
    if normalize:
        x0_real = teacher_posterior_mean(teacher, x_t, t_j, sched, cond)
        l1 = np.abs(x - x0_real).sum(axis=1, keepdims=True)
        ab = sched.alpha_bar[t_j]
        s2 = sched.sigma2[t_j]
        if np.ndim(t_j):
            ab, s2 = ab[:, None], s2[:, None]
        w = s2 / np.sqrt(ab) * x.shape[1] / np.maximum(l1, 1e-12)
        diff = w * diff
    if not np.isfinite(diff).all():
        raise NonFiniteError("non-finite score difference in distribution-matching loss")
    return diff


def dmd_surrogate_loss(x: Tensor, teacher: GmmTeacher, mu_psi: DenoiserNet, t_j, sched: NoiseSchedule,
                       rng: Rng, grid: StepGrid, normalize: bool = True, cond=None) -> Tensor:
    """Scalar whose gradient w.r.t. the generator is the distribution-matching gradient.

    ``mean_b <stopgrad(w (s_gen - s_teacher)), x_b>``; differentiating gives
    ``-E[w (s_teacher - s_gen) dx/dtheta]``.
    """
    t_arr = np.asarray(t_j)
    if t_arr.size and t_arr.min() < high_noise_threshold(grid):
        raise RoutingError(
            f"distribution-matching loss at t={int(t_arr.min())}, inside the low-noise regime "
            f"(needs t >= {high_noise_threshold(grid)})"
        )
    direction = dmd_direction(x.data, teacher, mu_psi, t_j, sched, rng, normalize, cond)
    return T.sum(T.mul(x, T.constant(direction / x.shape[0])))


# ---------------------------------------------------------------------------
# adversarial


def nonsaturating_gen_loss(logits: list[Tensor]) -> Tensor:
    """Mean over heads and samples of ``softplus(-logit)``."""
    per_head = [T.mean(T.softplus(T.mul(l, -1.0))) for l in logits]
    return T.mul(_sum_list(per_head), 1.0 / len(per_head))


def gen_adv_loss(disc: DiscriminatorNet, gen: DenoiserNet, x0_detached: Tensor, t_hat: int,
                 grid: StepGrid, sched: NoiseSchedule, rng: Rng, cond=None) -> tuple[Tensor, Tensor]:
    """Adversarial generator loss at a low-noise grid step.

    The detached clean sample is re-noised to ``t_hat``; the only differentiable
    path to the generator is its single call at ``t_hat``. Returns the loss and
    that call's output.
    """
    if int(t_hat) not in grid.low_noise:
        raise RoutingError(f"adversarial loss at t={t_hat}; allowed low-noise steps: {grid.low_noise}")
    eps = Tensor(rng.normal(x0_detached.shape))
    x_hat = forward_diffuse(T.detach(x0_detached), int(t_hat), eps, sched)
    out = generator_step(gen, x_hat, int(t_hat), grid, cond)
    return nonsaturating_gen_loss(disc.forward(out)), out


def disc_loss(disc: DiscriminatorNet, x_real: Tensor, x_fake: Tensor, mode: str = "logistic") -> Tensor:
    """Discriminator objective, averaged over heads.

    logistic: ``softplus(-D(real)) + softplus(D(fake))``;
    hinge: ``relu(1 - D(real)) + relu(1 + D(fake))``.
    """
    real = disc.forward(T.detach(x_real))
    fake = disc.forward(T.detach(x_fake))
    return disc_loss_from_logits(real, fake, mode)


def disc_loss_from_logits(real: list[Tensor], fake: list[Tensor], mode: str = "logistic") -> Tensor:
    terms = []
    for lr, lf in zip(real, fake):
        if mode == "logistic":
            terms.append(T.add(T.mean(T.softplus(T.mul(lr, -1.0))), T.mean(T.softplus(lf))))
        elif mode == "hinge":
            terms.append(T.add(T.mean(T.relu(T.sub(1.0, lr))), T.mean(T.relu(T.add(lf, 1.0)))))
        else:
            raise ValueError(f"unknown discriminator loss mode {mode!r}")
    return T.mul(_sum_list(terms), 1.0 / len(terms))


def _sum_list(xs: list[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = T.add(out, x)
    return out


# ---------------------------------------------------------------------------
# score-estimator regression


def diffusion_loss(mu_psi: DenoiserNet, x_gen: np.ndarray, sched: NoiseSchedule, rng: Rng,
                   t=None, cond=None) -> Tensor:
    """x0-regression: ``mean_b ||mu_psi(diffuse(x, t), t) - x||^2`` with ``t ~ U{1..T-1}``."""
    x_gen = np.asarray(x_gen)
    n = x_gen.shape[0]
    if t is None:
        t = rng.integers(1, sched.T, size=n)
    eps = rng.normal(x_gen.shape)
    a, s = sched.coeffs(t)
    x_t = Tensor(a * x_gen + s * eps)
    pred = mu_psi.forward(x_t, t, cond)
    return T.mul(T.sum(T.square(T.sub(pred, T.constant(x_gen)))), 1.0 / n)


# ---------------------------------------------------------------------------
# preference optimisation


@dataclass
class PreferencePair:
    """Win/lose continuations sharing one branch point (batched over rows)."""

    z_t: np.ndarray
    z_win: np.ndarray
    z_lose: np.ndarray
    t_from: int
    t_to: int
    condition: np.ndarray | None = None
    scores_win: np.ndarray | None = None
    scores_lose: np.ndarray | None = None
    norm_win: np.ndarray | None = None
    norm_lose: np.ndarray | None = None

    def __len__(self) -> int:
        return self.z_t.shape[0]

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.z_t, self.z_lose, self.z_win, self.t_from, self.t_to, self.condition,
                              self.scores_lose, self.scores_win, self.norm_lose, self.norm_win)


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Within-group z-scores along the last axis; a zero-spread group maps to zeros."""
    s = np.asarray(scores, dtype=np.float64)
    mu = s.mean(axis=-1, keepdims=True)
    sd = s.std(axis=-1, keepdims=True)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (s - mu) / safe, 0.0)


def select_preference_pair(scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Winner/loser indices per group from ``scores[..., k]``.

    Returns ``(win_idx, lose_idx, degenerate)``; ties go to the lowest index and
    a group with no spread is flagged degenerate (win == lose == 0).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[-1] < 2:
        raise ValueError("need at least k=2 candidates per group")
    if not np.isfinite(s).all():
        raise ValueError("reward scores must be finite")
    z = normalize_scores(s)
    win = np.argmax(z, axis=-1)
    lose = np.argmin(z, axis=-1)
    degenerate = win == lose
    return win, lose, degenerate


def build_pairs(z_t: np.ndarray, candidates: np.ndarray, scores: np.ndarray, t_from: int, t_to: int,
                cond=None) -> tuple[PreferencePair | None, int]:
    """Assemble pairs from ``candidates[G, k, d]`` and ``scores[G, k]``; drops degenerate groups."""
    win, lose, degen = select_preference_pair(scores)
    keep = ~degen
    n_skipped = int(degen.sum())
    if not keep.any():
        return None, n_skipped
    rows = np.nonzero(keep)[0]
    z = normalize_scores(scores)
    c = None if cond is None else np.asarray(cond)[rows]
    pair = PreferencePair(
        z_t=z_t[rows], z_win=candidates[rows, win[rows]], z_lose=candidates[rows, lose[rows]],
        t_from=int(t_from), t_to=int(t_to), condition=c,
        scores_win=scores[rows, win[rows]], scores_lose=scores[rows, lose[rows]],
        norm_win=z[rows, win[rows]], norm_lose=z[rows, lose[rows]],
    )
    return pair, n_skipped


def preference_margin(gen: DenoiserNet, ref: DenoiserNet, pair: PreferencePair, sched: NoiseSchedule,
                      eta: float = 1.0) -> Tensor:
    """``H`` per pair, ``[P, 1]``: policy-minus-reference log-likelihood margin of win over lose.

    The backward step is Gaussian with mean ``ancestral_mean`` and variance
    ``ancestral_variance``; normalising constants cancel.
    """
    var = ancestral_variance(pair.t_from, pair.t_to, sched, eta)
    if var <= 0.0:
        raise ValueError("preference loss needs a stochastic step (ancestral variance > 0)")
    z_t = Tensor(pair.z_t)
    zw, zl = T.constant(pair.z_win), T.constant(pair.z_lose)
    m_theta = ancestral_mean(gen.forward(z_t, pair.t_from, pair.condition), z_t,
                             pair.t_from, pair.t_to, sched, eta)
    with no_grad():
        m_ref = ancestral_mean(ref.forward(z_t, pair.t_from, pair.condition), z_t,
                               pair.t_from, pair.t_to, sched, eta)
    m_ref = T.constant(m_ref.data)

    def sqdist(a, b):
        return _row_sums(T.square(T.sub(a, b)))

    # log p(w) - log p(l) under each model, times 2 var
    pol = T.sub(sqdist(zl, m_theta), sqdist(zw, m_theta))
    ref_ = T.sub(sqdist(zl, m_ref), sqdist(zw, m_ref))
    return T.mul(T.sub(pol, ref_), 1.0 / (2.0 * var))


def preference_loss(gen: DenoiserNet, ref: DenoiserNet, pair: PreferencePair, beta: float,
                    sched: NoiseSchedule, eta: float = 1.0) -> Tensor:
    """``mean_p -log sigmoid(beta * H_p)`` written as ``softplus(-beta H)``."""
    h = preference_margin(gen, ref, pair, sched, eta)
    return T.mean(T.softplus(T.mul(h, -float(beta))))
