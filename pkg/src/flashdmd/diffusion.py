"""Discrete VP noise schedule, few-step grid, and the sampling primitives.

Timestep ``0`` as a *hop target* means the clean endpoint: ``ddim_hop`` and
``back_simulate`` return the generator's x0 prediction there. As a schedule
index (``forward_diffuse``, ``score_from_x0pred``) it is the first noise level
with ``alpha_bar[0] = 1 - beta_1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .numerics import Rng, Tensor, no_grad
from .numerics import autodiff as T


def _scale(x: Tensor, c) -> Tensor:
    """Multiply by a scalar or a per-row column of coefficients."""
    if np.ndim(c) == 0:
        return T.mul(x, float(c))
    return T.mul(x, np.broadcast_to(c, x.shape).copy())


class Denoiser(Protocol):
    def forward(self, x: Tensor, t, cond=None) -> Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule over ``T`` discrete steps."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)
    sigma2: np.ndarray = field(init=False, repr=False, compare=False)
    sigma: np.ndarray = field(init=False, repr=False, compare=False)
    sqrt_alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("schedule needs T >= 2")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        beta = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - beta)
        sigma2 = 1.0 - alpha_bar
        for name, val in (
            ("beta", beta),
            ("alpha_bar", alpha_bar),
            ("sigma2", sigma2),
            ("sigma", np.sqrt(sigma2)),
            ("sqrt_alpha_bar", np.sqrt(alpha_bar)),
        ):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def check(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T}): {t.min()}..{t.max()}")

    def coeffs(self, t):
        """``(sqrt(alpha_bar_t), sigma_t)``; array-valued t gives column vectors."""
        self.check(t)
        a, s = self.sqrt_alpha_bar[t], self.sigma[t]
        if np.ndim(t):
            return a[:, None], s[:, None]
        return float(a), float(s)


@dataclass(frozen=True)
class StepGrid:
    """Descending generator timesteps split into high- and low-noise sets."""

    taus: tuple[int, ...]
    low_noise: tuple[int, ...]

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        if not taus or list(taus) != sorted(set(taus), reverse=True):
            raise ValueError(f"grid must be strictly descending and non-empty: {taus}")
        if taus[-1] < 1:
            raise ValueError("grid timesteps must be >= 1")
        low = tuple(sorted((int(t) for t in self.low_noise), reverse=True))
        if not set(low) <= set(taus):
            raise ValueError(f"low-noise set {low} not contained in grid {taus}")
        if low and max(low) >= min(set(taus) - set(low), default=10**9):
            raise ValueError("every low-noise step must lie below every high-noise step")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "low_noise", low)

    @property
    def high_noise(self) -> tuple[int, ...]:
        return tuple(t for t in self.taus if t not in self.low_noise)

    @property
    def K(self) -> int:
        return len(self.taus)

    def next_after(self, t: int) -> int:
        """The following (lower) grid timestep, or 0 after the last step."""
        i = self.taus.index(int(t))
        return self.taus[i + 1] if i + 1 < len(self.taus) else 0

    def segment(self, t_from: int, t_to: int) -> list[int]:
        """Grid steps ``t`` with ``t_to < t <= t_from``, descending."""
        valid = set(self.taus) | {0}
        if t_from not in valid or t_to not in valid:
            raise ValueError(f"segment endpoints must be grid steps or 0: {t_from} -> {t_to}")
        if t_to > t_from:
            raise ValueError(f"segment runs backwards in noise: {t_from} -> {t_to}")
        return [t for t in self.taus if t_to < t <= t_from]

    @classmethod
    def uniform(cls, K: int, T: int = 1000, n_low: int = 1) -> "StepGrid":
        """The 4/8-step grids used throughout, e.g. K=4 -> (999, 749, 499, 249)."""
        presets = {
            4: (999, 749, 499, 249),
            8: (999, 874, 749, 629, 499, 374, 249, 124),
        }
        if T == 1000 and K in presets:
            taus = presets[K]
        else:
            taus = tuple(int(round(T - 1 - i * T / K)) for i in range(K))
        return cls(taus=taus, low_noise=taus[len(taus) - n_low:])


def forward_diffuse(x0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """``sqrt(abar_t) x0 + sigma_t eps``; differentiable in ``x0``."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    a, s = sched.coeffs(t)
    return T.add(_scale(x0, a), T.constant(s * eps.data))


def score_from_x0pred(x_t: Tensor, t, x0_pred: Tensor, sched: NoiseSchedule) -> Tensor:
    """Score implied by an x0 prediction: ``-(x_t - sqrt(abar) x0_pred) / sigma^2``."""
    if np.min(t) < 1:
        raise ValueError("score undefined at the singular timestep t=0")
    sched.check(t)
    a = sched.sqrt_alpha_bar[t]
    s2 = sched.sigma2[t]
    if np.ndim(t):
        a, s2 = a[:, None], s2[:, None]
    return _scale(T.sub(x_t, _scale(x0_pred, a)), -1.0 / s2)


def generator_step(net: Denoiser, x_t: Tensor, t: int, grid: StepGrid, cond=None) -> Tensor:
    """One generator evaluation at a grid timestep."""
    if int(t) not in grid.taus:
        raise ValueError(f"generator called at t={t}, which is not on the grid {grid.taus}")
    return net.forward(x_t, int(t), cond)


def ddim_hop(x0_pred: Tensor, x_t: Tensor, t_from: int, t_to: int, sched: NoiseSchedule) -> Tensor:
    """Deterministic jump from ``t_from`` to ``t_to`` holding ``x0_pred`` fixed."""
    if t_to >= t_from:
        raise ValueError(f"ddim_hop needs t_to < t_from, got {t_from} -> {t_to}")
    if t_to == 0:
        return x0_pred
    a_f, s_f = sched.coeffs(t_from)
    a_t, s_t = sched.coeffs(t_to)
    eps_hat = T.mul(T.sub(x_t, T.mul(x0_pred, a_f)), 1.0 / s_f)
    return T.add(T.mul(x0_pred, a_t), T.mul(eps_hat, s_t))


def ancestral_variance(t_from: int, t_to: int, sched: NoiseSchedule, eta: float = 1.0) -> float:
    """Per-coordinate variance of the stochastic hop.

    ``eta = 1`` is the DDPM posterior variance mapped onto the coarse grid,
    ``(sigma_to^2 / sigma_from^2) * (1 - abar_from / abar_to)``; ``eta = 0`` is DDIM.
    """
    if t_to >= t_from:
        raise ValueError(f"ancestral step needs t_to < t_from, got {t_from} -> {t_to}")
    if t_to == 0:
        return 0.0
    ab_f, ab_t = sched.alpha_bar[t_from], sched.alpha_bar[t_to]
    s2_f, s2_t = sched.sigma2[t_from], sched.sigma2[t_to]
    return float(eta * eta * (s2_t / s2_f) * (1.0 - ab_f / ab_t))


def ancestral_mean(x0_pred: Tensor, x_t: Tensor, t_from: int, t_to: int,
                   sched: NoiseSchedule, eta: float = 1.0) -> Tensor:
    """Mean of the stochastic hop; differentiable in ``x0_pred``."""
    if t_to == 0:
        return x0_pred
    var = ancestral_variance(t_from, t_to, sched, eta)
    a_f, s_f = sched.coeffs(t_from)
    a_t = float(sched.sqrt_alpha_bar[t_to])
    c = np.sqrt(max(float(sched.sigma2[t_to]) - var, 0.0))
    eps_hat = T.mul(T.sub(x_t, T.mul(x0_pred, a_f)), 1.0 / s_f)
    return T.add(T.mul(x0_pred, a_t), T.mul(eps_hat, c))


def ancestral_step(net: Denoiser, x_t: Tensor, t_from: int, t_to: int, sched: NoiseSchedule,
                   rng: Rng, eta: float = 1.0, cond=None) -> Tensor:
    """Stochastic hop: posterior mean plus fresh Gaussian noise of ``ancestral_variance``."""
    x0 = net.forward(x_t, int(t_from), cond)
    mean = ancestral_mean(x0, x_t, t_from, t_to, sched, eta)
    var = ancestral_variance(t_from, t_to, sched, eta)
    if var == 0.0:
        return mean
    return T.add(mean, T.constant(np.sqrt(var) * rng.normal(x_t.shape)))


def back_simulate(net: Denoiser, x: Tensor, t_from: int, t_to: int, grid: StepGrid,
                  sched: NoiseSchedule, cond=None) -> Tensor:
    """Detached few-step rollout from ``t_from`` down to ``t_to`` (0 = clean)."""
    steps = grid.segment(t_from, t_to)
    out = x.data
    with no_grad():
        cur = Tensor(out)
        for t in steps:
            nxt = grid.next_after(t)
            if nxt < t_to:
                raise ValueError(f"segment {t_from}->{t_to} does not end on a grid step")
            x0 = net.forward(cur, t, cond)
            cur = ddim_hop(x0, cur, t, nxt, sched)
        out = cur.data
    return Tensor(out.copy())


def sample(net: Denoiser, z: Tensor, grid: StepGrid, sched: NoiseSchedule, cond=None) -> Tensor:
    """Full K-step generation from pure noise at the top grid step."""
    return back_simulate(net, z, grid.taus[0], 0, grid, sched, cond)


def trajectory(net: Denoiser, z: Tensor, grid: StepGrid, sched: NoiseSchedule,
               cond=None) -> dict[int, np.ndarray]:
    """Latents at every grid step plus the clean endpoint (key 0)."""
    out = {grid.taus[0]: z.data.copy()}
    cur = z
    with no_grad():
        for t in grid.taus:
            nxt = grid.next_after(t)
            cur = ddim_hop(net.forward(cur, t, cond), cur, t, nxt, sched)
            out[nxt] = cur.data.copy()
    return out


def sampling_variance_probe(net: Denoiser, grid: StepGrid, sched: NoiseSchedule, t: int, n: int,
                            rng: Rng, n_roots: int = 64, eta: float = 1.0, cond=None) -> float:
    """Mean pairwise distance between ``n`` clean samples branched at grid step ``t``.

    Each of ``n_roots`` shared starting noises is rolled out deterministically to
    ``t``, branched into ``n`` ancestral candidates at the next grid step, and
    each candidate is completed to the clean endpoint. Distances are averaged
    over all candidate pairs and all roots.
    """
    if int(t) not in grid.taus:
        raise ValueError(f"probe timestep {t} is not on the grid")
    if n < 2:
        raise ValueError("need n >= 2 candidates")
    d = _data_dim(net)
    z = Tensor(rng.normal((n_roots, d)))
    c = None if cond is None else np.asarray(cond)
    with no_grad():
        x_t = back_simulate(net, z, grid.taus[0], int(t), grid, sched, c)
        nxt = grid.next_after(int(t))
        finals = []
        for _ in range(n):
            x_next = ancestral_step(net, x_t, int(t), nxt, sched, rng, eta, c)
            finals.append(back_simulate(net, x_next, nxt, 0, grid, sched, c).data)
    finals = np.stack(finals)  # [n, roots, d]
    iu, ju = np.triu_indices(n, k=1)
    dists = np.linalg.norm(finals[iu] - finals[ju], axis=-1)
    return float(dists.mean())


def _data_dim(net) -> int:
    dim = getattr(net, "data_dim", None)
    if dim is None:
        raise TypeError("network does not expose data_dim")
    return int(dim)


def timesteps_in_range(rng: Rng, lo: int, hi: int, n: int) -> np.ndarray:
    """Uniform integer timesteps in the closed range ``[lo, hi]``."""
    return rng.integers(lo, hi + 1, size=n)


def stratified_timesteps(n: int, lo: int, hi: int) -> np.ndarray:
    """``n`` evenly spaced integer timesteps covering ``[lo, hi]``."""
    return np.round(np.linspace(lo, hi, n)).astype(np.int64)


def high_noise_threshold(grid: StepGrid) -> int:
    """Smallest timestep that counts as high-noise for loss routing.

    Everything strictly above the largest low-noise grid step is high-noise;
    with no low-noise steps the whole range ``[1, T)`` is eligible.
    """
    return (max(grid.low_noise) + 1) if grid.low_noise else 1


def check_sequence(ts: Sequence[int], sched: NoiseSchedule) -> None:
    sched.check(np.asarray(ts))
