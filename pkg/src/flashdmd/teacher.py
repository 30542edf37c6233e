"""Analytic Gaussian-mixture teacher.

Every diffused marginal of a Gaussian mixture is again a Gaussian mixture, so
the teacher's sampler, score, and log-density at any noise level are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .diffusion import NoiseSchedule
from .numerics import Rng

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmTeacher:
    """Mixture of diagonal Gaussians with optional mode-group labels.

    ``variances`` holds per-component, per-coordinate variances ``[K, d]``.
    ``mode_groups[i]`` is the class id of component ``i`` (conditional sampling).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    mode_groups: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        if v.ndim == 1:
            v = np.repeat(v[:, None], m.shape[1], axis=1)
        if w.ndim != 1 or w.shape[0] != m.shape[0] or v.shape != m.shape:
            raise ValueError(f"inconsistent mixture shapes: w{w.shape} m{m.shape} v{v.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        groups = None
        if self.mode_groups is not None:
            groups = np.asarray(self.mode_groups, dtype=np.int64)
            if groups.shape != w.shape or groups.min() < 0:
                raise ValueError("mode_groups must give a non-negative class id per component")
        for name, val in (("weights", w), ("means", m), ("variances", v), ("mode_groups", groups)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def n_groups(self) -> int:
        return 0 if self.mode_groups is None else int(self.mode_groups.max()) + 1

    def _log_weights(self, cond, n: int) -> np.ndarray:
        """Row-wise log mixture weights ``[n, K]``, restricted to the row's group."""
        logw = np.log(self.weights)
        if cond is None:
            return np.broadcast_to(logw, (n, self.n_components))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
        self._check_condition(cond)
        mask = self.mode_groups[None, :] == cond[:, None]
        lw = np.where(mask, logw[None, :], -np.inf)
        return lw - logsumexp(lw, axis=1, keepdims=True)

    def _check_condition(self, cond) -> None:
        if self.mode_groups is None:
            raise ValueError("teacher has no mode groups; condition must be None")
        c = np.asarray(cond)
        if c.size and (c.min() < 0 or c.max() >= self.n_groups):
            raise ValueError(f"unknown condition id(s): {np.unique(c[(c < 0) | (c >= self.n_groups)])}")

    def diffused(self, t, sched: NoiseSchedule | None):
        """Component means and variances of the marginal at noise level ``t``.

        ``t=None`` gives the clean data distribution. A scalar ``t`` gives ``[K, d]``
        arrays; a per-row array of timesteps gives ``[n, K, d]``.
        """
        if t is None:
            return self.means, self.variances
        sched.check(t)
        if np.ndim(t):
            t = np.asarray(t)
            ab = sched.alpha_bar[t][:, None, None]
            s2 = sched.sigma2[t][:, None, None]
            return np.sqrt(ab) * self.means[None], ab * self.variances[None] + s2
        ab = float(sched.alpha_bar[t])
        return np.sqrt(ab) * self.means, ab * self.variances + float(sched.sigma2[t])

    def _component_terms(self, x: np.ndarray, t, sched):
        """Per-component log-densities ``[n, K]`` plus the diffused moments used."""
        mu, var = self.diffused(t, sched)
        if mu.ndim == 2:
            mu, var = mu[None], var[None]
        diff = x[:, None, :] - mu
        logpdf = -0.5 * (np.sum(diff * diff / var, axis=-1)
                         + np.sum(np.log(var), axis=-1) + self.dim * LOG_2PI)
        return logpdf, diff, var

    def _component_logpdf(self, x: np.ndarray, t, sched) -> np.ndarray:
        return self._component_terms(x, t, sched)[0]


def teacher_sample(teacher: GmmTeacher, n: int, rng: Rng, condition=None) -> np.ndarray:
    """Exact ancestral draws ``[n, d]``; ``condition`` restricts to one mode group."""
    if n < 1:
        raise ValueError("need n >= 1")
    p = teacher.weights
    if condition is not None:
        teacher._check_condition(condition)
        p = np.where(teacher.mode_groups == int(condition), p, 0.0)
        p = p / p.sum()
    comp = rng.choice(teacher.n_components, size=n, p=p)
    noise = rng.normal((n, teacher.dim))
    return teacher.means[comp] + np.sqrt(teacher.variances[comp]) * noise


def teacher_sample_components(teacher: GmmTeacher, comp: np.ndarray, rng: Rng) -> np.ndarray:
    """Draws from explicitly chosen components (used for conditional batches)."""
    noise = rng.normal((len(comp), teacher.dim))
    return teacher.means[comp] + np.sqrt(teacher.variances[comp]) * noise


def teacher_logdensity(teacher: GmmTeacher, x, t, sched: NoiseSchedule | None,
                       condition=None) -> np.ndarray:
    """Log-density of the diffused marginal, one value per row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lw = teacher._log_weights(condition, x.shape[0])
    return logsumexp(lw + teacher._component_logpdf(x, t, sched), axis=1)


def teacher_score(teacher: GmmTeacher, x, t, sched: NoiseSchedule | None,
                  condition=None) -> np.ndarray:
    """Exact ``grad_x log p_t(x)``: responsibility-weighted component scores.

    ``t`` may be a scalar or one timestep per row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lw = teacher._log_weights(condition, x.shape[0])
    logpdf, diff, var = teacher._component_terms(x, t, sched)
    logp = lw + logpdf
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))  # [n, K]
    return -np.einsum("nk,nkd->nd", resp, diff / var)


def teacher_posterior_mean(teacher: GmmTeacher, x, t, sched: NoiseSchedule,
                           condition=None) -> np.ndarray:
    """``E[x0 | x_t]`` via Tweedie: ``(x_t + sigma^2 score) / sqrt(abar)``."""
    s = teacher_score(teacher, x, t, sched, condition)
    ab = sched.alpha_bar[t]
    s2 = sched.sigma2[t]
    if np.ndim(t):
        ab, s2 = ab[:, None], s2[:, None]
    return (np.asarray(x) + s2 * s) / np.sqrt(ab)


def circle_teacher(n_modes: int = 8, radius: float = 1.0, std: float = 0.05,
                   n_groups: int = 0) -> GmmTeacher:
    """Equal-weight isotropic modes evenly spaced on a circle in the plane.

    With ``n_groups > 0`` consecutive runs of ``n_modes // n_groups`` modes share
    a class id.
    """
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    groups = None
    if n_groups:
        if n_modes % n_groups:
            raise ValueError("n_modes must be divisible by n_groups")
        groups = np.arange(n_modes) // (n_modes // n_groups)
    return GmmTeacher(np.full(n_modes, 1.0 / n_modes), means,
                      np.full((n_modes, 2), std * std), groups)


def standard_normal_teacher(d: int = 2) -> GmmTeacher:
    return GmmTeacher(np.ones(1), np.zeros((1, d)), np.ones((1, d)))
