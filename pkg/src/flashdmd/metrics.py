"""Sample-based metrics against the analytic teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import sqrtm
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .diffusion import NoiseSchedule, stratified_timesteps
from .models import DenoiserNet
from .numerics import Rng, Tensor, no_grad
from .teacher import GmmTeacher, teacher_logdensity

KL_ESTIMATOR = "knn-entropy(k=5)+exact-teacher-logdensity"


@dataclass
class MetricsRecord:
    step: int
    iteration: int
    phase2_updates: int
    phase: str
    kl_gen_to_teacher: float
    w2: float
    mode_coverage: float
    mean_reward: float
    psi_tracking_error: float
    disc_real_fake_gap: float
    losses: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    kl_estimator: str = KL_ESTIMATOR
    kl_flagged: bool = False
    wall_time: float | None = None

    def to_json(self) -> dict:
        """Row for ``metrics.jsonl``; wall time is kept out so rows are reproducible."""
        row = asdict(self)
        row.pop("wall_time")
        return row


def knn_entropy(samples: np.ndarray, k: int = 5) -> float:
    """Kozachenko-Leonenko differential entropy estimate (nats)."""
    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more than k={k} samples")
    tree = cKDTree(x)
    dist, _ = tree.query(x, k=k + 1)
    r = dist[:, k]
    # duplicated points give r = 0; clip at a tiny radius rather than -inf
    r = np.maximum(r, 1e-300)
    log_unit_ball = (d / 2.0) * np.log(np.pi) - gammaln(d / 2.0 + 1.0)
    return float(digamma(n) - digamma(k) + log_unit_ball + d * np.mean(np.log(r)))


def kl_estimate(samples: np.ndarray, teacher: GmmTeacher, k: int = 5, min_n: int = 1000,
                condition=None) -> float:
    """``KL(p_gen || p_teacher) = -H(p_gen) - E_gen[log p_teacher]``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < min_n:
        raise ValueError(f"kl_estimate needs n >= {min_n}, got {x.shape[0]}")
    cross = teacher_logdensity(teacher, x, None, None, condition).mean()
    return float(-knn_entropy(x, k) - cross)


def mixture_moments(teacher: GmmTeacher) -> tuple[np.ndarray, np.ndarray]:
    w, m, v = teacher.weights, teacher.means, teacher.variances
    mean = w @ m
    centered = m - mean
    cov = np.einsum("k,ki,kj->ij", w, centered, centered) + np.diag(w @ v)
    return mean, cov


def w2_gaussian(samples: np.ndarray, teacher: GmmTeacher) -> float:
    """2-Wasserstein distance between Gaussian fits of the samples and the teacher."""
    x = np.asarray(samples, dtype=np.float64)
    m1, c1 = x.mean(axis=0), np.cov(x, rowvar=False)
    m2, c2 = mixture_moments(teacher)
    s2 = sqrtm(c2)
    cross = sqrtm(s2 @ c1 @ s2)
    val = np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2.0 * np.real(cross))
    return float(np.sqrt(max(val, 0.0)))


def mode_hits(samples: np.ndarray, teacher: GmmTeacher, radius: float) -> np.ndarray:
    """Samples within the closed ball of ``radius`` around each mode (count per mode)."""
    x = np.asarray(samples, dtype=np.float64)
    d2 = ((x[:, None, :] - teacher.means[None]) ** 2).sum(-1)
    return (d2 <= radius * radius).sum(axis=0)


def default_coverage_radius(teacher: GmmTeacher) -> float:
    return 3.0 * float(np.sqrt(teacher.variances.max()))


def mode_coverage(samples: np.ndarray, teacher: GmmTeacher, radius: float | None = None,
                  coverage_min: int | None = None) -> float:
    """Fraction of teacher modes holding at least ``coverage_min`` samples within ``radius``.

    Defaults: ``radius = 3 * component std``; ``coverage_min = max(1, n / (10 K))``,
    i.e. a tenth of a mode's fair share.
    """
    if radius is None:
        radius = default_coverage_radius(teacher)
    if radius <= 0:
        raise ValueError("radius must be positive")
    n, K = len(samples), teacher.n_components
    if coverage_min is None:
        coverage_min = max(1, n // (10 * K))
    return float(np.mean(mode_hits(samples, teacher, radius) >= coverage_min))


def psi_tracking_error(mu_psi: DenoiserNet, gen_samples: np.ndarray, sched: NoiseSchedule,
                       rng: Rng, t_lo: int = 1, t_hi: int | None = None, cond=None) -> float:
    """Mean x0-regression error of the score estimator on generator samples,
    with timesteps stratified evenly over ``[t_lo, t_hi]``."""
    x = np.asarray(gen_samples, dtype=np.float64)
    n = x.shape[0]
    if n < 1000:
        raise ValueError("psi_tracking_error needs n >= 1000")
    t = stratified_timesteps(n, t_lo, sched.T - 1 if t_hi is None else t_hi)
    a, s = sched.coeffs(t)
    x_t = a * x + s * rng.normal(x.shape)
    with no_grad():
        pred = mu_psi.forward(Tensor(x_t), t, cond).data
    return float(np.mean(np.sum((pred - x) ** 2, axis=1)))


def gaussian_tracking_floor(sched: NoiseSchedule, n: int, d: int, t_lo: int = 1,
                            t_hi: int | None = None) -> float:
    """Minimum achievable tracking error for N(0, I) data: ``d * mean_t sigma_t^2``."""
    t = stratified_timesteps(n, t_lo, sched.T - 1 if t_hi is None else t_hi)
    return float(d * sched.sigma2[t].mean())
