"""Analytic diffusion teacher: Gaussian-mixture data under a VE schedule.

With ``sigma(t) = t`` the noised marginal of an isotropic mixture stays a
mixture, ``p_t = sum_i w_i N(mu_i, (s_i^2 + t^2) I)``, so the score is
available in closed form and the probability-flow ODE
``dx/dt = -t * score(x, t)`` can be integrated with plain RK4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .config import ModelConfig, TeacherConfig

VE_TAG = 1


@dataclass
class GmmSpec:
    weights: np.ndarray  # [K]
    means: np.ndarray    # [K, C, H, W]
    stds: np.ndarray     # [K]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.stds <= 0):
            raise ValueError("component stds must be positive")
        if not (len(self.weights) == len(self.means) == len(self.stds)):
            raise ValueError("weights, means and stds disagree on the component count")

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.means.shape[1:]

    @property
    def mean_image(self) -> np.ndarray:
        return np.tensordot(self.weights, self.means, axes=1)

    @property
    def mean_std(self) -> float:
        return float(self.weights @ self.stds)


@dataclass(frozen=True)
class Schedule:
    epsilon: float = 0.02
    horizon: float = 3.0

    def __post_init__(self):
        if not 0 < self.epsilon < self.horizon:
            raise ValueError("need 0 < epsilon < horizon")

    @staticmethod
    def sigma(t):
        return t


@dataclass
class TrajectoryDataset:
    times: np.ndarray      # float32 [G], T first, epsilon last
    states: np.ndarray     # float32 [N, G, C, H, W]
    epsilon: float
    horizon: float
    schedule_tag: int = VE_TAG
    seed: int | None = field(default=None, compare=False)

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def n_grid(self) -> int:
        return self.states.shape[1]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.states.shape[2:]

    def same_as(self, other: "TrajectoryDataset") -> bool:
        """Bitwise equality of every persisted field."""
        return (np.float32(self.epsilon) == np.float32(other.epsilon)
                and np.float32(self.horizon) == np.float32(other.horizon)
                and self.schedule_tag == other.schedule_tag
                and self.times.dtype == other.times.dtype
                and self.times.tobytes() == other.times.tobytes()
                and self.states.shape == other.states.shape
                and self.states.tobytes() == other.states.tobytes())


# --- data distribution ---------------------------------------------------------

def _coverage(size: int, rng: np.random.Generator, supersample: int = 4) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one disc or bar at a random position."""
    f = supersample
    g = (np.arange(size * f) + 0.5) / (size * f)
    yy, xx = np.meshgrid(g, g, indexing="ij")
    cy, cx = rng.uniform(0.25, 0.75, size=2)
    if rng.random() < 0.5:
        r = rng.uniform(0.15, 0.3)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        theta = rng.uniform(0, np.pi)
        half_len, half_w = rng.uniform(0.25, 0.45), rng.uniform(0.06, 0.14)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        inside = (np.abs(u) <= half_len) & (np.abs(v) <= half_w)
    return inside.reshape(size, f, size, f).mean(axis=(1, 3))


def template_images(k: int, channels: int, size: int, seed: int) -> np.ndarray:
    """``k`` template images in [-1, 1], each one or two shapes on a dark background."""
    rng = np.random.default_rng(seed)
    out = np.empty((k, channels, size, size))
    for i in range(k):
        img = np.zeros((channels, size, size))
        for _ in range(1 + int(rng.random() < 0.5)):
            cov = _coverage(size, rng)
            color = rng.uniform(0.5, 1.0, size=channels) if channels > 1 else np.ones(1)
            img = np.maximum(img, cov[None] * color[:, None, None])
        out[i] = 2.0 * img - 1.0
    return out


def make_gmm(model: ModelConfig, teacher: TeacherConfig) -> GmmSpec:
    K = teacher.components
    means = template_images(K, model.image_channels, model.image_size, teacher.seed)
    return GmmSpec(np.full(K, 1.0 / K), means, np.full(K, teacher.std))


def gmm_log_density(x, t: float, gmm: GmmSpec) -> np.ndarray:
    """Log of the noised mixture density at time ``t``; one value per sample."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == len(gmm.image_shape) + 1
    xb = x if batched else x[None]
    D = int(np.prod(gmm.image_shape))
    var = gmm.stds ** 2 + t * t
    diff = xb[:, None] - gmm.means[None]
    sq = (diff.reshape(len(xb), len(var), -1) ** 2).sum(axis=-1)
    logp = np.log(gmm.weights) - 0.5 * D * np.log(2 * np.pi * var) - 0.5 * sq / var
    out = logsumexp(logp, axis=1)
    return out if batched else out[0]


def gmm_score(x, t: float, gmm: GmmSpec, schedule: Schedule | None = None) -> np.ndarray:
    """Exact score of the noised mixture, ``sum_i r_i (mu_i - x) / (s_i^2 + t^2)``."""
    if schedule is not None and not (schedule.epsilon * (1 - 1e-9) <= t <= schedule.horizon * (1 + 1e-9)):
        raise ValueError(f"t={t} outside [{schedule.epsilon}, {schedule.horizon}]")
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == len(gmm.image_shape) + 1
    xb = x if batched else x[None]
    n, K = len(xb), len(gmm.weights)
    D = int(np.prod(gmm.image_shape))
    sig = Schedule.sigma(t)
    var = gmm.stds ** 2 + sig * sig
    flat = xb.reshape(n, 1, D)
    mu = gmm.means.reshape(1, K, D)
    sq = ((flat - mu) ** 2).sum(axis=-1)
    logp = np.log(gmm.weights) - 0.5 * D * np.log(var) - 0.5 * sq / var
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    coef = resp / var  # [n, K]
    score = np.einsum("nk,kd->nd", coef, gmm.means.reshape(K, D)) - coef.sum(axis=1, keepdims=True) * xb.reshape(n, D)
    score = score.reshape(xb.shape)
    return score if batched else score[0]


def pf_drift(x, t: float, gmm: GmmSpec) -> np.ndarray:
    """``dx/dt = -sigma(t) sigma'(t) score = -t * score`` for the VE schedule."""
    return -t * gmm_score(x, t, gmm)


def _rk4_path(x, t_start: float, t_end: float, gmm: GmmSpec, n_steps: int):
    h = (t_end - t_start) / n_steps
    for k in range(n_steps):
        t = t_start + k * h
        k1 = pf_drift(x, t, gmm)
        k2 = pf_drift(x + 0.5 * h * k1, t + 0.5 * h, gmm)
        k3 = pf_drift(x + 0.5 * h * k2, t + 0.5 * h, gmm)
        k4 = pf_drift(x + h * k3, t + h, gmm)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        yield x


def _check_interval(t_start, t_end, schedule, n_steps):
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    lo, hi = schedule.epsilon, schedule.horizon
    tol = 1e-9 * hi
    if not (lo - tol <= t_end <= hi + tol and lo - tol <= t_start <= hi + tol):
        raise ValueError(f"[{t_end}, {t_start}] not inside [{lo}, {hi}]")


def pf_ode_solve(x_start, t_start: float, t_end: float, gmm: GmmSpec, schedule: Schedule,
                 n_steps: int) -> np.ndarray:
    """Classical RK4 from ``t_start`` to ``t_end``; returns all ``n_steps + 1`` states."""
    _check_interval(t_start, t_end, schedule, n_steps)
    x = np.asarray(x_start, dtype=np.float64)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    for k, xk in enumerate(_rk4_path(x, t_start, t_end, gmm, n_steps), 1):
        out[k] = xk
    return out


def pf_ode_endpoint(x_start, t_start: float, t_end: float, gmm: GmmSpec, schedule: Schedule,
                    n_steps: int) -> np.ndarray:
    """Same integration as :func:`pf_ode_solve`, keeping only the final state."""
    _check_interval(t_start, t_end, schedule, n_steps)
    x = np.asarray(x_start, dtype=np.float64)
    for x in _rk4_path(x, t_start, t_end, gmm, n_steps):
        pass
    return x


def prior_params(gmm: GmmSpec, schedule: Schedule) -> tuple[np.ndarray, float]:
    """Mean image and per-pixel std of the Gaussian used for ``x_T``."""
    return gmm.mean_image, float(np.sqrt(gmm.mean_std ** 2 + schedule.horizon ** 2))


def sample_prior(gmm: GmmSpec, schedule: Schedule, n: int, rng: np.random.Generator) -> np.ndarray:
    mean, std = prior_params(gmm, schedule)
    return mean[None] + std * rng.standard_normal((n,) + gmm.image_shape)


def grid_times(schedule: Schedule, n_grid: int) -> np.ndarray:
    T, eps = schedule.horizon, schedule.epsilon
    t = T - (T - eps) * np.arange(n_grid) / (n_grid - 1)
    t[0], t[-1] = T, eps
    return t


def generate_dataset(gmm: GmmSpec, schedule: Schedule, n_traj: int, n_grid: int,
                     n_steps_per_grid: int, seed: int) -> TrajectoryDataset:
    if n_grid < 2:
        raise ValueError("n_grid must be >= 2")
    rng = np.random.default_rng(seed)
    times = grid_times(schedule, n_grid)
    x = sample_prior(gmm, schedule, n_traj, rng)
    states = np.empty((n_traj, n_grid) + gmm.image_shape, dtype=np.float32)
    states[:, 0] = x
    for g in range(1, n_grid):
        x = pf_ode_endpoint(x, times[g - 1], times[g], gmm, schedule, n_steps_per_grid)
        states[:, g] = x
    return TrajectoryDataset(times.astype(np.float32), states,
                             float(np.float32(schedule.epsilon)), float(np.float32(schedule.horizon)),
                             VE_TAG, seed)


def terminal_samples(gmm: GmmSpec, schedule: Schedule, n: int, seed: int,
                     n_steps: int = 512) -> np.ndarray:
    """Teacher outputs at ``epsilon`` for ``n`` fresh prior draws."""
    rng = np.random.default_rng(seed)
    x = sample_prior(gmm, schedule, n, rng)
    return pf_ode_endpoint(x, schedule.horizon, schedule.epsilon, gmm, schedule, n_steps)
