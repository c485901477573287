"""Noise schedule, forward diffusion and deterministic DDIM stepping.

Conventions: ``alpha_bar[t]`` is the cumulative signal fraction at step ``t``
(``alpha_bar[0] == 1``), ``sigma[t] = sqrt(1 - alpha_bar[t])`` is the noise
level and ``beta[t] = sigma[t] / sqrt(alpha_bar[t])`` is the noise-to-signal
ratio that the DDIM update is linear in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .guidance import cfg_compose

# (z, t, conditions) -> eps; z has shape (n, D), conditions shape (n,)
EpsModel = Callable[[np.ndarray, "int | np.ndarray", np.ndarray], np.ndarray]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.size < 3:
            raise ScheduleError("alpha_bar must hold T+1 >= 3 values")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must equal 1")
        if not np.all(np.isfinite(ab)) or np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if np.any(np.diff(self.sigma) <= 0.0):
            raise ScheduleError("sigma must be strictly increasing (alpha_bar underflows)")
        if np.any(np.diff(self.beta) <= 0.0):
            raise ScheduleError("beta differences must be positive")

    @property
    def num_steps(self) -> int:
        return self.alpha_bar.size - 1

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def beta(self) -> np.ndarray:
        return np.sqrt((1.0 - self.alpha_bar) / self.alpha_bar)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ScheduleError(f"timestep out of range [0, {self.num_steps}]: {t}")


def build_schedule(
    T: int = 30,
    schedule_kind: str = "linear-beta",
    beta_start: float = 1e-4,
    beta_end: float = 0.2,
    cosine_offset: float = 0.008,
) -> NoiseSchedule:
    """Build a discrete schedule with ``T`` steps.

    ``linear-beta`` spaces per-step betas linearly between ``beta_start`` and
    ``beta_end``; ``cosine`` uses the squared-cosine cumulative profile.
    """
    if T < 2:
        raise ScheduleError("T must be at least 2")
    if schedule_kind == "linear-beta":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("per-step betas must lie in (0, 1)")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif schedule_kind == "cosine":
        s = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((s + cosine_offset) / (1.0 + cosine_offset) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        alpha_bar[0] = 1.0
        # the final value reaches ~0; clip to keep beta finite
        alpha_bar = np.clip(alpha_bar, 1e-5, 1.0)
    else:
        raise ScheduleError(f"unknown schedule kind: {schedule_kind!r}")
    return NoiseSchedule(alpha_bar)


def forward_diffuse(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noise ``z0`` to step ``t``; ``t`` may be a scalar or one value per row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match z0 shape {z0.shape}")
    sched.check_t(t)
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab) == 1 and z0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic DDIM update from ``t`` to ``t_prev``.

    Also runs in reverse (``t_prev > t``) for inversion via :func:`ddim_invert_step`.
    """
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    return _ddim_move(z_t, eps_hat, t, t_prev, sched)


def ddim_invert_step(z_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule) -> np.ndarray:
    if t_next <= t:
        raise ScheduleError(f"t_next ({t_next}) must be larger than t ({t})")
    return _ddim_move(z_t, eps_hat, t, t_next, sched)


def _ddim_move(z_t, eps_hat, t, t_to, sched):
    sched.check_t([t, t_to])
    ab, ab_to = sched.alpha_bar[t], sched.alpha_bar[t_to]
    b, b_to = sched.beta[t], sched.beta[t_to]
    return np.sqrt(ab_to / ab) * np.asarray(z_t) + np.sqrt(ab_to) * (b_to - b) * np.asarray(eps_hat)


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("timestep must be non-negative")
        if not np.all(np.isfinite(self.z)):
            raise ValueError(f"non-finite latent at t={self.t}")


@dataclass
class Trajectory:
    states: list[LatentState] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1].z

    def at(self, t: int) -> LatentState:
        for s in self.states:
            if s.t == t:
                return s
        raise KeyError(t)


def guided_eps(model: EpsModel, z, t, condition, omega: float, null: int) -> np.ndarray:
    """Classifier-free guided prediction for a batch sharing one condition."""
    n = z.shape[0]
    cond = np.broadcast_to(np.asarray(condition), (n,))
    eps_c = model(z, t, cond)
    if omega == 1.0:
        return eps_c
    eps_u = model(z, t, np.full(n, null))
    return cfg_compose(eps_u, eps_c, omega)


def ddim_sample(
    model: EpsModel,
    condition,
    omega: float,
    sched: NoiseSchedule,
    null: int,
    seed: int | None = None,
    n: int = 1,
    dim: int = 2,
    z_T: np.ndarray | None = None,
    t_stop: int = 0,
    timesteps: Sequence[int] | None = None,
) -> Trajectory:
    """Run guided DDIM from ``z_T`` (drawn from ``seed`` if absent) down to ``t_stop``.

    ``condition`` is a concept index (or the null index), or one index per row.
    """
    if z_T is None:
        z_T = np.random.default_rng(seed).standard_normal((n, dim))
    z = np.asarray(z_T, dtype=np.float64)
    T = sched.num_steps
    steps = list(range(T, t_stop - 1, -1)) if timesteps is None else list(timesteps)
    traj = Trajectory([LatentState(z, steps[0])])
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps = guided_eps(model, z, t, condition, omega, null)
        z = ddim_step(z, eps, t, t_prev, sched)
        traj.states.append(LatentState(z, t_prev))
    return traj
