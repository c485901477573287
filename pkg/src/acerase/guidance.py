"""Noise-prediction compositions and numeric checks of the erasure algebra.

All functions operate on raw eps arrays so they can be verified in isolation:

* ``cfg_compose``   eps_u + omega * (eps_c - eps_u)
* ``ceg``           eps_u - eta_c * (eps_c - eps_u)        (conditional target)
* ``ueg``           eps_u + eta_u * (eps_c - eps_u)        (unconditional target)
* ``pg_ueg``        ueg - eta_p * gamma_p * (eps_cp - eps_u)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class VerificationError(AssertionError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class GuidanceConfig:
    eta_u: float = 3.0
    eta_c: float = 3.0
    eta_p: float = 3.0
    omega: float = 3.0
    gamma: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eta_u", "eta_c", "eta_p", "omega"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite")
            if name != "omega" and value < 0:
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, value)
        self.gamma = {int(k): float(v) for k, v in self.gamma.items()}
        for k, v in self.gamma.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"gamma[{k}] must be finite and non-negative")

    def require_gamma(self, priors) -> None:
        missing = [p for p in priors if p not in self.gamma]
        if missing:
            raise KeyError(f"gamma undefined for prior concepts {missing}")


def _same_shape(*arrays):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"dimension mismatch: {shape} vs {a.shape}")
    return arrays


def cfg_compose(eps_u, eps_c, omega: float) -> np.ndarray:
    eps_u, eps_c = _same_shape(eps_u, eps_c)
    if omega == 1.0:
        return eps_c.copy()
    return eps_u + omega * (eps_c - eps_u)


def ceg(eps_u_star, eps_c_star, eta_c: float) -> np.ndarray:
    eps_u_star, eps_c_star = _same_shape(eps_u_star, eps_c_star)
    return eps_u_star - eta_c * (eps_c_star - eps_u_star)


def ueg(eps_u_star, eps_c_star, eta_u: float) -> np.ndarray:
    eps_u_star, eps_c_star = _same_shape(eps_u_star, eps_c_star)
    return eps_u_star + eta_u * (eps_c_star - eps_u_star)


def pg_ueg(eps_u_star, eps_c_star, eps_cp_star, eta_u: float, eta_p: float, gamma_p) -> np.ndarray:
    eps_u_star, eps_c_star, eps_cp_star = _same_shape(eps_u_star, eps_c_star, eps_cp_star)
    gamma_p = np.asarray(gamma_p, dtype=np.float64)
    if np.any(gamma_p < 0):
        raise ValueError("gamma_p must be non-negative")
    if gamma_p.ndim == 1 and eps_u_star.ndim == 2:
        gamma_p = gamma_p[:, None]
    target = eps_u_star + eta_u * (eps_c_star - eps_u_star)
    return target - eta_p * gamma_p * (eps_cp_star - eps_u_star)


@dataclass
class Decomposition:
    composed: np.ndarray
    reconstructed: np.ndarray
    max_abs_diff: float


def verify_decomposition(eps_star_uncond, eps_star_target, eps_tuned_input_cond,
                         eta_u: float, omega: float) -> Decomposition:
    """Compare CFG over a UEG-aligned unconditional branch with its expanded form.

    The premise is exact: the tuned unconditional prediction *is* the UEG target
    and the tuned input-conditional prediction is supplied directly.
    """
    u, c, e = _same_shape(eps_star_uncond, eps_star_target, eps_tuned_input_cond)
    composed = cfg_compose(ueg(u, c, eta_u), e, omega)
    reconstructed = u + eta_u * (1.0 - omega) * (c - u) + omega * (e - u)
    diff = float(np.max(np.abs(composed - reconstructed))) if composed.size else 0.0
    return Decomposition(composed, reconstructed, diff)


@dataclass
class DenoisingConstants:
    C1: float
    C2: float
    C3: float
    C4: float

    def as_tuple(self):
        return (self.C1, self.C2, self.C3, self.C4)


def denoising_constants(sched, t: int, t_prev: int, omega: float, eta_u: float) -> DenoisingConstants:
    """Coefficients of the guided DDIM step written in terms of class-posterior gradients.

    z_prev = C1 z - C2 eps*_u + C3 grad log p(c_input | z) - C4 grad log p(c | z)
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    gap = np.sqrt(ab_prev) * (sched.beta[t] - sched.beta[t_prev])
    s = sched.sigma[t]
    return DenoisingConstants(
        C1=float(np.sqrt(ab_prev / ab)),
        C2=float(gap),
        C3=float(gap * s * omega),
        C4=float(gap * s * eta_u * (omega - 1.0)),
    )


def verify_denoising_constants(sched, t: int, t_prev: int, omega: float, eta_u: float) -> DenoisingConstants:
    consts = denoising_constants(sched, t, t_prev, omega, eta_u)
    for i, value in enumerate(consts.as_tuple(), start=1):
        if not value > 0.0:
            raise VerificationError(
                f"C{i} = {value!r} is not positive at (t={t}, t_prev={t_prev}, omega={omega}, eta_u={eta_u})",
                index=i,
            )
    return consts


def step_via_constants(consts: DenoisingConstants, z_t, eps_star_u, grad_input, grad_target) -> np.ndarray:
    return (consts.C1 * np.asarray(z_t) - consts.C2 * np.asarray(eps_star_u)
            + consts.C3 * np.asarray(grad_input) - consts.C4 * np.asarray(grad_target))
