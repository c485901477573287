"""Randomised checks of the guidance identities and of the decomposed denoising step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import guidance as G
from .diffusion import NoiseSchedule, build_schedule, ddim_step
from .universe import analytic_eps, class_posterior_grad, single_gaussian_universe


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def row(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<44} {self.value:.3e}  (tol {self.tolerance:.0e})"


def _check(name, value, tol) -> CheckResult:
    return CheckResult(name, float(value), tol, bool(value < tol))


def _instances(rng, n, dim=2):
    u, c, p = (rng.normal(size=(n, dim)) for _ in range(3))
    eta = rng.uniform(0, 10, size=(n, 1))
    return u, c, p, eta


def identity_checks(n: int = 10_000, seed: int = 0, tol: float = 1e-12) -> list[CheckResult]:
    """Reductions, mirror identity and homogeneity of cfg/ceg/ueg/pg_ueg."""
    rng = np.random.default_rng(seed)
    u, c, p, eta = _instances(rng, n)
    gamma = rng.uniform(0, 2, size=n)
    omega = rng.uniform(-5, 10, size=(n, 1))
    s = rng.uniform(-4, 4, size=(n, 1))
    eta_p = rng.uniform(0, 5, size=(n, 1))

    def maxabs(a, b):
        return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))

    cfg = np.stack([G.cfg_compose(u[i], c[i], float(omega[i, 0])) for i in range(n)])
    out = [
        _check("cfg omega=1 returns eps_c", maxabs(G.cfg_compose(u, c, 1.0), c), tol),
        _check("cfg eps_u=eps_c returns eps_u", maxabs(
            np.stack([G.cfg_compose(u[i], u[i], float(omega[i, 0])) for i in range(n)]), u), tol),
        _check("ceg(u,c,eta) = cfg(u,c,-eta)", maxabs(
            G.ceg(u, c, eta), np.stack([G.cfg_compose(u[i], c[i], -float(eta[i, 0])) for i in range(n)])), tol),
        _check("ueg(u,c,eta) = cfg(u,c,eta)", maxabs(
            G.ueg(u, c, eta), np.stack([G.cfg_compose(u[i], c[i], float(eta[i, 0])) for i in range(n)])), tol),
        _check("ueg eta=0 returns eps_u", maxabs(G.ueg(u, c, 0.0), u), tol),
        _check("pg_ueg eta_p=0 equals ueg", maxabs(G.pg_ueg(u, c, p, eta, 0.0, gamma), G.ueg(u, c, eta)), tol),
        _check("pg_ueg gamma=0 equals ueg", maxabs(G.pg_ueg(u, c, p, eta, eta_p, np.zeros(n)), G.ueg(u, c, eta)), tol),
        _check("mirror: ueg - u = -(ceg - u)", maxabs(G.ueg(u, c, eta) - u, -(G.ceg(u, c, eta) - u)), tol),
        _check("homogeneity of cfg", maxabs(
            np.stack([G.cfg_compose(s[i] * u[i], s[i] * c[i], float(omega[i, 0])) for i in range(n)]), s * cfg), tol),
        _check("homogeneity of ceg", maxabs(G.ceg(s * u, s * c, eta), s * G.ceg(u, c, eta)), tol),
        _check("homogeneity of ueg", maxabs(G.ueg(s * u, s * c, eta), s * G.ueg(u, c, eta)), tol),
        _check("homogeneity of pg_ueg", maxabs(G.pg_ueg(s * u, s * c, s * p, eta, eta_p, gamma),
                                               s * G.pg_ueg(u, c, p, eta, eta_p, gamma)), tol),
    ]
    return out


def decomposition_check(n: int = 10_000, seed: int = 1, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    u, c, e, _ = _instances(rng, n)
    eta_u = rng.uniform(0, 10, size=n)
    omega = rng.uniform(0, 10, size=n)
    worst = max(G.verify_decomposition(u[i], c[i], e[i], eta_u[i], omega[i]).max_abs_diff for i in range(n))
    return _check("CFG over UEG equals its expanded form", worst, tol)


def constants_check(sched: NoiseSchedule, omegas=(2.0, 7.5), eta_u: float = 3.0) -> CheckResult:
    """Minimum of all four step constants over every adjacent pair; must be positive."""
    worst = np.inf
    for omega in omegas:
        for t in range(1, sched.num_steps + 1):
            worst = min(worst, min(G.denoising_constants(sched, t, t - 1, omega, eta_u).as_tuple()))
    return CheckResult(f"denoising constants positive (omega in {list(omegas)})", float(worst), 0.0, bool(worst > 0))


def constants_pass_check(sched: NoiseSchedule, omega: float = 7.5, eta_u: float = 3.0, n: int = 64,
                         seed: int = 2, tol: float = 1e-10) -> CheckResult:
    """A full pass assembled from the four constants against direct CFG over a UEG branch.

    Two separated Gaussian concepts with exact scores; the "tuned" model is
    the exact premise: unconditional branch equal to UEG of the target,
    input-conditional branch equal to the oracle.
    """
    uni = single_gaussian_universe([[2.0, 0.0], [-2.0, 0.5]], [0.6, 0.8])
    target, c_input, null = 0, 1, uni.null
    rng = np.random.default_rng(seed)
    za = zb = rng.standard_normal((n, 2))
    worst = 0.0
    for t in range(sched.num_steps, 0, -1):
        eu = analytic_eps(uni, zb, t, null, sched)
        ec = analytic_eps(uni, zb, t, target, sched)
        ei = analytic_eps(uni, zb, t, c_input, sched)
        zb = ddim_step(zb, G.cfg_compose(G.ueg(eu, ec, eta_u), ei, omega), t, t - 1, sched)

        consts = G.verify_denoising_constants(sched, t, t - 1, omega, eta_u)
        eu_a = analytic_eps(uni, za, t, null, sched)
        za = G.step_via_constants(consts, za, eu_a,
                                  class_posterior_grad(uni, za, t, c_input, sched),
                                  class_posterior_grad(uni, za, t, target, sched))
        worst = max(worst, float(np.max(np.abs(za - zb))))
    return _check("step via constants equals direct CFG pass", worst, tol)


def run_all(sched: NoiseSchedule | None = None, n: int = 10_000, seed: int = 0) -> list[CheckResult]:
    sched = sched or build_schedule()
    return [*identity_checks(n, seed), decomposition_check(n, seed + 1), constants_check(sched),
            constants_pass_check(sched, seed=seed + 2)]


def format_table(results: list[CheckResult]) -> str:
    return "\n".join(r.row() for r in results) + "\n"
