"""Erasure fine-tuning: training latents, alignment losses, gamma estimation and the training loop.

The frozen base model supplies every guidance target; targets are plain arrays,
so no gradient can reach them.  Only the LoRA tensors are updated.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import guidance as G
from .denoiser import (
    DenoiserParams,
    Denoiser,
    LoraAdapter,
    backward,
    forward,
    init_adapter,
    make_optimizer,
)
from .diffusion import LatentState, NoiseSchedule, ddim_sample
from .guidance import GuidanceConfig

log = logging.getLogger(__name__)

VARIANTS = {
    1: {"use_unc": False, "use_cons": False, "use_cor": False},
    2: {"use_unc": True, "use_cons": False, "use_cor": False},
    3: {"use_unc": True, "use_cons": True, "use_cor": False},
    4: {"use_unc": True, "use_cons": True, "use_cor": True},
}


class TrainingError(RuntimeError):
    pass


@dataclass
class ErasureRunConfig:
    target: int
    priors: list[int] | None = None
    lambda_punc: float = 0.19
    lambda_cons: float = 0.8
    lambda_esd: float = 0.01
    steps: int = 1500
    lr: float = 7e-5
    optimizer: str = "adam"
    batch_size: int = 1
    prior_sample_count: int = 2
    use_unc: bool = True
    use_cons: bool = True
    use_cor: bool = True
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    latent_cfg_scale: float = 3.0
    latent_source: str = "base"
    rank: int = 4
    lora_scale: float = 4.0
    gamma_samples: int = 15
    fixed_gamma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.guidance, dict):
            self.guidance = GuidanceConfig(**self.guidance)

    def validate(self, universe) -> "ErasureRunConfig":
        if not 0 <= self.target < universe.K:
            raise ValueError(f"target {self.target} is not a concept of the universe")
        if self.priors is None:
            self.priors = [k for k in range(universe.K) if k != self.target]
        self.priors = [int(p) for p in self.priors]
        if self.target in self.priors:
            raise ValueError("target concept must not be in the prior set")
        if any(not 0 <= p < universe.K for p in self.priors):
            raise ValueError("prior concept out of range")
        if (self.use_cons or self.use_unc) and not 1 <= self.prior_sample_count <= len(self.priors):
            raise ValueError("prior_sample_count must lie in [1, |priors|]")
        if self.use_cor and not self.use_unc:
            raise ValueError("use_cor requires use_unc")
        for name in ("lambda_punc", "lambda_cons", "lambda_esd", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.active_weights() == {}:
            raise ValueError("all enabled loss weights are zero")
        return self

    def active_weights(self) -> dict[str, float]:
        weights = {"esd": self.lambda_esd}
        if self.use_unc:
            weights["punc"] = self.lambda_punc
        if self.use_cons:
            weights["cons"] = self.lambda_cons
        return {k: v for k, v in weights.items() if v > 0}

    @property
    def eta_p_effective(self) -> float:
        return self.guidance.eta_p if self.use_cor else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"]["gamma"] = {str(k): v for k, v in self.guidance.gamma.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ErasureRunConfig":
        d = dict(d)
        g = dict(d.pop("guidance", {}))
        g["gamma"] = {int(k): v for k, v in g.get("gamma", {}).items()}
        return cls(guidance=GuidanceConfig(**g), **d)

    def variant(self, row: int) -> "ErasureRunConfig":
        d = self.to_dict()
        d.update(VARIANTS[row])
        return ErasureRunConfig.from_dict(d)


@dataclass
class GammaTable:
    values: dict[int, float]
    sample_count: int
    seed: int | None

    def __getitem__(self, prior: int) -> float:
        try:
            return self.values[prior]
        except KeyError:
            raise KeyError(f"gamma undefined for prior concept {prior}") from None

    def lookup(self, priors) -> np.ndarray:
        return np.array([self[int(p)] for p in priors])

    def to_dict(self) -> dict:
        return {"values": {str(k): v for k, v in self.values.items()},
                "sample_count": self.sample_count, "seed": self.seed}


# ---------------------------------------------------------------- latents


def make_training_batch(base: DenoiserParams, target: int, sched: NoiseSchedule, latent_cfg_scale: float,
                        rng: np.random.Generator, n: int = 1, adapter: LoraAdapter | None = None):
    """Partially denoised target-concept latents: (z_t of shape (n, D), t of shape (n,)).

    Each row draws its own z_T and t in {1..T}; rows are denoised together and
    snapshotted when they reach their own t.  With ``adapter`` the latents come
    from the model being tuned rather than the frozen base.
    """
    T = sched.num_steps
    D = base.arch.data_dim
    null = base.arch.num_concepts
    z = rng.standard_normal((n, D))
    t = rng.integers(1, T + 1, size=n)
    out = z.copy()
    model = Denoiser(base, adapter)
    t_min = int(t.min())
    if t_min < T:
        traj = ddim_sample(model, target, latent_cfg_scale, sched, null, z_T=z, t_stop=t_min)
        for state in traj.states:
            rows = t == state.t
            out[rows] = state.z[rows]
    return out, t


def make_training_latent(base: DenoiserParams, target: int, sched: NoiseSchedule,
                         latent_cfg_scale: float = 3.0, seed=None, adapter: LoraAdapter | None = None) -> LatentState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z, t = make_training_batch(base, target, sched, latent_cfg_scale, rng, n=1, adapter=adapter)
    return LatentState(z[0], int(t[0]))


# ---------------------------------------------------------------- gamma


def compute_gamma_p(base: DenoiserParams, universe, target: int, prior: int, sched: NoiseSchedule,
                    n_samples: int = 15, seed: int = 0, omega: float = 3.0) -> float:
    """Alignment ratio mean a(x, prior) / mean a(x, target) over target samples x."""
    from .evaluation import concept_alignment

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = ddim_sample(Denoiser(base), target, omega, sched, universe.null, seed=seed, n=n_samples).final
    num = float(np.mean(concept_alignment(x, prior, universe)))
    den = float(np.mean(concept_alignment(x, target, universe)))
    if den < 1e-9:
        raise TrainingError("target alignment below 1e-9: base model does not produce the target")
    return num / den


def compute_gamma_table(base, universe, target, priors, sched, n_samples=15, seed=0,
                        omega=3.0, fixed: float | None = None) -> GammaTable:
    if fixed is not None:
        return GammaTable({int(p): float(fixed) for p in priors}, 0, None)
    values = {int(p): compute_gamma_p(base, universe, target, p, sched, n_samples, seed, omega) for p in priors}
    return GammaTable(values, n_samples, seed)


# ---------------------------------------------------------------- losses


@dataclass
class LossTerm:
    value: float
    grads: dict[str, np.ndarray]


def frozen_eps(base: DenoiserParams, z, t, condition) -> np.ndarray:
    n = np.atleast_2d(z).shape[0]
    return forward(base, None, z, t, np.full(n, condition))


def _align(base, adapter, z, t, conditions, targets) -> LossTerm:
    """Mean over rows of ||eps_theta(z, cond) - target||^2 with adapter gradients."""
    z = np.atleast_2d(z)
    out, cache = forward(base, adapter, z, t, conditions, keep_cache=True)
    r = out - np.asarray(targets)
    n = z.shape[0]
    return LossTerm(float(np.sum(r * r) / n), backward(base, adapter, cache, 2.0 * r / n))


def _mean_terms(terms: list[LossTerm]) -> LossTerm:
    k = len(terms)
    value = sum(term.value for term in terms) / k
    grads = {name: sum(term.grads[name] for term in terms) / k for name in terms[0].grads}
    return LossTerm(value, grads)


def loss_esd(base, adapter, z, t, target: int, eta_c: float) -> LossTerm:
    eps_u = frozen_eps(base, z, t, base.arch.num_concepts)
    eps_c = frozen_eps(base, z, t, target)
    goal = G.ceg(eps_u, eps_c, eta_c)
    return _align(base, adapter, z, t, np.full(len(goal), target), goal)


def loss_unc(base, adapter, z, t, target: int, eta_u: float) -> LossTerm:
    null = base.arch.num_concepts
    eps_u = frozen_eps(base, z, t, null)
    eps_c = frozen_eps(base, z, t, target)
    goal = G.ueg(eps_u, eps_c, eta_u)
    return _align(base, adapter, z, t, np.full(len(goal), null), goal)


def loss_cons(base, adapter, z, t, priors) -> LossTerm:
    if len(priors) == 0:
        raise ValueError("empty prior sample")
    terms = []
    for p in priors:
        goal = frozen_eps(base, z, t, p)
        terms.append(_align(base, adapter, z, t, np.full(len(goal), p), goal))
    return _mean_terms(terms)


def loss_punc(base, adapter, z, t, target: int, priors, gamma: GammaTable, eta_u: float, eta_p: float) -> LossTerm:
    if len(priors) == 0:
        raise ValueError("empty prior sample")
    null = base.arch.num_concepts
    eps_u = frozen_eps(base, z, t, null)
    eps_c = frozen_eps(base, z, t, target)
    terms = []
    for p in priors:
        gamma_p = gamma[int(p)]
        goal = G.pg_ueg(eps_u, eps_c, frozen_eps(base, z, t, p), eta_u, eta_p, gamma_p)
        terms.append(_align(base, adapter, z, t, np.full(len(goal), null), goal))
    return _mean_terms(terms)


def loss_total(components: dict[str, LossTerm], weights: dict[str, float]) -> LossTerm:
    """Weighted sum of the enabled loss terms."""
    weights = {k: w for k, w in weights.items() if k in components}
    if not any(w != 0 for w in weights.values()):
        raise ValueError("all loss weights are zero")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, w in weights.items():
        term = components[name]
        value += w * term.value
        for k, g in term.grads.items():
            grads[k] = grads[k] + w * g if k in grads else w * g
    return LossTerm(value, grads)


def step_losses(base, adapter, z, t, config: ErasureRunConfig, priors, gamma: GammaTable) -> tuple[LossTerm, dict]:
    g = config.guidance
    comps = {"esd": loss_esd(base, adapter, z, t, config.target, g.eta_c)}
    if config.use_unc:
        comps["punc"] = loss_punc(base, adapter, z, t, config.target, priors, gamma, g.eta_u, config.eta_p_effective)
    if config.use_cons:
        comps["cons"] = loss_cons(base, adapter, z, t, priors)
    return loss_total(comps, config.active_weights()), comps


# ---------------------------------------------------------------- loop


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("step", "loss_esd", "loss_punc", "loss_cons", "total", "adapter_norm")

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def erase_concept(base: DenoiserParams, config: ErasureRunConfig, universe, sched: NoiseSchedule,
                  gamma: GammaTable | None = None) -> tuple[LoraAdapter, TrainingLog, GammaTable]:
    """Train a LoRA adapter that erases ``config.target`` from both prediction branches."""
    config.validate(universe)
    train_seq, adapter_seq, gamma_seq = np.random.SeedSequence(config.seed).spawn(3)
    rng = np.random.default_rng(train_seq)
    adapter = init_adapter(base, config.rank, config.lora_scale, seed=int(adapter_seq.generate_state(1)[0]))
    if gamma is None:
        if config.use_cor:
            gamma = compute_gamma_table(base, universe, config.target, config.priors, sched,
                                        config.gamma_samples, seed=int(gamma_seq.generate_state(1)[0]),
                                        omega=config.latent_cfg_scale, fixed=config.fixed_gamma)
        else:
            gamma = GammaTable({p: 0.0 for p in config.priors}, 0, None)
    missing = [p for p in config.priors if p not in gamma.values]
    if missing and config.use_cor:
        raise KeyError(f"gamma undefined for prior concepts {missing}")

    opt = make_optimizer(config.optimizer, config.lr)
    tensors = adapter.tensors()
    history = TrainingLog()
    for step in range(config.steps):
        z, t = make_training_batch(base, config.target, sched, config.latent_cfg_scale, rng,
                                   config.batch_size, adapter=adapter if config.latent_source == "tuned" else None)
        priors = rng.choice(config.priors, size=config.prior_sample_count, replace=False)
        total, comps = step_losses(base, adapter, z, t, config, priors, gamma)
        if not np.isfinite(total.value):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.step(tensors, total.grads)
        history.rows.append({
            "step": step,
            "loss_esd": comps["esd"].value,
            "loss_punc": comps["punc"].value if "punc" in comps else "",
            "loss_cons": comps["cons"].value if "cons" in comps else "",
            "total": total.value,
            "adapter_norm": adapter.norm(),
        })
    return adapter, history, gamma
