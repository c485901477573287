"""Conditional eps-predictor: a SiLU MLP with sinusoidal time and learned concept embeddings.

Dense weights are stored (out, in); a layer computes ``x @ W.T + b``.  A LoRA
adapter adds ``(scale / rank) * B @ A`` to each of the four dense matrices.
Backpropagation is written out by hand so it can be checked against finite
differences in float64.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .diffusion import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)

LAYERS = ("W1", "W2", "W3", "W4")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    num_concepts: int = 10
    data_dim: int = 2
    hidden: int = 128
    time_dim: int = 16
    concept_dim: int = 8
    num_steps: int = 30
    max_freq: float = 100.0

    def __post_init__(self):
        if self.hidden < 8:
            raise ValueError("hidden width must be at least 8")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time embedding dim must be even and >= 2")
        if self.concept_dim < 2:
            raise ValueError("concept embedding dim must be >= 2")
        if self.num_concepts < 1 or self.data_dim < 1 or self.num_steps < 2:
            raise ValueError("invalid architecture dimensions")

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.concept_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H = self.hidden
        return {
            "embed": (self.num_concepts + 1, self.concept_dim),
            "W1": (H, self.input_dim), "b1": (H,),
            "W2": (H, H), "b2": (H,),
            "W3": (H, H), "b3": (H,),
            "W4": (self.data_dim, H), "b4": (self.data_dim,),
        }

    def parameter_count(self) -> int:
        H, F, D = self.hidden, self.input_dim, self.data_dim
        return (self.num_concepts + 1) * self.concept_dim + H * F + H + 2 * (H * H + H) + D * H + D

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenoiserParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.arch.shapes()
        if set(self.tensors) != set(shapes):
            raise ValueError(f"tensor names {sorted(self.tensors)} do not match architecture")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


@dataclass
class LoraAdapter:
    rank: int
    scale: float
    A: dict[str, np.ndarray] = field(default_factory=dict)  # (r, in)
    B: dict[str, np.ndarray] = field(default_factory=dict)  # (out, r)

    @property
    def factor(self) -> float:
        return self.scale / self.rank

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"{k}.A": v for k, v in self.A.items()}
        out.update({f"{k}.B": v for k, v in self.B.items()})
        return out

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.rank, self.scale,
                           {k: v.copy() for k, v in self.A.items()},
                           {k: v.copy() for k, v in self.B.items()})

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self.tensors().values())))

    def check_compatible(self, params: DenoiserParams) -> None:
        for name in self.A:
            m, n = params[name].shape
            a, b = self.A[name], self.B[name]
            if a.shape[1] != n or b.shape[0] != m or a.shape[0] != b.shape[1]:
                raise ValueError(f"adapter for {name} is not shape-compatible with {params[name].shape}")


def init_denoiser(arch: Architecture, seed: int) -> DenoiserParams:
    """Uniform fan-in scaled weights, zero biases, unit-scale embedding table."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.shapes().items():
        if name == "embed":
            tensors[name] = rng.uniform(-1.0, 1.0, size=shape)
        elif name.startswith("W"):
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return DenoiserParams(arch, tensors)


def init_adapter(params: DenoiserParams, rank: int = 4, scale: float = 4.0, seed: int = 0,
                 targets=LAYERS) -> LoraAdapter:
    """Zero-initialised B and small random A for every target matrix.

    A matrix narrower than ``rank`` (the output layer when ``data_dim < rank``)
    gets the largest rank its shape allows.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    hidden_dims = [min(params[name].shape) for name in targets if min(params[name].shape) > params.arch.data_dim]
    if hidden_dims and rank > min(hidden_dims):
        raise ValueError(f"rank {rank} exceeds matrix dimension {min(hidden_dims)}")
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter(rank, float(scale))
    for name in targets:
        m, n = params[name].shape
        r = min(rank, m, n)
        adapter.A[name] = rng.uniform(-1.0, 1.0, size=(r, n)) / np.sqrt(n)
        adapter.B[name] = np.zeros((m, r))
    return adapter


def merge_adapter(params: DenoiserParams, adapter: LoraAdapter) -> DenoiserParams:
    adapter.check_compatible(params)
    merged = params.copy()
    for name in adapter.A:
        merged.tensors[name] = params[name] + adapter.factor * (adapter.B[name] @ adapter.A[name])
    return merged


def time_embedding(t, arch: Architecture) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = arch.time_dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(arch.max_freq), half))
    ang = (t / arch.num_steps)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _rows(z, t, conditions):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = z.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    cond = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (n,))
    return z, t, cond


def forward(params: DenoiserParams, adapter: LoraAdapter | None, z, t, conditions, keep_cache=False):
    arch = params.arch
    z, t, cond = _rows(z, t, conditions)
    if np.any(cond < 0) or np.any(cond > arch.num_concepts):
        raise ValueError("condition index out of range")
    if adapter is not None:
        adapter.check_compatible(params)
    x = np.concatenate([z, time_embedding(t, arch), params["embed"][cond]], axis=1)
    cache = {"cond": cond, "inputs": [], "pre": []}
    h = x
    for i, name in enumerate(LAYERS):
        W, b = params[name], params["b" + name[1:]]
        cache["inputs"].append(h)
        pre = h @ W.T + b
        if adapter is not None and name in adapter.A:
            pre = pre + adapter.factor * ((h @ adapter.A[name].T) @ adapter.B[name].T)
        if i < len(LAYERS) - 1:
            cache["pre"].append(pre)
            h = _silu(pre)
        else:
            h = pre
    return (h, cache) if keep_cache else h


def backward(params: DenoiserParams, adapter: LoraAdapter | None, cache, grad_out, wrt: str = "adapter"):
    """Gradients of a scalar loss given dL/d(output).

    ``wrt="adapter"`` returns ``{"W1.A": ..., "W1.B": ...}``; ``wrt="params"``
    returns gradients for every base tensor (embedding table included).
    """
    grads = {}
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(LAYERS) - 1, -1, -1):
        name = LAYERS[i]
        x = cache["inputs"][i]
        if i < len(LAYERS) - 1:
            g = g * _silu_grad(cache["pre"][i])
        W = params[name]
        has_lora = adapter is not None and name in adapter.A
        if wrt == "params":
            grads[name] = g.T @ x
            grads["b" + name[1:]] = g.sum(axis=0)
        elif has_lora:
            A, B, f = adapter.A[name], adapter.B[name], adapter.factor
            gB = g @ B  # (n, r)
            grads[f"{name}.A"] = f * (gB.T @ x)
            grads[f"{name}.B"] = f * (g.T @ (x @ A.T))
        if i > 0 or wrt == "params":
            g_in = g @ W
            if has_lora:
                g_in = g_in + adapter.factor * ((g @ adapter.B[name]) @ adapter.A[name])
            g = g_in
    if wrt == "params":
        arch = params.arch
        g_embed = g[:, arch.data_dim + arch.time_dim:]
        grads["embed"] = np.zeros_like(params["embed"])
        np.add.at(grads["embed"], cache["cond"], g_embed)
    return grads


def predict_eps(params: DenoiserParams, adapter: LoraAdapter | None, z_t, t, conditions) -> np.ndarray:
    return forward(params, adapter, z_t, t, conditions)


class Denoiser:
    """Eps-model callable over fixed parameters and an optional adapter."""

    def __init__(self, params: DenoiserParams, adapter: LoraAdapter | None = None):
        self.params = params
        self.adapter = adapter

    def __call__(self, z, t, conditions):
        return forward(self.params, self.adapter, z, t, conditions)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors, grads) -> None:
        for name, g in grads.items():
            tensors[name] -= self.lr * g


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def denoising_loss(params, z0, t, eps, cond, sched, adapter=None, wrt="params"):
    """Mean over the batch of ||eps - eps_hat(z_t, c, t)||^2, with its gradient."""
    z_t = forward_diffuse(z0, t, eps, sched)
    out, cache = forward(params, adapter, z_t, t, cond, keep_cache=True)
    r = out - eps
    n = z0.shape[0]
    loss = float(np.sum(r * r) / n)
    return loss, backward(params, adapter, cache, 2.0 * r / n, wrt=wrt)


def train_base(
    universe,
    sched: NoiseSchedule,
    steps: int = 20000,
    lr: float = 1e-3,
    cond_dropout_p: float = 0.1,
    seed: int = 0,
    arch: Architecture | None = None,
    batch_size: int = 256,
    optimizer: str = "adam",
    lr_schedule: str = "cosine",
    params: DenoiserParams | None = None,
    log_every: int = 0,
    history: list | None = None,
) -> DenoiserParams:
    """Fit the eps-predictor to the universe by minimising the denoising loss.

    With probability ``cond_dropout_p`` each label is replaced by the null token,
    which trains the unconditional branch on the union of all concepts.
    """
    if not 0.0 <= cond_dropout_p < 1.0:
        raise ValueError("cond_dropout_p must lie in [0, 1)")
    if arch is None:
        arch = Architecture(num_concepts=universe.K, data_dim=universe.dim, num_steps=sched.num_steps)
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_denoiser(arch, int(rng.integers(2**31)))
    params = params.copy()
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr schedule {lr_schedule!r}")
    opt = make_optimizer(optimizer, lr)
    T = sched.num_steps
    for step in range(steps):
        if lr_schedule == "cosine":
            opt.lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        labels = rng.integers(universe.K, size=batch_size)
        z0 = _sample_labelled(universe, labels, rng)
        cond = np.where(rng.random(batch_size) < cond_dropout_p, universe.null, labels)
        t = rng.integers(1, T + 1, size=batch_size)
        eps = rng.standard_normal(z0.shape)
        loss, grads = denoising_loss(params, z0, t, eps, cond, sched)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at step {step}")
        opt.step(params.tensors, grads)
        if history is not None:
            history.append(loss)
        if log_every and step % log_every == 0:
            log.info("train_base step %d loss %.5f", step, loss)
    return params


def _sample_labelled(universe, labels, rng):
    """One data point per label, drawn from the label's mixture."""
    n = labels.size
    logw = universe.log_weight_table()
    probs = np.exp(logw[labels])
    u = rng.random(n)[:, None]
    comp = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), universe.weights.size - 1)
    chol = np.linalg.cholesky(universe.covs)
    noise = rng.standard_normal((n, universe.dim))
    return universe.means[comp] + np.einsum("nab,nb->na", chol[comp], noise)
