"""Toy concept universe: labelled 2-D Gaussian mixtures with exact diffused scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .diffusion import NoiseSchedule


@dataclass(frozen=True)
class ConceptUniverse:
    """K concepts, each a Gaussian mixture; condition index ``K`` is the null condition.

    Component arrays are flattened over all concepts: ``owner[j]`` names the
    concept that component ``j`` belongs to.
    """

    weights: np.ndarray  # (M,) component weight within its concept
    means: np.ndarray  # (M, D)
    covs: np.ndarray  # (M, D, D)
    owner: np.ndarray  # (M,) int
    num_concepts: int
    layout_seed: int = 0
    support_radius: float = 3.5

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covs, dtype=np.float64)
        owner = np.asarray(self.owner, dtype=np.int64)
        for name, arr in (("weights", w), ("means", mu), ("covs", cov), ("owner", owner)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        M = w.size
        if mu.shape[0] != M or cov.shape[0] != M or owner.size != M:
            raise ValueError("component arrays disagree in length")
        if set(owner.tolist()) != set(range(self.num_concepts)):
            raise ValueError("every concept needs at least one component")
        for k in range(self.num_concepts):
            if not np.isclose(w[owner == k].sum(), 1.0, rtol=0, atol=1e-12):
                raise ValueError(f"weights of concept {k} do not sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-14):
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariances must be positive definite")

    @property
    def K(self) -> int:
        return self.num_concepts

    @property
    def null(self) -> int:
        return self.num_concepts

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def concept_mean(self, k: int) -> np.ndarray:
        sel = self.owner == k
        return self.weights[sel] @ self.means[sel]

    def concept_cov(self, k: int) -> np.ndarray:
        sel = self.owner == k
        w, mu, cov = self.weights[sel], self.means[sel], self.covs[sel]
        m = w @ mu
        d = mu - m
        return np.einsum("j,jab->ab", w, cov) + np.einsum("j,ja,jb->ab", w, d, d)

    def concept_std(self, k: int) -> float:
        return float(np.sqrt(np.linalg.eigvalsh(self.concept_cov(k)).max()))

    def separation(self) -> float:
        """Minimum centroid distance in units of the largest concept std."""
        cents = np.stack([self.concept_mean(k) for k in range(self.K)])
        d = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
        d[np.diag_indices(self.K)] = np.inf
        return float(d.min() / max(self.concept_std(k) for k in range(self.K)))

    def log_none_density(self) -> float:
        """Flat density of the "none" class.

        It equals an average concept's density at ``support_radius`` Mahalanobis
        units from its mode, so points off every concept's support align with none.
        """
        peaks = [
            self.weights[j] / (2 * np.pi) ** (self.dim / 2) / np.sqrt(np.linalg.det(self.covs[j]))
            for j in range(self.weights.size)
        ]
        # per-concept peak, averaged; the 1/K factor is the equal concept prior
        peak = np.mean([max(p for p, o in zip(peaks, self.owner) if o == k) for k in range(self.K)])
        return float(np.log(peak / self.K) - 0.5 * self.support_radius**2)

    def log_weight_table(self) -> np.ndarray:
        """(K+1, M) log-weights of each component under each condition."""
        table = np.full((self.K + 1, self.weights.size), -np.inf)
        for k in range(self.K):
            sel = self.owner == k
            table[k, sel] = np.log(self.weights[sel])
        table[self.K] = np.log(self.weights / self.K)
        return table

    def sample(self, condition: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` data points from a concept (or from the null union)."""
        probs = np.exp(self.log_weight_table()[condition])
        comp = rng.choice(self.weights.size, size=n, p=probs / probs.sum())
        chol = np.linalg.cholesky(self.covs)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nab,nb->na", chol[comp], noise)


def canonical_universe(
    K: int = 10,
    radius: float = 5.0,
    components: int = 2,
    spread: float = 0.2,
    std_range: tuple[float, float] = (0.3, 0.4),
    layout_seed: int = 0,
) -> ConceptUniverse:
    """Concepts evenly placed on a circle, each a small random mixture."""
    rng = np.random.default_rng(layout_seed)
    weights, means, covs, owner = [], [], [], []
    for k in range(K):
        angle = 2.0 * np.pi * k / K
        centre = radius * np.array([np.cos(angle), np.sin(angle)])
        w = rng.dirichlet(np.full(components, 4.0))
        offsets = rng.standard_normal((components, 2)) * spread
        offsets -= w @ offsets  # keep the concept centroid on the circle
        for j in range(components):
            theta = rng.uniform(0, np.pi)
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            s = rng.uniform(*std_range, size=2)
            cov = rot @ np.diag(s**2) @ rot.T
            weights.append(w[j])
            means.append(centre + offsets[j])
            covs.append(0.5 * (cov + cov.T))
            owner.append(k)
    uni = ConceptUniverse(np.array(weights), np.array(means), np.array(covs), np.array(owner), K, layout_seed)
    return uni


def single_gaussian_universe(means, stds) -> ConceptUniverse:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (means.shape[0],))
    covs = np.stack([np.eye(means.shape[1]) * s**2 for s in stds])
    K = means.shape[0]
    return ConceptUniverse(np.ones(K), means, covs, np.arange(K), K)


def _as_rows(z, conditions):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    cond = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (z.shape[0],))
    return z, cond


def _diffused_components(universe: ConceptUniverse, alpha_bar: np.ndarray):
    """Means, precisions and log-normalisers of every component at signal level(s).

    ``alpha_bar`` has shape (n,); outputs carry a leading n axis.
    """
    D = universe.dim
    a = alpha_bar[:, None, None, None]
    cov = a * universe.covs[None] + (1.0 - a) * np.eye(D)
    if np.any(np.linalg.eigvalsh(cov) <= 1e-300):
        raise FloatingPointError("degenerate diffused covariance")
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    mean = np.sqrt(alpha_bar)[:, None, None] * universe.means[None]
    return mean, prec, logdet


def log_density_and_score(universe: ConceptUniverse, z, t, conditions, sched: NoiseSchedule):
    """log q_t(z | condition) and its gradient, row by row."""
    z, cond = _as_rows(z, conditions)
    n, D = z.shape
    sched.check_t(t)
    t = np.broadcast_to(np.asarray(t), (n,))
    if np.any(cond < 0) or np.any(cond > universe.K):
        raise ValueError("condition index out of range")
    mean, prec, logdet = _diffused_components(universe, sched.alpha_bar[t])
    diff = z[:, None, :] - mean  # (n, M, D)
    pd = np.einsum("nmab,nmb->nma", prec, diff)
    maha = np.einsum("nma,nma->nm", diff, pd)
    log_norm = -0.5 * (maha + logdet + D * np.log(2 * np.pi))
    logits = log_norm + universe.log_weight_table()[cond]
    logq = logsumexp(logits, axis=1)
    resp = np.exp(logits - logq[:, None])
    score = -np.einsum("nm,nma->na", resp, pd)
    return logq, score


def analytic_score(universe, z, t, conditions, sched) -> np.ndarray:
    return log_density_and_score(universe, z, t, conditions, sched)[1]


def analytic_eps(universe, z, t, conditions, sched) -> np.ndarray:
    """Exact eps-prediction -sigma_t * grad log q_t(z | condition)."""
    z, cond = _as_rows(z, conditions)
    t_rows = np.broadcast_to(np.asarray(t), (z.shape[0],))
    score = analytic_score(universe, z, t_rows, cond, sched)
    return -sched.sigma[t_rows][:, None] * score


def class_posterior_grad(universe, z, t, condition, sched) -> np.ndarray:
    """grad_z log p(condition | z_t) = grad log q_t(z | c) - grad log q_t(z | null)."""
    z, cond = _as_rows(z, condition)
    return analytic_score(universe, z, t, cond, sched) - analytic_score(universe, z, t, universe.null, sched)


class AnalyticModel:
    """Eps-model callable backed by the exact mixture score."""

    def __init__(self, universe: ConceptUniverse, sched: NoiseSchedule):
        self.universe = universe
        self.sched = sched

    def __call__(self, z, t, conditions):
        return analytic_eps(self.universe, z, t, conditions, self.sched)


def concept_posterior(universe: ConceptUniverse, x, with_none: bool = False) -> np.ndarray:
    """Posterior over concepts under equal concept priors, at the data level.

    Returns (n, K) probabilities; they sum to 1 over concepts plus the "none"
    class, whose probability is the last column when ``with_none`` is set.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, D = x.shape
    diff = x[:, None, :] - universe.means[None]
    prec = np.linalg.inv(universe.covs)
    _, logdet = np.linalg.slogdet(universe.covs)
    maha = np.einsum("nma,mab,nmb->nm", diff, prec, diff)
    log_comp = -0.5 * (maha + logdet) + np.log(universe.weights)
    per_concept = np.full((n, universe.K), -np.inf)
    for k in range(universe.K):
        per_concept[:, k] = logsumexp(log_comp[:, universe.owner == k], axis=1) - np.log(universe.K)
    per_concept -= 0.5 * D * np.log(2 * np.pi)
    logits = np.concatenate([per_concept, np.full((n, 1), universe.log_none_density())], axis=1)
    post = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return post if with_none else post[:, :-1]


NONE = -1


def classify(universe: ConceptUniverse, x) -> np.ndarray:
    """Most probable concept, or ``NONE`` (-1) for points off every concept's support."""
    post = concept_posterior(universe, x, with_none=True)
    label = np.argmax(post, axis=1)
    return np.where(label == universe.K, NONE, label)
