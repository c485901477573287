"""Oracle metrics: exact concept alignment, displacement, erasure reports and the ablation runner."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .checkpoint import dumps, write_atomic
from .denoiser import Denoiser, DenoiserParams, LoraAdapter
from .diffusion import NoiseSchedule, ddim_sample
from .editing import MODES, EditSpec, edit_batch
from .universe import NONE, classify, concept_posterior

PROTOCOLS = ("generation", "editing")
MIN_GROUP_SAMPLES = 100


class EvaluationError(RuntimeError):
    pass


def concept_alignment(x, concept: int, universe) -> np.ndarray:
    """Posterior probability of ``concept`` for each point, in [0, 1]."""
    return concept_posterior(universe, x)[:, concept]


def displacement(a, b) -> np.ndarray:
    """Euclidean distance between matched outputs of two models."""
    return np.linalg.norm(np.atleast_2d(a) - np.atleast_2d(b), axis=1)


# ---------------------------------------------------------------- report types


@dataclass
class GroupMetrics:
    """Metrics of one concept group (erased or prior) under one protocol.

    ``alignment`` is the mean oracle posterior of the concept each output was
    meant to show (the "none" class takes its share of the mass), ``rate`` the
    fraction oracle-classified to that concept.  ``base_*`` are the same
    quantities for the unerased model on identical noise.
    """

    alignment: float
    rate: float
    displacement: float
    count: int
    base_alignment: float
    base_rate: float
    per_concept_rate: dict[int, float]
    per_concept_base_rate: dict[int, float]
    none_rate: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_concept_rate"] = {str(k): v for k, v in self.per_concept_rate.items()}
        d["per_concept_base_rate"] = {str(k): v for k, v in self.per_concept_base_rate.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroupMetrics":
        d = dict(d)
        d["per_concept_rate"] = {int(k): v for k, v in d["per_concept_rate"].items()}
        d["per_concept_base_rate"] = {int(k): v for k, v in d["per_concept_base_rate"].items()}
        return cls(**d)


@dataclass
class ProtocolMetrics:
    protocol: str
    erased: GroupMetrics
    prior: GroupMetrics
    a_d: float = field(init=False)
    d_d: float = field(init=False)

    def __post_init__(self):
        self.a_d = self.prior.alignment - self.erased.alignment
        self.d_d = self.erased.displacement - self.prior.displacement

    @property
    def a_e(self) -> float:
        return self.erased.alignment

    @property
    def a_p(self) -> float:
        return self.prior.alignment

    @property
    def d_e(self) -> float:
        return self.erased.displacement

    @property
    def d_p(self) -> float:
        return self.prior.displacement

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "a_e": self.a_e, "a_p": self.a_p, "d_e": self.d_e,
                "d_p": self.d_p, "a_d": self.a_d, "d_d": self.d_d,
                "erased": self.erased.to_dict(), "prior": self.prior.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolMetrics":
        return cls(d["protocol"], GroupMetrics.from_dict(d["erased"]), GroupMetrics.from_dict(d["prior"]))


@dataclass
class EvalConfig:
    """Sampling settings shared by both protocols.

    ``edit_conditions`` lists the conditions edits are guided towards; -1 is the
    null condition.  The erased concept itself is never allowed.
    """

    samples_per_concept: int = 200
    omega: float = 3.0
    edit_points: int = 200
    edit_strength: float = 0.5
    edit_cfg_scale: float = 7.5
    edit_mode: str = "stochastic-noise"
    edit_conditions: list[int] = field(default_factory=lambda: [-1])
    seed: int = 0

    def validate(self, target: int) -> "EvalConfig":
        if self.samples_per_concept < 1 or self.edit_points < 1:
            raise ValueError("sample counts must be positive")
        if self.edit_mode not in MODES:
            raise ValueError(f"edit_mode must be one of {MODES}")
        if not self.edit_conditions:
            raise ValueError("edit_conditions must not be empty")
        if target in self.edit_conditions:
            raise ValueError("edit conditions must not reference the erased concept")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    target: int
    priors: list[int]
    protocols: dict[str, ProtocolMetrics]
    metadata: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict, repr=False, compare=False)

    def __getitem__(self, protocol: str) -> ProtocolMetrics:
        return self.protocols[protocol]

    def to_dict(self) -> dict:
        return {"target": self.target, "priors": list(self.priors),
                "protocols": {k: v.to_dict() for k, v in self.protocols.items()},
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        protocols = {k: ProtocolMetrics.from_dict(v) for k, v in d["protocols"].items()}
        return cls(d["target"], d["priors"], protocols, d.get("metadata", {}))

    def csv_rows(self) -> list[dict]:
        rows = []
        for name, pm in self.protocols.items():
            for group in ("erased", "prior"):
                g = getattr(pm, group)
                rows.append({"protocol": name, "group": group, "alignment": g.alignment, "rate": g.rate,
                             "displacement": g.displacement, "count": g.count,
                             "base_alignment": g.base_alignment, "base_rate": g.base_rate,
                             "none_rate": g.none_rate, "a_d": pm.a_d, "d_d": pm.d_d})
        return rows

    def write_json(self, path) -> None:
        write_atomic(path, dumps(self.to_dict()))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.csv_rows()
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------- protocols


def _group(universe, concepts, outputs, base_outputs) -> GroupMetrics:
    align, base_align, hits, base_hits, disp, none = [], [], {}, {}, [], []
    for k in concepts:
        x, xb = outputs[k], base_outputs[k]
        align.append(concept_posterior(universe, x, with_none=True)[:, k])
        base_align.append(concept_posterior(universe, xb, with_none=True)[:, k])
        cls, cls_b = classify(universe, x), classify(universe, xb)
        hits[k] = float(np.mean(cls == k))
        base_hits[k] = float(np.mean(cls_b == k))
        none.append(cls == NONE)
        disp.append(displacement(x, xb))
    count = int(sum(a.size for a in align))
    if count < MIN_GROUP_SAMPLES:
        raise EvaluationError(f"group has {count} samples; at least {MIN_GROUP_SAMPLES} are required")
    cat = np.concatenate
    rate = float(np.mean(cat([classify(universe, outputs[k]) == k for k in concepts])))
    base_rate = float(np.mean(cat([classify(universe, base_outputs[k]) == k for k in concepts])))
    return GroupMetrics(float(np.mean(cat(align))), rate, float(np.mean(cat(disp))), count,
                        float(np.mean(cat(base_align))), base_rate, hits, base_hits,
                        float(np.mean(cat(none))))


def _concept_seed(seed: int, k: int, salt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, k, salt])


def generation_outputs(model, universe, concepts, sched: NoiseSchedule, cfg: EvalConfig) -> dict[int, np.ndarray]:
    out = {}
    for k in concepts:
        seed = int(_concept_seed(cfg.seed, k, 0).generate_state(1)[0])
        out[k] = ddim_sample(model, k, cfg.omega, sched, universe.null, seed=seed, n=cfg.samples_per_concept).final
    return out


def edit_sources(universe, concepts, cfg: EvalConfig) -> dict[int, np.ndarray]:
    return {k: universe.sample(k, cfg.edit_points, np.random.default_rng(_concept_seed(cfg.seed, k, 1)))
            for k in concepts}


def edit_specs(cfg: EvalConfig, k: int) -> list[EditSpec]:
    specs = []
    for j, c in enumerate(cfg.edit_conditions):
        for i in range(cfg.edit_points):
            seed = int(_concept_seed(cfg.seed, k, 2 + j).generate_state(2)[0]) + i
            specs.append(EditSpec(cfg.edit_strength, c, cfg.edit_cfg_scale, cfg.edit_mode, seed % 2**32))
    return specs


def editing_outputs(model, universe, sources, sched: NoiseSchedule, cfg: EvalConfig) -> dict[int, np.ndarray]:
    out = {}
    n_cond = len(cfg.edit_conditions)
    for k, pts in sources.items():
        batch = edit_batch(model, np.tile(pts, (n_cond, 1)), edit_specs(cfg, k), sched, universe.null)
        if batch.failures:
            raise EvaluationError(f"{len(batch.failures)} edits failed for concept {k}: {batch.failures[0].error}")
        out[k] = batch.edited
    return out


def erasure_report(base: DenoiserParams, adapter: LoraAdapter | None, universe, target: int, priors,
                   sched: NoiseSchedule, protocols=PROTOCOLS, config: EvalConfig | None = None) -> EvalReport:
    """Compare the erased model (base + adapter) to the base model under matched seeds."""
    cfg = (config or EvalConfig()).validate(target)
    priors = [int(p) for p in priors]
    if target in priors:
        raise ValueError("target concept must not be a prior")
    concepts = [target] + priors
    base_model, erased_model = Denoiser(base), Denoiser(base, adapter)
    results, samples = {}, {}
    for protocol in protocols:
        if protocol == "generation":
            ref = generation_outputs(base_model, universe, concepts, sched, cfg)
            out = generation_outputs(erased_model, universe, concepts, sched, cfg)
        elif protocol == "editing":
            sources = edit_sources(universe, concepts, cfg)
            ref = editing_outputs(base_model, universe, sources, sched, cfg)
            out = editing_outputs(erased_model, universe, sources, sched, cfg)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        results[protocol] = ProtocolMetrics(protocol, _group(universe, [target], out, ref),
                                            _group(universe, priors, out, ref))
        samples[protocol] = {"base": ref, "erased": out}
    meta = {"eval": cfg.to_dict(), "num_steps": sched.num_steps}
    return EvalReport(target, priors, results, meta, samples)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    reports: dict[int, EvalReport]
    checks: dict[str, bool]
    adapters: dict = field(default_factory=dict, repr=False)
    logs: dict = field(default_factory=dict, repr=False)

    @property
    def verdict(self) -> str:
        return "PASS" if all(self.checks.values()) else "FAIL"

    def verdict_text(self) -> str:
        lines = [f"{name}: {'PASS' if ok else 'FAIL'}" for name, ok in self.checks.items()]
        table = [f"row {r}: editing a_e={rep['editing'].a_e:.4f} rate_e={rep['editing'].erased.rate:.4f} "
                 f"generation a_p={rep['generation'].a_p:.4f} rate_p={rep['generation'].prior.rate:.4f}"
                 for r, rep in sorted(self.reports.items())]
        return "\n".join(table + lines + [f"verdict: {self.verdict}"]) + "\n"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "checks": self.checks,
                "reports": {str(r): rep.to_dict() for r, rep in self.reports.items()}}


# orderings must hold by more than this, so rows that differ only at round-off do not count
ORDER_MARGIN = 1e-3


def ordering_checks(reports: dict[int, EvalReport], margin: float = ORDER_MARGIN) -> dict[str, bool]:
    e = {r: reports[r]["editing"].a_e for r in reports}
    p = {r: reports[r]["generation"].a_p for r in reports}
    return {
        "editing a_e row1 > row2": e[1] - e[2] > margin,
        "editing a_e row2 > row4": e[2] - e[4] > margin,
        "generation a_p row4 > row3": p[4] - p[3] > margin,
    }


def ablation_run(base: DenoiserParams, universe, sched: NoiseSchedule, config, eval_config: EvalConfig | None = None,
                 rows=(1, 2, 3, 4)) -> AblationResult:
    """Train one adapter per ablation row with a shared seed and evaluate both protocols."""
    from .trainer import erase_concept

    config.validate(universe)
    reports, adapters, logs = {}, {}, {}
    gamma = None
    for row in rows:
        cfg = config.variant(row)
        adapter, log, g = erase_concept(base, cfg, universe, sched, gamma=gamma if cfg.use_cor else None)
        if cfg.use_cor:
            gamma = g
        adapters[row], logs[row] = adapter, log
        reports[row] = erasure_report(base, adapter, universe, cfg.target, cfg.priors, sched, config=eval_config)
        reports[row].metadata["row"] = row
        reports[row].metadata["erasure"] = cfg.to_dict()
    return AblationResult(reports, ordering_checks(reports), adapters, logs)


# ---------------------------------------------------------------- plotting

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def scatter_svg(points, labels, path=None, size: int = 480, title: str = "") -> str:
    """Plain SVG scatter of 2-D points coloured by oracle class (grey for none)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.asarray(labels)
    lim = float(np.max(np.abs(pts))) * 1.05 if pts.size else 1.0
    lim = max(lim, 1e-9)
    scale = (size / 2 - 10) / lim
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        out.append(f'<text x="8" y="16" font-size="12" font-family="sans-serif">{escape(title)}</text>')
    for (x, y), lab in zip(pts, labels):
        colour = "#bbbbbb" if lab < 0 else _PALETTE[int(lab) % len(_PALETTE)]
        cx, cy = size / 2 + x * scale, size / 2 - y * scale
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{colour}" fill-opacity="0.7"/>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        write_atomic(path, text)
    return text


def report_svg(report: EvalReport, universe, protocol: str, path=None) -> str:
    xs = report.samples[protocol]["erased"]
    pts = np.concatenate([xs[k] for k in sorted(xs)])
    return scatter_svg(pts, classify(universe, pts), path, title=f"{protocol}, target {report.target}")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
