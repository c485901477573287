"""Re-noise-and-denoise editing attacks against an (erased) eps-model.

An edit lifts a clean point to ``t_edit = round(strength * T)`` either by
drawing fresh forward noise or by deterministic DDIM inversion, then denoises
back to 0 under classifier-free guidance towards ``edit_condition``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import (
    EpsModel,
    LatentState,
    NoiseSchedule,
    ddim_invert_step,
    ddim_sample,
    forward_diffuse,
)

MODES = ("stochastic-noise", "ddim-inversion")


class EditError(RuntimeError):
    pass


@dataclass(frozen=True)
class EditSpec:
    strength: float = 0.5
    edit_condition: int = -1  # -1 selects the null condition
    cfg_scale: float = 7.5
    inversion_mode: str = "stochastic-noise"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.strength <= 1.0:
            raise ValueError("strength must lie in (0, 1]")
        if not np.isfinite(self.cfg_scale):
            raise ValueError("cfg_scale must be finite")
        if self.inversion_mode not in MODES:
            raise ValueError(f"inversion_mode must be one of {MODES}")

    def t_edit(self, T: int) -> int:
        return max(1, int(round(self.strength * T)))

    def condition(self, null: int) -> int:
        return null if self.edit_condition < 0 else self.edit_condition


def ddim_invert(model: EpsModel, x0, condition, sched: NoiseSchedule, steps: int, null: int | None = None,
                max_iters: int = 50, tol: float = 1e-12) -> LatentState:
    """Deterministic DDIM inversion from 0 up to ``steps`` with unguided predictions.

    Each step solves z_{t+1} = invert(z_t, eps(z_{t+1}, t+1)) by fixed-point
    iteration, so sampling back with the same model and condition retraces the
    path.  ``max_iters=0`` gives the plain one-shot inversion that reuses
    eps(z_t, t).
    """
    z = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    cond = np.broadcast_to(np.asarray(condition), (z.shape[0],))
    for t in range(steps):
        nxt = ddim_invert_step(z, model(z, t, cond), t, t + 1, sched)
        for _ in range(max_iters):
            refined = ddim_invert_step(z, model(nxt, t + 1, cond), t, t + 1, sched)
            delta = np.max(np.abs(refined - nxt)) if refined.size else 0.0
            nxt = refined
            if not delta > tol:
                break
        z = nxt
        if not np.all(np.isfinite(z)):
            raise EditError(f"non-finite latent during inversion at step {t + 1}")
    return LatentState(z, steps)


def edit(model: EpsModel, x0, spec: EditSpec, sched: NoiseSchedule, null: int) -> np.ndarray:
    """Edit a single point."""
    x0 = np.asarray(x0, dtype=np.float64)
    record = edit_batch(model, x0[None], [spec], sched, null).records[0]
    if record.error is not None:
        raise EditError(record.error)
    return record.edited


@dataclass
class EditRecord:
    index: int
    source: np.ndarray
    edited: np.ndarray | None
    edit_condition: int
    seed: int
    error: str | None = None
    class_before: int | None = None
    class_after: int | None = None


@dataclass
class EditBatch:
    records: list[EditRecord] = field(default_factory=list)

    @property
    def edited(self) -> np.ndarray:
        return np.stack([r.edited for r in self.records if r.edited is not None])

    @property
    def failures(self) -> list[EditRecord]:
        return [r for r in self.records if r.error is not None]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "source_x", "source_y", "edited_x", "edited_y", "edit_condition",
                        "seed", "class_before", "class_after", "error"])
            for r in self.records:
                ex, ey = ("", "") if r.edited is None else (repr(float(r.edited[0])), repr(float(r.edited[1])))
                w.writerow([r.index, repr(float(r.source[0])), repr(float(r.source[1])), ex, ey,
                            r.edit_condition, r.seed, r.class_before, r.class_after, r.error or ""])


def edit_batch(model: EpsModel, points, specs, sched: NoiseSchedule, null: int, universe=None) -> EditBatch:
    """Apply ``specs[i]`` to ``points[i]``; rows sharing settings are denoised together.

    A failing group is recorded per point and does not abort the batch.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    specs = list(specs)
    if len(specs) == 0 or points.shape[0] == 0:
        raise ValueError("edit_batch needs at least one point")
    if len(specs) != points.shape[0]:
        raise ValueError("one spec per point is required")
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(specs):
        groups.setdefault((s.strength, s.condition(null), s.cfg_scale, s.inversion_mode), []).append(i)
    results: list[EditRecord | None] = [None] * len(specs)
    for (strength, cond, scale, mode), idx in groups.items():
        sub = points[idx]
        t_edit = specs[idx[0]].t_edit(sched.num_steps)
        try:
            if not np.all(np.isfinite(sub)):
                raise EditError("source point is not finite")
            if mode == "stochastic-noise":
                noise = np.stack([np.random.default_rng(specs[i].seed).standard_normal(points.shape[1]) for i in idx])
                z = forward_diffuse(sub, t_edit, noise, sched)
            else:
                z = ddim_invert(model, sub, null, sched, t_edit).z
            out = ddim_sample(model, cond, scale, sched, null, z_T=z, timesteps=range(t_edit, -1, -1)).final
            if not np.all(np.isfinite(out)):
                raise EditError("non-finite edit output")
            errors = [None] * len(idx)
        except (EditError, FloatingPointError, ValueError) as exc:
            out = [None] * len(idx)
            errors = [str(exc)] * len(idx)
        for j, i in enumerate(idx):
            results[i] = EditRecord(i, points[i], out[j], cond, specs[i].seed, errors[j])
    if universe is not None:
        from .universe import classify

        before = classify(universe, points)
        for r in results:
            r.class_before = int(before[r.index])
            if r.edited is not None:
                r.class_after = int(classify(universe, r.edited)[0])
    return EditBatch(results)
