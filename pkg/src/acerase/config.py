"""JSON run configs: per-command schemas and conversion into library objects."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from jsonschema import Draft202012Validator

from .denoiser import Architecture
from .diffusion import build_schedule
from .editing import MODES
from .evaluation import PROTOCOLS, EvalConfig
from .trainer import ErasureRunConfig
from .universe import canonical_universe


class ConfigError(ValueError):
    """Schema or value error; ``path`` is the dotted location of the bad field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}
_condition = {"type": "integer", "minimum": -1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


UNIVERSE = _obj({
    "K": {"type": "integer", "minimum": 2},
    "radius": _pos,
    "components": _posint,
    "spread": _nonneg,
    "std_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
    "layout_seed": _int,
})
SCHEDULE = _obj({
    "T": {"type": "integer", "minimum": 2},
    "schedule_kind": {"enum": ["linear-beta", "cosine"]},
    "beta_start": _pos,
    "beta_end": _pos,
    "cosine_offset": _pos,
})
ARCH = _obj({"hidden": {"type": "integer", "minimum": 8}, "time_dim": {"type": "integer", "minimum": 2},
             "concept_dim": {"type": "integer", "minimum": 2}, "max_freq": _pos})
TRAIN = _obj({
    "steps": {"type": "integer", "minimum": 0},
    "lr": _nonneg,
    "cond_dropout_p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "batch_size": _posint,
    "optimizer": {"enum": ["adam", "sgd"]},
    "lr_schedule": {"enum": ["constant", "cosine"]},
})
GUIDANCE = _obj({"eta_u": _nonneg, "eta_c": _nonneg, "eta_p": _nonneg, "omega": _num,
                 "gamma": {"type": "object", "additionalProperties": _nonneg}})
ERASURE = _obj({
    "target": {"type": "integer", "minimum": 0},
    "priors": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
    "lambda_punc": _nonneg, "lambda_cons": _nonneg, "lambda_esd": _nonneg,
    "steps": {"type": "integer", "minimum": 0},
    "lr": _nonneg,
    "optimizer": {"enum": ["adam", "sgd"]},
    "batch_size": _posint,
    "prior_sample_count": _posint,
    "use_unc": {"type": "boolean"}, "use_cons": {"type": "boolean"}, "use_cor": {"type": "boolean"},
    "guidance": GUIDANCE,
    "latent_cfg_scale": _num,
    "latent_source": {"enum": ["base", "tuned"]},
    "rank": _posint,
    "lora_scale": _pos,
    "gamma_samples": _posint,
    "fixed_gamma": {"type": ["number", "null"], "minimum": 0},
}, required=["target"])
EVAL = _obj({
    "samples_per_concept": _posint,
    "omega": _num,
    "edit_points": _posint,
    "edit_strength": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "edit_cfg_scale": _num,
    "edit_mode": {"enum": list(MODES)},
    "edit_conditions": {"type": "array", "items": _condition, "minItems": 1},
})
SAMPLE = _obj({"condition": _condition, "omega": _num, "n": _posint}, required=["condition"])
EDIT = _obj({
    "concept": {"type": "integer", "minimum": 0},
    "n": _posint,
    "strength": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "edit_condition": _condition,
    "cfg_scale": _num,
    "inversion_mode": {"enum": list(MODES)},
}, required=["concept"])

_common = {"seed": _int, "universe": UNIVERSE, "schedule": SCHEDULE}
_model = {"base": {"type": "string"}, "adapter": {"type": ["string", "null"]}}

SCHEMAS = {
    "train-base": _obj({**_common, "arch": ARCH, "train": TRAIN}),
    "erase": _obj({**_common, "base": {"type": "string"}, "erasure": ERASURE,
                   "row": {"type": "integer", "minimum": 1, "maximum": 4}}, required=["base", "erasure"]),
    "sample": _obj({**_common, **_model, "sample": SAMPLE}, required=["base", "sample"]),
    "edit": _obj({**_common, **_model, "edit": EDIT}, required=["base", "edit"]),
    "eval": _obj({**_common, **_model, "target": {"type": "integer", "minimum": 0},
                  "priors": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                  "protocols": {"type": "array", "items": {"enum": list(PROTOCOLS)}, "minItems": 1},
                  "eval": EVAL}, required=["base", "adapter", "target"]),
    "ablate": _obj({**_common, "base": {"type": "string"}, "erasure": ERASURE, "eval": EVAL},
                   required=["base", "erasure"]),
    "verify-math": _obj({**_common, "instances": {"type": "integer", "minimum": 1}}),
}


def _path_of(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        # the missing key is not part of absolute_path
        missing = error.message.split("'")[1] if "'" in error.message else ""
        parts.append(missing)
    elif error.validator == "additionalProperties" and "'" in error.message:
        parts.append(error.message.split("'")[1])
    return ".".join(parts)


def validate(command: str, doc) -> dict:
    validator = Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        path = _path_of(err)
        raise ConfigError(f"{path or '<root>'}: {err.message}", path)
    return doc


def load(command: str, path) -> tuple[dict, bytes]:
    """Read and validate a config file; returns the document and its raw bytes."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return validate(command, doc), raw


def sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def universe_from(doc: dict):
    kw = dict(doc.get("universe", {}))
    if "std_range" in kw:
        kw["std_range"] = tuple(kw["std_range"])
    try:
        return canonical_universe(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc), "universe") from None


def schedule_from(doc: dict):
    try:
        return build_schedule(**doc.get("schedule", {}))
    except ValueError as exc:
        raise ConfigError(str(exc), "schedule") from None


def arch_from(doc: dict, universe, sched) -> Architecture:
    try:
        return Architecture(num_concepts=universe.K, data_dim=universe.dim, num_steps=sched.num_steps,
                            **doc.get("arch", {}))
    except ValueError as exc:
        raise ConfigError(str(exc), "arch") from None


def erasure_from(doc: dict, seed: int, universe) -> ErasureRunConfig:
    d = dict(doc["erasure"])
    d["seed"] = seed
    try:
        cfg = ErasureRunConfig.from_dict(d)
        if "row" in doc:
            cfg = cfg.variant(doc["row"])
        return cfg.validate(universe)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "erasure") from None


def eval_from(doc: dict, seed: int, target: int) -> EvalConfig:
    try:
        return EvalConfig(seed=seed, **doc.get("eval", {})).validate(target)
    except ValueError as exc:
        raise ConfigError(str(exc), "eval") from None
