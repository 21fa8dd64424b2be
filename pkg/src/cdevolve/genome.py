"""Heritable pipeline specifications and the variation operators over them.

A :class:`Genome` is an immutable, declarative description of a complete
surrogate training/evaluation pipeline: data operations, model family and
hyperparameters, training loss and split policy.  Its identity is the hash of
the canonical JSON serialization of those four blocks, so two genomes that
describe the same pipeline share an id no matter how they were produced.

Variation is deterministic given an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

NORMALIZATIONS = ("none", "zscore", "minmax")
FAMILIES = ("ridge_linear", "kernel_ridge_rbf", "mlp_1hidden")
LOSS_KINDS = ("mse", "pairwise_hinge", "logsigmoid_rank", "multitask")
SPLIT_POLICIES = ("by_family", "random")

# Hyperparameter ranges. Multiplicative steps are clamped into these.
LAMBDA_RANGE = (1e-8, 1e4)
GAMMA_RANGE = (1e-3, 1e2)
HIDDEN_RANGE = (4, 64)
LR_RANGE = (1e-4, 1.0)
EPOCHS_RANGE = (10, 500)
CLIP_RANGE = (0.25, 16.0)
TAU_MAX = 4.0
TAU_MIN_NONZERO = 0.0125
HOLDOUT_RANGE = (0.05, 0.5)
MAX_FOLDS = 10

FAMILY_DEFAULTS = {
    "ridge_linear": {"lambda_reg": 1.0},
    "kernel_ridge_rbf": {"lambda_reg": 0.01, "gamma": 0.125},
    "mlp_1hidden": {"lambda_reg": 1e-4, "hidden_units": 16,
                    "learning_rate": 0.02, "epochs": 100},
}


class OperatorKind(str, Enum):
    DATA_EDIT = "data_edit"
    MODEL_SWAP = "model_swap"
    LOSS_EVOLVE = "loss_evolve"
    SPLIT_GUARD = "split_guard"


OPERATOR_KINDS = tuple(OperatorKind)

# Which genome block each operator kind is allowed to touch.
OWNED_BLOCK = {
    OperatorKind.DATA_EDIT: "data_ops",
    OperatorKind.MODEL_SWAP: "model",
    OperatorKind.LOSS_EVOLVE: "loss",
    OperatorKind.SPLIT_GUARD: "split",
}


@dataclass(frozen=True)
class DataOpsSpec:
    feature_mask: tuple[bool, ...]
    normalization: str = "zscore"
    outlier_clip: Optional[float] = None
    drift_compensation: bool = False

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "normalization": self.normalization,
            "feature_mask": [bool(b) for b in self.feature_mask],
            "drift_compensation": bool(self.drift_compensation),
        }
        if self.outlier_clip is not None:
            d["outlier_clip"] = float(self.outlier_clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataOpsSpec":
        clip = d.get("outlier_clip")
        return cls(
            feature_mask=tuple(bool(b) for b in d["feature_mask"]),
            normalization=d.get("normalization", "zscore"),
            outlier_clip=None if clip is None else float(clip),
            drift_compensation=bool(d.get("drift_compensation", False)),
        )


@dataclass(frozen=True)
class ModelSpec:
    family: str = "ridge_linear"
    lambda_reg: float = 1.0
    gamma: Optional[float] = None
    hidden_units: Optional[int] = None
    learning_rate: Optional[float] = None
    epochs: Optional[int] = None

    @classmethod
    def for_family(cls, family: str, **overrides) -> "ModelSpec":
        params = dict(FAMILY_DEFAULTS[family])
        params.update(overrides)
        return cls(family=family, **params)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"family": self.family, "lambda_reg": float(self.lambda_reg)}
        if self.family == "kernel_ridge_rbf":
            d["gamma"] = float(self.gamma)
        elif self.family == "mlp_1hidden":
            d["hidden_units"] = int(self.hidden_units)
            d["learning_rate"] = float(self.learning_rate)
            d["epochs"] = int(self.epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        family = d["family"]
        gamma = d.get("gamma")
        hidden = d.get("hidden_units")
        lr = d.get("learning_rate")
        epochs = d.get("epochs")
        return cls(
            family=family,
            lambda_reg=float(d.get("lambda_reg", 0.0)),
            gamma=None if family != "kernel_ridge_rbf" or gamma is None else float(gamma),
            hidden_units=None if family != "mlp_1hidden" or hidden is None else int(hidden),
            learning_rate=None if family != "mlp_1hidden" or lr is None else float(lr),
            epochs=None if family != "mlp_1hidden" or epochs is None else int(epochs),
        )


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    tau: float = 0.0
    rank_weight: Optional[float] = None
    adaptive_threshold: bool = False

    @property
    def uses_pairs(self) -> bool:
        return self.kind != "mse"

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind != "mse":
            d["tau"] = float(self.tau)
        if self.kind == "multitask":
            d["rank_weight"] = float(self.rank_weight)
        if self.kind in ("logsigmoid_rank", "multitask"):
            d["adaptive_threshold"] = bool(self.adaptive_threshold)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        kind = d["kind"]
        rw = d.get("rank_weight")
        return cls(
            kind=kind,
            tau=float(d.get("tau", 0.0)) if kind != "mse" else 0.0,
            rank_weight=float(rw) if kind == "multitask" and rw is not None else None,
            adaptive_threshold=bool(d.get("adaptive_threshold", False))
            if kind in ("logsigmoid_rank", "multitask") else False,
        )


@dataclass(frozen=True)
class SplitSpec:
    policy: str = "by_family"
    holdout: float = 1.0 / 6.0
    folds: int = 3

    def to_dict(self) -> dict:
        return {"policy": self.policy, "holdout": float(self.holdout), "folds": int(self.folds)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(policy=d.get("policy", "by_family"),
                   holdout=float(d.get("holdout", 1.0 / 6.0)),
                   folds=int(d.get("folds", 3)))


@dataclass(frozen=True)
class Provenance:
    parent_id: Optional[str] = None
    operator: str = "init"
    iteration: int = 0
    generation: int = 0
    second_parent_id: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"parent_id": self.parent_id, "operator": self.operator,
             "iteration": int(self.iteration), "generation": int(self.generation)}
        if self.second_parent_id is not None:
            d["second_parent_id"] = self.second_parent_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(parent_id=d.get("parent_id"), operator=d.get("operator", "init"),
                   iteration=int(d.get("iteration", 0)), generation=int(d.get("generation", 0)),
                   second_parent_id=d.get("second_parent_id"))


def canonical_json(obj: Any) -> str:
    # json emits floats with repr(), i.e. the shortest round-trip decimal
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class Genome:
    data_ops: DataOpsSpec
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    version: int = 0
    provenance: Provenance = field(default_factory=Provenance)

    def content(self) -> dict:
        return {
            "data_ops": self.data_ops.to_dict(),
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "split": self.split.to_dict(),
        }

    @property
    def id(self) -> str:
        digest = hashlib.sha256(canonical_json(self.content()).encode()).hexdigest()
        return digest[:16]

    @property
    def n_features(self) -> int:
        return len(self.data_ops.feature_mask)

    def to_dict(self) -> dict:
        d = self.content()
        d["id"] = self.id
        d["version"] = int(self.version)
        d["provenance"] = self.provenance.to_dict()
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        return cls(
            data_ops=DataOpsSpec.from_dict(d["data_ops"]),
            model=ModelSpec.from_dict(d["model"]),
            loss=LossSpec.from_dict(d["loss"]),
            split=SplitSpec.from_dict(d["split"]),
            version=int(d.get("version", 0)),
            provenance=Provenance.from_dict(d.get("provenance", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "Genome":
        return cls.from_dict(json.loads(text))

    def same_pipeline(self, other: "Genome") -> bool:
        return self.content() == other.content()


def default_genome(n_features: int = 9, masked: tuple[int, ...] = (8,)) -> Genome:
    """zscore + ridge (lambda 1) + mse + by-family 3-fold split.

    ``masked`` lists the feature columns switched off; the default hides the
    leaky column of the default task.
    """
    mask = tuple(i not in masked for i in range(n_features))
    return Genome(data_ops=DataOpsSpec(feature_mask=mask))


def validate(g: Genome) -> list[str]:
    """Return every invariant violation of ``g``; an empty list means valid."""
    out: list[str] = []
    d = g.data_ops
    if d.normalization not in NORMALIZATIONS:
        out.append(f"unknown normalization {d.normalization!r}")
    if not any(d.feature_mask):
        out.append("feature_mask empty")
    if d.outlier_clip is not None and not (d.outlier_clip > 0 and np.isfinite(d.outlier_clip)):
        out.append("outlier_clip must be > 0")

    m = g.model
    if m.family not in FAMILIES:
        out.append(f"unknown model family {m.family!r}")
    if not (m.lambda_reg >= 0 and np.isfinite(m.lambda_reg)):
        out.append("lambda_reg must be >= 0")
    if m.family == "kernel_ridge_rbf" and not (m.gamma is not None and m.gamma > 0):
        out.append("gamma must be > 0 for kernel_ridge_rbf")
    if m.family == "mlp_1hidden":
        if m.hidden_units is None or not HIDDEN_RANGE[0] <= m.hidden_units <= HIDDEN_RANGE[1]:
            out.append("hidden_units out of range")
        if m.learning_rate is None or not m.learning_rate > 0:
            out.append("learning_rate must be > 0")
        if m.epochs is None or not EPOCHS_RANGE[0] <= m.epochs <= EPOCHS_RANGE[1]:
            out.append("epochs out of range")

    lo = g.loss
    if lo.kind not in LOSS_KINDS:
        out.append(f"unknown loss kind {lo.kind!r}")
    if not lo.tau >= 0:
        out.append("tau must be >= 0")
    if lo.kind == "multitask":
        if lo.rank_weight is None or not 0.0 <= lo.rank_weight <= 1.0:
            out.append("rank_weight must be in [0, 1] for multitask")
    elif lo.rank_weight is not None:
        out.append("rank_weight only allowed for multitask")

    s = g.split
    if s.policy not in SPLIT_POLICIES:
        out.append(f"unknown split policy {s.policy!r}")
    if not 0.0 < s.holdout < 1.0:
        out.append("holdout out of range")
    if s.folds < 2:
        out.append("fold count must be >= 2")
    return out


# ---------------------------------------------------------------------------
# variation

def _scale(value, factor, lo, hi, integer=False):
    v = min(max(value * factor, lo), hi)
    return int(round(v)) if integer else float(v)


def _other(rng: np.random.Generator, options, current):
    choices = [o for o in options if o != current]
    return choices[int(rng.integers(len(choices)))]


def _data_edits(d: DataOpsSpec, rng: np.random.Generator) -> list:
    def normalization():
        return dataclasses.replace(d, normalization=_other(rng, NORMALIZATIONS, d.normalization))

    def clip_tighter():
        if d.outlier_clip is None:
            return dataclasses.replace(d, outlier_clip=1.5)
        return dataclasses.replace(d, outlier_clip=_scale(d.outlier_clip, 0.5, *CLIP_RANGE))

    def clip_looser():
        if d.outlier_clip is None:
            return d
        return dataclasses.replace(d, outlier_clip=_scale(d.outlier_clip, 2.0, *CLIP_RANGE))

    def clip_off():
        return dataclasses.replace(d, outlier_clip=None)

    def flip_bit():
        mask = list(d.feature_mask)
        k = int(rng.integers(len(mask)))
        mask[k] = not mask[k]
        if not any(mask):
            return d
        return dataclasses.replace(d, feature_mask=tuple(mask))

    def drift():
        return dataclasses.replace(d, drift_compensation=not d.drift_compensation)

    return [normalization, clip_tighter, clip_looser, clip_off, flip_bit, drift]


def _model_swaps(m: ModelSpec, rng: np.random.Generator) -> list:
    def family():
        return ModelSpec.for_family(_other(rng, FAMILIES, m.family))

    def lam(f):
        return lambda: dataclasses.replace(m, lambda_reg=_scale(m.lambda_reg, f, *LAMBDA_RANGE))

    def only(fam, attr, f, rng_, integer=False):
        def op():
            if m.family != fam:
                return m
            return dataclasses.replace(m, **{attr: _scale(getattr(m, attr), f, *rng_, integer=integer)})
        return op

    return [
        family,
        lam(2.0), lam(0.5),
        only("kernel_ridge_rbf", "gamma", 2.0, GAMMA_RANGE),
        only("kernel_ridge_rbf", "gamma", 0.5, GAMMA_RANGE),
        only("mlp_1hidden", "hidden_units", 2.0, HIDDEN_RANGE, True),
        only("mlp_1hidden", "hidden_units", 0.5, HIDDEN_RANGE, True),
        only("mlp_1hidden", "learning_rate", 2.0, LR_RANGE),
        only("mlp_1hidden", "learning_rate", 0.5, LR_RANGE),
        only("mlp_1hidden", "epochs", 2.0, EPOCHS_RANGE, True),
        only("mlp_1hidden", "epochs", 0.5, EPOCHS_RANGE, True),
    ]


def _loss_for_kind(kind: str, old: LossSpec) -> LossSpec:
    tau = old.tau if old.kind != "mse" else 0.0
    if kind == "mse":
        return LossSpec("mse")
    if kind == "pairwise_hinge":
        return LossSpec("pairwise_hinge", tau=tau if tau > 0 else 0.5)
    if kind == "logsigmoid_rank":
        return LossSpec("logsigmoid_rank", tau=tau, adaptive_threshold=old.adaptive_threshold)
    rw = old.rank_weight if old.rank_weight is not None else 0.5
    return LossSpec("multitask", tau=tau, rank_weight=rw, adaptive_threshold=old.adaptive_threshold)


def _loss_edits(lo: LossSpec, rng: np.random.Generator) -> list:
    def kind():
        return _loss_for_kind(_other(rng, LOSS_KINDS, lo.kind), lo)

    def tau_up():
        if lo.kind == "mse":
            return lo
        t = 0.25 if lo.tau == 0 else min(lo.tau * 2.0, TAU_MAX)
        return dataclasses.replace(lo, tau=t)

    def tau_down():
        if lo.kind == "mse":
            return lo
        t = lo.tau * 0.5
        return dataclasses.replace(lo, tau=0.0 if t < TAU_MIN_NONZERO else t)

    def weight(delta):
        def op():
            if lo.kind != "multitask":
                return lo
            return dataclasses.replace(lo, rank_weight=min(max(lo.rank_weight + delta, 0.0), 1.0))
        return op

    def adaptive():
        if lo.kind not in ("logsigmoid_rank", "multitask"):
            return lo
        return dataclasses.replace(lo, adaptive_threshold=not lo.adaptive_threshold)

    return [kind, tau_up, tau_down, weight(0.25), weight(-0.25), adaptive]


def _split_edits(s: SplitSpec, rng: np.random.Generator) -> list:
    def policy():
        return dataclasses.replace(s, policy=_other(rng, SPLIT_POLICIES, s.policy))

    def folds(delta):
        return lambda: dataclasses.replace(s, folds=min(max(s.folds + delta, 2), MAX_FOLDS))

    def holdout(f):
        return lambda: dataclasses.replace(s, holdout=_scale(s.holdout, f, *HOLDOUT_RANGE))

    return [policy, folds(1), folds(-1), holdout(2.0), holdout(0.5)]


_CATALOGS = {
    OperatorKind.DATA_EDIT: _data_edits,
    OperatorKind.MODEL_SWAP: _model_swaps,
    OperatorKind.LOSS_EVOLVE: _loss_edits,
    OperatorKind.SPLIT_GUARD: _split_edits,
}


def catalog_size(kind: OperatorKind) -> int:
    probe = default_genome()
    block = getattr(probe, OWNED_BLOCK[OperatorKind(kind)])
    return len(_CATALOGS[OperatorKind(kind)](block, np.random.default_rng(0)))


def mutate(g: Genome, kind: OperatorKind | str, rng: np.random.Generator,
           iteration: int = 0, generation: int = 0) -> Genome:
    """Apply one sub-mutation of ``kind`` to ``g``.

    A starting entry of the kind's catalog is drawn from ``rng``; entries that
    would leave the pipeline unchanged are skipped in catalog order.  If the
    whole catalog is a no-op the parent pipeline comes back with a bumped
    version.
    """
    kind = OperatorKind(kind)
    attr = OWNED_BLOCK[kind]
    block = getattr(g, attr)
    ops = _CATALOGS[kind](block, rng)
    start = int(rng.integers(len(ops)))
    new_block = block
    for step in range(len(ops)):
        candidate = ops[(start + step) % len(ops)]()
        if candidate.to_dict() != block.to_dict():
            new_block = candidate
            break
    prov = Provenance(parent_id=g.id, operator=kind.value, iteration=iteration, generation=generation)
    return dataclasses.replace(g, **{attr: new_block}, version=g.version + 1, provenance=prov)


def crossover(a: Genome, b: Genome, rng: np.random.Generator,
              iteration: int = 0, generation: int = 0) -> Genome:
    """Block-level recombination: each of the four blocks comes whole from a or b."""
    if a.n_features != b.n_features:
        raise ValueError("parents have different feature counts")
    take_a = rng.random(4) < 0.5
    blocks = {}
    for flag, attr in zip(take_a, ("data_ops", "model", "loss", "split")):
        blocks[attr] = getattr(a if flag else b, attr)
    prov = Provenance(parent_id=a.id, second_parent_id=b.id, operator="crossover",
                      iteration=iteration, generation=generation)
    return Genome(**blocks, version=max(a.version, b.version) + 1, provenance=prov)


def random_genome(rng: np.random.Generator, n_features: int, masked: tuple[int, ...] = (),
                  family: Optional[str] = None, keep_prob: float = 0.8) -> Genome:
    """Draw a fresh structurally valid genome; ``masked`` columns stay off."""
    allowed = [i for i in range(n_features) if i not in masked]
    keep = rng.random(len(allowed)) < keep_prob
    if not keep.any():
        keep[int(rng.integers(len(allowed)))] = True
    on = {i for i, k in zip(allowed, keep) if k}
    mask = tuple(i in on for i in range(n_features))
    norm = NORMALIZATIONS[int(rng.integers(len(NORMALIZATIONS)))]
    clip = None if rng.random() < 0.5 else float(2.0 ** int(rng.integers(-1, 3)))
    data_ops = DataOpsSpec(feature_mask=mask, normalization=norm, outlier_clip=clip,
                           drift_compensation=bool(rng.random() < 0.5))

    if family is None:
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    base = ModelSpec.for_family(family)

    def jitter(v, lo, hi, span=3, integer=False):
        return _scale(v, 2.0 ** int(rng.integers(-span, span + 1)), lo, hi, integer)

    model = dataclasses.replace(base, lambda_reg=jitter(base.lambda_reg, *LAMBDA_RANGE))
    if family == "kernel_ridge_rbf":
        model = dataclasses.replace(model, gamma=jitter(base.gamma, *GAMMA_RANGE))
    elif family == "mlp_1hidden":
        model = dataclasses.replace(
            model,
            hidden_units=jitter(base.hidden_units, *HIDDEN_RANGE, span=2, integer=True),
            learning_rate=jitter(base.learning_rate, *LR_RANGE, span=2),
            epochs=jitter(base.epochs, *EPOCHS_RANGE, span=1, integer=True),
        )
    kind = LOSS_KINDS[int(rng.integers(len(LOSS_KINDS)))]
    loss = _loss_for_kind(kind, LossSpec())
    return Genome(data_ops=data_ops, model=model, loss=loss, split=SplitSpec())
