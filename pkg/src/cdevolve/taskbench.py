"""Synthetic drag-coefficient benchmark tasks.

Labels come from a seeded smooth latent function of the design features plus
per-family and per-solver-version offsets.  Samples are grouped into vehicle
families that occupy overlapping regions of feature space, so family-disjoint
validation is a genuine extrapolation test.  An optional leaky column carries
the label itself (plus jitter) and exists only to be caught by the contract.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .genome import SplitSpec, canonical_json

GENERATOR_VERSION = "1"
C0 = 0.28
LINEAR_SCALE = 0.05
QUADRATIC_SCALE = 0.02
SINE_AMPLITUDE = 0.02
FAMILY_OFFSET_SCALE = 0.02
VERSION_OFFSET_SCALE = 0.01
LEAK_JITTER = 1e-4
FAMILY_CENTER_SCALE = 0.4
FAMILY_SPREAD = 0.6


class SpecificationError(ValueError):
    pass


class InfeasibleSplitError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    n_features: int = 8
    n_samples: int = 600
    n_families: int = 6
    noise: float = 0.005
    n_versions: int = 2
    leaky_feature: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_features < 2:
            raise SpecificationError(f"n_features must be >= 2 (got {self.n_features})")
        if self.n_families < 1:
            raise SpecificationError(f"n_families must be >= 1 (got {self.n_families})")
        if self.n_samples < 10 * self.n_families:
            raise SpecificationError(
                f"n_samples must be >= 10 * n_families = {10 * self.n_families} (got {self.n_samples})")
        if not self.noise >= 0:
            raise SpecificationError(f"noise must be >= 0 (got {self.noise})")
        if self.n_versions < 1:
            raise SpecificationError(f"n_versions must be >= 1 (got {self.n_versions})")

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecificationError(f"unknown task spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    family: np.ndarray
    version: np.ndarray
    card: dict = field(default_factory=dict)
    _memo: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def memo(self, key, compute):
        """Per-dataset cache for derived read-only structures (splits, pair sets)."""
        if key not in self._memo:
            self._memo[key] = compute()
        return self._memo[key]

    @property
    def n_samples(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def banned_columns(self) -> tuple[int, ...]:
        return tuple(self.card.get("banned_columns", ()))

    @property
    def families(self) -> np.ndarray:
        return np.unique(self.family)

    def hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.X, self.y, self.family, self.version):
            a = np.ascontiguousarray(arr)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        h.update(canonical_json(self.card).encode())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        path = Path(path)
        header = [f"x{k}" for k in range(self.n_features)] + ["label", "family", "version"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n_samples):
                w.writerow([repr(float(v)) for v in self.X[i]]
                           + [repr(float(self.y[i])), int(self.family[i]), int(self.version[i])])

    def write(self, directory, stem: str = "dataset") -> tuple[Path, Path]:
        directory = Path(directory)
        csv_path = directory / f"{stem}.csv"
        card_path = directory / f"{stem}.card.json"
        self.to_csv(csv_path)
        card_path.write_text(json.dumps(self.card, indent=2, sort_keys=True))
        return csv_path, card_path


def generate(spec: TaskSpec) -> Dataset:
    """Build the benchmark dataset described by ``spec`` (a pure function of it)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    d, n, F = spec.n_features, spec.n_samples, spec.n_families

    a = rng.uniform(-LINEAR_SCALE, LINEAR_SCALE, d)
    Q = rng.uniform(-QUADRATIC_SCALE, QUADRATIC_SCALE, (d, d))
    centers = rng.uniform(-FAMILY_CENTER_SCALE, FAMILY_CENTER_SCALE, (F, d))
    version_offsets = rng.uniform(-VERSION_OFFSET_SCALE, VERSION_OFFSET_SCALE, spec.n_versions)

    # balanced family sizes, then shuffled sample order
    family = np.sort(np.arange(n) % F)
    family = family[rng.permutation(n)]
    version = rng.integers(spec.n_versions, size=n)
    X = np.clip(centers[family] + rng.uniform(-FAMILY_SPREAD, FAMILY_SPREAD, (n, d)), -1.0, 1.0)

    smooth = X @ a + np.einsum("ni,ij,nj->n", X, Q, X) + SINE_AMPLITUDE * np.sin(3 * X[:, 0]) * X[:, 1]
    # family offsets are evenly spaced and rank-aligned with each family's
    # smooth-part mean, which keeps family label means well separated
    fam_means = np.array([smooth[family == f].mean() for f in range(F)])
    ladder = np.linspace(-FAMILY_OFFSET_SCALE, FAMILY_OFFSET_SCALE, F) if F > 1 else np.zeros(1)
    family_offsets = np.empty(F)
    family_offsets[np.argsort(fam_means, kind="stable")] = ladder

    noise = rng.standard_normal(n) * spec.noise
    y = C0 + smooth + family_offsets[family] + version_offsets[version] + noise

    banned: list[int] = []
    if spec.leaky_feature:
        leak = y + rng.standard_normal(n) * LEAK_JITTER
        X = np.column_stack([X, leak])
        banned.append(d)

    card = {
        "generator_version": GENERATOR_VERSION,
        "task_spec": spec.to_dict(),
        "n_features_total": int(X.shape[1]),
        "leaky_column": d if spec.leaky_feature else None,
        "banned_columns": banned,
        # frozen at generation time: holdout families are taken from the front
        "family_order": [int(f) for f in rng.permutation(F)],
        "solver_versions": list(range(spec.n_versions)),
        "label": "drag coefficient (dimensionless)",
        "metadata": {"flow_regime": "synthetic", "reynolds_number": None},
    }
    return Dataset(X=X, y=y, family=family.astype(np.int64), version=version.astype(np.int64), card=card)


def load_csv(path, card: Optional[dict] = None) -> Dataset:
    """Read a dataset written by :meth:`Dataset.to_csv` (label column optional)."""
    rows, labels, fams, vers = [], [], [], []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        xcols = [k for k, h in enumerate(header) if h.startswith("x")]
        col = {h: k for k, h in enumerate(header)}
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                rows.append([float(row[k]) for k in xcols])
                labels.append(float(row[col["label"]]) if "label" in col else np.nan)
                fams.append(int(row[col["family"]]) if "family" in col else -1)
                vers.append(int(row[col["version"]]) if "version" in col else 0)
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    X = np.array(rows, dtype=float).reshape(len(rows), len(xcols))
    return Dataset(X=X, y=np.array(labels, dtype=float), family=np.array(fams, dtype=np.int64),
                   version=np.array(vers, dtype=np.int64), card=dict(card or {}))


# ---------------------------------------------------------------------------
# pairs

@dataclass(frozen=True, eq=False)
class PairSet:
    i: np.ndarray
    j: np.ndarray
    eps: float = 1e-6

    def __len__(self) -> int:
        return len(self.i)

    def as_tuples(self) -> list[tuple[int, int]]:
        return list(zip(self.i.tolist(), self.j.tolist()))


def pair_positions(y: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Positions (a, b), a < b, of all label pairs that differ by more than ``eps``."""
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    a, b = np.triu_indices(len(y), k=1)
    keep = np.abs(y[a] - y[b]) > eps
    return a[keep], b[keep]


def make_pairs(ds: Dataset, indices: Sequence[int], eps: float = 1e-6) -> PairSet:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= ds.n_samples):
        raise IndexError("pair indices out of range")
    a, b = pair_positions(ds.y[indices], eps)
    return PairSet(i=indices[a], j=indices[b], eps=eps)


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True, eq=False)
class Split:
    holdout: np.ndarray
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]
    policy: str

    @property
    def k(self) -> int:
        return len(self.folds)


def holdout_families(ds: Dataset, fraction: float) -> np.ndarray:
    order = ds.card.get("family_order") or [int(f) for f in ds.families]
    n_hold = max(1, int(round(fraction * len(order))))
    return np.array(order[:n_hold], dtype=np.int64)


def check_split(ds: Dataset, policy: SplitSpec) -> None:
    """Raise :class:`InfeasibleSplitError` if ``policy`` cannot be realized on ``ds``."""
    k = policy.folds
    if policy.policy == "by_family":
        n_fam = len(ds.families)
        remaining = n_fam - len(holdout_families(ds, policy.holdout))
        if n_fam < k + 1 or remaining < k:
            raise InfeasibleSplitError(
                f"{n_fam} families cannot give a holdout plus {k} family-disjoint folds")
    else:
        n_rest = ds.n_samples - int(round(policy.holdout * ds.n_samples))
        if n_rest < 2 * k:
            raise InfeasibleSplitError(f"{n_rest} non-holdout samples cannot form {k} folds")


def split(ds: Dataset, policy: SplitSpec, seed: int) -> Split:
    """Holdout plus ``k`` train/validation folds.

    ``by_family`` keeps every family on one side of each boundary; the holdout
    families are frozen in the dataset card and never depend on ``seed``.
    """
    return ds.memo(("split", policy, int(seed)), lambda: _split(ds, policy, seed))


def _split(ds: Dataset, policy: SplitSpec, seed: int) -> Split:
    check_split(ds, policy)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B117]))
    k = policy.folds
    all_idx = np.arange(ds.n_samples)
    if policy.policy == "by_family":
        hold_fams = holdout_families(ds, policy.holdout)
        rest = np.array([f for f in ds.families if f not in set(hold_fams.tolist())], dtype=np.int64)
        rest = rest[rng.permutation(len(rest))]
        holdout = all_idx[np.isin(ds.family, hold_fams)]
        folds = []
        for j in range(k):
            val_fams = rest[j::k]
            train_fams = np.setdiff1d(rest, val_fams)
            folds.append((all_idx[np.isin(ds.family, train_fams)],
                          all_idx[np.isin(ds.family, val_fams)]))
    else:
        perm = rng.permutation(ds.n_samples)
        n_hold = int(round(policy.holdout * ds.n_samples))
        holdout = np.sort(perm[:n_hold])
        chunks = np.array_split(perm[n_hold:], k)
        folds = []
        for j in range(k):
            val = np.sort(chunks[j])
            train = np.sort(np.concatenate([c for m, c in enumerate(chunks) if m != j]))
            folds.append((train, val))
    for arr in [holdout] + [a for f in folds for a in f]:
        arr.setflags(write=False)
    return Split(holdout=holdout, folds=tuple(folds), policy=policy.policy)
