"""Hard evaluation contract and the candidate evaluation harness.

Gate order is fixed: the structural gates (leakage, split policy) run first
and short-circuit; only candidates that pass them are executed over every
(seed, fold), after which the determinism, resource and seed-variance gates
are applied.  A candidate that fails any gate is rejected and carries no
fitness.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics, phenotype
from .genome import Genome, canonical_json, validate
from .metrics import FitnessWeights, MetricBundle, ScoreWeights, fmt
from .phenotype import NumericFailure, RunResult
from .taskbench import Dataset, InfeasibleSplitError, check_split

STAGES = ("explore", "refine", "certify")
DEFAULT_STAGE_LIMITS = {
    # stage: (max cross-seed std of the combined score, MAC budget)
    "explore": (0.10, 1e9),
    "refine": (0.05, 5e8),
    "certify": (0.02, 2e8),
}
GATES = ("leakage", "split", "determinism", "resources", "variance")


def derive_seeds(master_seed: int, n: int = 3) -> tuple[int, ...]:
    state = np.random.SeedSequence([int(master_seed), 0xC0DE]).generate_state(n)
    return tuple(int(s) for s in state)


@dataclass(frozen=True)
class Contract:
    seeds: tuple[int, ...] = (0, 1, 2)
    folds: int = 3
    budget: float = 1e9
    sigma_limit: float = 0.10
    stage: str = "explore"
    stage_limits: tuple = tuple((k, v) for k, v in DEFAULT_STAGE_LIMITS.items())
    banned_policies: tuple[str, ...] = ("random",)
    extra_banned_columns: tuple[int, ...] = ()
    leakage_enabled: bool = True
    score_weights: ScoreWeights = field(default_factory=ScoreWeights)
    fitness_weights: FitnessWeights = field(default_factory=FitnessWeights)

    def __post_init__(self):
        if len(self.seeds) < 2:
            raise ValueError("contract needs at least two seeds")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.folds < 2:
            raise ValueError("fold count must be >= 2")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        limits = dict(self.stage_limits)
        sig = [limits[s][0] for s in STAGES]
        bud = [limits[s][1] for s in STAGES]
        if not (sig[0] >= sig[1] >= sig[2] and bud[0] >= bud[1] >= bud[2]):
            raise ValueError("stage limits must tighten from explore to certify")

    @classmethod
    def for_master_seed(cls, master_seed: int, n_seeds: int = 3, stage: str = "explore", **kw) -> "Contract":
        return tighten(cls(seeds=derive_seeds(master_seed, n_seeds), **kw), stage)

    def key(self) -> str:
        return canonical_json({"seeds": list(self.seeds), "folds": self.folds, "budget": self.budget,
                               "sigma": self.sigma_limit, "stage": self.stage})


def tighten(c: Contract, stage: str) -> Contract:
    """Contract with the stage's seed-variance limit and budget; other gates unchanged."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    sigma, budget = dict(c.stage_limits)[stage]
    return dataclasses.replace(c, stage=stage, sigma_limit=sigma, budget=budget)


@dataclass(frozen=True)
class GateResult:
    gate: str
    passed: bool
    evidence: str = ""

    def __post_init__(self):
        if not self.passed and not self.evidence:
            raise ValueError("a failing gate must carry evidence")

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {"gate": self.gate, "verdict": self.verdict, "evidence": self.evidence}


# ---------------------------------------------------------------------------
# gates

def banned_columns(ds: Dataset, c: Optional[Contract] = None) -> tuple[int, ...]:
    extra = c.extra_banned_columns if c is not None else ()
    return tuple(sorted(set(ds.banned_columns) | set(extra)))


def gate_leakage(g: Genome, ds: Dataset, c: Optional[Contract] = None) -> GateResult:
    banned = banned_columns(ds, c)
    used = [k for k in banned if k < g.n_features and g.data_ops.feature_mask[k]]
    if used:
        return GateResult("leakage", False, f"feature_mask uses banned column(s) {used}")
    return GateResult("leakage", True)


def gate_split(g: Genome, c: Optional[Contract] = None) -> GateResult:
    banned = c.banned_policies if c is not None else ("random",)
    if g.split.policy in banned:
        return GateResult("split", False, f"{g.split.policy} split banned")
    return GateResult("split", True)


def gate_determinism(g: Genome, ds: Dataset, seed: int, *, fold: int = 0,
                     reference: Optional[MetricBundle] = None,
                     execute: Callable = None,
                     weights: ScoreWeights = ScoreWeights()) -> GateResult:
    """Run one (seed, fold) twice and require identical serialized metrics.

    ``reference`` may hold the first run's bundle when it is already known;
    ``execute(g, ds, seed, fold)`` must return a MetricBundle (or a tuple
    whose first item is one) and defaults to :func:`phenotype.run_fold`.
    """
    if execute is None:
        def execute(g_, ds_, seed_, fold_):
            return phenotype.run_fold(g_, ds_, seed_, fold_, weights)[0]
    try:
        with np.errstate(all="ignore"):
            first = reference if reference is not None else _bundle_of(execute(g, ds, seed, fold))
            second = _bundle_of(execute(g, ds, seed, fold))
    except NumericFailure as exc:
        return GateResult("determinism", False, f"nondeterministic or unstable execution: {exc}")
    a, b = first.serialize(), second.serialize()
    if a != b:
        return GateResult("determinism", False, f"replay mismatch: {a} != {b}")
    return GateResult("determinism", True)


def _bundle_of(x) -> MetricBundle:
    return x[0] if isinstance(x, tuple) else x


def gate_resources(run: RunResult, c: Contract) -> GateResult:
    if run.macs > c.budget:
        return GateResult("resources", False, f"estimated {run.macs} MACs exceeds budget {c.budget:g}")
    return GateResult("resources", True)


def gate_variance(per_seed_scores: Sequence[float], c: Contract) -> GateResult:
    if len(per_seed_scores) < 2:
        raise ValueError("variance gate needs at least two seed scores")
    std = metrics.population_std(per_seed_scores)
    if std > c.sigma_limit:
        return GateResult("variance", False,
                          f"cross-seed score std {std:.6f} exceeds {c.sigma_limit:g} ({c.stage})")
    return GateResult("variance", True)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Evaluation:
    genome_id: str
    stage: str
    gates: list
    bundles: dict = field(default_factory=dict)
    aggregate: Optional[MetricBundle] = None
    per_seed_scores: list = field(default_factory=list)
    reliability: Optional[float] = None
    fitness: Optional[float] = None
    macs: int = 0
    n_params: int = 0
    inference_macs: int = 0
    status: str = "not_run"
    executed: bool = False

    @property
    def rejected(self) -> bool:
        return any(not gr.passed for gr in self.gates)

    @property
    def failed_gate(self) -> Optional[str]:
        for gr in self.gates:
            if not gr.passed:
                return gr.gate
        return None

    @property
    def combined_score(self) -> float:
        """Aggregate combined score; 0 for rejected candidates (trajectory convention)."""
        if self.rejected or self.aggregate is None:
            return 0.0
        return self.aggregate.combined_score

    def to_dict(self) -> dict:
        return {
            "genome_id": self.genome_id,
            "stage": self.stage,
            "rejected": self.rejected,
            "failed_gate": self.failed_gate,
            "status": self.status,
            "gates": [gr.to_dict() for gr in self.gates],
            "runs": [{"seed": s, "fold": f, **b.to_dict()} for (s, f), b in sorted(self.bundles.items())],
            "per_seed_scores": [fmt(x) for x in self.per_seed_scores],
            "aggregate": None if self.aggregate is None else self.aggregate.to_dict(),
            "reliability": None if self.reliability is None else fmt(self.reliability),
            "fitness": None if self.fitness is None else fmt(self.fitness),
            "macs": int(self.macs),
            "n_params": int(self.n_params),
            "inference_macs": int(self.inference_macs),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def aggregate_bundles(bundles: dict, weights: ScoreWeights = ScoreWeights()) -> tuple[MetricBundle, list[float]]:
    """Mean over seeds of the mean over folds, plus per-seed combined scores."""
    seeds = sorted({s for s, _ in bundles})
    per_seed = {name: [] for name in ("mae", "rmse", "sign_accuracy", "spearman_rho", "combined_score")}
    for seed in seeds:
        rows = [b for (s, _), b in sorted(bundles.items()) if s == seed]
        for name in per_seed:
            per_seed[name].append(float(np.mean([getattr(b, name) for b in rows])))
    agg = MetricBundle(**{name: float(np.mean(v)) for name, v in per_seed.items()})
    return agg, per_seed["combined_score"]


def effective_genome(g: Genome, c: Contract) -> Genome:
    """The contract fixes the minimum fold count; genomes may ask for more."""
    folds = max(g.split.folds, c.folds)
    if folds == g.split.folds:
        return g
    return dataclasses.replace(g, split=dataclasses.replace(g.split, folds=folds))


class Evaluator:
    """Evaluates genomes on one dataset, memoizing execution results.

    Execution is a pure function of (execution key, seeds, weights), so a
    cached run is reused verbatim; gates are always re-applied against the
    contract passed in, which lets lifecycle tightening re-check survivors
    without refitting anything.
    """

    def __init__(self, ds: Dataset, cache: bool = True):
        self.ds = ds
        self.use_cache = cache
        self._runs: dict = {}
        self.executions = 0

    def _execute(self, g: Genome, c: Contract) -> tuple[RunResult, Optional[GateResult]]:
        key = (phenotype.execution_key(g), c.seeds, c.score_weights)
        hit = self._runs.get(key) if self.use_cache else None
        if hit is not None:
            run, det = hit
            if not (run.status == "budget_exceeded" and run.macs <= c.budget):
                return run, det
        self.executions += 1
        run = phenotype.run(g, self.ds, c.seeds, budget=c.budget, weights=c.score_weights)
        det = None
        if run.status == "ok":
            ref = run.bundles[(c.seeds[0], 0)]
            det = gate_determinism(g, self.ds, c.seeds[0], fold=0, reference=ref, weights=c.score_weights)
        elif run.status == "numeric_failure":
            det = GateResult("determinism", False, f"nondeterministic or unstable execution: {run.message}")
        if self.use_cache:
            self._runs[key] = (run, det)
        return run, det

    def evaluate(self, g: Genome, c: Contract) -> Evaluation:
        problems = validate(g)
        if problems:
            raise ValueError(f"genome {g.id} is structurally invalid: {problems}")
        ds = self.ds
        gates = []
        if c.leakage_enabled:
            gates.append(gate_leakage(g, ds, c))
        gates.append(gate_split(g, c))
        ev = Evaluation(genome_id=g.id, stage=c.stage, gates=gates)
        if ev.rejected:
            return ev

        eg = effective_genome(g, c)
        try:
            check_split(ds, eg.split)
        except InfeasibleSplitError as exc:
            gates[-1] = GateResult("split", False, f"infeasible split: {exc}")
            return ev

        run, det = self._execute(eg, c)
        ev.executed = True
        ev.status = run.status
        ev.macs, ev.n_params, ev.inference_macs = run.macs, run.n_params, run.inference_macs
        if det is not None:
            gates.append(det)
        gates.append(gate_resources(run, c))
        if run.status == "ok":
            ev.bundles = dict(run.bundles)
            ev.aggregate, ev.per_seed_scores = aggregate_bundles(run.bundles, c.score_weights)
            ev.reliability = metrics.reliability(ev.per_seed_scores)
            gates.append(gate_variance(ev.per_seed_scores, c))
        if not ev.rejected:
            ev.fitness = metrics.fitness(ev, c.fitness_weights)
        return ev


def evaluate(g: Genome, ds: Dataset, c: Contract, evaluator: Optional[Evaluator] = None) -> Evaluation:
    """One-shot evaluation (no memoization unless an evaluator is supplied)."""
    ev = evaluator if evaluator is not None else Evaluator(ds, cache=False)
    return ev.evaluate(g, c)


def evaluation_from_json(text: str) -> dict:
    return json.loads(text)
