"""Island-model evolutionary search over contract-gated pipeline genomes.

One generation per island: evaluate the pending members, keep the best
``population`` by Pareto front then fitness, protect the elites, record gate
failures into the constraint memory, then breed the next batch.  Every
evaluation is one iteration of the global counter and one trajectory record.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import contract as contract_mod
from .contract import Contract, Evaluation, Evaluator, tighten
from .genome import (FAMILIES, OPERATOR_KINDS, Genome, ModelSpec, OperatorKind, crossover,
                     default_genome, mutate, random_genome)
from .metrics import fitness_key, fmt
from .taskbench import Dataset

SAMPLING_MODES = ("adaptive", "topk")
DEFAULT_STAGE_SCHEDULE = (("explore", 0.0), ("refine", 0.5), ("certify", 0.85))


@dataclass(frozen=True)
class EvolutionConfig:
    islands: int = 3
    population: int = 8
    generations: int = 50
    migration_interval: int = 10
    migration_count: int = 1
    immigrant_rate: float = 0.05
    sampling: str = "adaptive"
    temperature: float = 1.0
    temperature_decay: float = 0.97
    topk: int = 2
    feedback: bool = True
    stage_schedule: tuple = DEFAULT_STAGE_SCHEDULE
    crossover_rate: float = 0.2
    elites: int = 2
    memory_decay: float = 0.95
    archive_bins: int = 8
    master_seed: int = 0

    def validate(self) -> None:
        for name in ("islands", "population", "generations", "migration_interval", "migration_count",
                     "topk", "archive_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("immigrant_rate", "crossover_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 < self.memory_decay <= 1.0:
            raise ValueError("memory_decay must be in (0, 1]")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
        if self.temperature <= 0 or not 0 < self.temperature_decay <= 1:
            raise ValueError("temperature must be > 0 and decay in (0, 1]")
        if not 0 <= self.elites < self.population:
            raise ValueError("elites must be in [0, population)")
        stages = [s for s, _ in self.stage_schedule]
        fracs = [f for _, f in self.stage_schedule]
        if not stages or fracs[0] != 0.0 or fracs != sorted(fracs):
            raise ValueError("stage schedule must start at 0 and be ordered")
        if any(s not in contract_mod.STAGES for s in stages):
            raise ValueError("unknown stage in schedule")

    def temperature_at(self, generation: int) -> float:
        return self.temperature * self.temperature_decay ** generation

    def stage_at(self, generation: int) -> str:
        frac = generation / self.generations
        stage = self.stage_schedule[0][0]
        for name, start in self.stage_schedule:
            if frac >= start:
                stage = name
        return stage

    @property
    def total_evaluations(self) -> int:
        return self.islands * self.population * self.generations

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown evolution config fields: {sorted(unknown)}")
        d = dict(d)
        if "stage_schedule" in d:
            d["stage_schedule"] = tuple((str(s), float(f)) for s, f in d["stage_schedule"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_schedule"] = [list(x) for x in self.stage_schedule]
        return d


# ---------------------------------------------------------------------------
# candidates and islands

@dataclass
class Candidate:
    genome: Genome
    iteration: int = 0           # 0 until evaluated
    generation: int = 0
    island: int = 0
    operator: str = "init"
    parent_iteration: Optional[int] = None
    second_parent_iteration: Optional[int] = None
    evaluation: Optional[Evaluation] = None
    migrated_from: Optional[int] = None

    @property
    def id(self) -> str:
        return self.genome.id

    @property
    def evaluated(self) -> bool:
        return self.evaluation is not None

    @property
    def accepted(self) -> bool:
        return self.evaluation is not None and not self.evaluation.rejected

    @property
    def fitness(self) -> Optional[float]:
        return self.evaluation.fitness if self.accepted else None

    @property
    def score(self) -> float:
        return self.evaluation.combined_score if self.evaluation is not None else 0.0

    def objectives(self) -> tuple[float, float, float]:
        """(mean rho, reliability, -parameter count), all maximized."""
        e = self.evaluation
        return (e.aggregate.spearman_rho, e.reliability, -float(e.n_params))


@dataclass
class IslandState:
    island_id: int
    population: list
    rng: np.random.Generator
    elites: list = field(default_factory=list)
    generation: int = 0


# ---------------------------------------------------------------------------
# selection

def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def nondominated_sort(candidates: Sequence, key=None) -> list[list[int]]:
    """Fast non-dominated sort; returns fronts as lists of indices (maximization).

    ``key`` maps an item to its objective tuple; by default items are
    :class:`Candidate` (via ``objectives``) or raw objective tuples.
    """
    if key is None:
        key = lambda c: c.objectives() if hasattr(c, "objectives") else tuple(c)
    objs = [tuple(key(c)) for c in candidates]
    n = len(objs)
    dominated_by = [[] for _ in range(n)]
    count = [0] * n
    for p in range(n):
        for q in range(p + 1, n):
            if dominates(objs[p], objs[q]):
                dominated_by[p].append(q)
                count[q] += 1
            elif dominates(objs[q], objs[p]):
                dominated_by[q].append(p)
                count[p] += 1
    fronts = []
    current = [p for p in range(n) if count[p] == 0]
    while current:
        fronts.append(sorted(current))
        nxt = []
        for p in current:
            for q in dominated_by[p]:
                count[q] -= 1
                if count[q] == 0:
                    nxt.append(q)
        current = nxt
    return fronts


def rank_candidates(cands: Sequence[Candidate]) -> list[Candidate]:
    """Accepted first by (front, -fitness, iteration); rejected after, newest last."""
    accepted = [c for c in cands if c.accepted]
    rejected = [c for c in cands if not c.accepted]
    front_of = {}
    for r, front in enumerate(nondominated_sort(accepted)):
        for idx in front:
            front_of[id(accepted[idx])] = r
    accepted.sort(key=lambda c: (front_of[id(c)], -c.fitness, c.iteration))
    rejected.sort(key=lambda c: c.iteration)
    return accepted + rejected


def select_survivors(pool: Sequence[Candidate], size: int) -> list[Candidate]:
    """Best ``size`` members, preferring distinct pipelines over duplicates."""
    ranked = rank_candidates(pool)
    seen, first, dupes = set(), [], []
    for c in ranked:
        (dupes if c.id in seen else first).append(c)
        seen.add(c.id)
    return (first + dupes)[:size]


def choose_elites(pop: Sequence[Candidate], n: int) -> list[Candidate]:
    return [c for c in rank_candidates(pop) if c.accepted][:n]


def select_parents(pop: Sequence[Candidate], mode: str, param: float, rng: np.random.Generator,
                   n: int = 1) -> tuple[list[Candidate], bool]:
    """Parents for the next batch; the flag is True when falling back to uniform sampling.

    adaptive: ``n`` Boltzmann draws at temperature ``param`` over accepted
    candidates.  topk: the ``param`` best accepted by fitness, ties by id.
    """
    accepted = [c for c in pop if c.accepted]
    if not accepted:
        idx = rng.integers(len(pop), size=n)
        return [pop[int(i)] for i in idx], True
    if mode == "topk":
        k = int(param)
        return sorted(accepted, key=lambda c: (-c.fitness, c.id))[:k], False
    if mode != "adaptive":
        raise ValueError(f"unknown sampling mode {mode!r}")
    f = np.array([c.fitness for c in accepted])
    z = (f - f.max()) / float(param)
    p = np.exp(z)
    p /= p.sum()
    idx = rng.choice(len(accepted), size=n, p=p)
    return [accepted[int(i)] for i in idx], False


# ---------------------------------------------------------------------------
# archive

def descriptor(n_params: int, inference_macs: int, bins: int = 8) -> tuple[int, int]:
    """(log2 parameter-count bin, log inference-cost bin), each clamped to [0, bins)."""
    pbin = int(np.clip(math.floor(math.log2(max(n_params, 1))) - 2, 0, bins - 1))
    cbin = int(np.clip(math.floor(math.log2(inference_macs + 1) * bins / 12), 0, bins - 1))
    return pbin, cbin


@dataclass
class Archive:
    bins: int = 8
    cells: dict = field(default_factory=dict)

    def qd_score(self) -> float:
        return float(sum(c.fitness for c in self.cells.values()))

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "cells": [
                {"complexity_bin": k[0], "cost_bin": k[1], "genome_id": c.id, "iteration": c.iteration,
                 "fitness": fmt(c.fitness), "combined_score": fmt(c.score), "genome": c.genome.to_dict()}
                for k, c in sorted(self.cells.items())
            ],
            "qd_score": fmt(self.qd_score()),
        }


def archive_insert(archive: Archive, cand: Candidate) -> tuple[Archive, bool]:
    """Insert into the descriptor cell on empty or strictly higher fitness.

    Only positive fitness is admitted, so every insertion raises the QD score.
    """
    if not cand.accepted:
        raise ValueError("rejected candidates never enter the archive")
    if cand.fitness <= 0:
        return archive, False
    e = cand.evaluation
    key = descriptor(e.n_params, e.inference_macs, archive.bins)
    before = archive.qd_score()
    inc = archive.cells.get(key)
    if inc is not None and not cand.fitness > inc.fitness:
        return archive, False
    archive.cells[key] = cand
    assert archive.qd_score() >= before
    return archive, True


# ---------------------------------------------------------------------------
# constraint memory

class ConstraintMemory:
    """Decayed (operator kind, failed gate) counts and the derived operator weights."""

    FLOOR = 0.05

    def __init__(self, decay: float = 0.95, enabled: bool = True):
        self.decay_factor = decay
        self.enabled = enabled
        self.counts: dict = {}

    def record_failure(self, kind, gate: str) -> None:
        k = (OperatorKind(kind), gate)
        self.counts[k] = self.counts.get(k, 0.0) + 1.0

    def decay(self) -> None:
        for k in self.counts:
            self.counts[k] *= self.decay_factor

    def kind_counts(self) -> np.ndarray:
        out = np.zeros(len(OPERATOR_KINDS))
        for (kind, _), c in self.counts.items():
            out[OPERATOR_KINDS.index(kind)] += c
        return out

    def weights(self) -> np.ndarray:
        return operator_weights(self)

    def to_dict(self) -> dict:
        return {f"{k.value}:{g}": fmt(c) for (k, g), c in sorted(self.counts.items(), key=lambda x: (x[0][0].value, x[0][1]))}


def operator_weights(memory: ConstraintMemory) -> np.ndarray:
    """Down-weight kinds by their decayed failure share (pseudo-count 1), floor, renormalize."""
    K = len(OPERATOR_KINDS)
    uniform = np.full(K, 1.0 / K)
    if not memory.enabled:
        return uniform
    c = memory.kind_counts()
    share = c / (c.sum() + 1.0)
    w = np.maximum(uniform * (1.0 - share), memory.FLOOR / K)
    return w / w.sum()


def record_failure(memory: ConstraintMemory, kind, gate: str) -> None:
    memory.record_failure(kind, gate)


def choose_operator(weights, rng: np.random.Generator) -> OperatorKind:
    return OPERATOR_KINDS[int(rng.choice(len(OPERATOR_KINDS), p=weights))]


# ---------------------------------------------------------------------------
# trajectory

@dataclass(frozen=True)
class TrajectoryRecord:
    candidate_id: str
    parent_id: Optional[str]
    iteration: int
    generation: int
    island: int
    operator: str
    gate: str                 # "pass" or the first failed gate
    score: float
    fitness: Optional[float]
    stage: str
    parent_iteration: Optional[int] = None
    second_parent_id: Optional[str] = None
    second_parent_iteration: Optional[int] = None
    via_migration: bool = False
    parent_island: Optional[int] = None
    metrics: Optional[dict] = None
    status: str = ""

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "parent_id": self.parent_id,
            "parent_iteration": self.parent_iteration,
            "second_parent_id": self.second_parent_id,
            "second_parent_iteration": self.second_parent_iteration,
            "iteration": self.iteration,
            "generation": self.generation,
            "island": self.island,
            "parent_island": self.parent_island,
            "via_migration": self.via_migration,
            "operator": self.operator,
            "stage": self.stage,
            "gate": self.gate,
            "status": self.status,
            "score": fmt(self.score),
            "fitness": None if self.fitness is None else fmt(self.fitness),
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls(
            candidate_id=d["candidate_id"], parent_id=d.get("parent_id"), iteration=int(d["iteration"]),
            generation=int(d["generation"]), island=int(d["island"]), operator=d["operator"],
            gate=d["gate"], score=float(d["score"]),
            fitness=None if d.get("fitness") is None else float(d["fitness"]),
            stage=d.get("stage", "explore"), parent_iteration=d.get("parent_iteration"),
            second_parent_id=d.get("second_parent_id"),
            second_parent_iteration=d.get("second_parent_iteration"),
            via_migration=bool(d.get("via_migration", False)), parent_island=d.get("parent_island"),
            metrics=d.get("metrics"), status=d.get("status", ""),
        )


@dataclass
class EvolutionResult:
    islands: list
    archive: Archive
    trajectory: list
    best: Optional[Candidate]
    qd_history: list
    generation_summary: list
    weights_history: list
    migrations: list
    fallbacks: list
    config: EvolutionConfig
    contract: Contract

    @property
    def best_score(self) -> float:
        """Best combined score over every accepted evaluation of the run."""
        return max((r.score for r in self.trajectory if r.gate == "pass"), default=0.0)

    def best_so_far(self) -> np.ndarray:
        s = np.array([r.score if r.gate == "pass" else 0.0 for r in self.trajectory])
        return np.maximum.accumulate(s) if len(s) else s

    def failure_rates(self) -> dict:
        """Share of evaluations rejected by each gate (failure-rate accounting)."""
        n = max(len(self.trajectory), 1)
        out: dict = {}
        for r in self.trajectory:
            if r.gate != "pass":
                out[r.gate] = out.get(r.gate, 0) + 1
        return {g: c / n for g, c in sorted(out.items())}


# ---------------------------------------------------------------------------
# engine

def island_rngs(master_seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence([int(master_seed), 0x15A]).spawn(n)
    return [np.random.default_rng(s) for s in children]


def initial_genomes(rng: np.random.Generator, ds: Dataset, size: int) -> list[Genome]:
    """One default genome per model family, then random variants."""
    masked = tuple(ds.banned_columns)
    base = default_genome(ds.n_features, masked)
    out = []
    for fam in FAMILIES[:size]:
        out.append(dataclasses.replace(base, model=ModelSpec.for_family(fam)))
    while len(out) < size:
        fam = FAMILIES[len(out) % len(FAMILIES)]
        out.append(random_genome(rng, ds.n_features, masked=masked, family=fam))
    return out


def initialize(config: EvolutionConfig, ds: Dataset) -> list[IslandState]:
    config.validate()
    islands = []
    for k, rng in enumerate(island_rngs(config.master_seed, config.islands)):
        pop = [Candidate(genome=g, island=k) for g in initial_genomes(rng, ds, config.population)]
        islands.append(IslandState(island_id=k, population=pop, rng=rng))
    return islands


def migrate(islands: list[IslandState], count: int = 1, rng=None, generation: int = 0) -> list[dict]:
    """Ring migration of copies of each island's top elites; returns the events.

    An arrival replaces the receiving island's lowest-fitness member when it is
    strictly better than that member; otherwise it is dropped (logged with
    ``replaced=None``), so no island's minimum fitness ever falls.
    """
    n = len(islands)
    if n < 2:
        return []
    payloads = [[c for c in choose_elites(isl.population, count)] for isl in islands]
    events = []
    for src, payload in enumerate(payloads):
        dst = islands[(src + 1) % n]
        for c in payload:
            arrival = dataclasses.replace(c, island=dst.island_id, migrated_from=islands[src].island_id)
            worst = min(dst.population, key=lambda m: (fitness_key(m.fitness), -m.iteration))
            replaced = None
            if fitness_key(c.fitness) > fitness_key(worst.fitness):
                dst.population = [arrival if m is worst else m for m in dst.population]
                replaced = worst.id
            events.append({"generation": generation, "source": islands[src].island_id,
                           "destination": dst.island_id, "candidate_id": c.id,
                           "iteration": c.iteration, "replaced": replaced})
        dst.elites = choose_elites(dst.population, max(len(dst.elites), count))
    return events


def inject_immigrants(island: IslandState, rate: float, rng: np.random.Generator, ds: Dataset,
                      generation: int = 0) -> Optional[Candidate]:
    """With probability ``rate`` replace one non-elite member by a fresh random genome."""
    if rate <= 0 or rng.random() >= rate:
        return None
    elite_ids = {id(e) for e in island.elites}
    slots = [i for i, m in enumerate(island.population) if id(m) not in elite_ids]
    if not slots:
        return None
    slot = slots[int(rng.integers(len(slots)))]
    g = random_genome(rng, ds.n_features, masked=tuple(ds.banned_columns))
    newcomer = Candidate(genome=g, island=island.island_id, generation=generation, operator="immigrant")
    island.population[slot] = newcomer
    return newcomer


def _variate(island: IslandState, n: int, config: EvolutionConfig, memory: ConstraintMemory,
             generation: int, next_iter: int) -> tuple[list[Candidate], bool]:
    rng = island.rng
    param = config.temperature_at(generation) if config.sampling == "adaptive" else config.topk
    parents, fallback = select_parents(island.population, config.sampling, param, rng,
                                       n=2 * n if config.sampling == "adaptive" else 1)
    weights = operator_weights(memory)
    children = []
    for j in range(n):
        if config.sampling == "adaptive" or fallback:
            pa, pb = parents[(2 * j) % len(parents)], parents[(2 * j + 1) % len(parents)]
        else:
            pa, pb = parents[j % len(parents)], parents[(j + 1) % len(parents)]
        if rng.random() < config.crossover_rate and pa.accepted and pb.accepted and pa.id != pb.id:
            g = crossover(pa.genome, pb.genome, rng, iteration=next_iter + j, generation=generation)
            children.append(Candidate(genome=g, island=island.island_id, generation=generation,
                                      operator="crossover", parent_iteration=pa.iteration,
                                      second_parent_iteration=pb.iteration))
            continue
        kind = choose_operator(weights, rng)
        g = mutate(pa.genome, kind, rng, iteration=next_iter + j, generation=generation)
        children.append(Candidate(genome=g, island=island.island_id, generation=generation,
                                  operator=kind.value, parent_iteration=pa.iteration))
    return children, fallback


def run_evolution(config: EvolutionConfig, ds: Dataset, base_contract: Contract,
                  evaluator: Optional[Evaluator] = None, progress=None) -> EvolutionResult:
    config.validate()
    evaluator = evaluator if evaluator is not None else Evaluator(ds)
    islands = initialize(config, ds)
    memory = ConstraintMemory(config.memory_decay, enabled=config.feedback)
    archive = Archive(config.archive_bins)
    trajectory: list[TrajectoryRecord] = []
    by_iteration: dict[int, Candidate] = {}
    qd_history, summary, weights_history, migrations, fallbacks = [], [], [], [], []
    best: Optional[Candidate] = None
    iteration = 0
    stage = None

    for gen in range(config.generations):
        new_stage = config.stage_at(gen)
        c = tighten(base_contract, new_stage)
        if stage is not None and new_stage != stage:
            # survivors are re-checked against the stricter contract (no new records)
            for isl in islands:
                # fresh objects: archived and best-so-far entries keep their original verdicts
                isl.population = [dataclasses.replace(m, evaluation=evaluator.evaluate(m.genome, c))
                                  if m.evaluated else m for m in isl.population]
                isl.elites = choose_elites(isl.population, config.elites)
        stage = new_stage
        weights_history.append([float(w) for w in operator_weights(memory)])

        for isl in islands:
            for m in isl.population:
                if m.evaluated:
                    continue
                iteration += 1
                m.iteration, m.generation = iteration, gen
                m.evaluation = ev = evaluator.evaluate(m.genome, c)
                by_iteration[iteration] = m
                parent = by_iteration.get(m.parent_iteration) if m.parent_iteration else None
                second = by_iteration.get(m.second_parent_iteration) if m.second_parent_iteration else None
                trajectory.append(TrajectoryRecord(
                    candidate_id=m.id, parent_id=parent.id if parent else None, iteration=iteration,
                    generation=gen, island=isl.island_id, operator=m.operator,
                    gate="pass" if not ev.rejected else ev.failed_gate,
                    score=ev.combined_score, fitness=ev.fitness, stage=c.stage,
                    parent_iteration=m.parent_iteration,
                    second_parent_id=second.id if second else None,
                    second_parent_iteration=m.second_parent_iteration,
                    via_migration=bool(parent is not None and parent.island != isl.island_id),
                    parent_island=parent.island if parent else None,
                    metrics=None if ev.aggregate is None else ev.aggregate.to_dict(),
                    status=ev.status,
                ))
                if ev.rejected:
                    if m.operator in {k.value for k in OPERATOR_KINDS}:
                        memory.record_failure(m.operator, ev.failed_gate)
                else:
                    archive_insert(archive, m)
                    if best is None or m.fitness > best.fitness:
                        best = m
            if progress is not None:
                progress(gen, isl.island_id, iteration)

        for isl in islands:
            isl.population = select_survivors(isl.population, config.population)
            isl.elites = choose_elites(isl.population, config.elites)
            isl.generation = gen
            scores = [m.score for m in isl.population]
            summary.append({"generation": gen, "island": isl.island_id, "stage": stage,
                            "best_score": max(scores), "mean_score": float(np.mean(scores)),
                            "accepted": sum(m.accepted for m in isl.population)})

        qd = archive.qd_score()
        if qd_history and qd < qd_history[-1]:
            raise AssertionError(f"QD score decreased at generation {gen}")
        qd_history.append(qd)
        memory.decay()

        if gen == config.generations - 1:
            break
        if config.islands > 1 and gen > 0 and gen % config.migration_interval == 0:
            migrations.extend(migrate(islands, config.migration_count, generation=gen))
        for isl in islands:
            imm = inject_immigrants(isl, config.immigrant_rate, isl.rng, ds, generation=gen + 1)
            n_children = config.population - (1 if imm is not None else 0)
            children, fell_back = _variate(isl, n_children, config, memory, gen + 1, iteration + 1)
            if fell_back:
                fallbacks.append({"generation": gen + 1, "island": isl.island_id})
            isl.population = isl.population + children

    return EvolutionResult(islands=islands, archive=archive, trajectory=trajectory, best=best,
                           qd_history=qd_history, generation_summary=summary,
                           weights_history=weights_history, migrations=migrations, fallbacks=fallbacks,
                           config=config, contract=base_contract)
