"""Lineage and trajectory analytics, and the ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .contract import Contract, Evaluator
from .evolve import EvolutionConfig, EvolutionResult, TrajectoryRecord, run_evolution
from .genome import canonical_json
from .taskbench import Dataset

VARIANT_NAMES = ("full", "no_feedback", "no_island", "no_adaptive")


def _records(trajectory) -> list[TrajectoryRecord]:
    return [r if isinstance(r, TrajectoryRecord) else TrajectoryRecord.from_dict(r) for r in trajectory]


def read_trajectory(path) -> list[TrajectoryRecord]:
    with Path(path).open() as fh:
        return [TrajectoryRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_trajectory(trajectory, path) -> None:
    with Path(path).open("w") as fh:
        for r in _records(trajectory):
            fh.write(canonical_json(r.to_dict()) + "\n")


# ---------------------------------------------------------------------------
# lineage

def lineage(trajectory, candidate) -> list[dict]:
    """Ancestor chain, root first, ending at ``candidate``.

    ``candidate`` is a genome id (its first evaluation is used) or an
    iteration number.  Crossover children follow their first parent.
    """
    recs = _records(trajectory)
    by_iter = {r.iteration: r for r in recs}
    if isinstance(candidate, (int, np.integer)):
        if int(candidate) not in by_iter:
            raise KeyError(f"no evaluation at iteration {candidate}")
        node = by_iter[int(candidate)]
    else:
        node = next((r for r in recs if r.candidate_id == candidate), None)
        if node is None:
            raise KeyError(f"unknown candidate id {candidate!r}")
    chain = []
    seen = set()
    while node is not None:
        if node.iteration in seen:
            raise ValueError("cyclic lineage")
        seen.add(node.iteration)
        chain.append({
            "candidate_id": node.candidate_id, "score": node.score, "iteration": node.iteration,
            "generation": node.generation, "operator": node.operator, "island": node.island,
            "via_migration": node.via_migration,
        })
        node = by_iter.get(node.parent_iteration) if node.parent_iteration else None
    return chain[::-1]


# ---------------------------------------------------------------------------
# trajectories

def best_so_far(trajectory) -> np.ndarray:
    s = np.array([r.score if r.gate == "pass" else 0.0 for r in _records(trajectory)])
    return np.maximum.accumulate(s) if len(s) else s


def trajectory_summary(logs: Sequence) -> dict:
    """Per-iteration mean/min/max of the best-so-far score over runs."""
    if not logs:
        raise ValueError("need at least one run")
    curves = [best_so_far(t) for t in logs]
    if len({len(c) for c in curves}) != 1:
        raise ValueError("runs have unequal evaluation budgets")
    M = np.vstack(curves)
    return {"iteration": np.arange(1, M.shape[1] + 1), "mean": M.mean(0), "min": M.min(0), "max": M.max(0)}


def iterations_to_fraction(trajectory, fraction: float = 0.95) -> int:
    """First iteration whose best-so-far reaches ``fraction`` of the final best."""
    curve = best_so_far(trajectory)
    if not len(curve) or curve[-1] <= 0:
        return 0
    return int(np.argmax(curve >= fraction * curve[-1])) + 1


# ---------------------------------------------------------------------------
# ablation

@dataclass(frozen=True)
class AblationVariant:
    name: str
    transform: Callable[[EvolutionConfig], EvolutionConfig]

    def apply(self, cfg: EvolutionConfig) -> EvolutionConfig:
        out = self.transform(cfg)
        if out.total_evaluations != cfg.total_evaluations:
            raise ValueError(f"variant {self.name} changes the evaluation budget")
        return out


def _no_island(cfg: EvolutionConfig) -> EvolutionConfig:
    return dataclasses.replace(cfg, islands=1, population=cfg.islands * cfg.population)


VARIANTS = {
    "full": AblationVariant("full", lambda c: c),
    "no_feedback": AblationVariant("no_feedback", lambda c: dataclasses.replace(c, feedback=False)),
    "no_island": AblationVariant("no_island", _no_island),
    "no_adaptive": AblationVariant("no_adaptive", lambda c: dataclasses.replace(c, sampling="topk")),
}


def run_seeds(master_seed: int, n: int) -> list[int]:
    state = np.random.SeedSequence([int(master_seed), 0xAB1A7E]).generate_state(n)
    return [int(s) for s in state]


@dataclass
class AblationOutcome:
    rows: list            # one dict per (variant, seed)
    results: dict         # (variant, seed) -> EvolutionResult

    def mean_final(self) -> dict:
        out: dict = {}
        for row in self.rows:
            out.setdefault(row["variant"], []).append(row["final_best_score"])
        return {k: float(np.mean(v)) for k, v in out.items()}


def run_ablation(base: EvolutionConfig, ds: Dataset, variants: Sequence[str] = VARIANT_NAMES,
                 seeds: Optional[Sequence[int]] = None, n_seeds: int = 3,
                 contract_factory: Callable[[int], Contract] = Contract.for_master_seed,
                 out_dir=None, progress=None) -> AblationOutcome:
    """Run every variant once per seed; seeds default to a derivation of the master seed.

    Runs sharing a seed share one memoizing evaluator (evaluation is a pure
    function of genome, data and contract, so this only saves time).
    """
    seeds = list(seeds) if seeds is not None else run_seeds(base.master_seed, n_seeds)
    rows, results = [], {}
    for seed in seeds:
        contract = contract_factory(seed)
        evaluator = Evaluator(ds)
        for name in variants:
            cfg = VARIANTS[name].apply(dataclasses.replace(base, master_seed=int(seed)))
            res = run_evolution(cfg, ds, contract, evaluator=evaluator)
            results[(name, seed)] = res
            rows.append({
                "variant": name, "seed": int(seed), "final_best_score": res.best_score,
                "iterations_to_95pct": iterations_to_fraction(res.trajectory),
                "evaluations": len(res.trajectory), "migrations": len(res.migrations),
            })
            if progress is not None:
                progress(rows[-1])
            if out_dir is not None:
                write_trajectory(res.trajectory, Path(out_dir) / f"trajectory_{name}_{seed}.jsonl")
    outcome = AblationOutcome(rows, results)
    if out_dir is not None:
        write_ablation_summary(outcome, Path(out_dir) / "ablation_summary.csv")
    return outcome


def write_ablation_summary(outcome: AblationOutcome, path) -> None:
    fields = ["variant", "seed", "final_best_score", "iterations_to_95pct", "evaluations", "migrations"]
    with Path(path).open("w", newline="") as fh:
        fh.write("# no_island merges all islands into one population of equal total size, so its\n"
                 "# initial population differs from the other variants; the rest share it.\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in outcome.rows:
            w.writerow({**row, "final_best_score": f"{row['final_best_score']:.6f}"})


def write_generation_summary(result: EvolutionResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["generation", "island", "stage", "best_score", "mean_score", "accepted"])
        w.writeheader()
        for row in result.generation_summary:
            w.writerow({**row, "best_score": f"{row['best_score']:.6f}", "mean_score": f"{row['mean_score']:.6f}"})
