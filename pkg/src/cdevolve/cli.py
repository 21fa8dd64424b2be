"""Command-line entry point: run, replay, ablate, screen (plus a dataset writer).

Exit codes: 0 success, 2 validation error, 3 verification mismatch, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__, contract as contract_mod, escalate, report
from .contract import Contract, Evaluator, tighten
from .evolve import EvolutionConfig, run_evolution
from .genome import Genome, canonical_json, validate
from .metrics import FitnessWeights, ScoreWeights
from .taskbench import Dataset, SpecificationError, TaskSpec, generate, load_csv

EXIT_OK, EXIT_VALIDATION, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    master_seed: int
    task: TaskSpec = field(default_factory=TaskSpec)
    dataset_csv: Optional[str] = None
    dataset_card: Optional[str] = None
    contract: dict = field(default_factory=dict)
    evolution: dict = field(default_factory=dict)
    score_weights: ScoreWeights = field(default_factory=ScoreWeights)
    fitness_weights: FitnessWeights = field(default_factory=FitnessWeights)
    output_dir: str = "out"
    ablation: dict = field(default_factory=dict)
    screening: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    KEYS = ("master_seed", "task", "dataset", "contract", "evolution", "score_weights",
            "fitness_weights", "output_dir", "ablation", "screening")
    CONTRACT_KEYS = ("seeds", "n_seeds", "folds", "stage_limits", "banned_policies", "leakage")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(cls.KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "master_seed" not in d:
            raise ConfigError("master_seed is required")
        seed = d["master_seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("master_seed must be a nonnegative integer")
        try:
            task = TaskSpec.from_dict(d.get("task", {}))
            task.validate()
            sw = ScoreWeights(**d.get("score_weights", {}))
            fw = FitnessWeights(**d.get("fitness_weights", {}))
        except (SpecificationError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        ds_cfg = d.get("dataset", {})
        if set(ds_cfg) - {"csv", "card"}:
            raise ConfigError("dataset accepts only 'csv' and 'card'")
        c = d.get("contract", {})
        bad = sorted(set(c) - set(cls.CONTRACT_KEYS))
        if bad:
            raise ConfigError(f"unknown contract keys: {bad}")
        cfg = cls(master_seed=seed, task=task, dataset_csv=ds_cfg.get("csv"), dataset_card=ds_cfg.get("card"),
                  contract=c, evolution=d.get("evolution", {}), score_weights=sw, fitness_weights=fw,
                  output_dir=d.get("output_dir", "out"), ablation=d.get("ablation", {}),
                  screening=d.get("screening", {}), raw=d, base_dir=Path(base_dir))
        cfg.make_contract()
        cfg.make_evolution()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    def make_contract(self, master_seed: Optional[int] = None) -> Contract:
        c = self.contract
        seed = self.master_seed if master_seed is None else master_seed
        try:
            kw = {"folds": int(c.get("folds", 3)), "score_weights": self.score_weights,
                  "fitness_weights": self.fitness_weights,
                  "banned_policies": tuple(c.get("banned_policies", ("random",))),
                  "leakage_enabled": bool(c.get("leakage", True))}
            if "stage_limits" in c:
                limits = dict(contract_mod.DEFAULT_STAGE_LIMITS)
                limits.update({k: (float(v[0]), float(v[1])) for k, v in c["stage_limits"].items()})
                kw["stage_limits"] = tuple(limits.items())
            if "seeds" in c and master_seed is None:
                return tighten(Contract(seeds=tuple(int(s) for s in c["seeds"]), **kw), "explore")
            return Contract.for_master_seed(seed, int(c.get("n_seeds", 3)), **kw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"contract: {exc}") from None

    def make_evolution(self, master_seed: Optional[int] = None) -> EvolutionConfig:
        d = dict(self.evolution)
        if "master_seed" in d:
            raise ConfigError("evolution.master_seed is not allowed; use the top-level master_seed")
        d["master_seed"] = self.master_seed if master_seed is None else master_seed
        try:
            cfg = EvolutionConfig.from_dict(d)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"evolution: {exc}") from None
        return cfg

    def dataset(self) -> Dataset:
        if self.dataset_csv:
            card = None
            if self.dataset_card:
                card = json.loads((self.base_dir / self.dataset_card).read_text())
            return load_csv(self.base_dir / self.dataset_csv, card)
        return generate(self.task)

    def out_dir(self, override=None) -> Path:
        return Path(override) if override else self.base_dir / self.output_dir


# ---------------------------------------------------------------------------
# helpers

def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"output directory {path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(cfg: ExperimentConfig, command: str, files: list[str], extra: Optional[dict] = None) -> dict:
    m = {"command": command, "config_hash": cfg.hash(), "engine_version": __version__,
         "master_seed": cfg.master_seed, "files": sorted(files),
         "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")}
    m.update(extra or {})
    return m


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands

def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = cfg.out_dir(args.out)
    _prepare_out(out, args.force)
    ds = cfg.dataset()
    evo = cfg.make_evolution()
    con = cfg.make_contract()
    progress = None
    if args.verbose:
        progress = lambda gen, isl, it: _log(f"generation {gen} island {isl} iteration {it}")
    res = run_evolution(evo, ds, con, progress=progress)
    report.write_trajectory(res.trajectory, out / "trajectory.jsonl")
    _write_json(out / "archive.json", res.archive.to_dict())
    report.write_generation_summary(res, out / "summary.csv")
    files = ["trajectory.jsonl", "archive.json", "summary.csv"]
    if res.best is not None:
        (out / "best.genome.json").write_text(json.dumps(res.best.genome.to_dict(), indent=2, sort_keys=True) + "\n")
        files.append("best.genome.json")
    extra = {"best_genome_id": res.best.id if res.best else None,
             "best_iteration": res.best.iteration if res.best else None,
             "best_score": f"{res.best_score:.6f}", "evaluations": len(res.trajectory),
             "failure_rates": {k: f"{v:.6f}" for k, v in res.failure_rates().items()},
             "qd_score": f"{res.archive.qd_score():.6f}"}
    _write_json(out / "manifest.json", _manifest(cfg, "run", files + ["manifest.json"], extra))
    print(json.dumps(extra, sort_keys=True))
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    gpath = Path(args.genome)
    try:
        g = Genome.from_json(gpath.read_text())
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{gpath}: not a genome: {exc}") from None
    problems = validate(g)
    if problems:
        raise ConfigError(f"{gpath}: invalid genome: " + "; ".join(problems))
    record = None
    traj_path = Path(args.trajectory) if args.trajectory else gpath.parent / "trajectory.jsonl"
    if traj_path.exists():
        record = next((r for r in report.read_trajectory(traj_path) if r.candidate_id == g.id), None)
    stage = args.stage or (record.stage if record is not None else "explore")
    con = tighten(cfg.make_contract(), stage)
    ds = cfg.dataset()
    ev = Evaluator(ds, cache=False).evaluate(g, con)
    print(json.dumps(ev.to_dict(), indent=2, sort_keys=True))
    if not args.verify:
        return EXIT_OK
    if record is None:
        _log(f"verification failed: genome {g.id} not found in {traj_path}")
        return EXIT_VERIFY
    got = {"gate": "pass" if not ev.rejected else ev.failed_gate,
           "metrics": None if ev.aggregate is None else ev.aggregate.to_dict()}
    want = {"gate": record.gate, "metrics": record.metrics}
    if got != want:
        _log("verification failed:")
        for k in ("gate", "metrics"):
            if got[k] != want[k]:
                _log(f"  {k}: logged {want[k]} != replayed {got[k]}")
        return EXIT_VERIFY
    _log(f"verified: genome {g.id} matches iteration {record.iteration}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = cfg.out_dir(args.out)
    _prepare_out(out, args.force)
    ds = cfg.dataset()
    abl = cfg.ablation
    variants = tuple(abl.get("variants", report.VARIANT_NAMES))
    unknown = [v for v in variants if v not in report.VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants: {unknown}")
    seeds = abl.get("seeds") or report.run_seeds(cfg.master_seed, int(abl.get("n_seeds", 3)))
    progress = (lambda row: _log(json.dumps(row))) if args.verbose else None
    outcome = report.run_ablation(cfg.make_evolution(), ds, variants, seeds=seeds,
                                  contract_factory=lambda s: cfg.make_contract(master_seed=s),
                                  out_dir=out, progress=progress)
    means = {k: f"{v:.6f}" for k, v in outcome.mean_final().items()}
    files = ["ablation_summary.csv"] + [f"trajectory_{r['variant']}_{r['seed']}.jsonl" for r in outcome.rows]
    _write_json(out / "manifest.json", _manifest(cfg, "ablate", files + ["manifest.json"],
                                                 {"seeds": list(seeds), "mean_final_best": means}))
    print(json.dumps(means, sort_keys=True))
    return EXIT_OK


def cmd_screen(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = cfg.out_dir(args.out)
    gpath = Path(args.genome) if args.genome else cfg.out_dir() / "best.genome.json"
    g = Genome.from_json(gpath.read_text())
    problems = validate(g)
    if problems:
        raise ConfigError(f"{gpath}: invalid genome: " + "; ".join(problems))
    ds = cfg.dataset()
    batch = load_csv(args.batch)
    if batch.n_features != ds.n_features:
        raise ConfigError(f"batch has {batch.n_features} feature columns, training data has {ds.n_features}")
    con = cfg.make_contract()
    ens = escalate.SeedEnsemble(g, ds, con.seeds)
    sigma_max = math.inf if args.sigma_max is None else args.sigma_max
    decisions, ranking = escalate.screen(batch.X, ens, sigma_max, versions=batch.version)
    labels = batch.y
    if len(decisions) and all(math.isfinite(v) for v in labels):
        kpi = escalate.kpis(decisions, labels, args.top_k)
    else:
        kpi = {"n_screened": len(decisions), "escalated": sum(d.decision == "escalate" for d in decisions)}
        kpi["escalation_rate"] = kpi["escalated"] / len(decisions) if decisions else None
        kpi["topK_ranking_fidelity"] = None
    sc = cfg.screening
    cost_cfd = float(sc.get("cost_cfd", 10.0))
    n_confirm = min(args.top_k, len(ranking))
    roi_in = escalate.RoiInputs(n_screened=len(decisions), cost_cfd=cost_cfd,
                                cost_surrogate=float(sc.get("cost_surrogate", 500.0)),
                                cost_validation=(kpi["escalated"] + n_confirm) * cost_cfd)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "screen_decisions.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sample_id", "mean", "sigma", "decision", "reason"])
        w.writeheader()
        for d in decisions:
            w.writerow(d.to_dict())
    result = {"genome_id": g.id, "sigma_max": None if math.isinf(sigma_max) else sigma_max, "K": args.top_k,
              "kpis": kpi, "roi_inputs": dataclasses.asdict(roi_in),
              "roi": escalate.roi(roi_in) if roi_in.cost_surrogate + roi_in.cost_validation > 0 else None,
              "ranking": ranking}
    _write_json(out / "screen_report.json", result)
    print(json.dumps({"kpis": kpi, "roi": result["roi"]}, sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    ds = cfg.dataset()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, card_path = ds.write(out, args.stem)
    print(json.dumps({"csv": str(csv_path), "card": str(card_path), "sha256": ds.hash()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdevolve", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the evolutionary search")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    r.add_argument("--verbose", "-v", action="store_true")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("replay", help="re-evaluate a genome under the config's contract")
    r.add_argument("--config", required=True)
    r.add_argument("--genome", required=True)
    r.add_argument("--trajectory", help="trajectory log (default: next to the genome file)")
    r.add_argument("--stage", choices=contract_mod.STAGES, help="contract stage (default: as logged)")
    r.add_argument("--verify", action="store_true", help="require equality with the logged record")
    r.set_defaults(func=cmd_replay)

    r = sub.add_parser("ablate", help="run the ablation variants")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--force", action="store_true")
    r.add_argument("--verbose", "-v", action="store_true")
    r.set_defaults(func=cmd_ablate)

    r = sub.add_parser("screen", help="screen a batch of designs with a trained pipeline")
    r.add_argument("--config", required=True)
    r.add_argument("--batch", required=True, help="CSV with x0..xN columns (label optional)")
    r.add_argument("--genome", help="genome file (default: best.genome.json in the output directory)")
    r.add_argument("--sigma-max", type=float, default=None, help="uncertainty threshold (default: none)")
    r.add_argument("--top-k", type=int, default=10)
    r.add_argument("--out")
    r.set_defaults(func=cmd_screen)

    r = sub.add_parser("generate", help="write the configured task dataset as CSV plus card")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--stem", default="dataset")
    r.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecificationError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except ValueError as exc:
        # malformed inputs such as batch CSV rows
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except (OSError, FileExistsError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
