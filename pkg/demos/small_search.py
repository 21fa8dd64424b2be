"""A short island search, then the lineage of its best candidate."""
from cdevolve import contract, evolve, report, taskbench

ds = taskbench.generate(taskbench.TaskSpec())
cfg = evolve.EvolutionConfig(islands=3, population=6, generations=8, migration_interval=3, master_seed=1)
res = evolve.run_evolution(cfg, ds, contract.Contract.for_master_seed(1))

print(f"evaluations {len(res.trajectory)}, best S {res.best_score:.4f}, QD {res.archive.qd_score():.3f}")
print("failure rates:", {k: round(v, 3) for k, v in res.failure_rates().items()})
print("best genome:", res.best.genome.to_json())
print("lineage:")
for node in report.lineage(res.trajectory, res.best.iteration):
    flag = " (migrated)" if node["via_migration"] else ""
    print(f"  it={node['iteration']:>3} gen={node['generation']} island={node['island']} "
          f"{node['operator']:<12} S={node['score']:.4f}{flag}")
