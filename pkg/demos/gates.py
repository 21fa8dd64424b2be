"""Evaluate a clean genome and two contract violators on the default task."""
import dataclasses

from cdevolve import contract, taskbench
from cdevolve.genome import SplitSpec, default_genome

ds = taskbench.generate(taskbench.TaskSpec())
c = contract.Contract.for_master_seed(0)

clean = default_genome()
leaky = default_genome(masked=())  # keeps the label-derived column
shuffled = dataclasses.replace(clean, split=SplitSpec(policy="random"))

for name, g in [("clean", clean), ("leaky", leaky), ("random split", shuffled)]:
    ev = contract.evaluate(g, ds, c)
    if ev.rejected:
        gate = next(gr for gr in ev.gates if not gr.passed)
        print(f"{name:>12}: rejected at {gate.gate} ({gate.evidence})")
    else:
        a = ev.aggregate
        print(f"{name:>12}: S={a.combined_score:.4f} rho={a.spearman_rho:.4f} "
              f"reliability={ev.reliability:.4f} fitness={ev.fitness:.4f}")

# the same leaky genome with the contract switched off looks excellent
open_c = dataclasses.replace(c, leakage_enabled=False, banned_policies=())
ev = contract.evaluate(dataclasses.replace(leaky, split=SplitSpec(policy="random")), ds, open_c)
print(f"leaky, ungated: rho={ev.aggregate.spearman_rho:.4f}")
