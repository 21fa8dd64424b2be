"""Screen a batch with a seed ensemble and report escalations, KPIs and ROI."""
import dataclasses

import numpy as np

from cdevolve import escalate, taskbench
from cdevolve.genome import ModelSpec, default_genome

ds = taskbench.generate(taskbench.TaskSpec())
g = dataclasses.replace(default_genome(), model=ModelSpec.for_family("kernel_ridge_rbf"))
ens = escalate.SeedEnsemble(g, ds, seeds=(0, 1, 2))

batch = np.arange(0, len(ds.y), 4)
X = ds.X[batch]
_, sigma = ens.predict_with_uncertainty(X)
for t in np.quantile(sigma, [0.25, 0.5, 0.75, 1.0]):
    decisions, ranking = escalate.screen(X, ens, float(t), sample_ids=batch)
    k = escalate.kpis(decisions, ds.y, K=10)
    cost_val = (k["escalated"] + k["topK"]) * 10.0
    r = escalate.roi(len(decisions), 10.0, 500.0, cost_val)
    print(f"sigma_max={t:.4f} escalated={k['escalated']:>3} rate={k['escalation_rate']:.2f} "
          f"fidelity@10={k['topK_ranking_fidelity']} gain={k['throughput_gain']:.2f} roi={r:.2f}")
