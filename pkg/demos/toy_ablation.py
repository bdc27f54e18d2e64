"""Short component ablation on the path localization task.

The target at each node is its hop distance to a marked source, so most nodes
need information from far away. Removing the spectral part should hurt the
most. This run uses a reduced budget; the acceptance suite uses the full one.
"""

from dataclasses import replace

import numpy as np

from lrgwn.network import ModelConfig
from lrgwn.training import AdamWConfig, ablation_configs, make_path_localization_task, run_training

task = make_path_localization_task(seed=0)
base = ModelConfig(d_in=1, pe_dim=4, d=16, d_out=1, rho=3, z=8, lambda_cut=0.12,
                   aggregation="concat", admissible=True)
opt = AdamWConfig(lr=1e-2)
cache = {}
for name, cfg in ablation_configs(base).items():
    losses = []
    for seed in (0, 1):
        res, _ = run_training(task, cfg, k=8, epochs=120, seed=seed, opt=opt, patience=120,
                              evd_cache=cache, batch_size=4)
        losses.append(res.trace[res.best_epoch]["val_loss"])
    print(f"{name:>12}: best validation MSE {np.mean(losses):.3e}  (seeds {losses[0]:.2e}, {losses[1]:.2e})")
