"""One seed of the two-step vs one-step comparison at a reduced budget.

The reconstruction comparison alone takes a few minutes. Pass ``--downstream``
to also train diffusion, generate pairs and score inversion-lite per arm.

    python demos/two_step_vs_ablation.py [--seed 0] [--downstream]
"""

import argparse
import json
from dataclasses import replace

from ubdiff.experiment import ExperimentSettings, run_seed

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--downstream", action="store_true")
args = ap.parse_args()

base = ExperimentSettings()
quick = replace(base, trainer=replace(base.trainer, epochs_step2=100, lr_decay=0.98),
                diffusion_steps=500, n_generated=500, inversion_epochs=8)
res = run_seed(args.seed, quick, downstream=args.downstream)
for arm in ("two_step", "ablation"):
    print(arm, json.dumps(res[arm], indent=1, default=str))
