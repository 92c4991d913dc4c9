"""Why fusion matters for variable coefficients.

Trains the bundled Darcy MNO briefly and then evaluates it twice on the
same mixture coefficients: once as trained and once with the coefficient
branch cut off. Without fusion the RHS branch is a fixed linear map of c and
cannot follow the changing a(x).

    python demos/darcy_fusion.py [iterations]
"""

import sys

from gfmm.config import load_config, train_config
from gfmm.data import SamplingScheme, validation_set
from gfmm.problems import make_problem
from gfmm.train import evaluate, make_model_for, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
cfg = load_config("darcy1d-mno", [f"train.iterations={iters}", "train.eval_every=500",
                                  "train.eval_samples=200"])
problem = make_problem(cfg["problem"])
tc = train_config(cfg)
model = make_model_for(cfg["model"], problem, tc)
print(f"{model.num_parameters()} parameters")
train_loop(tc, model, problem, log=lambda r: print(f"it {r['iteration']:6d}  eps_rel {r['eps_rel']:.3e}"))

for dist in ("quadratic", "lognormal", "mixture"):
    batch = validation_set(problem, SamplingScheme(distribution=dist), 500)
    on = evaluate(model, problem, batch)["eps_rel"]
    off = evaluate(model, problem, batch, fusion=False)["eps_rel"]
    print(f"{dist:>9s}: eps_rel {on:.3e} with fusion, {off:.3e} without")
