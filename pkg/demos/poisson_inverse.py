"""Learn the inverse of the 1D Laplacian and inspect the learned matrix.

A two-block linear UNO is trained on single Chebyshev modes. Since the
model is linear, its matrix G can be assembled and compared with A^-1 on
the training modes and away from them.

    python demos/poisson_inverse.py [iterations]
"""

import sys

import numpy as np

from gfmm.cli import dense_matrix
from gfmm.config import load_config, train_config
from gfmm.problems import chebyshev_basis, make_problem
from gfmm.train import make_model_for, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
cfg = load_config("poisson1d-uno", [f"train.iterations={iters}", "train.eval_every=1000", "train.lr_drops=[]"])
problem = make_problem(cfg["problem"])
tc = train_config(cfg)
model = make_model_for(cfg["model"], problem, tc)
train_loop(tc, model, problem, log=lambda r: print(f"it {r['iteration']:6d}  eps_rel {r['eps_rel']:.3e}"))

G = dense_matrix(model).astype(np.float64)
A = 2 * np.eye(problem.D) - np.eye(problem.D, k=1) - np.eye(problem.D, k=-1)
T = chebyshev_basis(16, problem.grid.xi)
on = np.linalg.norm(T @ A.T @ G.T - T, axis=1) / np.linalg.norm(T, axis=1)
print("||G A T_k - T_k|| / ||T_k|| on the training modes:", np.array2string(on, precision=1))

# a smooth field outside the span of the 16 modes
x = problem.grid.xi
u = np.exp(np.sin(3 * x))
err = np.linalg.norm(G @ (A @ u) - u) / np.linalg.norm(u)
print(f"relative error on exp(sin 3x): {err:.2e}")
