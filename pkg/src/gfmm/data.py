"""Synthetic training and evaluation data.

Two schemes are supported:

* solution sampling draws ``u`` from a Chebyshev expansion and obtains the
  right-hand side with the discrete forward operator;
* RHS sampling draws ``c`` from the same expansion and recovers ``u`` with
  the classical solver (linear problems only).

Batches are generated vectorised; targets and fields are stored in the
working dtype and the right-hand side of a solution sample is computed in
that same dtype, so re-applying the operator reproduces it bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, IntegrityError, UnsupportedError
from .problems import chebyshev_basis, make_problem

DATASET_FORMAT = "gfmm-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SamplingScheme:
    kind: str = "solution"
    K: int = 16
    mode: str = "single_basis"
    distribution: str | None = None

    def __post_init__(self):
        if self.kind not in ("solution", "rhs"):
            raise ConfigError(f"scheme kind must be 'solution' or 'rhs', got {self.kind!r}", "scheme.kind")
        if self.mode not in ("single_basis", "combination"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}", "scheme.mode")
        if int(self.K) < 1:
            raise ConfigError(f"basis size K must be >= 1, got {self.K}", "scheme.K")

    def with_kind(self, kind):
        return SamplingScheme(kind, self.K, self.mode, self.distribution)

    def as_dict(self):
        return {"kind": self.kind, "K": self.K, "mode": self.mode, "distribution": self.distribution}


@dataclass
class Batch:
    """``n`` samples: coefficient fields, RHS fields, optional target.

    ``coeffs`` holds everything the forward operator needs (network inputs
    and auxiliary arrays such as nodal Darcy coefficients); ``meta`` holds
    per-sample draws kept for diagnostics.
    """

    coeffs: dict
    rhs: dict
    target: np.ndarray | None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return next(iter(self.rhs.values())).shape[0]

    def __len__(self):
        return self.n

    @property
    def residual_only(self):
        return self.target is None

    def inputs(self):
        """Fields visible to a model."""
        return {**self.coeffs, **self.rhs}

    def take(self, idx):
        pick = lambda d: {k: v[idx] for k, v in d.items()}
        tgt = None if self.target is None else self.target[idx]
        return Batch(pick(self.coeffs), pick(self.rhs), tgt, pick(self.meta))


Sample = Batch  # a single sample is a batch of one


def _chebyshev_draw(rng, n, K, mode, basis):
    """Random expansions ``sum_k alpha_k T_k``; ``basis`` is ``(K, ...)``."""
    alpha = rng.uniform(-1.0, 1.0, size=(n, K))
    if mode == "single_basis":
        k = rng.integers(0, K, size=n)
        return alpha[np.arange(n), k][:, None] * basis.reshape(K, -1)[k]
    return alpha @ basis.reshape(K, -1)


def _expansion(problem, scheme, rng, n):
    basis = chebyshev_basis(scheme.K, problem.grid.xi)
    if problem.dim == 2:
        # tensor-product modes T_j(x) T_k(y)
        N = basis.shape[1]
        basis = (basis[:, None, :, None] * basis[None, :, None, :]).reshape(-1, N, N)
    flat = _chebyshev_draw(rng, n, basis.shape[0], scheme.mode, basis)
    return flat.reshape((n,) + problem.field_shape)


def _coefficients(problem, scheme, rng, n, dtype):
    fields, aux = problem.sample_coefficients(rng, n, scheme.distribution, dtype)
    coeffs = dict(fields)
    meta = {}
    for k, v in aux.items():
        if k.endswith("_nodes"):
            coeffs[k] = v
        else:
            meta[k] = np.asarray(v)
    return coeffs, meta


def solution_batch(problem, scheme, n, rng, dtype=np.float32):
    if scheme.kind != "solution":
        raise ConfigError("solution sampling needs scheme.kind == 'solution'", "scheme.kind")
    dtype = np.dtype(dtype)
    coeffs, meta = _coefficients(problem, scheme, rng, n, dtype)
    u = _expansion(problem, scheme, rng, n).astype(dtype)
    rhs = problem.apply(u, coeffs)
    return Batch(coeffs, {k: np.asarray(v, dtype=dtype) for k, v in rhs.items()}, u, meta)


def rhs_batch(problem, scheme, n, rng, dtype=np.float32, require_target=False):
    """RHS-sampled batch; the nonlinear BVP yields no target.

    ``require_target=True`` turns the missing target into an error.
    """
    if scheme.kind != "rhs":
        raise ConfigError("RHS sampling needs scheme.kind == 'rhs'", "scheme.kind")
    if not problem.has_oracle and require_target:
        raise UnsupportedError(f"{problem.name}: no classical solver to produce targets under RHS sampling")
    dtype = np.dtype(dtype)
    coeffs, meta = _coefficients(problem, scheme, rng, n, dtype)
    c = _expansion(problem, scheme, rng, n).astype(dtype)
    rhs = {"c": c}
    if "g" in problem.rhs_names:
        rhs["g"] = rng.uniform(-1.0, 1.0, size=n).astype(dtype)
    target = None
    if problem.has_oracle:
        c64 = {k: np.asarray(v, dtype=np.float64) for k, v in rhs.items()}
        co64 = {k: np.asarray(v, dtype=np.float64) for k, v in coeffs.items()}
        target = problem.solve(co64, c64).astype(dtype)
    return Batch(coeffs, rhs, target, meta)


def make_batch(problem, scheme, n, rng, dtype=np.float32):
    """Fresh ``n``-sample batch drawn from ``rng``."""
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}", "train.batch_size")
    if scheme.kind == "solution":
        return solution_batch(problem, scheme, n, rng, dtype)
    return rhs_batch(problem, scheme, n, rng, dtype)


def solution_sample(problem, scheme, rng, dtype=np.float32):
    return solution_batch(problem, scheme, 1, rng, dtype)


def rhs_sample(problem, scheme, rng, dtype=np.float32, require_target=False):
    return rhs_batch(problem, scheme, 1, rng, dtype, require_target)


VALIDATION_SEED = 20_240_917


def validation_set(problem, scheme, n=1000, seed=VALIDATION_SEED, dtype=np.float32):
    """Fixed sample set for a (problem, scheme, distribution) triple.

    The stream depends only on ``seed`` and the triple, not on any training
    run, so two models are always compared on the same samples.
    """
    tag = f"{problem.name}|{scheme.kind}|{scheme.mode}|{scheme.distribution}"
    key = [seed] + list(tag.encode("utf-8"))
    return make_batch(problem, scheme, n, np.random.default_rng(key), dtype)


def check_self_consistency(problem, batch):
    """Max abs mismatch between stored and recomputed RHS of a solution batch."""
    if batch.target is None:
        raise UnsupportedError("batch has no target")
    again = problem.apply(batch.target, batch.coeffs)
    return max(float(np.max(np.abs(np.asarray(again[k]) - batch.rhs[k]))) for k in batch.rhs)


# dataset files -----------------------------------------------------------------

def save_dataset(path, problem, scheme, batch, seed):
    arrays = {}
    for k, v in batch.coeffs.items():
        arrays[f"coeff.{k}"] = np.asarray(v, dtype="<f4")
    for k, v in batch.rhs.items():
        arrays[f"rhs.{k}"] = np.asarray(v, dtype="<f4")
    if batch.target is not None:
        arrays["target.u"] = np.asarray(batch.target, dtype="<f4")
    for k, v in batch.meta.items():
        arrays[f"meta.{k}"] = np.asarray(v, dtype="<f4")
    meta = {"problem": problem.manifest(), "scheme": scheme.as_dict(), "seed": seed,
            "count": batch.n, "grid": list(problem.field_shape)}
    write_container(path, arrays, DATASET_FORMAT, DATASET_VERSION, meta)


def load_dataset(path, verify=True):
    """Returns ``(problem, scheme, batch, meta)``.

    With ``verify`` a solution-sampled set is checked for self-consistency
    of its stored right-hand side.
    """
    manifest, arrays = read_container(path, DATASET_FORMAT, DATASET_VERSION)
    meta = manifest["meta"]
    problem = make_problem(meta["problem"])
    scheme = SamplingScheme(**meta["scheme"])
    groups = {"coeff": {}, "rhs": {}, "meta": {}}
    target = None
    for name, arr in arrays.items():
        head, _, key = name.partition(".")
        if head == "target":
            target = arr
        elif head in groups:
            groups[head][key] = arr
    batch = Batch(groups["coeff"], groups["rhs"], target, groups["meta"])
    if verify and scheme.kind == "solution" and target is not None:
        err = check_self_consistency(problem, batch)
        if err != 0.0:
            raise IntegrityError(f"{path}: stored right-hand side is inconsistent with its target ({err:g})")
    return problem, scheme, batch, meta
