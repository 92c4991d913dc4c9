"""Command-line entry point: ``gfmm {train,eval,gradcheck,gen-data,export-dense}``.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 numerical abort, 4 integrity error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import tensor as T
from .config import dump_config, load_config, train_config
from .data import SamplingScheme, make_batch, load_dataset, save_dataset, validation_set
from .errors import (ConfigError, GFMMError, IntegrityError, NumericalError,
                     UnsupportedError)
from .problems import Poisson1D, chebyshev_basis, make_problem
from .train import (OperatorNorms, evaluate, load_checkpoint, make_model_for,
                    seed_streams, train_loop)

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INTEGRITY = 0, 1, 2, 3, 4


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="config file or bundled config name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="A.B=VALUE")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")


def build_parser():
    ap = argparse.ArgumentParser(prog="gfmm", description="GFMM neural operators")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, checkpoint and config")
    _common(p)
    p.add_argument("--repeats", type=int, default=1, help="independent runs with seeds seed, seed+1, ...")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the fixed sample sets")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--oracle", action="store_true", help="substitute the true solution for the prediction")
    p.add_argument("--no-fusion", action="store_true", help="evaluate an MNO with fusion removed")

    p = sub.add_parser("gradcheck", help="finite-difference check of the model gradients")
    _common(p)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-6)

    p = sub.add_parser("gen-data", help="write a dataset container")
    _common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--scheme", choices=("solution", "rhs"), default="solution")
    p.add_argument("--distribution", default=None)
    p.add_argument("--require-target", action="store_true")

    p = sub.add_parser("export-dense", help="assemble the matrix of a linear model")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    return ap


def _emit(msg, quiet=False):
    if not quiet:
        print(msg, flush=True)


def _fmt(v):
    return "" if v is None else f"{v:.6e}"


# commands -----------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args.config, args.overrides, args.scale, args.seed)
    out = args.out or (cfg.get("io") or {}).get("out") or "runs/" + cfg.get("name", "run")
    base_seed = train_config(cfg).seed
    for r in range(max(1, args.repeats)):
        run_cfg = dict(cfg, train=dict(cfg.get("train") or {}, seed=base_seed + r))
        run_dir = out if args.repeats <= 1 else os.path.join(out, f"run{r}")
        os.makedirs(run_dir, exist_ok=True)
        dump_config(run_cfg, os.path.join(run_dir, "config.yaml"))
        problem = make_problem(run_cfg["problem"])
        tc = train_config(run_cfg)
        model = make_model_for(run_cfg["model"], problem, tc)
        _emit(f"{cfg.get('name', 'run')}: {model.num_parameters()} parameters, "
              f"{tc.iterations} iterations, seed {tc.seed}", args.quiet)
        log = None if args.quiet else (lambda r: print(
            f"  it {r['iteration']:>7d}  loss {_fmt(r['loss'])}  eps_rel {_fmt(r['eps_rel'])}  "
            f"eps_be {_fmt(r['eps_be'])}  eps_res {_fmt(r['eps_res_int'])}", flush=True))
        train_loop(tc, model, problem, out_dir=run_dir, log=log, meta={"config": run_cfg})
    return EXIT_OK


def _base_scheme(cfg):
    """Configured training scheme; eval and gen-data change only kind and distribution."""
    return train_config(cfg).sampling if cfg.get("train") else SamplingScheme()


def _eval_rows(model, problem, base, schemes, dists, n, dtype, oracle=False, **kwargs):
    rows = []
    norms = OperatorNorms()
    for kind in schemes:
        for dist in dists:
            scheme = dataclasses.replace(base, kind=kind, distribution=dist)
            batch = validation_set(problem, scheme, n, dtype=dtype)
            u_hat = None
            if oracle:
                if batch.target is None:
                    continue
                u_hat = batch.target
            m = evaluate(model, problem, batch, norms, u_hat=u_hat, **kwargs)
            rows.append({"scheme": kind, "distribution": dist or "", **{k: m[k] for k in
                         ("eps_rel", "eps_be", "eps_res_int", "eps_res_bnd")}})
    return rows


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    stored = ck.meta.get("config") or {}
    cfg = load_config(args.config, args.overrides, args.scale) if args.config else stored
    if args.config and cfg["problem"] != (stored.get("problem") or cfg["problem"]):
        raise ConfigError("checkpoint was trained on a different problem", "problem")
    problem = make_problem(cfg.get("problem") or ck.meta["problem"])
    if problem.manifest() != ck.meta.get("problem", problem.manifest()):
        raise ConfigError("checkpoint was trained on a different problem", "problem")
    if ck.model.D != problem.D:
        raise ConfigError(f"checkpoint grid {ck.model.D} differs from problem grid {problem.D}", "problem.D")
    ev = cfg.get("eval") or {}
    schemes = ev.get("schemes") or ["solution", "rhs"]
    dists = ev.get("distributions") or [None]
    n = int(ev.get("samples", 1000))
    kwargs = {"fusion": False} if args.no_fusion and ck.model.kind == "mno" else {}
    rows = _eval_rows(ck.model, problem, _base_scheme(cfg), schemes, dists, n, ck.model.dtype,
                      args.oracle, **kwargs)
    cols = ("scheme", "distribution", "eps_rel", "eps_be", "eps_res_int", "eps_res_bnd")
    print(",".join(cols))
    for r in rows:
        print(",".join([r["scheme"], r["distribution"]] + [_fmt(r[c]) for c in cols[2:]]))
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"checkpoint": args.checkpoint, "rows": rows}, fh, indent=2, sort_keys=True)
    return EXIT_OK


def gradcheck_model(cfg, probes=200, h=1e-6, seed=0, batch_size=4):
    """Grad check of the configured model in 64-bit on a small fixed batch."""
    cfg = dict(cfg, train=dict(cfg.get("train") or {}, precision="float64", seed=seed))
    problem = make_problem(cfg["problem"])
    tc = train_config(cfg)
    model = make_model_for(cfg["model"], problem, tc)
    _, data_rng = seed_streams(seed)
    batch = make_batch(problem, tc.sampling, batch_size, data_rng, np.float64)
    names = [n for n, _ in model.named_parameters()]

    def forward():
        return T.mse(model(batch.inputs()), batch.target)

    return T.grad_check(forward, model.parameters(), probes=probes, h=h, rng=seed, names=names)


def cmd_gradcheck(args):
    cfg = load_config(args.config, args.overrides, args.scale, args.seed)
    seed = train_config(cfg).seed
    res = gradcheck_model(cfg, args.probes, args.step, seed)
    ok = res.passed(args.tol)
    print(f"gradcheck: {len(res.records)} probes, worst relative error {res.max_rel_error:.3e} "
          f"({res.worst_param}) -> {'PASS' if ok else 'FAIL'} at {args.tol:g}")
    if not ok:
        bad = sorted({r[0] for r in res.failures(args.tol)})
        print("offending parameters: " + ", ".join(bad))
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_gen_data(args):
    cfg = load_config(args.config, args.overrides, args.scale, args.seed)
    problem = make_problem(cfg["problem"])
    seed = train_config(cfg).seed
    dist = args.distribution or (cfg["problem"].get("distribution"))
    scheme = dataclasses.replace(_base_scheme(cfg), kind=args.scheme, distribution=dist)
    if args.require_target and not problem.has_oracle and scheme.kind == "rhs":
        raise UnsupportedError(f"{problem.name}: RHS sampling cannot produce solution targets")
    _, data_rng = seed_streams(seed)
    batch = make_batch(problem, scheme, args.n, data_rng, np.float32)
    out = args.out or f"{problem.name}-{scheme.kind}.gfmmdata"
    save_dataset(out, problem, scheme, batch, seed)
    load_dataset(out, verify=True)
    print(f"wrote {batch.n} samples to {out}")
    fields = {**{f"coeff.{k}": v for k, v in batch.coeffs.items()},
              **{f"rhs.{k}": v for k, v in batch.rhs.items()}}
    if batch.target is not None:
        fields["target.u"] = batch.target
    for k, v in fields.items():
        print(f"  {k:<14s} mean {np.mean(v): .4e}  min {np.min(v): .4e}  max {np.max(v): .4e}")
    if "branch" in batch.meta:
        counts = np.bincount(batch.meta["branch"].astype(int) + 1, minlength=3)
        print(f"  mixture branches: quadratic {counts[1]}, log-normal {counts[2]}")
    return EXIT_OK


def dense_matrix(model):
    """Matrix of a linear single-input model acting on flattened ``c``."""
    if model.kind == "mno" or not model.linear:
        raise UnsupportedError("dense export needs a linear model (identity activations)")
    if model.kind == "uno" and model.inputs.names != ["c"]:
        raise UnsupportedError("dense export needs a model with the single input field c")
    shape = (model.N, model.N) if model.kind == "uno2d" else (model.D,)
    n = int(np.prod(shape))
    eye = np.eye(n, dtype=model.dtype).reshape((n,) + shape)
    cols = np.concatenate([model.predict({"c": eye[i:i + 256]}).reshape(-1, n)
                           for i in range(0, n, 256)], axis=0)
    return cols.T.copy()


def cmd_export_dense(args):
    ck = load_checkpoint(args.checkpoint)
    G = dense_matrix(ck.model)
    out = args.out or "dense.npy"
    if out.endswith(".csv"):
        np.savetxt(out, G, delimiter=",", fmt="%.9e")
    else:
        np.save(out, G)
    print(f"wrote {G.shape[0]}x{G.shape[1]} matrix to {out}")
    problem = make_problem(ck.meta["problem"])
    if isinstance(problem, Poisson1D):
        basis = chebyshev_basis(16, problem.grid.xi)
        GA = G.astype(np.float64) @ np.stack([problem.apply_operator(b) for b in basis], axis=1)
        err = np.linalg.norm(GA - basis.T, axis=0) / np.linalg.norm(basis, axis=1)
        print(f"max_k ||G A T_k - T_k|| / ||T_k|| = {err.max():.3e}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "gen-data": cmd_gen_data, "export-dense": cmd_export_dense}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UnsupportedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GFMMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
