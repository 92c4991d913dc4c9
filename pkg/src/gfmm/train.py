"""Training loop, evaluation on fixed sample sets, checkpoints, metrics log."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .data import SamplingScheme, make_batch, validation_set
from .errors import ConfigError, TrainingAborted
from .metrics import eps_be, eps_rel, matrix_2norm, mse_loss
from .models import build_model
from .problems import Darcy1D, darcy_apply

CHECKPOINT_FORMAT = "gfmm-checkpoint"
CHECKPOINT_VERSION = 1
CSV_COLUMNS = ("iteration", "loss", "eps_rel", "eps_be", "eps_res_int", "eps_res_bnd")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_drops: list = field(default_factory=list)  # [[iteration, lr], ...]
    precision: str = "float32"
    seed: int = 0
    eval_every: int = 500
    eval_samples: int = 1000
    scheme: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.iterations) < 0:
            raise ConfigError("iterations must be >= 0", "train.iterations")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1", "train.batch_size")
        if not float(self.lr) >= 0:
            raise ConfigError("lr must be >= 0", "train.lr")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}", "train.precision")
        if int(self.eval_every) < 0 or int(self.eval_samples) < 1:
            raise ConfigError("eval_every must be >= 0 and eval_samples >= 1", "train.eval_every")
        try:
            drops = [(int(i), float(v)) for i, v in self.lr_drops]
        except (TypeError, ValueError):
            raise ConfigError("lr_drops must be a list of [iteration, lr] pairs", "train.lr_drops") from None
        self.lr_drops = sorted(drops)
        self.sampling = SamplingScheme(**self.scheme)

    @property
    def dtype(self):
        return np.dtype(PRECISIONS[self.precision])

    def lr_at(self, iteration):
        """Learning rate used for the update of (1-based) ``iteration``."""
        lr = float(self.lr)
        for at, value in self.lr_drops:
            if iteration > at:
                lr = value
        return lr


# evaluation -------------------------------------------------------------------

class OperatorNorms:
    """Cached spectral norms of the linear forward operators of a sample set."""

    def __init__(self):
        self._cache = {}

    def get(self, problem, batch):
        key = (problem.name, problem.D, id(batch))
        hit = self._cache.get(key)
        if hit is None or hit[0] is not batch:
            hit = self._cache[key] = (batch, _operator_norm(problem, batch))
        return hit[1]


def _operator_norm(problem, batch):
    if problem.name == "poisson1d" or problem.name == "poisson2d":
        return matrix_2norm(problem.apply_operator, problem.field_shape)
    if isinstance(problem, Darcy1D):
        ah = problem.half_points(np.asarray(batch.coeffs["a_nodes"], dtype=np.float64))
        return matrix_2norm(lambda u: darcy_apply(ah, u, h=problem.grid.h), (batch.n, problem.D), batched=True)
    return None


def predict(model, batch, chunk=250, **kwargs):
    """Model output for every sample of ``batch`` (no tape)."""
    inputs = batch.inputs()
    outs = []
    for lo in range(0, batch.n, chunk):
        part = {k: v[lo:lo + chunk] for k, v in inputs.items()}
        outs.append(model.predict(part, **kwargs))
    return np.concatenate(outs, axis=0)


def evaluate(model, problem, batch, norms=None, u_hat=None, **kwargs):
    """Mean metrics of ``model`` on ``batch``; undefined metrics are None."""
    if u_hat is None:
        u_hat = predict(model, batch, **kwargs)
    axes = tuple(range(1, u_hat.ndim))
    out = {"mse": None, "eps_rel": None, "eps_be": None, "eps_res_int": None, "eps_res_bnd": None}
    if batch.target is not None:
        out["mse"] = mse_loss(u_hat, batch.target)
        out["eps_rel"] = float(np.mean(eps_rel(u_hat, batch.target, axes)))
    r_int, r_bnd = problem.residuals(u_hat, batch.coeffs, batch.rhs)
    out["eps_res_int"] = float(np.mean(r_int))
    if r_bnd is not None:
        out["eps_res_bnd"] = float(np.mean(r_bnd))
    if problem.linear:
        norms = norms or OperatorNorms()
        nA = norms.get(problem, batch)
        coeffs64 = {k: np.asarray(v, dtype=np.float64) for k, v in batch.coeffs.items()}
        apply = lambda u: problem.apply_operator(u, coeffs64)
        out["eps_be"] = float(np.mean(eps_be(apply, nA, u_hat, batch.rhs["c"], axes)))
    return out


# metrics log ---------------------------------------------------------------------

def _cell(v):
    return "" if v is None else repr(float(v))


class MetricsWriter:
    """Append-only CSV log; rows are flushed as they are written."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(CSV_COLUMNS)
        self._fh.flush()

    def write(self, record):
        self._w.writerow([str(int(record["iteration"]))] + [_cell(record.get(k)) for k in CSV_COLUMNS[1:]])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if v == "" else (int(v) if k == "iteration" else float(v))) for k, v in r.items()}
            for r in rows]


def metrics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([str(int(r["iteration"]))] + [_cell(r.get(k)) for k in CSV_COLUMNS[1:]])
    return buf.getvalue()


# checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: object
    optimizer: T.AdamState | None = None
    iteration: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    model = ckpt.model
    names = [n for n, _ in model.named_parameters()]
    arrays = {f"param.{n}": p.data for n, p in model.named_parameters()}
    opt = None
    st = ckpt.optimizer
    if st is not None:
        for n, m, v in zip(names, st.m, st.v):
            arrays[f"adam.m.{n}"] = m
            arrays[f"adam.v.{n}"] = v
        opt = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}
    meta = dict(ckpt.meta)
    meta.update({"model": model.spec, "iteration": int(ckpt.iteration), "optimizer": opt,
                 "dtype": np.dtype(model.dtype).name})
    write_container(path, arrays, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, meta)


def load_checkpoint(path):
    manifest, arrays = read_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    meta = manifest["meta"]
    model = build_model(meta["model"], rng=None, dtype=meta.get("dtype", "float32"))
    names = [n for n, _ in model.named_parameters()]
    state = {n: arrays.get(f"param.{n}") for n in names}
    if any(v is None for v in state.values()) or len(state) != sum(k.startswith("param.") for k in arrays):
        raise ConfigError(f"{path}: stored tensors do not match the stored model spec")
    model.load_state_dict(state)
    opt = None
    if meta.get("optimizer") is not None:
        o = meta["optimizer"]
        opt = T.AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        if f"adam.m.{names[0]}" in arrays:
            opt.m = [arrays[f"adam.m.{n}"] for n in names]
            opt.v = [arrays[f"adam.v.{n}"] for n in names]
    return Checkpoint(model, opt, int(meta["iteration"]), meta)


# training ---------------------------------------------------------------------------

def seed_streams(seed):
    """Independent generators for initialisation and for data."""
    init, data = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(data)


def train_step(model, batch, optimizer):
    params = model.parameters()
    with T.Tape() as tape:
        pred = model(batch.inputs())
        loss = mse_loss(pred, batch.target)
    tape.backward(loss, params)
    value = float(loss.data)
    if not np.isfinite(value) or not all(np.all(np.isfinite(p.grad)) for p in params):
        return value, False
    optimizer.step()
    return value, True


def train_loop(config, model, problem, out_dir=None, val_batch=None, log=None, meta=None):
    """Train ``model`` in place; returns ``(model, records)``.

    Each iteration draws a fresh batch. Every ``eval_every`` iterations and
    after the last one the model is evaluated on ``val_batch`` (default: the
    fixed validation set of the training scheme) and a record is appended
    to ``out_dir/metrics.csv``. ``out_dir/final.ckpt`` is written at the
    end; a non-finite loss writes ``out_dir/abort.ckpt`` and raises
    :class:`TrainingAborted`.
    """
    scheme = config.sampling
    dtype = config.dtype
    if model.dtype != dtype:
        raise ConfigError(f"model dtype {model.dtype} differs from train.precision", "train.precision")
    _, data_rng = seed_streams(config.seed)
    optimizer = T.Adam(model.parameters(), lr=config.lr)
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv")) if out_dir else None
    norms = OperatorNorms()
    records = []
    meta = dict(meta or {}, seed=int(config.seed), problem=problem.manifest())

    def checkpoint(name, iteration):
        if out_dir is None:
            return None
        path = os.path.join(out_dir, name)
        save_checkpoint(path, Checkpoint(model, optimizer.state, iteration, meta))
        return path

    try:
        for it in range(1, int(config.iterations) + 1):
            optimizer.lr = config.lr_at(it)
            batch = make_batch(problem, scheme, int(config.batch_size), data_rng, dtype)
            loss, ok = train_step(model, batch, optimizer)
            if not ok:
                path = checkpoint("abort.ckpt", it - 1)
                raise TrainingAborted(f"non-finite loss or gradient at iteration {it}", it, path)
            last = it == int(config.iterations)
            if (config.eval_every and it % int(config.eval_every) == 0) or last:
                if val_batch is None:
                    val_batch = validation_set(problem, scheme, int(config.eval_samples), dtype=dtype)
                m = evaluate(model, problem, val_batch, norms)
                rec = {"iteration": it, "loss": loss, **{k: m[k] for k in CSV_COLUMNS[2:]}}
                records.append(rec)
                if writer:
                    writer.write(rec)
                if log:
                    log(rec)
    finally:
        if writer:
            writer.close()
    checkpoint("final.ckpt", int(config.iterations))
    return model, records


def make_model_for(config_model, problem, train_cfg, seed=None):
    """Build a model for ``problem`` with the problem's input scales."""
    init_rng, _ = seed_streams(train_cfg.seed if seed is None else seed)
    scales = dict(problem.input_scales())
    scales.update(config_model.get("input_scales", {}) or {})
    return build_model(config_model, D=problem.D, rng=init_rng, dtype=train_cfg.dtype, input_scales=scales)
