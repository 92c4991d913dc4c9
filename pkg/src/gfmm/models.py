"""Operator models built from GFMM blocks.

* :class:`UNOModel` stacks multi-channel 1D blocks on one set of stacked
  input fields.
* :class:`MNOModel` runs a coefficient branch and an RHS branch; the
  latents of coefficient block ``k`` additively correct the encoder and
  decoder weights of RHS block ``k``.
* :class:`UNO2DModel` stacks single-channel 2D blocks.

Models are described by plain dict specs (see :func:`build_model`) so they
can be stored next to their weights in a checkpoint.
"""

from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .block1d import ACTIVATION_NAMES, GFMMBlock1D, GFMMConfig
from .block2d import GFMM2DConfig, GFMMBlock2D
from .errors import ConfigError, DimensionError


TRANSFORMS = {"identity": lambda v: v, "log": np.log, "reciprocal": np.reciprocal}


class ChannelSpec:
    """Ordered map from field names to input channels.

    Fields are ``(batch, D)`` grid functions or ``(batch,)`` scalars; scalars
    are broadcast along the grid. ``transforms`` applies a fixed pointwise
    map (``identity``, ``log`` or ``reciprocal``) to named fields and
    ``scales`` then multiplies them before stacking.
    """

    def __init__(self, names, scales=None, transforms=None):
        names = list(names)
        if not names:
            raise ConfigError("a channel spec needs at least one field")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field in channel spec {names}")
        self.names = names
        self.scales = dict(scales or {})
        self.transforms = dict(transforms or {})
        for n, t in self.transforms.items():
            if t not in TRANSFORMS:
                raise ConfigError(f"unknown input transform {t!r} (known: {sorted(TRANSFORMS)})",
                                  f"model.input_transforms.{n}")

    @property
    def channels(self):
        return {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __repr__(self):
        return f"ChannelSpec({self.names})"

    def stack(self, fields, D, dtype):
        """``(batch, C, D)`` array of the named fields."""
        missing = [n for n in self.names if n not in fields]
        if missing:
            raise DimensionError(f"missing input fields {missing}")
        cols = []
        for n in self.names:
            v = np.asarray(fields[n], dtype=dtype)
            if v.ndim == 1:
                v = np.broadcast_to(v[:, None], (v.shape[0], D))
            if v.ndim != 2 or v.shape[1] != D:
                raise DimensionError(f"field {n!r} has shape {v.shape}, expected (batch, {D})")
            t = self.transforms.get(n)
            if t is not None:
                v = TRANSFORMS[t](v)
            s = self.scales.get(n)
            cols.append(v * dtype.type(s) if s is not None else v)
        return np.stack(cols, axis=1)


def latent_to_epsilon(h):
    """Read a ``(..., C, P)`` latent with ``C == P`` as ``(..., P, P)`` corrections."""
    if h.shape[-2] != h.shape[-1]:
        raise ConfigError(f"latent with {h.shape[-2]} channels cannot be read as a "
                          f"{h.shape[-1]}x{h.shape[-1]} correction")
    return h


def fusion_from_latent(latent, L):
    """Fusion corrections for every encoder/decoder layer of a paired block.

    Encoder weight ``j`` at level ``l`` takes the coefficient latent
    ``h[l][j // 2]``; decoder weight ``i`` at level ``l`` takes ``z[l][i]``.
    """
    fusion = {}
    for l in range(1, L + 1):
        fusion[("enc", l)] = T.repeat(latent_to_epsilon(latent.h[l]), 2, axis=0)
    for l in range(L):
        fusion[("dec", l)] = latent_to_epsilon(latent.z[l])
    return fusion


class _Model:
    kind = ""

    def named_parameters(self):
        raise NotImplementedError

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ConfigError("state dict does not match the model's parameters")
        for k, p in own.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {v.shape}")
            p.data = v.astype(p.dtype, copy=True)

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def predict(self, fields):
        """Forward pass without recording, as a numpy array."""
        return self.forward(fields).data

    def __call__(self, fields):
        return self.forward(fields)


def _check_chain(blocks, what):
    for k in range(1, len(blocks)):
        a, b = blocks[k - 1].config, blocks[k].config
        if a.c_out != b.c_in or a.D != b.D:
            raise ConfigError(f"block {k - 1} output ({a.c_out} ch, D={a.D}) does not feed "
                              f"block {k} ({b.c_in} ch, D={b.D})", what)


class UNOModel(_Model):
    """Sequential stack of 1D blocks on stacked input channels."""

    kind = "uno"

    def __init__(self, blocks, inputs, spec=None):
        if not blocks:
            raise ConfigError("a UNO needs at least one block", "model.blocks")
        self.blocks = list(blocks)
        self.inputs = inputs if isinstance(inputs, ChannelSpec) else ChannelSpec(inputs)
        _check_chain(self.blocks, "model.blocks")
        if self.blocks[0].config.c_in != len(self.inputs):
            raise ConfigError("first block input channels do not match the input fields", "model.inputs")
        if self.blocks[-1].config.c_out != 1:
            raise ConfigError("the last block must have one output channel", "model.blocks")
        self.spec = spec
        self.D = self.blocks[0].config.D

    def named_parameters(self):
        return [(f"blocks.{k}.{n}", p) for k, b in enumerate(self.blocks) for n, p in b.named_parameters()]

    def forward(self, fields):
        x = T.Tensor(self.inputs.stack(fields, self.D, self.dtype))
        for blk in self.blocks:
            x, _ = blk.forward(x)
        return T.reshape(x, (x.shape[0], self.D))

    @property
    def linear(self):
        return all(b.config.linear for b in self.blocks)


class MNOModel(_Model):
    """Coefficient branch fused into an RHS branch, block ``k`` to block ``k``."""

    kind = "mno"

    def __init__(self, coeff_blocks, rhs_blocks, coeff_inputs, rhs_inputs,
                 fusion_on_block=None, spec=None):
        if len(coeff_blocks) != len(rhs_blocks) or not rhs_blocks:
            raise ConfigError("coefficient and RHS branches need the same nonzero number of blocks",
                              "model.coeff_blocks")
        self.coeff_blocks, self.rhs_blocks = list(coeff_blocks), list(rhs_blocks)
        self.coeff_inputs = coeff_inputs if isinstance(coeff_inputs, ChannelSpec) else ChannelSpec(coeff_inputs)
        self.rhs_inputs = rhs_inputs if isinstance(rhs_inputs, ChannelSpec) else ChannelSpec(rhs_inputs)
        n = len(rhs_blocks)
        self.fusion_on_block = [True] * n if fusion_on_block is None else [bool(f) for f in fusion_on_block]
        if len(self.fusion_on_block) != n:
            raise ConfigError(f"fusion_on_block needs {n} entries", "model.fusion_on_block")
        _check_chain(self.coeff_blocks, "model.coeff_blocks")
        _check_chain(self.rhs_blocks, "model.rhs_blocks")
        if self.coeff_blocks[0].config.c_in != len(self.coeff_inputs):
            raise ConfigError("coefficient branch input channels do not match its fields", "model.coeff_inputs")
        if self.rhs_blocks[0].config.c_in != len(self.rhs_inputs):
            raise ConfigError("RHS branch input channels do not match its fields", "model.rhs_inputs")
        if self.rhs_blocks[-1].config.c_out != 1:
            raise ConfigError("the last RHS block must have one output channel", "model.rhs_blocks")
        for k, (cb, rb) in enumerate(zip(self.coeff_blocks, self.rhs_blocks)):
            cc, rc = cb.config, rb.config
            if (cc.D, cc.L) != (rc.D, rc.L):
                raise ConfigError(f"paired blocks {k} differ in grid or depth", f"model.coeff_blocks.{k}")
            if cc.c_hidden != cc.P or cc.c_out != cc.P:
                raise ConfigError(f"coefficient block {k} needs hidden and output width P={cc.P}",
                                  f"model.coeff_blocks.{k}")
            if self.fusion_on_block[k] and not rc.fusion_enabled:
                raise ConfigError(f"RHS block {k} is not built for fusion", f"model.rhs_blocks.{k}")
        self.spec = spec
        self.D = self.rhs_blocks[0].config.D

    def named_parameters(self):
        out = [(f"coeff.{k}.{n}", p) for k, b in enumerate(self.coeff_blocks) for n, p in b.named_parameters()]
        out += [(f"rhs.{k}.{n}", p) for k, b in enumerate(self.rhs_blocks) for n, p in b.named_parameters()]
        return out

    def coefficient_latents(self, fields):
        x = T.Tensor(self.coeff_inputs.stack(fields, self.D, self.dtype))
        latents = []
        for blk in self.coeff_blocks:
            x, lat = blk.forward(x)
            latents.append(lat)
        return latents

    def forward(self, fields, fusion=True):
        """``fusion=False`` runs the RHS branch with every correction removed."""
        latents = self.coefficient_latents(fields) if fusion else None
        x = T.Tensor(self.rhs_inputs.stack(fields, self.D, self.dtype))
        for k, blk in enumerate(self.rhs_blocks):
            eps = None
            if fusion and self.fusion_on_block[k]:
                eps = fusion_from_latent(latents[k], blk.config.L)
            x, _ = blk.forward(x, eps)
        return T.reshape(x, (x.shape[0], self.D))

    def predict(self, fields, fusion=True):
        return self.forward(fields, fusion).data

    def rhs_uno(self):
        """UNO sharing the RHS-branch weights (no fusion)."""
        return UNOModel(self.rhs_blocks, self.rhs_inputs)

    @property
    def linear(self):
        return False


class UNO2DModel(_Model):
    """Stack of single-channel 2D blocks on the field ``c``."""

    kind = "uno2d"

    def __init__(self, blocks, spec=None, input_name="c", scale=None):
        if not blocks:
            raise ConfigError("a 2D model needs at least one block", "model.blocks")
        self.blocks = list(blocks)
        N = self.blocks[0].config.N
        if any(b.config.N != N for b in self.blocks):
            raise ConfigError("all 2D blocks must share the grid size", "model.blocks")
        self.N = self.D = N
        self.input_name, self.scale = input_name, scale
        self.spec = spec

    def named_parameters(self):
        return [(f"blocks.{k}.{n}", p) for k, b in enumerate(self.blocks) for n, p in b.named_parameters()]

    def forward(self, fields):
        x = np.asarray(fields[self.input_name], dtype=self.dtype)
        if self.scale is not None:
            x = x * self.dtype.type(self.scale)
        x = T.Tensor(x)
        for blk in self.blocks:
            x = blk.forward(x)
        return x

    @property
    def linear(self):
        return all(b.config.linear for b in self.blocks)


# construction from specs ------------------------------------------------------

def _block_entries(spec, key):
    entries = spec.get(key)
    if not isinstance(entries, list) or not entries:
        raise ConfigError("expected a non-empty list of blocks", f"model.{key}")
    for k, e in enumerate(entries):
        if not isinstance(e, dict):
            raise ConfigError("block entry must be a mapping", f"model.{key}.{k}")
        act = e.get("activation", "identity")
        if act not in ACTIVATION_NAMES:
            raise ConfigError(f"unknown activation {act!r}", f"model.{key}.{k}.activation")
        if "L" not in e and "P" not in e:
            raise ConfigError("block needs L or P", f"model.{key}.{k}")
    return entries


def _depth(entry, D, field):
    if "L" in entry:
        L = int(entry["L"])
        if "P" in entry and D != int(entry["P"]) * 2 ** L:
            raise ConfigError(f"P * 2^L must equal D={D}", field)
        return L
    P = int(entry["P"])
    if P < 1 or D % P or (D // P) & (D // P - 1):
        raise ConfigError(f"D={D} / P={P} is not a power of two", field)
    return (D // P).bit_length() - 1


def _branch(entries, D, c_in, c_final, key, rng, dtype, force_width=False, fusion=None):
    blocks = []
    cin = c_in
    for k, e in enumerate(entries):
        field = f"model.{key}.{k}"
        L = _depth(e, D, field)
        try:
            P = D // 2 ** L
            ch = P if force_width else int(e.get("c_hidden", 1))
            if force_width and "c_hidden" in e and int(e["c_hidden"]) != P:
                raise ConfigError(f"coefficient-branch c_hidden must equal P={P}", field + ".c_hidden")
            last = k == len(entries) - 1
            cout = c_final if last and c_final is not None else (P if force_width else int(e.get("c_out", ch)))
            cfg = GFMMConfig(D=D, L=L, c_in=cin, c_out=cout, c_hidden=ch,
                             activation=e.get("activation", "identity"),
                             fusion_enabled=bool(fusion[k]) if fusion is not None else False)
        except ConfigError as exc:
            if exc.field and exc.field.startswith("model."):
                raise
            raise ConfigError(str(exc), field) from None
        scale = float(e.get("init_scale", 1.0))
        blocks.append(GFMMBlock1D.random(cfg, rng, dtype, scale) if rng is not None else GFMMBlock1D.zeros(cfg, dtype))
        cin = cout
    return blocks


def build_model(spec, D=None, rng=None, dtype=np.float32, input_scales=None):
    """Allocate a model from a spec dict.

    ``rng`` seeds the random initialisation; ``rng=None`` gives all-zero
    weights (used before loading a checkpoint). ``input_scales`` maps field
    names to fixed multipliers. The resolved spec (with ``D``) is stored on
    the model as ``model.spec``.
    """
    if not isinstance(spec, dict):
        raise ConfigError("model spec must be a mapping", "model")
    spec = copy.deepcopy(spec)
    kind = spec.get("kind")
    D = int(spec.get("D", D) if D is None else D)
    spec["D"] = D
    if input_scales is not None:
        spec["input_scales"] = {k: float(v) for k, v in input_scales.items()}
    scales = spec.get("input_scales", {})
    transforms = spec.get("input_transforms", {}) or {}
    dtype = np.dtype(dtype)
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    if kind == "uno":
        inputs = ChannelSpec(spec.get("inputs", ["c"]), scales, transforms)
        blocks = _branch(_block_entries(spec, "blocks"), D, len(inputs), 1, "blocks", rng, dtype)
        return UNOModel(blocks, inputs, spec)

    if kind == "mno":
        coeff = _block_entries(spec, "coeff_blocks")
        rhs = _block_entries(spec, "rhs_blocks")
        if len(coeff) != len(rhs):
            raise ConfigError("coefficient and RHS branches need equal block counts", "model.rhs_blocks")
        fob = spec.get("fusion_on_block", [True] * len(rhs))
        if not isinstance(fob, list) or len(fob) != len(rhs):
            raise ConfigError(f"needs a list of {len(rhs)} booleans", "model.fusion_on_block")
        cin = ChannelSpec(spec.get("coeff_inputs", ["a"]), scales, transforms)
        rin = ChannelSpec(spec.get("rhs_inputs", ["c"]), scales, transforms)
        cb = _branch(coeff, D, len(cin), None, "coeff_blocks", rng, dtype, force_width=True)
        rb = _branch(rhs, D, len(rin), 1, "rhs_blocks", rng, dtype, fusion=fob)
        for k, (c, r) in enumerate(zip(cb, rb)):
            if c.config.L != r.config.L:
                raise ConfigError("paired blocks need the same depth", f"model.coeff_blocks.{k}.L")
        return MNOModel(cb, rb, cin, rin, fob, spec)

    if kind == "uno2d":
        blocks = []
        for k, e in enumerate(_block_entries(spec, "blocks")):
            field = f"model.blocks.{k}"
            P = int(e["P"]) if "P" in e else D // 2 ** int(e["L"])
            try:
                cfg = GFMM2DConfig(N=D, P=P, activation=e.get("activation", "identity"))
            except ConfigError as exc:
                raise ConfigError(str(exc), field) from None
            if "L" in e and cfg.L != int(e["L"]):
                raise ConfigError(f"L={e['L']} inconsistent with N={D}, P={P}", field + ".L")
            scale = float(e.get("init_scale", 1.0))
            blocks.append(GFMMBlock2D.random(cfg, rng, dtype, scale) if rng is not None else GFMMBlock2D.zeros(cfg, dtype))
        return UNO2DModel(blocks, spec, scale=scales.get("c"))

    raise ConfigError(f"unknown model kind {kind!r}", "model.kind")
