"""One-dimensional GFMM block.

Internally every tree level is held as a single array of shape
``(positions, batch, channels, P)`` so that all encoder (or decoder, or
bridge) transforms of a level run as one batched matrix product.

Weight layout per level ``l`` with ``n_l = M / 2**l`` positions:

* encoders ``E^l`` (l = 1..L): ``(2 n_l, C_hidden, C_in_l, P, P)``, consumed
  pairwise, child ``j`` feeding parent ``j // 2``;
* decoders ``D^l`` (l = 0..L-1): ``(n_l, C_out_l, C_hidden, P, P)``;
* bridges ``B^l`` (l = 0..L): block-tridiagonal, stored as ``diag``
  ``(n_l, ...)`` plus ``lower``/``upper`` ``(n_l - 1, ...)``, where
  ``lower[i]`` is block ``(i+1, i)`` and ``upper[i]`` is block ``(i, i+1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

ACTIVATION_NAMES = ("identity", "rational", "relu")


@dataclass(frozen=True)
class GFMMConfig:
    D: int
    L: int
    c_in: int = 1
    c_out: int = 1
    c_hidden: int = 1
    activation: str = "identity"
    fusion_enabled: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"tree depth L must be >= 1, got {self.L}", "L")
        if self.D < 2 or self.D % (2 ** self.L):
            raise ConfigError(f"D={self.D} is not divisible by 2^L={2 ** self.L}", "D")
        for name in ("c_in", "c_out", "c_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError("channel counts must be >= 1", name)
        if self.activation not in ACTIVATION_NAMES:
            raise ConfigError(f"unknown activation {self.activation!r}", "activation")

    @property
    def M(self):
        return 2 ** self.L

    @property
    def P(self):
        return self.D // self.M

    @property
    def linear(self):
        return self.activation == "identity"

    def positions(self, level):
        return self.M >> level

    def weight_shapes(self):
        """Ordered ``name -> shape`` of every stored weight tensor."""
        P, L, ch = self.P, self.L, self.c_hidden
        shapes = {}
        for l in range(1, L + 1):
            cin = self.c_in if l == 1 else ch
            shapes[f"enc.{l}"] = (self.positions(l - 1), ch, cin, P, P)
        for l in range(L):
            cout = self.c_out if l == 0 else ch
            shapes[f"dec.{l}"] = (self.positions(l), cout, ch, P, P)
        for l in range(L + 1):
            n = self.positions(l)
            o, i = (self.c_out, self.c_in) if l == 0 else (ch, ch)
            shapes[f"bridge.{l}.diag"] = (n, o, i, P, P)
            if n > 1:
                shapes[f"bridge.{l}.lower"] = (n - 1, o, i, P, P)
                shapes[f"bridge.{l}.upper"] = (n - 1, o, i, P, P)
        return shapes


def param_count(config):
    """Number of stored scalar weights of a block with this configuration.

    Single-channel blocks use the closed form ``(10 * 2^L - 2L - 9) P^2``;
    multi-channel blocks are counted from the weight shapes.
    """
    if config.c_in == config.c_out == config.c_hidden == 1:
        return (10 * 2 ** config.L - 2 * config.L - 9) * config.P ** 2
    return enumerate_param_count(config)


def enumerate_param_count(config):
    return sum(math.prod(s) for s in config.weight_shapes().values())


@dataclass
class LatentState:
    """Encoder states ``h[l]`` and decoder states ``z[l]`` for l = 0..L.

    Each entry has shape ``(M / 2^l, batch, channels, P)``.
    """

    h: list
    z: list


def block_transform(F, y, eps=None, act="identity"):
    """Batched basis transform over tree positions.

    ``F``: ``(n, C_out, C_in, P, P)``; ``y``: ``(n, b, C_in, P)``;
    ``eps``: ``(n, b, P, P)`` or None. Returns ``(n, b, C_out, P)`` with
    ``z_o = act(sum_i (F_oi + eps) y_i)``.
    """
    n, O, I, P, Q = F.shape
    if y.ndim != 4 or y.shape[0] != n or y.shape[2] != I or y.shape[3] != Q:
        raise DimensionError(f"basis transform input {y.shape} does not match weights {F.shape}")
    b = y.shape[1]
    Wt = T.reshape(T.transpose(F, (0, 2, 4, 1, 3)), (n, I * Q, O * P))
    z = T.reshape(T.matmul(T.reshape(y, (n, b, I * Q)), Wt), (n, b, O, P))
    if eps is not None:
        if eps.shape != (n, b, P, Q):
            raise DimensionError(f"fusion correction has shape {eps.shape}, expected {(n, b, P, Q)}")
        corr = T.einsum("nbpq,nbiq->nbp", eps, y)
        z = T.add(z, T.reshape(corr, (n, b, 1, P)))
    return T.activation(act)(z)


def basis_transform(F, y, eps=None, activation="identity"):
    """Unbatched transform: ``F`` (C_out, C_in, P, P), ``y`` (C_in, P), ``eps`` (P, P)."""
    F, y = T.as_tensor(F), T.as_tensor(y)
    if F.ndim != 4 or y.ndim != 2 or F.shape[1] != y.shape[0] or F.shape[3] != y.shape[1]:
        raise DimensionError(f"basis_transform shapes {F.shape} and {y.shape} disagree")
    P = F.shape[2]
    e = None
    if eps is not None:
        eps = T.as_tensor(eps)
        if eps.shape != (P, P):
            raise DimensionError(f"fusion correction must be {(P, P)}, got {eps.shape}")
        e = T.reshape(eps, (1, 1, P, P))
    out = block_transform(
        T.reshape(F, (1,) + F.shape), T.reshape(y, (1, 1) + y.shape), e, activation
    )
    return T.reshape(out, (F.shape[0], P))


class GFMMBlock1D:
    """Hierarchical encoder/decoder block with banded bridges."""

    def __init__(self, config, weights):
        self.config = config
        shapes = config.weight_shapes()
        if set(weights) != set(shapes):
            raise ConfigError("weight set does not match the configuration")
        self.weights = {}
        for name, shape in shapes.items():
            w = weights[name]
            w = w if isinstance(w, T.Tensor) else T.Tensor(w)
            if w.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {w.shape}")
            w.requires_grad = True
            w.name = name
            self.weights[name] = w

    @classmethod
    def zeros(cls, config, dtype=np.float64):
        return cls(config, {k: np.zeros(s, dtype=dtype) for k, s in config.weight_shapes().items()})

    @classmethod
    def random(cls, config, rng=None, dtype=np.float64, scale=1.0):
        """Uniform init on +-scale/sqrt(C_in P) per weight tensor."""
        rng = np.random.default_rng(rng)
        weights = {}
        for name, shape in config.weight_shapes().items():
            bound = scale / math.sqrt(shape[2] * shape[4])
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(config, weights)

    def parameters(self):
        return list(self.weights.values())

    def named_parameters(self):
        return list(self.weights.items())

    def num_parameters(self):
        return sum(w.size for w in self.weights.values())

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def _bridge(self, level, h):
        w = self.weights
        pre = f"bridge.{level}"
        out = block_transform(w[f"{pre}.diag"], h)
        if f"{pre}.lower" in w:
            lo = block_transform(w[f"{pre}.lower"], T.getitem(h, slice(None, -1)))
            up = block_transform(w[f"{pre}.upper"], T.getitem(h, slice(1, None)))
            out = T.add(out, T.add(T.pad(lo, 0, 1, 0), T.pad(up, 0, 0, 1)))
        return out

    def forward(self, c, fusion=None):
        """Apply the block to ``c`` of shape ``(batch, C_in, D)``.

        ``fusion`` maps ``("enc", l)`` for l = 1..L and ``("dec", l)`` for
        l = 0..L-1 to corrections of shape ``(n, batch, P, P)`` aligned with
        the weight positions of that layer.
        """
        cfg = self.config
        c = T.as_tensor(c)
        if c.ndim != 3 or c.shape[1:] != (cfg.c_in, cfg.D):
            raise DimensionError(f"input must be (batch, {cfg.c_in}, {cfg.D}), got {c.shape}")
        if fusion is not None:
            if not cfg.fusion_enabled:
                raise ConfigError("fusion corrections supplied to a block without fusion enabled")
            expected = {("enc", l) for l in range(1, cfg.L + 1)} | {("dec", l) for l in range(cfg.L)}
            if set(fusion) != expected:
                raise ConfigError("fusion keys must cover exactly the encoder and decoder layers")
        fusion = fusion or {}
        b, M, P, act = c.shape[0], cfg.M, cfg.P, cfg.activation
        w = self.weights

        hs = [T.transpose(T.reshape(c, (b, cfg.c_in, M, P)), (2, 0, 1, 3))]
        for l in range(1, cfg.L + 1):
            t = block_transform(w[f"enc.{l}"], hs[-1], fusion.get(("enc", l)), act)
            n = t.shape[0] // 2
            hs.append(T.tsum(T.reshape(t, (n, 2, b, cfg.c_hidden, P)), axis=1))

        zs = [None] * (cfg.L + 1)
        z = zs[cfg.L] = self._bridge(cfg.L, hs[cfg.L])
        for l in range(cfg.L - 1, -1, -1):
            z = block_transform(w[f"dec.{l}"], T.repeat(z, 2, axis=0), fusion.get(("dec", l)), act)
            z = zs[l] = T.add(z, self._bridge(l, hs[l]))

        u = T.reshape(T.transpose(z, (1, 2, 0, 3)), (b, cfg.c_out, cfg.D))
        return u, LatentState(h=hs, z=zs)

    __call__ = forward

    def copy(self):
        return GFMMBlock1D(self.config, {k: v.data.copy() for k, v in self.weights.items()})


def gfmm_forward(block, c, fusion=None):
    """Forward pass; accepts unbatched ``(C_in, D)`` input as well."""
    c = T.as_tensor(c)
    if c.ndim == 2:
        u, latent = block.forward(T.reshape(c, (1,) + c.shape), fusion)
        return T.reshape(u, u.shape[1:]), latent
    return block.forward(c, fusion)


def assemble_dense(block):
    """D x D matrix G of a linear single-channel block, G c == forward(c)."""
    cfg = block.config
    if not cfg.linear:
        raise ContractError("dense assembly requires identity activation")
    if cfg.c_in != 1 or cfg.c_out != 1:
        raise ContractError("dense assembly requires single input and output channel")
    eye = np.eye(cfg.D, dtype=block.dtype).reshape(cfg.D, 1, cfg.D)
    u, _ = block.forward(T.Tensor(eye))
    return u.data[:, 0, :].T.copy()


def passthrough_block(config, dtype=np.float64):
    """Block whose only nonzero weight is the identity outermost bridge."""
    if config.c_in != config.c_out:
        raise ConfigError("passthrough needs c_in == c_out")
    blk = GFMMBlock1D.zeros(config, dtype)
    diag = blk.weights["bridge.0.diag"].data
    for ch in range(config.c_in):
        diag[:, ch, ch] = np.eye(config.P, dtype=dtype)
    return blk


# reference FMM matrix-vector product ----------------------------------------

def fmm_matvec_reference(weights, x):
    """Literal FMM up-sweep / transfer / leaf-output recursions.

    Nodes are ``(level, index)`` with leaves at level 0 and the root at level
    L. ``weights`` holds dicts ``V``, ``D``, ``U`` keyed by leaves, ``W`` and
    ``R`` keyed by non-root nodes (``R[i]`` acts on the edge parent -> i) and
    ``B`` keyed by ``(node_i, node_j)`` same-level pairs. ``x`` is ``(M, P)``.
    """
    x = np.asarray(x)
    M = x.shape[0]
    L = int(round(math.log2(M))) if M > 0 else -1
    if M < 2 or 2 ** L != M:
        raise ConfigError(f"leaf count {M} is not a power of two >= 2")

    def get(kind, key):
        try:
            return np.asarray(weights[kind][key])
        except KeyError:
            raise ConfigError(f"incomplete tree: missing {kind}{key}") from None

    nbrs = {}
    for (ni, nj) in weights.get("B", {}):
        nbrs.setdefault(ni, []).append(nj)

    g = {}
    for i in range(M):
        g[(0, i)] = get("V", (0, i)) @ x[i]
    for l in range(1, L + 1):
        for i in range(M >> l):
            kids = [(l - 1, 2 * i), (l - 1, 2 * i + 1)]
            g[(l, i)] = sum(get("W", k) @ g[k] for k in kids)

    f = {}
    for l in range(L, -1, -1):
        for i in range(M >> l):
            node = (l, i)
            acc = np.zeros_like(g[node])
            if l < L:
                parent = (l + 1, i // 2)
                acc = acc + get("R", node) @ f[parent]
            for j in nbrs.get(node, []):
                acc = acc + get("B", (node, j)) @ g[j]
            f[node] = acc

    return np.stack([get("D", (0, i)) @ x[i] + get("U", (0, i)) @ f[(0, i)] for i in range(M)])


def embed_block_in_fmm(block):
    """FMM weights reproducing a linear single-channel block.

    Encoders become up-sweep transfers ``W``, decoders become down-sweep
    transfers ``R``, bridges become the neighbour operators ``B``; the
    diagonal of the outermost bridge is the leaf self-interaction ``D``.
    """
    cfg = block.config
    if not cfg.linear or cfg.c_in != 1 or cfg.c_out != 1 or cfg.c_hidden != 1:
        raise ContractError("embedding requires a linear single-channel block")
    P, L, M = cfg.P, cfg.L, cfg.M
    w = {k: v.data[:, 0, 0] for k, v in block.weights.items()}
    eye = np.eye(P)
    V = {(0, i): eye for i in range(M)}
    U = {(0, i): eye for i in range(M)}
    D = {(0, i): w["bridge.0.diag"][i] for i in range(M)}
    W, R, B = {}, {}, {}
    for l in range(L):
        for j in range(M >> l):
            W[(l, j)] = w[f"enc.{l + 1}"][j]
            R[(l, j)] = w[f"dec.{l}"][j]
    for l in range(L + 1):
        n = M >> l
        for i in range(n):
            if l > 0:
                B[((l, i), (l, i))] = w[f"bridge.{l}.diag"][i]
            if i + 1 < n:
                B[((l, i + 1), (l, i))] = w[f"bridge.{l}.lower"][i]
                B[((l, i), (l, i + 1))] = w[f"bridge.{l}.upper"][i]
    return {"V": V, "W": W, "R": R, "B": B, "D": D, "U": U}
