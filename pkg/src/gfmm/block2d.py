"""Two-dimensional GFMM block over a Morton-ordered quadtree.

Blocks of side ``P`` are listed in Z-order, so the four children of the
node at Morton index ``k`` are ``4k .. 4k+3`` (TL, TR, BL, BR). Every node
transform is a bilinear contraction ``A X B^T``; bridges are
block-tridiagonal in the Morton sequence with one ``(A, B)`` pair per
stored block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .block1d import ACTIVATION_NAMES


def _interleave_inverse(k, levels):
    row = col = 0
    for bit in range(levels):
        col |= ((k >> (2 * bit)) & 1) << bit
        row |= ((k >> (2 * bit + 1)) & 1) << bit
    return row, col


class MortonLayout:
    """Permutation between row-major block grids and the Z-order sequence."""

    def __init__(self, N, P):
        if P < 1 or N % P:
            raise ConfigError(f"grid side {N} is not divisible by block side {P}")
        m = N // P
        levels = int(round(math.log2(m)))
        if 2 ** levels != m:
            raise ConfigError(f"blocks per side {m} is not a power of two")
        self.N, self.P, self.m, self.levels = N, P, m, levels
        self.coords = [_interleave_inverse(k, levels) for k in range(m * m)]
        # row-major block index for each Morton position
        self.order = np.array([r * m + c for r, c in self.coords], dtype=np.intp)
        self.inverse = np.argsort(self.order)

    def from_grid(self, X):
        """``(..., N, N)`` -> ``(..., m*m, P, P)`` in Morton order (numpy)."""
        X = np.asarray(X)
        lead = X.shape[:-2]
        m, P = self.m, self.P
        blocks = X.reshape(lead + (m, P, m, P)).swapaxes(-3, -2).reshape(lead + (m * m, P, P))
        return blocks[..., self.order, :, :]

    def to_grid(self, blocks):
        blocks = np.asarray(blocks)
        lead = blocks.shape[:-3]
        m, P = self.m, self.P
        rm = blocks[..., self.inverse, :, :].reshape(lead + (m, m, P, P))
        return rm.swapaxes(-3, -2).reshape(lead + (self.N, self.N))


def morton_blocks(X, P):
    """List of ``P x P`` blocks of the square matrix ``X`` in Z-order."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise DimensionError(f"expected a square matrix, got {X.shape}")
    layout = MortonLayout(X.shape[0], P)
    return list(layout.from_grid(X))


@dataclass(frozen=True)
class GFMM2DConfig:
    N: int
    P: int
    activation: str = "identity"

    def __post_init__(self):
        MortonLayout(self.N, self.P)
        if self.N // self.P < 2:
            raise ConfigError("the quadtree needs at least 2x2 blocks", "N")
        if self.activation not in ACTIVATION_NAMES:
            raise ConfigError(f"unknown activation {self.activation!r}", "activation")

    @property
    def L(self):
        return int(round(math.log2(self.N // self.P)))

    @property
    def linear(self):
        return self.activation == "identity"

    def positions(self, level):
        return 4 ** (self.L - level)

    def weight_shapes(self):
        P, L = self.P, self.L
        shapes = {}
        for l in range(1, L + 1):
            shapes[f"enc.{l}"] = (self.positions(l - 1), 2, P, P)
        for l in range(L):
            shapes[f"dec.{l}"] = (self.positions(l), 2, P, P)
        for l in range(L + 1):
            n = self.positions(l)
            shapes[f"bridge.{l}.diag"] = (n, 2, P, P)
            if n > 1:
                shapes[f"bridge.{l}.lower"] = (n - 1, 2, P, P)
                shapes[f"bridge.{l}.upper"] = (n - 1, 2, P, P)
        return shapes


def pair_transform(W, X, act="identity"):
    """``act(A_k X_k B_k^T)`` for ``W`` ``(n, 2, P, P)`` and ``X`` ``(n, b, P, P)``."""
    n, _, P, _ = W.shape
    if X.ndim != 4 or X.shape[0] != n or X.shape[2:] != (P, P):
        raise DimensionError(f"contraction input {X.shape} does not match weights {W.shape}")
    A = T.reshape(T.getitem(W, (slice(None), 0)), (n, 1, P, P))
    B = T.reshape(T.getitem(W, (slice(None), 1)), (n, 1, P, P))
    return T.activation(act)(T.contract2d(A, X, B))


class GFMMBlock2D:
    """Quadtree encoder/decoder with Morton-banded bridges, single channel."""

    def __init__(self, config, weights):
        self.config = config
        self.layout = MortonLayout(config.N, config.P)
        shapes = config.weight_shapes()
        if set(weights) != set(shapes):
            raise ConfigError("weight set does not match the configuration")
        self.weights = {}
        for name, shape in shapes.items():
            w = weights[name] if isinstance(weights[name], T.Tensor) else T.Tensor(weights[name])
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
        rng = np.random.default_rng(rng)
        bound = scale / math.sqrt(config.P)
        return cls(config, {
            k: rng.uniform(-bound, bound, size=s).astype(dtype)
            for k, s in config.weight_shapes().items()
        })

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
        out = pair_transform(w[f"{pre}.diag"], h)
        if f"{pre}.lower" in w:
            lo = pair_transform(w[f"{pre}.lower"], T.getitem(h, slice(None, -1)))
            up = pair_transform(w[f"{pre}.upper"], T.getitem(h, slice(1, None)))
            out = T.add(out, T.add(T.pad(lo, 0, 1, 0), T.pad(up, 0, 0, 1)))
        return out

    def forward(self, C):
        """Apply to ``C`` of shape ``(batch, N, N)``; returns the same shape."""
        cfg, lay = self.config, self.layout
        C = T.as_tensor(C)
        if C.ndim != 3 or C.shape[1:] != (cfg.N, cfg.N):
            raise DimensionError(f"input must be (batch, {cfg.N}, {cfg.N}), got {C.shape}")
        b, m, P, act = C.shape[0], lay.m, cfg.P, cfg.activation
        w = self.weights

        blocks = T.reshape(T.transpose(T.reshape(C, (b, m, P, m, P)), (0, 1, 3, 2, 4)), (b, m * m, P, P))
        blocks = T.getitem(blocks, (slice(None), lay.order))
        hs = [T.transpose(blocks, (1, 0, 2, 3))]
        for l in range(1, cfg.L + 1):
            t = pair_transform(w[f"enc.{l}"], hs[-1], act)
            hs.append(T.tsum(T.reshape(t, (t.shape[0] // 4, 4, b, P, P)), axis=1))

        z = self._bridge(cfg.L, hs[cfg.L])
        for l in range(cfg.L - 1, -1, -1):
            z = pair_transform(w[f"dec.{l}"], T.repeat(z, 4, axis=0), act)
            z = T.add(z, self._bridge(l, hs[l]))

        out = T.getitem(T.transpose(z, (1, 0, 2, 3)), (slice(None), lay.inverse))
        out = T.transpose(T.reshape(out, (b, m, m, P, P)), (0, 1, 3, 2, 4))
        return T.reshape(out, (b, cfg.N, cfg.N))

    __call__ = forward


def gfmm2d_forward(block, C):
    C = T.as_tensor(C)
    if C.ndim == 2:
        return T.reshape(block.forward(T.reshape(C, (1,) + C.shape)), C.shape)
    return block.forward(C)


def assemble_dense_2d(block):
    """``N^2 x N^2`` matrix acting on row-major ``vec(C)``."""
    cfg = block.config
    if not cfg.linear:
        raise ContractError("dense assembly requires identity activation")
    n2 = cfg.N * cfg.N
    basis = np.eye(n2, dtype=block.dtype).reshape(n2, cfg.N, cfg.N)
    out = block.forward(T.Tensor(basis)).data.reshape(n2, n2)
    return out.T.copy()


def passthrough_block_2d(config, dtype=np.float64):
    blk = GFMMBlock2D.zeros(config, dtype)
    diag = blk.weights["bridge.0.diag"].data
    diag[:, 0] = np.eye(config.P)
    diag[:, 1] = np.eye(config.P)
    return blk
