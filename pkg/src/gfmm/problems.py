"""Discrete forward operators, samplers and classical solvers.

Four benchmark problems share one small interface (:class:`Problem`):
``apply`` maps a solution to its right-hand-side fields, ``solve`` is the
classical oracle where one exists, ``residuals`` evaluates a prediction and
``sample_coefficients`` draws coefficient fields.

All field arrays carry a leading batch axis.
"""

from __future__ import annotations

import functools

import numpy as np
import scipy.fft

from .errors import (ConfigError, DomainError, NumericalError, SingularityError,
                     UnsupportedError)


# grids and bases ------------------------------------------------------------

class Grid1D:
    """Uniform grid on [0, 1].

    The default holds the D interior nodes ``x_i = i / (D + 1)``; with
    ``closed=True`` it holds D nodes including both end points.
    """

    def __init__(self, D, closed=False):
        if D < 2:
            raise ConfigError("grid needs at least 2 points", "D")
        self.D, self.closed = int(D), bool(closed)
        if closed:
            self.h = 1.0 / (D - 1)
            self.x = np.arange(D) * self.h
        else:
            self.h = 1.0 / (D + 1)
            self.x = np.arange(1, D + 1) * self.h

    @property
    def xi(self):
        """Coordinates mapped affinely to [-1, 1]."""
        return 2.0 * self.x - 1.0

    def nodes_with_boundary(self):
        return np.arange(self.D + 2) * self.h if not self.closed else self.x


def chebyshev_basis(K, xi):
    """Rows ``T_1 .. T_K`` evaluated at ``xi`` by the three-term recurrence."""
    if K < 1:
        raise ConfigError(f"basis size K must be >= 1, got {K}", "K")
    xi = np.asarray(xi, dtype=np.float64)
    out = np.empty((K,) + xi.shape)
    prev, cur = np.ones_like(xi), xi.copy()
    out[0] = cur
    for k in range(1, K):
        prev, cur = cur, 2.0 * xi * cur - prev
        out[k] = cur
    return out


def chebyshev_combination(alpha, xi):
    """``u = sum_k alpha_k T_k(xi)``, k = 1..K; ``alpha`` may be batched."""
    alpha = np.asarray(alpha, dtype=np.float64)
    basis = chebyshev_basis(alpha.shape[-1], xi)
    return np.tensordot(alpha, basis, axes=(-1, 0))


# operators -------------------------------------------------------------------

def poisson_apply(u):
    """``tridiag(-1, 2, -1) u`` along the last axis (zero Dirichlet halo)."""
    u = np.asarray(u)
    c = 2 * u
    c[..., 1:] -= u[..., :-1]
    c[..., :-1] -= u[..., 1:]
    return c


def darcy_apply(a_half, u, u0=0.0, u1=0.0, h=None):
    """``-(a u')'`` by the conservative three-point stencil.

    ``a_half`` holds the D+1 half-point coefficients, ``u`` the D interior
    values; the Dirichlet data ``u0``/``u1`` are substituted at the ends.
    """
    a_half, u = np.asarray(a_half), np.asarray(u)
    D = u.shape[-1]
    if a_half.shape[-1] != D + 1:
        raise ConfigError(f"expected {D + 1} half-point coefficients, got {a_half.shape[-1]}")
    if np.any(a_half <= 0):
        raise DomainError("Darcy coefficient must be strictly positive")
    if h is None:
        h = 1.0 / (D + 1)
    dt = np.result_type(u, a_half)
    lead = u.shape[:-1]
    full = np.empty(lead + (D + 2,), dtype=dt)
    full[..., 0], full[..., -1], full[..., 1:-1] = u0, u1, u
    flux = a_half * (full[..., 1:] - full[..., :-1])
    inv_h2 = dt.type(1.0 / (h * h))
    return (flux[..., :-1] - flux[..., 1:]) * inv_h2


def darcy_matrix(a_half, h):
    """Tridiagonal bands ``(sub, diag, sup)`` of the Darcy operator."""
    a_half = np.asarray(a_half, dtype=np.float64)
    s = 1.0 / (h * h)
    diag = (a_half[..., :-1] + a_half[..., 1:]) * s
    off = -a_half[..., 1:-1] * s
    sub = np.zeros_like(diag)
    sup = np.zeros_like(diag)
    sub[..., 1:] = off
    sup[..., :-1] = off
    return sub, diag, sup


def tridiag_solve(sub, diag, sup, c):
    """Thomas algorithm for ``sub[i] u[i-1] + diag[i] u[i] + sup[i] u[i+1] = c[i]``.

    Bands and right-hand side broadcast over leading batch axes;
    ``sub[0]`` and ``sup[-1]`` are ignored.
    """
    c = np.asarray(c, dtype=np.float64)
    sub, diag, sup = (np.broadcast_to(np.asarray(x, dtype=np.float64), c.shape) for x in (sub, diag, sup))
    D = c.shape[-1]
    cp = np.empty_like(c)
    dp = np.empty_like(c)
    denom = diag[..., 0]
    if np.any(denom == 0):
        raise SingularityError("zero pivot in row 0")
    cp[..., 0] = sup[..., 0] / denom
    dp[..., 0] = c[..., 0] / denom
    for i in range(1, D):
        denom = diag[..., i] - sub[..., i] * cp[..., i - 1]
        if np.any(denom == 0):
            raise SingularityError(f"zero pivot in row {i}")
        cp[..., i] = sup[..., i] / denom
        dp[..., i] = (c[..., i] - sub[..., i] * dp[..., i - 1]) / denom
    u = np.empty_like(c)
    u[..., -1] = dp[..., -1]
    for i in range(D - 2, -1, -1):
        u[..., i] = dp[..., i] - cp[..., i] * u[..., i + 1]
    return u


def derivative(u, h):
    """Second-order first derivative: centred inside, one-sided at the ends."""
    u = np.asarray(u)
    du = np.empty_like(u)
    inv = u.dtype.type(1.0 / (2.0 * h)) if u.dtype.kind == "f" else 1.0 / (2.0 * h)
    du[..., 1:-1] = (u[..., 2:] - u[..., :-2]) * inv
    du[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) * inv
    du[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) * inv
    return du


def nonlinear_bvp_operator(a, b, u, h):
    """``a u' + b |u|`` on the grid."""
    return a * derivative(u, h) + b * np.abs(u)


def nonlinear_bvp_residual(a, b, u, c, h):
    """Interior residual vector ``a u' + b |u| - c``."""
    return nonlinear_bvp_operator(a, b, u, h) - c


def trapezoid(y, x):
    return np.trapezoid(y, x, axis=-1)


def boundary_residual(f, u, g, x):
    """``g - int_0^1 f u dx`` by the trapezoid rule on closed grid ``x``."""
    return g - trapezoid(np.asarray(f) * np.asarray(u), x)


def poisson2d_apply(U):
    """Five-point Laplacian ``4U - neighbours`` with zero halo, last two axes."""
    U = np.asarray(U)
    C = 4 * U
    C[..., 1:, :] -= U[..., :-1, :]
    C[..., :-1, :] -= U[..., 1:, :]
    C[..., :, 1:] -= U[..., :, :-1]
    C[..., :, :-1] -= U[..., :, 1:]
    return C


def poisson2d_solve(C):
    """Exact solve of the five-point system by the type-I sine transform."""
    C = np.asarray(C, dtype=np.float64)
    N = C.shape[-1]
    k = np.arange(1, N + 1)
    lam = 2.0 - 2.0 * np.cos(k * np.pi / (N + 1))
    hat = scipy.fft.dstn(C, type=1, axes=(-2, -1))
    hat /= lam[:, None] + lam[None, :]
    return scipy.fft.idstn(hat, type=1, axes=(-2, -1))


# Gaussian processes ----------------------------------------------------------

def se_kernel(points, length):
    d = points[:, None] - points[None, :]
    return np.exp(-(d * d) / (2.0 * length * length))


def cholesky_jitter(K, start=1e-10, stop=1e-6):
    """Cholesky factor of ``K + jitter I`` with jitter escalated by decades."""
    jitter = 0.0
    n = K.shape[0]
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = start if jitter == 0.0 else jitter * 10.0
            if jitter > stop * (1 + 1e-9):
                raise NumericalError("covariance is not positive definite after jitter escalation") from None


def gp_sample(kernel, rng, n=None):
    """Draws ``L z`` with ``L`` the jittered Cholesky factor of ``kernel``."""
    factor = cholesky_jitter(np.asarray(kernel, dtype=np.float64))
    size = factor.shape[0]
    if n is None:
        return factor @ rng.standard_normal(size)
    return rng.standard_normal((n, size)) @ factor.T


# problems -------------------------------------------------------------------

class Problem:
    name = ""
    dim = 1
    coeff_names = ()
    rhs_names = ("c",)
    linear = True
    has_oracle = True
    constant_coefficients = False

    def input_scales(self):
        """Fixed factors applied to fields before they enter a network."""
        return {}

    def manifest(self):
        return {"type": self.name}


class Poisson1D(Problem):
    """``A u = c`` with ``A = tridiag(-1, 2, -1)``."""

    name = "poisson1d"
    constant_coefficients = True

    def __init__(self, D=256):
        self.grid = Grid1D(D)
        self.D = D

    @property
    def field_shape(self):
        return (self.D,)

    def sample_coefficients(self, rng, n, distribution=None, dtype=np.float32):
        return {}, {}

    def apply(self, u, coeffs):
        return {"c": poisson_apply(u)}

    def apply_operator(self, u, coeffs=None):
        return poisson_apply(u)

    def solve(self, coeffs, rhs):
        c = np.asarray(rhs["c"], dtype=np.float64)
        return tridiag_solve(-1.0, 2.0, -1.0, c)

    def residuals(self, u_hat, coeffs, rhs):
        r = poisson_apply(np.asarray(u_hat, dtype=np.float64)) - rhs["c"]
        return np.sqrt(np.sum(r * r, axis=-1)), None

    def manifest(self):
        return {"type": self.name, "D": self.D}


class Darcy1D(Problem):
    """``-(a u')' = c`` on (0, 1) with Dirichlet data ``u0``, ``u1``."""

    name = "darcy1d"
    coeff_names = ("a",)
    distributions = ("mixture", "average", "quadratic", "lognormal")

    def __init__(self, D=256, u0=0.0, u1=0.0, kernel_units="index", input_scales=None):
        if kernel_units not in ("index", "coordinate"):
            raise ConfigError("kernel_units must be 'index' or 'coordinate'", "kernel_units")
        self.grid = Grid1D(D)
        self.D, self.u0, self.u1 = D, float(u0), float(u1)
        self.kernel_units = kernel_units
        self._scales = input_scales

    @property
    def field_shape(self):
        return (self.D,)

    def input_scales(self):
        if self._scales is not None:
            return dict(self._scales)
        return {"c": self.grid.h ** 2}

    def manifest(self):
        return {"type": self.name, "D": self.D, "u0": self.u0, "u1": self.u1,
                "kernel_units": self.kernel_units}

    @functools.cached_property
    def _gp_factor(self):
        # nodes include both boundary points: D + 2 values
        n = self.D + 2
        if self.kernel_units == "index":
            pts, length = np.arange(n, dtype=np.float64), 0.1 * self.D
        else:
            pts, length = self.grid.nodes_with_boundary(), 0.1
        return cholesky_jitter(se_kernel(pts, length))

    def sample_coefficients(self, rng, n, distribution="mixture", dtype=np.float32):
        """Nodal coefficient on the D+2 nodes; network input is the interior.

        Returns ``(coeff_fields, aux)`` where aux holds ``a_nodes``, the
        drawn ``theta1`` and the mixture ``branch`` (0 quadratic, 1 log-normal).
        """
        distribution = distribution or "mixture"
        if distribution not in self.distributions:
            raise ConfigError(f"unknown Darcy distribution {distribution!r}", "distribution")
        x = self.grid.nodes_with_boundary()
        theta1 = rng.uniform(0.0, 1.0, size=n)
        z = rng.standard_normal((n, self.D + 2))
        branch_draw = rng.random(n)
        a1 = 1.0 + theta1[:, None] * x[None, :] ** 2
        a2 = 0.1 + np.exp(z @ self._gp_factor.T)
        if distribution == "mixture":
            branch = (branch_draw >= 0.5).astype(np.int8)
            a = np.where(branch[:, None] == 1, a2, a1)
        elif distribution == "average":
            branch = np.full(n, -1, dtype=np.int8)
            a = 0.5 * a1 + 0.5 * a2
        elif distribution == "quadratic":
            branch = np.zeros(n, dtype=np.int8)
            a = a1
        else:
            branch = np.ones(n, dtype=np.int8)
            a = a2
        a = a.astype(dtype)
        return {"a": a[:, 1:-1]}, {"a_nodes": a, "theta1": theta1, "branch": branch}

    @staticmethod
    def half_points(a_nodes):
        return 0.5 * (a_nodes[..., 1:] + a_nodes[..., :-1])

    def apply(self, u, coeffs):
        return {"c": self.apply_operator(u, coeffs)}

    def apply_operator(self, u, coeffs):
        return darcy_apply(self.half_points(coeffs["a_nodes"]), u, self.u0, self.u1, self.grid.h)

    def solve(self, coeffs, rhs):
        h = self.grid.h
        a_half = self.half_points(np.asarray(coeffs["a_nodes"], dtype=np.float64))
        sub, diag, sup = darcy_matrix(a_half, h)
        c = np.array(rhs["c"], dtype=np.float64)
        c[..., 0] += a_half[..., 0] * self.u0 / h ** 2
        c[..., -1] += a_half[..., -1] * self.u1 / h ** 2
        return tridiag_solve(sub, diag, sup, c)

    def residuals(self, u_hat, coeffs, rhs):
        a_nodes = np.asarray(coeffs["a_nodes"], dtype=np.float64)
        r = darcy_apply(self.half_points(a_nodes), np.asarray(u_hat, dtype=np.float64),
                        self.u0, self.u1, self.grid.h) - rhs["c"]
        return np.sqrt(np.sum(r * r, axis=-1)), None


class NonlinearBVP1D(Problem):
    """``a u' + b |u| = c`` on (0, 1) with ``int f u dx = g``."""

    name = "bvp1d"
    coeff_names = ("a", "b", "f")
    rhs_names = ("c", "g")
    linear = False
    has_oracle = False
    distributions = ("train", "ood", "ood-ab", "ood-f")

    def __init__(self, D=256, n_terms=4, input_scales=None):
        self.grid = Grid1D(D, closed=True)
        self.D, self.n_terms = D, n_terms
        self._scales = input_scales

    @property
    def field_shape(self):
        return (self.D,)

    def input_scales(self):
        if self._scales is not None:
            return dict(self._scales)
        return {"c": self.grid.h}

    def manifest(self):
        return {"type": self.name, "D": self.D, "n_terms": self.n_terms}

    def sample_coefficients(self, rng, n, distribution="train", dtype=np.float32):
        """``a = 1 + theta x^2``, ``b``/``f`` four-term Chebyshev sums.

        ``train`` draws all parameters from U[-1, 1]; ``ood`` from N(0, 1);
        ``ood-ab`` / ``ood-f`` switch only the interior or the boundary
        coefficients to N(0, 1).
        """
        distribution = distribution or "train"
        if distribution not in self.distributions:
            raise ConfigError(f"unknown BVP distribution {distribution!r}", "distribution")
        k = self.n_terms
        unif = rng.uniform(-1.0, 1.0, size=(n, 1 + 2 * k))
        norm = rng.standard_normal((n, 1 + 2 * k))
        ab_normal = distribution in ("ood", "ood-ab")
        f_normal = distribution in ("ood", "ood-f")
        theta = (norm if ab_normal else unif)[:, 0]
        phi = (norm if ab_normal else unif)[:, 1:1 + k]
        eta = (norm if f_normal else unif)[:, 1 + k:]
        x = self.grid.x
        a = 1.0 + theta[:, None] * x[None, :] ** 2
        b = chebyshev_combination(phi, self.grid.xi)
        f = chebyshev_combination(eta, self.grid.xi)
        fields = {"a": a.astype(dtype), "b": b.astype(dtype), "f": f.astype(dtype)}
        return fields, {"theta": theta}

    def apply(self, u, coeffs):
        h, x = self.grid.h, self.grid.x.astype(u.dtype)
        c = nonlinear_bvp_operator(coeffs["a"], coeffs["b"], u, h)
        g = trapezoid(coeffs["f"] * u, x)
        return {"c": c, "g": g}

    def apply_operator(self, u, coeffs):
        return nonlinear_bvp_operator(coeffs["a"], coeffs["b"], u, self.grid.h)

    def solve(self, coeffs, rhs):
        raise UnsupportedError("no classical solver for the nonlinear BVP; evaluate by residual")

    def residuals(self, u_hat, coeffs, rhs):
        u_hat = np.asarray(u_hat, dtype=np.float64)
        a, b, f = (np.asarray(coeffs[k], dtype=np.float64) for k in ("a", "b", "f"))
        r = nonlinear_bvp_residual(a, b, u_hat, np.asarray(rhs["c"], dtype=np.float64), self.grid.h)
        bnd = boundary_residual(f, u_hat, np.asarray(rhs["g"], dtype=np.float64), self.grid.x)
        return np.sqrt(np.sum(r * r, axis=-1)), np.abs(bnd)


class Poisson2D(Problem):
    """``A U = C`` with the five-point Laplacian on an N x N interior grid."""

    name = "poisson2d"
    dim = 2
    constant_coefficients = True

    def __init__(self, N=64):
        self.grid = Grid1D(N)
        self.N = self.D = N

    @property
    def field_shape(self):
        return (self.N, self.N)

    def manifest(self):
        return {"type": self.name, "N": self.N}

    def sample_coefficients(self, rng, n, distribution=None, dtype=np.float32):
        return {}, {}

    def apply(self, u, coeffs):
        return {"c": poisson2d_apply(u)}

    def apply_operator(self, u, coeffs=None):
        return poisson2d_apply(u)

    def solve(self, coeffs, rhs):
        return poisson2d_solve(rhs["c"])

    def residuals(self, u_hat, coeffs, rhs):
        r = poisson2d_apply(np.asarray(u_hat, dtype=np.float64)) - rhs["c"]
        return np.sqrt(np.sum(r * r, axis=(-2, -1))), None


PROBLEMS = {cls.name: cls for cls in (Poisson1D, Darcy1D, NonlinearBVP1D, Poisson2D)}


def make_problem(spec):
    """Build a problem from its config block ``{"type": ..., ...}``."""
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind not in PROBLEMS:
        raise ConfigError(f"unknown problem type {kind!r}", "problem.type")
    spec.pop("distribution", None)
    try:
        return PROBLEMS[kind](**spec)
    except TypeError as exc:
        raise ConfigError(str(exc), "problem") from None
