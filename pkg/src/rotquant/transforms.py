"""Orthogonal transforms: fast Walsh-Hadamard, PCA bases, Cayley rotations.

Conventions
-----------
Data is row-major: activations are [tokens x n] and a rotation with matrix M
acts as ``x @ M``.  Weights stored [out x in] absorb an input-side rotation
as ``W @ M`` and an output-side rotation as ``M.T @ W``; both leave the
floating-point product unchanged when paired.

The normalized Sylvester-Hadamard matrix is symmetric and involutory, so the
fast transform along the last axis computes both ``x @ H`` and ``H @ x.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = [
    "is_power_of_two",
    "fwht",
    "hadamard_matrix",
    "Rotation",
    "SylvesterHadamard",
    "RandomHadamard",
    "ComposedRotation",
    "MatrixRotation",
    "random_hadamard",
    "jacobi_eigh",
    "pca_basis",
    "compose_rres",
    "CayleyParam",
    "cayley",
]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_pow2(n: int):
    if not is_power_of_two(n):
        raise ValueError(f"dimension must be 2^k, got {n}")


def _fwht_array(x):
    """Normalized Walsh-Hadamard transform along the last axis.

    Radix-2 Cooley-Tukey butterflies, O(n log n).  The recursion
    H_{2m} = [[H_m, H_m], [H_m, -H_m]] is unrolled level by level on a
    reshaped view so each level is a single vectorized add/sub.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    _check_pow2(n)
    shape = x.shape
    y = x.reshape(-1, n).copy()
    h = 1
    while h < n:
        y = y.reshape(-1, n // (2 * h), 2, h)
        top = y[:, :, 0, :] + y[:, :, 1, :]
        bot = y[:, :, 0, :] - y[:, :, 1, :]
        y = np.stack((top, bot), axis=2).reshape(-1, n)
        h *= 2
    return (y / np.sqrt(n)).reshape(shape)


def fwht(x):
    """Apply the normalized Hadamard transform along the last axis.

    Accepts a Var (differentiable: H is symmetric orthogonal, so the
    backward pass is the same transform applied to the gradient).
    """
    if isinstance(x, Var):
        out = _fwht_array(x.value)
        return Var(out, _parents=(x,), _vjps=(lambda g: _fwht_array(g),))
    return _fwht_array(x)


def hadamard_matrix(n: int):
    """Dense normalized Sylvester-Hadamard matrix (entries +-n^{-1/2})."""
    _check_pow2(n)
    return _fwht_array(np.eye(n))


# -- rotation objects -------------------------------------------------------


class Rotation:
    """An orthogonal map acting on the last axis of row-major data."""

    dim: int

    def apply(self, x):
        return x @ self.materialize()

    def apply_inverse(self, x):
        return x @ self.materialize().T

    def materialize(self):
        raise NotImplementedError

    def inverse(self) -> "Rotation":
        return MatrixRotation(self.materialize().T)


class SylvesterHadamard(Rotation):
    """Fixed Hadamard rotation applied via the fast transform (self-inverse)."""

    def __init__(self, dim: int):
        _check_pow2(dim)
        self.dim = dim

    def apply(self, x):
        return fwht(x)

    def apply_inverse(self, x):
        return fwht(x)

    def materialize(self):
        return hadamard_matrix(self.dim)

    def inverse(self):
        return self


class RandomHadamard(Rotation):
    """H composed with a random +-1 diagonal: x -> fwht(x) * signs."""

    def __init__(self, dim: int, signs):
        _check_pow2(dim)
        signs = np.asarray(signs, dtype=np.float64)
        if signs.shape != (dim,) or not np.all(np.abs(signs) == 1.0):
            raise ValueError("signs must be a +-1 vector of length dim")
        self.dim = dim
        self.signs = signs

    def apply(self, x):
        return fwht(x) * self.signs

    def apply_inverse(self, x):
        return fwht(x * self.signs)

    def materialize(self):
        return hadamard_matrix(self.dim) * self.signs[None, :]

    def inverse(self):
        return MatrixRotation(self.materialize().T)


class ComposedRotation(Rotation):
    """PCA basis followed by the Hadamard transform: x -> fwht(x @ U)."""

    def __init__(self, u):
        u = np.asarray(u, dtype=np.float64)
        _check_pow2(u.shape[0])
        _assert_orthogonal(u)
        self.dim = u.shape[0]
        self.u = u

    def apply(self, x):
        return fwht(x @ self.u)

    def apply_inverse(self, x):
        return fwht(x) @ self.u.T

    def materialize(self):
        return self.u @ hadamard_matrix(self.dim)


class MatrixRotation(Rotation):
    """Explicit orthogonal matrix."""

    def __init__(self, m):
        m = np.asarray(m, dtype=np.float64)
        _assert_orthogonal(m)
        self.dim = m.shape[0]
        self.m = m

    def materialize(self):
        return self.m


def _assert_orthogonal(m, tol=1e-6):
    gram = m.T @ m
    err = np.max(np.abs(gram - np.eye(m.shape[0])))
    if err > tol:
        raise ValueError(f"matrix is not orthogonal (max |U^T U - I| = {err:.3e})")


def random_hadamard(n: int, seed: int) -> RandomHadamard:
    """Seeded random-sign Hadamard rotation (deterministic per seed)."""
    _check_pow2(n)
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=n) * 2.0 - 1.0
    return RandomHadamard(n, signs)


# -- symmetric eigendecomposition -------------------------------------------


def jacobi_eigh(c, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps all (p, q) pairs, each time zeroing c[p, q] with a Givens
    rotation, until the off-diagonal Frobenius mass drops below
    tol * ||C||_F.  Returns (eigenvalues desc, eigenvectors as columns).
    """
    a = np.array(c, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("jacobi_eigh expects a symmetric square matrix")
    v = np.eye(n)
    fro = np.linalg.norm(a)
    if fro == 0.0:
        return np.zeros(n), v

    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                # entries this small cannot affect the 1e-12 convergence
                # threshold and would overflow the theta ratio
                if abs(apq) <= 1e-36 * fro:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                sign = 1.0 if theta >= 0.0 else -1.0
                t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                cth = 1.0 / np.sqrt(t * t + 1.0)
                sth = t * cth
                # A <- G^T A G, V <- V G with G the (p, q) Givens rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = cth * ap - sth * aq
                a[:, q] = sth * ap + cth * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = cth * ap - sth * aq
                a[q, :] = sth * ap + cth * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = cth * vp - sth * vq
                v[:, q] = sth * vp + cth * vq

    vals = np.diag(a).copy()
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    v = v[:, order]
    # deterministic sign: largest-magnitude component of each column positive
    for j in range(n):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
    return vals, v


def pca_basis(weights):
    """Eigenbasis of the summed weight covariance C = sum_k W_k^T W_k.

    Every W_k is [out x n] with the same input width n; rows are read as
    uncentered samples over input channels.  Columns of the returned U are
    orthonormal eigenvectors ordered by descending eigenvalue.
    """
    if not weights:
        raise ValueError("at least one weight matrix required")
    mats = [np.asarray(w, dtype=np.float64) for w in weights]
    n = mats[0].shape[1]
    for w in mats:
        if w.ndim != 2 or w.shape[1] != n:
            raise ValueError(f"weight input widths disagree: {w.shape[1]} != {n}")
    cov = np.zeros((n, n))
    for w in mats:
        cov += w.T @ w
    _, u = jacobi_eigh(cov)
    return u


def compose_rres(u) -> ComposedRotation:
    """Residual-stream rotation: principal basis then Hadamard.

    Activation-side application order is fixed as U^T then H; in the
    row-major convention both the residual stream and the input-side
    weights multiply by U @ H on the right.
    """
    u = np.asarray(u, dtype=np.float64)
    _check_pow2(u.shape[0])
    _assert_orthogonal(u)  # rejects ||U^T U - I||_inf > 1e-6
    return ComposedRotation(u)


# -- Cayley parameterization -------------------------------------------------


@dataclass
class CayleyParam:
    """Unconstrained square parameter interpreted through its skew part.

    cayley(a=0) reproduces `base` exactly, so initializing at zero with a
    Hadamard base starts training from the fixed-Hadamard rotation.
    """

    a: object  # [n x n] ndarray or Var
    base: np.ndarray  # fixed orthogonal right factor

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        _assert_orthogonal(self.base)


def _cayley_forward(a_val, base):
    n = a_val.shape[0]
    if a_val.shape != (n, n) or base.shape != (n, n):
        raise ValueError("cayley parameter and base must be square and same size")
    if not np.all(np.isfinite(a_val)):
        raise ValueError("cayley parameter must be finite")
    s = 0.5 * (a_val - a_val.T)
    eye = np.eye(n)
    m = np.linalg.solve(eye - s, eye + s)  # LU with partial pivoting
    return s, m, m @ base


def cayley(param: CayleyParam):
    """(I - S)^{-1} (I + S) @ base with S the skew part of the parameter.

    Orthogonal for every finite parameter; differentiable when the
    parameter is a Var (closed-form vector-Jacobian product through the
    linear solve).
    """
    base = param.base
    a = param.a
    if isinstance(a, Var):
        s, m, r = _cayley_forward(a.value, base)
        eye = np.eye(s.shape[0])

        def back(g):
            gm = g @ base.T
            gs = np.linalg.solve(eye + s, gm @ (eye + m).T)
            return 0.5 * (gs - gs.T)

        return Var(r, _parents=(a,), _vjps=(back,))
    _, _, r = _cayley_forward(np.asarray(a, dtype=np.float64), base)
    return r
