"""Small dense linear algebra: Jacobi SVD, differentiable pseudo-inverse, eigenvalues.

Everything here works on stacks of matrices (leading batch axes) because the
trainer estimates one Koopman matrix per episode of a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NodeId, ShapeError


class ConvergenceError(ArithmeticError):
    """An iterative factorization hit its iteration cap."""


@dataclass(frozen=True)
class ComplexScalar:
    re: float
    im: float

    def __complex__(self) -> complex:
        return complex(self.re, self.im)

    def __abs__(self) -> float:
        return abs(complex(self.re, self.im))

    @classmethod
    def of(cls, z: complex) -> "ComplexScalar":
        z = complex(z)
        return cls(float(z.real), float(z.imag))


# --------------------------------------------------------------------- SVD

def svd_jacobi(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 80):
    """Thin SVD of ``a`` (shape ``(..., m, n)``) by one-sided Jacobi rotations.

    Returns ``u (..., m, k)``, ``s (..., k)``, ``vt (..., k, n)`` with
    ``k = min(m, n)`` and singular values sorted in decreasing order.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ShapeError(f"svd: need a matrix, got shape {a.shape}")
    m, n = a.shape[-2:]
    if m < n:
        u, s, vt = svd_jacobi(np.swapaxes(a, -1, -2), tol, max_sweeps)
        return np.swapaxes(vt, -1, -2), s, np.swapaxes(u, -1, -2)

    batch = a.shape[:-2]
    w = a.reshape((-1, m, n)).copy()
    v = np.broadcast_to(np.eye(n), (w.shape[0], n, n)).copy()
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = w[:, :, p], w[:, :, q]
                alpha = np.einsum("bi,bi->b", wp, wp)
                beta = np.einsum("bi,bi->b", wq, wq)
                gamma = np.einsum("bi,bi->b", wp, wq)
                small, big = np.minimum(alpha, beta), np.maximum(alpha, beta)
                # a column at roundoff level relative to its partner is numerically zero
                active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (small > 1e-30 * big)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = np.where(active, (beta - alpha) / (2.0 * g), 0.0)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c, s = c[:, None], s[:, None]
                w[:, :, p], w[:, :, q] = c * wp - s * wq, s * wp + c * wq
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p], v[:, :, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"svd: no convergence after {max_sweeps} sweeps")

    sv = np.sqrt(np.einsum("bij,bij->bj", w, w))
    order = np.argsort(-sv, axis=-1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=-1)
    w = np.take_along_axis(w, order[:, None, :], axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    safe = np.where(sv > 0, sv, 1.0)
    u = np.where(sv[:, None, :] > 0, w / safe[:, None, :], 0.0)
    return (u.reshape(batch + (m, n)), sv.reshape(batch + (n,)),
            np.swapaxes(v, -1, -2).reshape(batch + (n, n)))


def pinv_value(a: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via :func:`svd_jacobi`."""
    u, s, vt = svd_jacobi(a)
    cutoff = rcond * s[..., :1]
    s_inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return np.swapaxes(vt, -1, -2) @ (s_inv[..., :, None] * np.swapaxes(u, -1, -2))


def pinv_grad(a: np.ndarray, a_pinv: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull back the upstream gradient ``g`` (shape of ``a_pinv``) onto ``a``.

    Exact wherever the rank of ``a`` is locally constant; at a rank change
    this is the one-sided derivative along the current rank.
    """
    at = np.swapaxes
    p, pt = a_pinv, at(a_pinv, -1, -2)
    gt = at(g, -1, -2)
    m, n = a.shape[-2:]
    left = np.eye(m) - a @ p      # I - A A+, m x m
    right = np.eye(n) - p @ a     # I - A+ A, n x n
    return -(pt @ g @ pt) + left @ gt @ p @ pt + pt @ p @ gt @ right


def pinv(graph: Graph, m: NodeId, rcond: float = 1e-10) -> NodeId:
    """Differentiable pseudo-inverse node: ``(..., D, N) -> (..., N, D)``."""
    va = graph.value(m)
    if va.ndim < 2 or min(va.shape[-2:]) < 1:
        raise ShapeError(f"pinv: need a non-empty matrix, got shape {va.shape}")
    out = pinv_value(va, rcond)
    return graph.custom("pinv", (m,), out, lambda g: (pinv_grad(va, out, g),))


# -------------------------------------------------------------- eigenvalues

def _house(x: np.ndarray):
    """Householder vector ``v`` and ``beta`` with ``(I - beta v v^T) x = ±|x| e1``."""
    v = x.astype(np.float64).copy()
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v, 0.0
    v[0] += np.copysign(norm, v[0])
    return v, 2.0 / (v @ v)


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Upper Hessenberg form similar to ``a`` (Householder reduction)."""
    h = np.array(a, dtype=np.float64)
    n = h.shape[0]
    for k in range(n - 2):
        v, beta = _house(h[k + 1:, k])
        if beta == 0.0:
            continue
        h[k + 1:, k:] -= beta * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= beta * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def eig2(a: np.ndarray) -> tuple[complex, complex]:
    """Closed-form eigenvalues of a real 2x2 matrix."""
    (p, q), (r, s) = a
    half_tr = 0.5 * (p + s)
    det = p * s - q * r
    disc = 0.25 * (p - s) ** 2 + q * r
    if disc >= 0.0:
        root = np.sqrt(disc)
        big = half_tr + np.copysign(root, half_tr) if half_tr != 0 else root
        small = det / big if big != 0 else half_tr - root
        return complex(big), complex(small)
    root = np.sqrt(-disc)
    return complex(half_tr, root), complex(half_tr, -root)


def _francis_step(h: np.ndarray, exceptional: bool = False) -> None:
    """One implicit double-shift QR sweep on an unreduced Hessenberg block, in place."""
    n = h.shape[0]
    if exceptional:
        # ad hoc shifts break cycling on symmetric stalls
        mag = abs(h[n - 1, n - 2]) + abs(h[n - 2, n - 3])
        centre = h[n - 1, n - 1] + 0.75 * mag
        s = 2.0 * centre
        t = centre * centre + 0.4375 * mag * mag
    else:
        s = h[n - 2, n - 2] + h[n - 1, n - 1]
        t = h[n - 2, n - 2] * h[n - 1, n - 1] - h[n - 2, n - 1] * h[n - 1, n - 2]
    x = h[0, 0] * h[0, 0] + h[0, 1] * h[1, 0] - s * h[0, 0] + t
    y = h[1, 0] * (h[0, 0] + h[1, 1] - s)
    z = h[1, 0] * h[2, 1]
    for k in range(n - 2):
        v, beta = _house(np.array([x, y, z]))
        if beta != 0.0:
            q = max(0, k - 1)
            h[k:k + 3, q:] -= beta * np.outer(v, v @ h[k:k + 3, q:])
            r = min(k + 4, n)
            h[:r, k:k + 3] -= beta * np.outer(h[:r, k:k + 3] @ v, v)
        x = h[k + 1, k]
        y = h[k + 2, k]
        if k < n - 3:
            z = h[k + 3, k]
    v, beta = _house(np.array([x, y]))
    if beta != 0.0:
        h[n - 2:, n - 3:] -= beta * np.outer(v, v @ h[n - 2:, n - 3:])
        h[:, n - 2:] -= beta * np.outer(h[:, n - 2:] @ v, v)


def eigvals_dense(k: np.ndarray, max_iter: int | None = None) -> list[complex]:
    """All eigenvalues of a real square matrix (Hessenberg + Francis QR)."""
    a = np.asarray(k, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"eig: expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("eig: matrix has non-finite entries")
    n = a.shape[0]
    if n == 0:
        return []
    if n == 1:
        return [complex(a[0, 0])]
    if n == 2:
        return list(eig2(a))

    h = hessenberg(a)
    max_iter = max_iter or 60 * n
    eps = np.finfo(float).eps
    out: list[complex] = []
    hi = n - 1
    its = 0
    total = 0
    while hi >= 0:
        if hi == 0:
            out.append(complex(h[0, 0]))
            break
        # find start of the unreduced block ending at hi
        lo = hi
        while lo > 0:
            scale = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if scale == 0.0:
                scale = np.abs(h[:hi + 1, :hi + 1]).sum()
            if abs(h[lo, lo - 1]) <= eps * scale:
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            out.append(complex(h[hi, hi]))
            hi -= 1
            its = 0
            continue
        if lo == hi - 1:
            out.extend(eig2(h[hi - 1:hi + 1, hi - 1:hi + 1]))
            hi -= 2
            its = 0
            continue
        if total >= max_iter:
            raise ConvergenceError(f"eig: QR iteration did not converge in {max_iter} steps")
        _francis_step(h[lo:hi + 1, lo:hi + 1], exceptional=its in (10, 20))
        its += 1
        total += 1
    out.reverse()
    return out


def _eigvec(a: np.ndarray, lam: complex) -> np.ndarray:
    """Unit eigenvector for ``lam`` by inverse iteration."""
    n = a.shape[0]
    scale = max(np.abs(a).max(), 1.0)
    shift = lam + 1e-10 * scale
    m = a.astype(complex) - shift * np.eye(n)
    x = np.ones(n, dtype=complex) / np.sqrt(n)
    for _ in range(3):
        try:
            y = np.linalg.solve(m, x)
        except np.linalg.LinAlgError:
            m = m - 1e-8 * scale * np.eye(n)
            y = np.linalg.solve(m, x)
        x = y / np.linalg.norm(y)
    k = int(np.argmax(np.abs(x)))
    return x * (abs(x[k]) / x[k])


def eig_dense(k: np.ndarray) -> tuple[list[ComplexScalar], np.ndarray]:
    """Eigenvalues (as :class:`ComplexScalar`) and unit eigenvectors (columns)."""
    a = np.asarray(k, dtype=np.float64)
    lams = eigvals_dense(a)
    lams = [_canonical(z) for z in lams]
    lams.sort(key=lambda z: (-abs(z), -z.imag))
    vecs = np.column_stack([_eigvec(a, z) for z in lams]) if lams else np.zeros((0, 0), complex)
    return [ComplexScalar.of(z) for z in lams], vecs


def _canonical(z: complex) -> complex:
    # conjugate pairs from eig2 are exact; snap roundoff-level imaginary parts
    if abs(z.imag) <= 1e-14 * max(abs(z.real), 1.0):
        return complex(z.real, 0.0)
    return z
