"""Batched pointwise linear algebra on stacks of small matrices.

Every function acts on arrays of shape (..., r, r). Rank 2 has a closed-form
Hermitian eigensolver because LAPACK's per-matrix overhead dominates the
flow otherwise.
"""

import numpy as np

TAYLOR_CROSSOVER = 1e-4
# the 6-term series for psi_weight is exact to 1e-16 up to here, and beats the
# cancelling direct formula below it
PSI_CROSSOVER = 1e-2


def dag(a):
    return np.conj(np.swapaxes(a, -1, -2))


def herm_part(a):
    return 0.5 * (a + dag(a))


def eye_like(a):
    return np.broadcast_to(np.eye(a.shape[-1], dtype=a.dtype), a.shape)


def eigh(a):
    """Eigen-decomposition of Hermitian matrices, eigenvalues ascending.

    Returns ``(w, u)`` with ``a = u @ diag(w) @ u^H`` and ``u`` unitary.
    """
    r = a.shape[-1]
    if r == 1:
        return a[..., 0].real.copy(), np.ones_like(a)
    if r == 2:
        return _eigh2(a)
    return np.linalg.eigh(a)


def _eigh2(a):
    p = a[..., 0, 0].real
    q = a[..., 1, 1].real
    b = 0.5 * (a[..., 0, 1] + np.conj(a[..., 1, 0]))
    mean = 0.5 * (p + q)
    half = 0.5 * (p - q)
    ab = np.abs(b)
    rho = np.hypot(half, ab)
    ang = 0.5 * np.arctan2(ab, half)
    cs, sn = np.cos(ang), np.sin(ang)
    phase = np.where(ab > 0, np.conj(b) / np.where(ab > 0, ab, 1.0), 1.0)
    w = np.stack([mean - rho, mean + rho], axis=-1)
    u = np.empty(a.shape, dtype=np.complex128)
    u[..., 0, 0] = -sn
    u[..., 0, 1] = cs
    u[..., 1, 0] = phase * cs
    u[..., 1, 1] = phase * sn
    return w, u


def mm(a, b):
    """Batched matrix product; explicit formula for 2x2 stacks."""
    if a.shape[-1] != 2 or b.shape[-1] != 2 or a.shape[-2] != 2:
        return a @ b
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape, dtype=np.result_type(a, b))
    a00, a01, a10, a11 = a[..., 0, 0], a[..., 0, 1], a[..., 1, 0], a[..., 1, 1]
    b00, b01, b10, b11 = b[..., 0, 0], b[..., 0, 1], b[..., 1, 0], b[..., 1, 1]
    out[..., 0, 0] = a00 * b00 + a01 * b10
    out[..., 0, 1] = a00 * b01 + a01 * b11
    out[..., 1, 0] = a10 * b00 + a11 * b10
    out[..., 1, 1] = a10 * b01 + a11 * b11
    return out


def comm(a, b):
    return mm(a, b) - mm(b, a)


def from_eig(w, u):
    """u diag(w) u^H."""
    return mm(u * w[..., None, :], dag(u))


def to_frame(x, u):
    """Components u^H x u of x in the frame u."""
    return mm(mm(dag(u), x), u)


def from_frame(x, u):
    return mm(mm(u, x), dag(u))


def diff_matrix(w):
    """Pairwise differences w_j - w_i, indexed [..., i, j]."""
    return w[..., None, :] - w[..., :, None]


def phi1(x):
    """(e^x - 1)/x with the removable singularity filled in."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < TAYLOR_CROSSOVER
    xs = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        out = np.expm1(xs) / xs
    return np.where(small, 1.0 + x / 2 + x**2 / 6 + x**3 / 24, out)


def psi_weight(u):
    """(e^u - u - 1)/u^2, with a 6-term Taylor series for |u| < 1e-2."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < PSI_CROSSOVER
    us = np.where(small, 1.0, u)
    with np.errstate(over="ignore"):
        out = (np.expm1(us) - us) / us**2
    series = 0.5 + u / 6 + u**2 / 24 + u**3 / 120 + u**4 / 720 + u**5 / 5040
    return np.where(small, series, out)


def psi(x, y):
    """The two-variable weight Psi(x, y) = (e^{y-x} - (y-x) - 1) / (x-y)^2."""
    return psi_weight(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))


def frob2(a):
    return np.sum(np.abs(a) ** 2, axis=(-1, -2))
