"""Flat complex torus, twisted matrix fields and discrete complex calculus.

The base is the torus C/(Z + tau Z) with Kahler form omega = (i c / 2) dz ^ dzbar.
Points are addressed by lattice coordinates (x, y) in [0, 1)^2 with
z = x + tau * y. A field is sampled on the n x n grid x_j = j/n, y_k = k/n and
stored as an array of shape (n, n, r, r): axis 0 runs over x, axis 1 over y.

Entry (i, j) of an endomorphism-valued field is a section of the line bundle of
degree m_ij = d_i - d_j. Such sections are periodic in x and quasi-periodic in y:

    f(x, y + 1) = mu_m(x + tau y) f(x, y),    mu_m(z) = exp(-2 pi i m z - pi i m tau).

Derivatives are 4th-order centred differences taken in the K0-unitary frame
f_hat = exp(-pi m Im(tau) y^2) f, where the seam rule reduces to a unimodular
phase. Stencils that cross the y seam read ghost values built from that phase,
so the difference operators act on genuine sections and never see a jump.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TorusGeometry",
    "TwistedMatrixField",
    "FORM_TYPES",
    "multiplier",
    "twist_from_degrees",
    "integrate",
    "d_dx",
    "d_dy",
    "dbar",
    "partial",
    "partial_k",
    "partial_conn",
    "pad_y",
    "hat_phase",
    "lambda_contract",
    "laplacian",
    "poisson_solve",
    "fd_symbol",
    "laplacian_symbol",
    "theta_section",
    "save_field",
    "load_field",
    "CHECKPOINT_MAGIC",
]

FORM_TYPES = ((0, 0), (1, 0), (0, 1), (1, 1))
CHECKPOINT_MAGIC = b"HEFLOW1\x00"


@dataclass(frozen=True)
class TorusGeometry:
    """Flat torus C/(Z + tau Z) with Kahler form (i c/2) dz ^ dzbar.

    Parameters
    ----------
    tau : complex
        Modulus, Im(tau) > 0.
    c : float
        Area scale of the Kahler form; the volume is ``c * Im(tau)``.
    grid_n : int
        Grid points per lattice direction (even, at least 8).
    """

    tau: complex = 1j
    c: float = 1.0
    grid_n: int = 32
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "tau", complex(self.tau))
        object.__setattr__(self, "c", float(self.c))
        if not self.tau.imag > 0:
            raise ValueError(f"Im(tau) must be positive, got tau={self.tau}")
        if not self.c > 0:
            raise ValueError(f"area scale c must be positive, got {self.c}")
        if self.grid_n < 8 or self.grid_n % 2:
            raise ValueError(f"grid_n must be even and >= 8, got {self.grid_n}")

    @property
    def volume(self) -> float:
        return self.c * self.tau.imag

    @property
    def spacing(self) -> float:
        return 1.0 / self.grid_n

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.grid_n) / self.grid_n

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.grid_n) / self.grid_n

    @property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Lattice coordinates (x, y) as (n, n) arrays, indexing='ij'."""
        if "mesh" not in self._cache:
            x, y = np.meshgrid(self.x, self.y, indexing="ij")
            x.flags.writeable = False
            y.flags.writeable = False
            self._cache["mesh"] = (x, y)
        return self._cache["mesh"]

    @property
    def z(self) -> np.ndarray:
        x, y = self.mesh
        return x + self.tau * y

    @property
    def imz(self) -> np.ndarray:
        return self.tau.imag * self.mesh[1]

    def stability_dt(self) -> float:
        """Heuristic explicit-stepping bound 0.2 * V / n^2."""
        return 0.2 * self.volume / self.grid_n**2

    def hat_weights(self, twist: np.ndarray) -> np.ndarray:
        """Reference weights sqrt(k_i / k_j) = exp(-pi m_ij Im(tau) y^2), shape (n, n, r, r).

        Multiplying a field by these maps it to the K0-unitary ("hat") frame.
        """
        twist = np.asarray(twist, dtype=np.int64)
        key = ("hat", twist.tobytes(), twist.shape)
        if key not in self._cache:
            y = self.mesh[1][:, :, None, None]
            w = np.exp(-np.pi * twist[None, None] * self.tau.imag * y**2)
            w.flags.writeable = False
            self._cache[key] = w
        return self._cache[key]

    def ghost_phases(self, twist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Seam factors for hat-frame values, two ghost layers on each side.

        In the hat frame the multiplier mu_m combines with the jump of the
        reference weight into the unimodular phase
        p_m(x, y) = exp(-2 pi i m (x + Re(tau) y) - pi i m Re(tau)), with
        f(x, y + 1) = p_m(x, y) f(x, y). Returns (hi, lo), each (n, 2, r, r):
        ``hi[:, q]`` maps row q to row n + q and ``lo[:, q]`` maps row n - 1 - q
        to row -1 - q.
        """
        twist = np.asarray(twist, dtype=np.int64)
        key = ("ghost", twist.tobytes(), twist.shape)
        if key not in self._cache:
            n = self.grid_n
            m = twist[None, None, :, :]
            x = self.x[:, None, None, None]
            q = np.arange(2)[None, :, None, None]
            hi = hat_phase(m, x, q / n, self.tau)
            lo = 1.0 / hat_phase(m, x, (n - 1 - q) / n - 1.0, self.tau)
            hi = np.broadcast_to(hi, (n, 2) + twist.shape).copy()
            lo = np.broadcast_to(lo, (n, 2) + twist.shape).copy()
            hi.flags.writeable = False
            lo.flags.writeable = False
            self._cache[key] = (hi, lo)
        return self._cache[key]

    def links(self, twist: np.ndarray) -> dict:
        """Parallel-transport phases of the hat-frame connection, per shift k = +-1, +-2.

        ``links["x"][k]`` has shape (1, n, r, r) and ``links["y"][k]`` shape
        (1, n, r, r); they multiply the neighbour k steps away.
        """
        twist = np.asarray(twist, dtype=np.int64)
        key = ("links", twist.tobytes(), twist.shape)
        if key not in self._cache:
            n = self.grid_n
            h = 1.0 / n
            m = twist[None, None, :, :]
            y = self.y[None, :, None, None]
            a = np.pi * m * self.tau.real
            out = {"x": {}, "y": {}}
            for k in (-2, -1, 1, 2):
                out["x"][k] = np.exp(2j * np.pi * m * y * k * h)
                out["y"][k] = np.exp(1j * a * (2 * y * k * h + (k * h) ** 2))
            self._cache[key] = out
        return self._cache[key]

    def to_dict(self) -> dict:
        return {"tau_re": self.tau.real, "tau_im": self.tau.imag, "area_scale": self.c, "grid_n": self.grid_n}


def multiplier(m, z, tau):
    """Holomorphic factor of automorphy mu_m(z) = exp(-2 pi i m z - pi i m tau)."""
    return np.exp(-2j * np.pi * m * z - 1j * np.pi * m * tau)


def hat_phase(m, x, y, tau):
    """Unimodular seam factor of a hat-frame section: f(x, y + 1) = p f(x, y)."""
    return np.exp(-2j * np.pi * m * (x + tau.real * y) - 1j * np.pi * m * tau.real)


def twist_from_degrees(degrees) -> np.ndarray:
    d = np.asarray(degrees, dtype=np.int64)
    return d[:, None] - d[None, :]


class TwistedMatrixField:
    """Grid of r x r complex matrices with per-entry quasi-periodic twists.

    ``values`` has shape (n, n, r, r) and is read-only once constructed.
    ``form_type`` records the form degree of the coefficient: a (1,0) field
    stores the coefficient of dz, a (0,1) field that of dzbar and a (1,1)
    field that of dz ^ dzbar.
    """

    __slots__ = ("geometry", "values", "twist", "form_type")

    def __init__(self, geometry: TorusGeometry, values, twist=None, form_type=(0, 0)):
        values = np.array(values, dtype=np.complex128)
        n = geometry.grid_n
        if values.ndim != 4 or values.shape[:2] != (n, n) or values.shape[2] != values.shape[3]:
            raise ValueError(f"values must have shape ({n}, {n}, r, r), got {values.shape}")
        r = values.shape[2]
        twist = np.zeros((r, r), np.int64) if twist is None else np.array(twist, dtype=np.int64)
        if twist.shape != (r, r):
            raise ValueError(f"twist must be {r}x{r}")
        if np.any(np.diag(twist) != 0) or np.any(twist != -twist.T):
            raise ValueError("twist must be antisymmetric with zero diagonal")
        form_type = tuple(form_type)
        if form_type not in FORM_TYPES:
            raise ValueError(f"unknown form type {form_type}")
        bad = ~np.isfinite(values)
        if bad.any():
            loc = tuple(int(i) for i in np.argwhere(bad)[0])
            raise FloatingPointError(f"non-finite field value at index {loc}")
        values.flags.writeable = False
        twist.flags.writeable = False
        self.geometry = geometry
        self.values = values
        self.twist = twist
        self.form_type = form_type

    @property
    def rank(self) -> int:
        return self.values.shape[2]

    @classmethod
    def constant(cls, geometry, matrix, twist=None, form_type=(0, 0)):
        matrix = np.asarray(matrix, dtype=np.complex128)
        r = matrix.shape[0]
        tw = np.zeros((r, r), np.int64) if twist is None else np.asarray(twist)
        if np.any((tw != 0) & (matrix != 0)):
            raise ValueError("constant entries are only sections of untwisted line bundles")
        n = geometry.grid_n
        return cls(geometry, np.broadcast_to(matrix, (n, n, r, r)), tw, form_type)

    @classmethod
    def identity(cls, geometry, rank, twist=None):
        return cls.constant(geometry, np.eye(rank), twist)

    @classmethod
    def scalar(cls, geometry, values, form_type=(0, 0)):
        values = np.asarray(values)
        return cls(geometry, values[:, :, None, None], None, form_type)

    def with_values(self, values, form_type=None) -> "TwistedMatrixField":
        return TwistedMatrixField(
            self.geometry, values, self.twist, self.form_type if form_type is None else form_type
        )

    def _check_compatible(self, other):
        if other.geometry != self.geometry:
            raise ValueError("fields live on different geometries")
        if not np.array_equal(other.twist, self.twist):
            raise ValueError("fields carry different twists")

    def __add__(self, other):
        self._check_compatible(other)
        if other.form_type != self.form_type:
            raise ValueError("cannot add fields of different form type")
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        self._check_compatible(other)
        if other.form_type != self.form_type:
            raise ValueError("cannot subtract fields of different form type")
        return self.with_values(self.values - other.values)

    def __neg__(self):
        return self.with_values(-self.values)

    def __mul__(self, scalar):
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        """Pointwise composition of endomorphism fields.

        Entry (i, j) of the product sums terms of twist m_ik + m_kj; for
        endomorphisms of one bundle that equals m_ij, which is checked.
        """
        if other.geometry != self.geometry:
            raise ValueError("fields live on different geometries")
        sums = self.twist[:, :, None] + other.twist[None, :, :]
        if np.any(sums != (self.twist[:, :1] + other.twist[:1, :])[:, None, :]):
            raise ValueError("product mixes twists inconsistently")
        p = tuple(a + b for a, b in zip(self.form_type, other.form_type))
        if p not in FORM_TYPES:
            raise ValueError(f"product form type {p} is not supported")
        twist = self.twist[:, :1] + other.twist[:1, :]
        return TwistedMatrixField(self.geometry, self.values @ other.values, twist, p)

    def trace(self) -> np.ndarray:
        return np.trace(self.values, axis1=2, axis2=3)

    def sup_norm(self) -> float:
        """Largest Euclidean Frobenius norm of the stored matrices."""
        return float(np.sqrt(np.max(np.sum(np.abs(self.values) ** 2, axis=(2, 3)))))

    def __repr__(self):
        return (
            f"TwistedMatrixField(rank={self.rank}, form_type={self.form_type}, "
            f"grid_n={self.geometry.grid_n})"
        )


def integrate(f, geometry: TorusGeometry):
    """Rectangle-rule integral of a scalar field against omega.

    Exact for every grid-resolved Fourier mode; the weight of each cell is
    V / n^2.
    """
    f = np.asarray(f)
    bad = ~np.isfinite(f)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FloatingPointError(f"non-finite integrand at grid index {loc}")
    total = f.sum(axis=(0, 1)) * (geometry.volume / geometry.grid_n**2)
    if np.iscomplexobj(total) and np.all(total.imag == 0):
        total = total.real
    return total.item() if np.ndim(total) == 0 else total


def _stencil(shift, n):
    """4th-order centred difference from a shift operator: shift(k)[j] ~ f(j + k)."""
    return (8.0 * (shift(1) - shift(-1)) - (shift(2) - shift(-2))) * (n / 12.0)


def d_dx(values: np.ndarray, geometry: TorusGeometry, twist=None) -> np.ndarray:
    """4th-order centred difference in x, periodic.

    For twisted hat-frame values this is the covariant difference of the
    connection A_x = 2 pi m y: each neighbour is transported with the link
    phase exp(i A_x k h).
    """
    n = geometry.grid_n
    if twist is None or not np.any(twist):
        return _stencil(lambda k: np.roll(values, -k, axis=0), n)
    links = geometry.links(twist)
    return _stencil(lambda k: links["x"][k] * np.roll(values, -k, axis=0), n)


def d_dy(values: np.ndarray, geometry: TorusGeometry, twist=None) -> np.ndarray:
    """4th-order centred difference in y.

    Twisted hat-frame values are continued across the seam by the phase rule
    and differenced covariantly for A_y = 2 pi m Re(tau) y. Together with
    :func:`d_dx` this commutes exactly with the seam rule.
    """
    n = geometry.grid_n
    if twist is None or not np.any(twist):
        return _stencil(lambda k: np.roll(values, -k, axis=1), n)
    padded = pad_y(values, geometry, twist)
    links = geometry.links(twist)
    return _stencil(lambda k: links["y"][k] * padded[:, 2 + k : n + 2 + k], n)


def pad_y(values: np.ndarray, geometry: TorusGeometry, twist) -> np.ndarray:
    """Extend hat-frame values by two ghost rows on each side of the y seam."""
    n = geometry.grid_n
    hi, lo = geometry.ghost_phases(twist)
    below = values[:, [n - 2, n - 1]] * lo[:, ::-1]
    above = values[:, :2] * hi
    return np.concatenate([below, values, above], axis=1)


def _dzbar_values(values, geometry, twist):
    """dbar of hat-frame values, (tau D_x - D_y) / (2 i Im tau) with covariant differences."""
    tau = geometry.tau
    return (tau * d_dx(values, geometry, twist) - d_dy(values, geometry, twist)) / (2j * tau.imag)


def _dz_values(values, geometry, twist):
    """Reference (1,0)-derivative of hat-frame values, (D_y - conj(tau) D_x) / (2 i Im tau)."""
    tau = geometry.tau
    return (d_dy(values, geometry, twist) - tau.conjugate() * d_dx(values, geometry, twist)) / (2j * tau.imag)


def _in_hat(op, f: TwistedMatrixField):
    w = f.geometry.hat_weights(f.twist)
    return op(f.values * w, f.geometry, f.twist) / w


def dbar(f: TwistedMatrixField) -> TwistedMatrixField:
    """Entrywise d/dzbar of a (0,0) or (1,0) field; raises the form type.

    Twisted entries are differentiated in the K0-unitary frame, where the seam
    rule is a pure phase, and mapped back.
    """
    if f.form_type[1] != 0:
        raise ValueError(f"dbar needs a field without dzbar component, got {f.form_type}")
    vals = _in_hat(_dzbar_values, f)
    if f.form_type == (1, 0):
        # dbar(B dz) = dB/dzbar dzbar ^ dz = -dB/dzbar dz ^ dzbar
        vals = -vals
    return f.with_values(vals, form_type=(f.form_type[0], 1))


def background_connection_values(f: TwistedMatrixField) -> np.ndarray:
    """Bracket with the reference (1,0) connection form diag(2 pi i d_i y).

    For entry (i, j) this is 2 pi i m_ij y f_ij.
    """
    y = f.geometry.mesh[1][:, :, None, None]
    return 2j * np.pi * f.twist[None, None] * y * f.values


def partial_k(f: TwistedMatrixField) -> TwistedMatrixField:
    """Chern (1,0)-derivative of the reference metric acting on endomorphisms."""
    if f.form_type != (0, 0):
        raise ValueError("partial_k acts on (0,0) fields")
    return f.with_values(_in_hat(_dz_values, f), form_type=(1, 0))


def partial(f: TwistedMatrixField) -> TwistedMatrixField:
    """Entrywise d/dz of a (0,0) or (0,1) field (no connection term)."""
    if f.form_type[0] != 0:
        raise ValueError(f"partial needs a field without dz component, got {f.form_type}")
    vals = _in_hat(_dz_values, f) - background_connection_values(f)
    return f.with_values(vals, form_type=(1, f.form_type[1]))


def partial_conn(f: TwistedMatrixField, h, max_cond: float = 1e12) -> TwistedMatrixField:
    """(1,0)-derivative of the Chern connection of H = K h on endomorphisms.

    ``partial_H f = partial_K f + [h^-1 partial_K h, f]``. ``h`` is the
    endomorphism K^-1 H (a field, or any object with an ``h`` field
    attribute) and must be invertible everywhere.
    """
    h = getattr(h, "h", h)
    cond = np.linalg.cond(h.values)
    worst = np.unravel_index(np.argmax(cond), cond.shape)
    if not np.all(np.isfinite(cond)) or cond[worst] > max_cond:
        raise np.linalg.LinAlgError(
            f"metric endomorphism is singular at grid index {tuple(int(i) for i in worst)} "
            f"(condition number {cond[worst]:.3e})"
        )
    dh = partial_k(h).values
    conn = np.linalg.solve(h.values, dh)
    df = partial_k(f).values
    return f.with_values(df + conn @ f.values - f.values @ conn, form_type=(1, 0))


def lambda_contract(F: TwistedMatrixField) -> TwistedMatrixField:
    """Contraction with omega: Lambda(eta dz ^ dzbar) = -2 i eta / c."""
    if F.form_type != (1, 1):
        raise ValueError(f"lambda_contract needs a (1,1) field, got {F.form_type}")
    return F.with_values(-2j * F.values / F.geometry.c, form_type=(0, 0))


def fd_symbol(n: int) -> np.ndarray:
    """Real symbol s(k) of the 4th-order difference: D e^{2 pi i k j/n} = i s(k) e^{...}."""
    theta = 2 * np.pi * np.fft.fftfreq(n) * 1.0
    return (8 * np.sin(theta) - np.sin(2 * theta)) * n / 6.0


def laplacian_symbol(geometry: TorusGeometry, spectral: bool = False) -> np.ndarray:
    """Fourier symbol of Delta = (4/c) d_z d_zbar on untwisted scalars.

    ``spectral=False`` gives the symbol of the difference operator used by
    :func:`laplacian`; ``spectral=True`` the exact continuum symbol
    -4 pi^2 |tau k - l|^2 / (c Im(tau)^2).
    """
    n = geometry.grid_n
    if spectral:
        s = 2 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    else:
        s = fd_symbol(n)
    sx, sy = np.meshgrid(s, s, indexing="ij")
    tau = geometry.tau
    return -np.abs(tau * sx - sy) ** 2 / (geometry.c * tau.imag**2)


def laplacian(f, geometry: TorusGeometry, spectral: bool = False) -> np.ndarray:
    """Delta f = -2 i Lambda dbar d f on an untwisted scalar field.

    The default composes the same difference operators as :func:`dbar` and
    :func:`partial`; ``spectral=True`` applies the exact symbol by FFT and is
    meant as an independent reference.
    """
    f = np.asarray(f)
    if spectral:
        out = np.fft.ifft2(np.fft.fft2(f, axes=(0, 1)) * _bcast(laplacian_symbol(geometry, True), f), axes=(0, 1))
    else:
        vals = f.astype(np.complex128)
        dz = _dz_values(vals, geometry, None)
        out = (4.0 / geometry.c) * _dzbar_values(dz, geometry, None)
    return out.real if np.isrealobj(f) else out


def _bcast(sym, f):
    return sym.reshape(sym.shape + (1,) * (np.ndim(f) - 2))


def poisson_solve(g, geometry: TorusGeometry, tol: float = 1e-9) -> np.ndarray:
    """Mean-zero solution of Delta f = g for the difference Laplacian.

    Inverts the symbol of :func:`laplacian` by FFT. Modes in its kernel (the
    constant mode and the three Nyquist corners) are set to zero in f.
    """
    g = np.asarray(g)
    mean = integrate(g, geometry) / geometry.volume
    scale = max(float(np.max(np.abs(g))), 1e-300)
    if abs(mean) > tol * scale:
        raise ValueError(f"Poisson source must have zero mean; mean is {mean:.3e}")
    sym = laplacian_symbol(geometry)
    kernel = np.abs(sym) < 1e-12 * np.max(np.abs(sym))
    inv = np.where(kernel, 0.0, 1.0 / np.where(kernel, 1.0, sym))
    f = np.fft.ifft2(np.fft.fft2(g) * inv)
    return f.real if np.isrealobj(g) else f


def theta_section(geometry: TorusGeometry, m: int, j: int = 0, nterms: int = 12) -> np.ndarray:
    """Holomorphic section of the degree-m bundle (m > 0), sampled on the grid.

    theta_{m,j}(z) = sum_k exp(pi i m tau (k + j/m)^2 + 2 pi i m (k + j/m) z),
    which satisfies the twisted periodicity rule with multiplier mu_m.
    """
    if m <= 0:
        raise ValueError("theta sections exist only for positive degree")
    z = geometry.z
    k = np.arange(-nterms, nterms + 1)[:, None, None] + j / m
    terms = np.exp(1j * np.pi * m * geometry.tau * k**2 + 2j * np.pi * m * k * z[None])
    return terms.sum(axis=0)


# --- checkpoint format -------------------------------------------------------


def save_field(path, f: TwistedMatrixField) -> None:
    """Write a field in the little-endian HEFLOW1 binary format."""
    g = f.geometry
    r = f.rank
    header = CHECKPOINT_MAGIC
    header += struct.pack("<qqqq", g.grid_n, r, f.form_type[0], f.form_type[1])
    header += np.ascontiguousarray(f.twist, dtype="<i8").tobytes()
    header += struct.pack("<ddd", g.tau.real, g.tau.imag, g.c)
    body = np.ascontiguousarray(f.values, dtype="<c16").tobytes()
    Path(path).write_bytes(header + body)


def load_field(path) -> TwistedMatrixField:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a HEFLOW1 checkpoint")
    n, r, p, q = struct.unpack_from("<qqqq", data, 8)
    off = 40
    twist = np.frombuffer(data, dtype="<i8", count=r * r, offset=off).reshape(r, r)
    off += 8 * r * r
    tau_re, tau_im, c = struct.unpack_from("<ddd", data, off)
    off += 24
    expected = off + 16 * n * n * r * r
    if len(data) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(data)} of {expected} bytes)")
    values = np.frombuffer(data, dtype="<c16", offset=off).reshape(n, n, r, r)
    geom = TorusGeometry(complex(tau_re, tau_im), c, n)
    return TwistedMatrixField(geom, values, twist, (p, q))
