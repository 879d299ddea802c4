"""Star-shaped boundary curves with a truncated Fourier radius.

The boundary of the cross-section is the curve

    gamma(phi) = r(phi) * (cos phi, sin phi),
    r(phi) = a_0 + sum_{j=1}^N (a_j cos j phi + a_{j+N} sin j phi),

traversed counter-clockwise.  Electrodes are boundary arcs of a common,
known arc length that start at given polar angles.

Curvature sign: positive for convex regions (kappa = 1/R on a circle of
radius R), i.e. the curve turns away from the outward normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, optimize

TWO_PI = 2.0 * np.pi
_GL16_NODES, _GL16_WEIGHTS = np.polynomial.legendre.leggauss(16)

# Gauss-Legendre rule used for short smooth integrals (electrode arcs).
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


class GeometryError(ValueError):
    """Invalid boundary coefficients (non-positive radius)."""


class LayoutError(GeometryError):
    """Electrodes that overlap or do not fit on the boundary."""


@dataclass(frozen=True)
class BoundaryFrame:
    """Local differential geometry of the curve at one or more angles.

    Every field is an array whose leading shape matches the angle input;
    vector fields carry a trailing axis of length 2.
    """

    point: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    speed: np.ndarray
    curvature: np.ndarray


def basis_function(l: int, order: int, phi, deriv: int = 0) -> np.ndarray:
    """Fourier shape basis psi_l (or its derivative) at angles `phi`.

    psi_0 = 1, psi_l = cos(l phi) for 1 <= l <= N and
    psi_l = sin((l - N) phi) for N < l <= 2N.
    """
    phi = np.asarray(phi, dtype=float)
    if not 0 <= l <= 2 * order:
        raise IndexError(f"basis index {l} outside 0..{2 * order}")
    if l == 0:
        return np.ones_like(phi) if deriv == 0 else np.zeros_like(phi)
    if l <= order:
        k = l
        # d^n/dphi^n cos(k phi) = k^n cos(k phi + n pi/2)
        return k**deriv * np.cos(k * phi + deriv * np.pi / 2)
    k = l - order
    return k**deriv * np.sin(k * phi + deriv * np.pi / 2)


def basis_matrix(order: int, phi, deriv: int = 0) -> np.ndarray:
    """All 2N+1 basis functions at `phi`, shape (len(phi), 2N+1)."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    k = np.arange(1, order + 1)
    arg = np.outer(phi, k) + deriv * np.pi / 2
    out = np.empty((phi.size, 2 * order + 1))
    out[:, 0] = 1.0 if deriv == 0 else 0.0
    out[:, 1 : order + 1] = k**deriv * np.cos(arg)
    out[:, order + 1 :] = k**deriv * np.sin(arg)
    return out


@dataclass(frozen=True, eq=False)
class FourierBoundary:
    """Closed star-shaped curve with a Fourier-series radius.

    Parameters
    ----------
    coeffs : array_like, length 2N+1
        ``[a_0, a_1..a_N (cos), a_{N+1}..a_{2N} (sin)]``.

    Raises
    ------
    GeometryError
        If the radius is not strictly positive on a dense sample of
        ``64 * (N + 1)`` angles.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size % 2 != 1:
            raise GeometryError(f"coefficient vector must have odd length, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise GeometryError("non-finite boundary coefficients")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        phi = np.linspace(0.0, TWO_PI, 64 * (self.order + 1), endpoint=False)
        rmin = self.radius(phi).min()
        if rmin <= 0.0:
            raise GeometryError(f"radius not positive (min sampled r = {rmin:.3g})")

    @classmethod
    def circle(cls, radius: float, order: int = 0) -> "FourierBoundary":
        c = np.zeros(2 * order + 1)
        c[0] = radius
        return cls(c)

    @classmethod
    def fit(cls, radius_fn, order: int, check_tol: float | None = 1e-10) -> "FourierBoundary":
        """Interpolate a smooth periodic radius function by FFT.

        With `check_tol` set, the fit is verified on an offset grid and a
        GeometryError is raised when the maximum deviation exceeds it.
        """
        n = 2 * order + 1
        phi = TWO_PI * np.arange(n) / n
        vals = np.asarray(radius_fn(phi), dtype=float)
        spec = np.fft.rfft(vals) / n
        c = np.empty(n)
        c[0] = spec[0].real
        c[1 : order + 1] = 2.0 * spec[1 : order + 1].real
        c[order + 1 :] = -2.0 * spec[1 : order + 1].imag
        b = cls(c)
        if check_tol is not None:
            test = np.linspace(0.0, TWO_PI, 4 * n + 7, endpoint=False) + 0.1234
            err = np.max(np.abs(b.radius(test) - radius_fn(test)))
            if err > check_tol:
                raise GeometryError(f"Fourier fit of order {order} misses by {err:.2e}")
        return b

    def __repr__(self):
        return f"FourierBoundary(order={self.order}, a0={self.coeffs[0]:.4g})"

    @property
    def order(self) -> int:
        return (self.coeffs.size - 1) // 2

    @property
    def n_coeffs(self) -> int:
        return self.coeffs.size

    def with_coeffs(self, coeffs) -> "FourierBoundary":
        return FourierBoundary(coeffs)

    def radius(self, phi, deriv: int = 0):
        """r(phi) or its `deriv`-th derivative; scalar in, scalar out."""
        scalar = np.ndim(phi) == 0
        phi_arr = np.asarray(phi, dtype=float)
        out = basis_matrix(self.order, phi_arr.ravel(), deriv) @ self.coeffs
        out = out.reshape(phi_arr.shape)
        return float(out) if scalar else out

    def frame(self, phi) -> BoundaryFrame:
        phi = np.asarray(phi, dtype=float)
        r = np.asarray(self.radius(phi))
        dr = np.asarray(self.radius(phi, 1))
        ddr = np.asarray(self.radius(phi, 2))
        c, s = np.cos(phi), np.sin(phi)
        radial = np.stack([c, s], axis=-1)
        d_tan = np.stack([dr * c - r * s, dr * s + r * c], axis=-1)
        speed = np.hypot(r, dr)
        tangent = d_tan / speed[..., None]
        normal = np.stack([tangent[..., 1], -tangent[..., 0]], axis=-1)
        kappa = (r * r + 2.0 * dr * dr - r * ddr) / speed**3
        return BoundaryFrame(r[..., None] * radial, tangent, normal, speed, kappa)

    def point(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        r = self.radius(phi)
        return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)

    def speed(self, phi):
        return np.hypot(self.radius(phi), self.radius(phi, 1))

    def arclength(self, phi_a: float, phi_b: float) -> float:
        """Length of the arc between polar angles phi_a <= phi_b."""
        if phi_b < phi_a or phi_b - phi_a > TWO_PI + 1e-12:
            raise ValueError(f"need phi_a <= phi_b <= phi_a + 2 pi, got ({phi_a}, {phi_b})")
        if phi_b == phi_a:
            return 0.0
        if phi_b - phi_a < 1e-2:
            # short arcs: a fixed Gauss rule is exact to round-off
            half = 0.5 * (phi_b - phi_a)
            x = phi_a + half * (1.0 + _GL16_NODES)
            return float(half * (_GL16_WEIGHTS @ self.speed(x)))
        val, _ = integrate.quad(
            self.speed, phi_a, phi_b, epsabs=1e-15, epsrel=1e-12, limit=400
        )
        return val

    @cached_property
    def perimeter(self) -> float:
        # periodic trapezoid rule converges geometrically; double until stable
        n = 16 * (self.order + 1)
        prev = np.inf
        for _ in range(12):
            val = TWO_PI * float(np.mean(self.speed(TWO_PI * np.arange(n) / n)))
            if abs(val - prev) <= 1e-14 * val:
                return val
            prev, n = val, 2 * n
        return val

    def max_radius(self) -> float:
        phi = np.linspace(0.0, TWO_PI, 64 * (self.order + 1), endpoint=False)
        return float(self.radius(phi).max())

    def area(self) -> float:
        # 1/2 int r^2 dphi; trapezoid is exact for trigonometric polynomials
        n = 4 * self.order + 8
        phi = TWO_PI * np.arange(n) / n
        return float(0.5 * np.mean(self.radius(phi) ** 2) * TWO_PI)

    def terminal_angle(self, theta_start: float, width: float, limit: float | None = None) -> float:
        """Polar angle where an arc of length `width` starting at
        `theta_start` ends.

        `limit`, if given, is the angle the arc must stay strictly below
        (typically the next electrode's start); LayoutError otherwise.
        """
        if width <= 0:
            raise LayoutError(f"electrode width must be positive, got {width}")
        if width >= self.perimeter:
            raise LayoutError(f"width {width} exceeds perimeter {self.perimeter}")
        # Newton on L(phi) = width with incremental quadrature
        phi = theta_start + width / self.speed(theta_start)
        phi = min(phi, theta_start + TWO_PI * 0.999)
        length = self.arclength(theta_start, phi)
        for _ in range(60):
            step = (length - width) / self.speed(phi)
            new = phi - step
            if not theta_start < new < theta_start + TWO_PI:
                break
            if new >= phi:
                length += self.arclength(phi, new)
            else:
                length -= self.arclength(new, phi)
            phi = new
            if abs(length - width) <= 1e-13 * max(1.0, width):
                break
        else:
            phi = None
        if phi is None or abs(length - width) > 1e-11 * max(1.0, width):
            phi = optimize.brentq(
                lambda p: self.arclength(theta_start, p) - width,
                theta_start,
                theta_start + TWO_PI,
                xtol=1e-15,
                rtol=4 * np.finfo(float).eps,
            )
        if limit is not None and phi >= limit:
            raise LayoutError(
                f"electrode starting at {theta_start:.4f} ends at {phi:.4f}, past {limit:.4f}"
            )
        return float(phi)

    def shape_field(self, l: int, phi) -> np.ndarray:
        """Perturbation field h_l(phi) = psi_l(phi) (cos phi, sin phi)."""
        phi = np.asarray(phi, dtype=float)
        psi = basis_function(l, self.order, phi)
        return psi[..., None] * np.stack([np.cos(phi), np.sin(phi)], axis=-1)


def decompose(h: np.ndarray, frame: BoundaryFrame) -> tuple[np.ndarray, np.ndarray]:
    """Split a boundary vector field into (h_nu, h_tau_vector).

    h_nu = h . nu is a scalar per point; h_tau = h - h_nu nu is a vector.
    """
    h_nu = np.einsum("...i,...i->...", h, frame.normal)
    return h_nu, h - h_nu[..., None] * frame.normal


def shape_basis(l: int, phi, boundary: FourierBoundary | None = None, order: int | None = None):
    """Radial basis field psi_l(phi) (cos phi, sin phi).

    Without a boundary only the field is returned; with one, the tuple
    ``(h, h_nu, h_tau)`` is returned using that boundary's frame.
    """
    if boundary is None:
        if order is None:
            order = max(l, 0)
        phi = np.asarray(phi, dtype=float)
        psi = basis_function(l, order, phi)
        return psi[..., None] * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    h = boundary.shape_field(l, phi)
    h_nu, h_tau = decompose(h, boundary.frame(phi))
    return h, h_nu, h_tau


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """M electrodes of common arc length `width`, given by start angles.

    Angles are kept unwrapped (they are optimisation variables); ordering
    and disjointness are checked cyclically.
    """

    angles: np.ndarray
    width: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        a = np.array(self.angles, dtype=float).ravel()
        if a.size < 2:
            raise LayoutError("need at least two electrodes")
        if not np.all(np.isfinite(a)):
            raise LayoutError("non-finite electrode angle")
        if self.width <= 0:
            raise LayoutError(f"electrode width must be positive, got {self.width}")
        gaps = np.mod(np.diff(np.append(a, a[0])), TWO_PI)
        if np.any(gaps <= 0) or abs(gaps.sum() - TWO_PI) > 1e-9:
            raise LayoutError("electrode start angles are not in cyclic ascending order")
        a.setflags(write=False)
        object.__setattr__(self, "angles", a)

    @property
    def count(self) -> int:
        return self.angles.size

    @classmethod
    def equispaced(cls, count: int, width: float, offset: float = 0.0) -> "ElectrodeLayout":
        return cls(offset + TWO_PI * np.arange(count) / count, width)

    def with_angles(self, angles) -> "ElectrodeLayout":
        return ElectrodeLayout(angles, self.width)

    def next_starts(self) -> np.ndarray:
        """Start angle of the following electrode, unwrapped to lie above."""
        a = self.angles
        nxt = np.roll(a, -1)
        return a + np.mod(nxt - a, TWO_PI)

    def terminal_angles(self, boundary: FourierBoundary) -> np.ndarray:
        """End angle of every electrode (unwrapped, > start); validates layout."""
        key = id(boundary), boundary.coeffs.tobytes()
        hit = self._cache.get("terminal")
        if hit is not None and hit[0] == key:
            return hit[1]
        limits = self.next_starts()
        ends = np.array(
            [boundary.terminal_angle(t, self.width, limit=lim) for t, lim in zip(self.angles, limits)]
        )
        self._cache["terminal"] = (key, ends)
        return ends

    def coverage(self, boundary: FourierBoundary) -> float:
        return self.count * self.width / boundary.perimeter


def endpoint_sensitivities(boundary: FourierBoundary, layout: ElectrodeLayout):
    """Derivatives of every electrode's terminal angle.

    Returns
    -------
    d_alpha : (M, 2N+1) array
        d phi_end_m / d alpha_l at fixed start angles.
    d_theta : (M,) array
        d phi_end_m / d theta_m (the only non-zero theta dependence).
    """
    starts = layout.angles
    ends = layout.terminal_angles(boundary)
    speed_start = boundary.speed(starts)
    speed_end = boundary.speed(ends)
    d_theta = speed_start / speed_end

    half = 0.5 * (ends - starts)
    mid = 0.5 * (ends + starts)
    # quadrature nodes per electrode, shape (M, q)
    phi = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    w = half[:, None] * _GL_WEIGHTS[None, :]
    flat = phi.ravel()
    r = boundary.radius(flat)
    dr = boundary.radius(flat, 1)
    psi = basis_matrix(boundary.order, flat)
    dpsi = basis_matrix(boundary.order, flat, 1)
    dspeed = (r[:, None] * psi + dr[:, None] * dpsi) / np.hypot(r, dr)[:, None]
    dspeed = dspeed.reshape(phi.shape + (boundary.n_coeffs,))
    d_len = np.einsum("mq,mql->ml", w, dspeed)
    d_alpha = -d_len / speed_end[:, None]
    return d_alpha, d_theta


def hausdorff_distance(b1, b2, n: int = 4096) -> float:
    """Symmetric Hausdorff distance between two closed curves.

    Each argument is anything with a vectorised ``point(phi)`` method.
    Curves are densely sampled and the nearest-point search is done with
    a KD-tree; the sampling error is below ``perimeter / n``.
    """
    from scipy.spatial import cKDTree

    phi = np.linspace(0.0, TWO_PI, n, endpoint=False)
    p1, p2 = b1.point(phi), b2.point(phi)
    d12, _ = cKDTree(p2).query(p1)
    d21, _ = cKDTree(p1).query(p2)
    return float(max(d12.max(), d21.max()))
