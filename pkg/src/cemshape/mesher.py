"""Triangulation of the cross-section and the fixed reconstruction grid.

Meshes are generated with Shewchuk's Triangle (constrained Delaunay with
Ruppert refinement).  Boundary vertices are placed by us and Triangle is
told not to split boundary segments, so every electrode endpoint is a mesh
vertex and boundary edges keep a known polar-angle interval.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import triangle

from .geometry import TWO_PI, ElectrodeLayout, FourierBoundary, GeometryError

GAP = -1
MIN_ANGLE_DEG = 15.0
# angle requested from Triangle; the 15 degree floor is what we assert
_REQUEST_ANGLE = 28.0


class MeshError(RuntimeError):
    pass


@dataclass(eq=False)
class Mesh2D:
    """Triangle mesh of a star-shaped domain.

    The first `n_boundary` vertices form the boundary loop in
    counter-clockwise order; boundary edge i joins vertex i to i+1 (mod).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    n_boundary: int
    edge_tags: np.ndarray
    edge_param: np.ndarray
    provenance: str = ""
    electrode_count: int = 0

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.edge_tags = np.asarray(self.edge_tags, dtype=np.int64)
        self.edge_param = np.asarray(self.edge_param, dtype=float)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        i = np.arange(self.n_boundary)
        return np.stack([i, (i + 1) % self.n_boundary], axis=1)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        p = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cos = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
        return float(np.min(angles))

    def polygon_area(self) -> float:
        x, y = self.vertices[: self.n_boundary].T
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def edge_lengths(self) -> np.ndarray:
        e = self.boundary_edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def electrode_edges(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.edge_tags == m)

    def electrode_endpoints(self) -> np.ndarray:
        """(M, 2) vertex indices of each electrode's start and end."""
        out = np.empty((self.electrode_count, 2), dtype=np.int64)
        e = self.boundary_edges
        for m in range(self.electrode_count):
            idx = self.electrode_edges(m)
            out[m] = e[idx[0], 0], e[idx[-1], 1]
        return out

    def validate(self, min_angle: float = MIN_ANGLE_DEG) -> None:
        """Raise MeshError unless the mesh meets the construction invariants."""
        areas = self.signed_areas()
        if np.any(areas <= 0):
            raise MeshError(f"{np.sum(areas <= 0)} triangles with non-positive area")
        ang = self.min_angle()
        if ang < min_angle:
            raise MeshError(f"minimum angle {ang:.2f} deg below {min_angle}")
        # boundary edges of the triangulation must be exactly our loop
        edges = np.sort(
            np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]),
            axis=1,
        )
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        outer = {tuple(e) for e in uniq[counts == 1]}
        loop = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        if outer != loop:
            raise MeshError("triangulation boundary differs from the prescribed loop")
        if abs(areas.sum() - self.polygon_area()) > 1e-10 * max(1.0, abs(self.polygon_area())):
            raise MeshError("triangle areas do not sum to the boundary polygon area")

    def to_dict(self) -> dict:
        """JSON-ready dictionary (schema documented in the README)."""
        return {
            "schema": "cemshape.mesh/1",
            "provenance": self.provenance,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": [
                {"edge": [int(a), int(b)], "tag": ("gap" if t == GAP else f"electrode-{t + 1}"),
                 "phi": [float(p0), float(p1)]}
                for (a, b), t, (p0, p1) in zip(self.boundary_edges, self.edge_tags, self.edge_param)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _arclength_table(boundary: FourierBoundary, start: float, n: int = 8192):
    """Cumulative arc length on [start, start + 2 pi] (Simpson on a fine grid)."""
    phi = start + np.linspace(0.0, TWO_PI, 2 * n + 1)
    speed = boundary.speed(phi)
    h = phi[1] - phi[0]
    pair = h / 3.0 * (speed[:-2:2] + 4 * speed[1:-1:2] + speed[2::2])
    s = np.concatenate([[0.0], np.cumsum(pair)])
    return phi[::2], s


def _sample_boundary(boundary, layout, h_target, refine=1.0, grading=0.25):
    """Boundary vertex angles (unwrapped, ascending) and per-edge tags."""
    if layout is None:
        n = max(3, int(np.ceil(boundary.perimeter / h_target)))
        angles = TWO_PI * np.arange(n) / n
        return angles, np.full(n, GAP)
    starts = layout.angles.copy()
    ends = layout.terminal_angles(boundary)
    nxt = layout.next_starts()
    base = starts[0]
    shift = np.floor((starts - base) / TWO_PI) * TWO_PI
    starts, ends, nxt = starts - shift, ends - shift, nxt - shift
    order = np.argsort(starts)
    tab_phi, tab_s = _arclength_table(boundary, base)

    knots = np.stack([starts[order], ends[order]], axis=1).ravel()
    knots = np.append(knots, knots[0] + TWO_PI)
    s_knots = np.interp(knots, tab_phi, tab_s)
    s_knots[-1] = tab_s[-1]
    seg_len = np.diff(s_knots)
    # spacing at each knot: the requested end spacing, but never longer than
    # an adjacent segment, so that tiny gaps grade smoothly into the rest
    knot_h = np.minimum(h_target / max(refine, 1.0), np.minimum(seg_len, np.roll(seg_len, 1)))

    def split(k):
        a, sa, length = knots[k], s_knots[k], seg_len[k]
        ha, hb = knot_h[k], knot_h[(k + 1) % len(seg_len)]
        if ha >= h_target and hb >= h_target:
            n = max(1, int(np.ceil(length / h_target - 1e-9)))
            inner = np.interp(sa + length * np.arange(1, n) / n, tab_s, tab_phi)
            return np.concatenate([[a], inner])
        # spacing ha, hb at the ends, growing linearly (rate `grading`) to h
        # geometric sampling towards both ends resolves very small end spacings
        ga = np.geomspace(1e-2 * ha, length, 400)
        gb = length - np.geomspace(1e-2 * hb, length, 400)
        s = np.unique(np.clip(np.concatenate([np.linspace(0.0, length, 2001), ga, gb]), 0.0, length))
        spacing = np.minimum(h_target, np.minimum(ha + grading * s, hb + grading * (length - s)))
        dens = np.concatenate([[0.0], np.cumsum(0.5 * (1 / spacing[1:] + 1 / spacing[:-1]) * np.diff(s))])
        n = max(1, int(np.ceil(dens[-1] - 1e-9)))
        sk = np.interp(dens[-1] * np.arange(1, n) / n, dens, s)
        inner = np.interp(sa + sk, tab_s, tab_phi)
        return np.concatenate([[a], inner])

    angles, tags = [], []
    for i, m in enumerate(order):
        seg = split(2 * i)
        angles.append(seg)
        tags.append(np.full(seg.size, m))
        seg = split(2 * i + 1)
        angles.append(seg)
        tags.append(np.full(seg.size, GAP))
    return np.concatenate(angles), np.concatenate(tags)


def _provenance(kind, boundary, layout, h_target, extra=""):
    h = hashlib.sha1()
    h.update(kind.encode())
    h.update(np.asarray(boundary.coeffs).tobytes())
    if layout is not None:
        h.update(layout.angles.tobytes())
        h.update(np.float64(layout.width).tobytes())
    h.update(np.float64(h_target).tobytes())
    h.update(extra.encode())
    return f"{kind}:{h.hexdigest()[:12]}"


DEFAULT_EDGES = 120


def default_h(boundary: FourierBoundary) -> float:
    """Reconstruction mesh size: perimeter / 120."""
    return boundary.perimeter / DEFAULT_EDGES


def build_mesh(
    boundary: FourierBoundary,
    layout: ElectrodeLayout | None,
    h_target: float | None = None,
    *,
    role: str = "recon",
    interior_scale: float = 1.0,
    endpoint_refine: float = 1.0,
) -> Mesh2D:
    """Triangulate the domain enclosed by `boundary`.

    Boundary vertices are spaced at most `h_target` apart in arc length and
    include every electrode endpoint.  Interior triangles are limited to
    the area of an equilateral triangle of side ``interior_scale * h_target``.

    `role` only enters the provenance tag, which lets callers check that a
    simulation mesh is never reused for reconstruction.
    """
    if h_target is None:
        h_target = default_h(boundary)
    if h_target <= 0:
        raise ValueError("h_target must be positive")
    angles, tags = _sample_boundary(boundary, layout, h_target, endpoint_refine)
    pts = boundary.point(angles)
    nb = len(pts)
    seg = np.stack([np.arange(nb), (np.arange(nb) + 1) % nb], axis=1)
    max_area = np.sqrt(3.0) / 4.0 * (interior_scale * h_target) ** 2
    out = triangle.triangulate(
        {"vertices": pts, "segments": seg}, f"pq{_REQUEST_ANGLE}a{max_area:.15f}YQ"
    )
    verts = out["vertices"]
    if len(verts) < nb or not np.array_equal(verts[:nb], pts):
        raise MeshError("mesher altered the boundary vertices")
    tris = out["triangles"]
    p = verts[tris]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    param = np.stack([angles, np.append(angles[1:], angles[0] + TWO_PI)], axis=1)
    mesh = Mesh2D(
        verts,
        tris,
        nb,
        tags,
        param,
        provenance=_provenance(role, boundary, layout, h_target, f"{interior_scale}/{endpoint_refine}"),
        electrode_count=0 if layout is None else layout.count,
    )
    mesh.validate()
    return mesh


def morph_mesh(
    mesh: Mesh2D,
    old: tuple[FourierBoundary, ElectrodeLayout],
    new: tuple[FourierBoundary, ElectrodeLayout],
) -> Mesh2D:
    """Move `mesh` onto a perturbed geometry without changing connectivity.

    Polar angles are remapped piecewise linearly so that electrode start and
    end angles go to their new values, then every vertex is scaled radially
    by the ratio of new to old boundary radius.  Boundary vertices therefore
    land exactly on the new curve and electrode endpoints on the new
    endpoints.
    """
    b0, l0 = old
    b1, l1 = new
    knots0 = _angle_knots(b0, l0)
    knots1 = _angle_knots(b1, l1)
    x = mesh.vertices
    phi = np.arctan2(x[:, 1], x[:, 0])
    rho = np.hypot(x[:, 0], x[:, 1])
    # boundary vertices: use the stored parameter to avoid atan2 round-off
    phi[: mesh.n_boundary] = mesh.edge_param[:, 0]
    phi_new = _remap(phi, knots0, knots1)
    scale = np.where(rho > 0, b1.radius(phi_new) / b0.radius(phi), 1.0)
    verts = (rho * scale)[:, None] * np.stack([np.cos(phi_new), np.sin(phi_new)], axis=1)
    bparam = _remap(mesh.edge_param[:, 0], knots0, knots1)
    verts[: mesh.n_boundary] = b1.point(bparam)
    param = np.stack([bparam, np.append(bparam[1:], bparam[0] + TWO_PI)], axis=1)
    return Mesh2D(
        verts, mesh.triangles.copy(), mesh.n_boundary, mesh.edge_tags.copy(), param,
        provenance=mesh.provenance + "+morph", electrode_count=mesh.electrode_count,
    )


def morph_velocity(
    mesh: Mesh2D,
    boundary: FourierBoundary,
    layout: ElectrodeLayout,
    knot_rate: np.ndarray,
    radius_rate: np.ndarray,
) -> np.ndarray:
    """Vertex velocities of `morph_mesh` along a geometry perturbation.

    Parameters
    ----------
    knot_rate : (M, 2, P) rates of the electrode start/end angles.
    radius_rate : (n_vertices, P) rates of the boundary radius function,
        evaluated at each vertex's polar angle.

    Returns
    -------
    (n_vertices, 2, P) array, the derivative of the morphed vertex
    positions at zero perturbation.
    """
    x = mesh.vertices
    phi = np.arctan2(x[:, 1], x[:, 0])
    rho = np.hypot(x[:, 0], x[:, 1])
    phi[: mesh.n_boundary] = mesh.edge_param[:, 0]
    knots = _angle_knots(boundary, layout)
    rates = np.asarray(knot_rate, dtype=float).reshape(len(knots), -1)
    base = knots[0]
    xk = np.concatenate([knots - base, [TWO_PI]])
    t = np.mod(phi - base, TWO_PI)
    dphi = np.stack(
        [np.interp(t, xk, np.append(r, r[0])) for r in rates.T], axis=1
    )  # (n, P)
    r0 = boundary.radius(phi)
    dr0 = boundary.radius(phi, 1)
    drho = rho[:, None] * (radius_rate + dr0[:, None] * dphi) / r0[:, None]
    er = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    et = np.stack([-np.sin(phi), np.cos(phi)], axis=1)
    return er[:, :, None] * drho[:, None, :] + et[:, :, None] * (rho[:, None] * dphi)[:, None, :]


def _angle_knots(boundary, layout):
    starts = layout.angles
    ends = layout.terminal_angles(boundary)
    shift = np.floor((starts - starts[0]) / TWO_PI) * TWO_PI
    return np.stack([starts - shift, ends - shift], axis=1).ravel()


def _remap(phi, k0, k1):
    """Piecewise-linear, 2 pi-periodic map sending knots k0 to k1."""
    base = k0[0]
    rel0 = k0 - base
    rel1 = k1 - k1[0]
    x = np.concatenate([rel0, [TWO_PI]])
    y = np.concatenate([rel1, [TWO_PI]])
    t = np.mod(np.asarray(phi) - base, TWO_PI)
    return k1[0] + np.interp(t, x, y) + (np.asarray(phi) - base - t)


@dataclass(eq=False)
class ReconGrid:
    """Fixed P1 grid on the disk of radius `radius` carrying the admittivity."""

    mesh: Mesh2D
    radius: float
    _finder: object = field(default=None, repr=False)

    @classmethod
    def disk(cls, radius: float = 3.0, h: float = 0.13) -> "ReconGrid":
        circle = FourierBoundary.circle(radius)
        mesh = build_mesh(circle, None, h, role="grid")
        return cls(mesh, radius)

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_vertices

    @property
    def nodes(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def inner_radius(self) -> float:
        """Radius of the largest origin-centred disk inside the grid polygon."""
        return self.radius * np.cos(np.pi / self.mesh.n_boundary)

    def contains(self, boundary: FourierBoundary) -> bool:
        return boundary.max_radius() < self.inner_radius

    def _locate(self, points: np.ndarray) -> np.ndarray:
        if self._finder is None:
            import matplotlib.tri as mtri

            tri = mtri.Triangulation(*self.mesh.vertices.T, self.mesh.triangles)
            self._finder = tri.get_trifinder()
        idx = self._finder(points[:, 0], points[:, 1])
        if np.any(idx < 0):
            bad = points[idx < 0][0]
            raise GeometryError(f"point {bad} lies outside the reconstruction grid")
        return idx

    def interpolation_matrix(self, points: np.ndarray) -> sp.csr_matrix:
        """Sparse (n_points, K) matrix of P1 barycentric weights.

        Raises GeometryError if any point lies outside the grid.
        """
        points = np.asarray(points, dtype=float)
        idx = self._locate(points)
        tri = self.mesh.triangles[idx]
        p = self.mesh.vertices[tri]
        lam = _barycentric(p, points)
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum(axis=1, keepdims=True)
        rows = np.repeat(np.arange(len(points)), 3)
        return sp.csr_matrix((lam.ravel(), (rows, tri.ravel())), shape=(len(points), self.n_nodes))

    def transfer(self, coeffs: np.ndarray, dst: Mesh2D) -> np.ndarray:
        """Linear interpolation of grid coefficients onto `dst` vertices."""
        return self.interpolation_matrix(dst.vertices) @ np.asarray(coeffs, dtype=float)

    def gradient(self, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Gradient (n, 2) of the grid interpolant at `points`."""
        points = np.asarray(points, dtype=float)
        tri = self.mesh.triangles[self._locate(points)]
        p = self.mesh.vertices[tri]
        area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (
            p[:, 1, 1] - p[:, 0, 1]
        )
        vals = np.asarray(coeffs, dtype=float)[tri]
        out = np.zeros((len(points), 2))
        for i in range(3):
            a, b = p[:, (i + 1) % 3], p[:, (i + 2) % 3]
            out[:, 0] += vals[:, i] * (a[:, 1] - b[:, 1]) / area2
            out[:, 1] += vals[:, i] * (b[:, 0] - a[:, 0]) / area2
        return out


def _barycentric(p, x):
    """Barycentric coordinates of points x (n,2) in triangles p (n,3,2)."""
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    v2 = x - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)
