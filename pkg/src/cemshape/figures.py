"""SVG figures: boundary overlays, admittivity heat maps, Phi history, meshes.

matplotlib's SVG backend is used with a fixed hash salt and no date
stamp, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .geometry import TWO_PI  # noqa: E402
from .mesher import GAP  # noqa: E402

plt.rcParams["svg.hashsalt"] = "cemshape"
plt.rcParams["svg.fonttype"] = "none"

# fixed color scale of the heat maps (documented in the README)
CMAP = "viridis"
N_CURVE = 512


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "cemshape"})
    plt.close(fig)


def _curve(boundary, n=N_CURVE):
    phi = np.linspace(0.0, TWO_PI, n + 1)
    return boundary.point(phi)


def boundary_overlay(path, true_boundary, recon_boundary, layouts=(), initial=None):
    """Exact shape (red, solid) against the retrieved one (black, dashed).

    `layouts` is a sequence of (boundary, layout, color) whose electrodes
    are drawn as thick arcs.
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    if true_boundary is not None:
        p = _curve(true_boundary)
        ax.plot(p[:, 0], p[:, 1], "r-", lw=1.5, label="exact")
    if initial is not None:
        p = _curve(initial)
        ax.plot(p[:, 0], p[:, 1], ":", color="0.5", lw=1.0, label="initial")
    p = _curve(recon_boundary)
    ax.plot(p[:, 0], p[:, 1], "k--", lw=1.5, label="retrieved")
    for b, lay, color in layouts:
        for s, e in zip(lay.angles, lay.terminal_angles(b)):
            q = b.point(np.linspace(s, e, 16))
            ax.plot(q[:, 0], q[:, 1], "-", color=color, lw=4, solid_capstyle="butt")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, path)


def heat_map(path, mesh, nodal, vmin=None, vmax=None, title=""):
    """Per-triangle filled polygons colored by the mean of the nodal values."""
    vals = np.asarray(nodal, dtype=float)[mesh.triangles].mean(axis=1)
    vmin = float(vals.min()) if vmin is None else vmin
    vmax = float(vals.max()) if vmax is None else vmax
    fig, ax = plt.subplots(figsize=(5.5, 5))
    coll = PolyCollection(mesh.vertices[mesh.triangles], array=vals, cmap=CMAP, edgecolors="face", linewidths=0.2)
    coll.set_clim(vmin, vmax)
    ax.add_collection(coll)
    ax.autoscale_view()
    ax.set_aspect("equal")
    fig.colorbar(coll, ax=ax)
    if title:
        ax.set_title(title)
    _save(fig, path)


def phi_history(path, history):
    """Phi per accepted iteration on a log scale, one line per stage."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    offset = 0
    for stage in dict.fromkeys(h["stage"] for h in history):
        rows = [h for h in history if h["stage"] == stage]
        it = offset + np.array([h["iter"] for h in rows])
        ax.semilogy(it, [h["phi"] for h in rows], "o-", ms=3, label=stage)
        offset = int(it[-1])
    ax.set_xlabel("iteration")
    ax.set_ylabel("Phi")
    ax.legend(fontsize=8)
    _save(fig, path)


def mesh_plot(path, mesh):
    """Triangle edges, with electrode edges highlighted."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.triplot(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles, lw=0.3, color="0.4")
    edges = mesh.boundary_edges
    for k in np.flatnonzero(mesh.edge_tags != GAP):
        a, b = mesh.vertices[edges[k]]
        ax.plot([a[0], b[0]], [a[1], b[1]], "-", color="tab:orange", lw=3)
    ax.set_aspect("equal")
    _save(fig, path)
