"""Target configurations of the three experiments and data simulation.

Data are computed on a fine mesh of the exact target curve, generated
independently of any reconstruction mesh, and then corrupted with
Gaussian noise whose variance follows `priors.noise_cov`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import measurement_vector
from .geometry import TWO_PI, ElectrodeLayout, FourierBoundary, GeometryError, LayoutError
from .mesher import default_h
from .model import ForwardModel
from .priors import C1_DEFAULT, C2_DEFAULT, noise_cov

PHANTOM_IDS = ("exp1", "exp2", "exp3")
# order of the Fourier fit that stands in for the analytic target curves
FIT_ORDER = 64
FINE_FACTOR = 2.5
COVERAGE_23 = 0.4

BUMP_CENTER = (0.7, 0.4)
BUMP_HEIGHT = 1.5
BUMP_WIDTH = 0.5
INCLUSIONS_EXP3 = (((1.0, -0.6), 0.5, 10.0), ((-1.0, 0.6), 0.5, 10.0))
ASSUMED_NOTE = "assumed default, not a published value"


def _bump(phi):
    return np.exp(-((np.mod(phi, TWO_PI) - np.pi) ** 6))


def target_boundary(pid: str):
    """Radius function r(phi) of the target cross-section."""
    if pid == "exp1":
        return lambda p: (
            3.3 / np.sqrt((2.2 * np.cos(p)) ** 2 + (1.5 * np.sin(p)) ** 2)
            + 1.1 * _bump(p)
            + 0.88 * np.cos(p) * np.sin(-2 * p)
        )
    if pid == "exp2":
        return lambda p: 1.0 / np.sqrt((np.cos(p) / 2.0) ** 2 + (np.sin(p) / 1.5) ** 2)
    if pid == "exp3":
        return lambda p: (
            3.0 / np.sqrt((1.5 * np.cos(p)) ** 2 + (2.0 * np.sin(p)) ** 2)
            + 0.75 * _bump(p)
            + 0.6 * np.cos(p) * np.sin(-2 * p)
        )
    raise ValueError(f"unknown phantom id {pid!r}; expected one of {PHANTOM_IDS}")


def target_curve(pid: str, order: int = FIT_ORDER) -> FourierBoundary:
    """High-order Fourier representation of the target, exact to 1e-10."""
    return FourierBoundary.fit(target_boundary(pid), order)


def perturb_electrodes(M: int, stddev: float, rng, boundary=None, width=None, max_tries: int = 1000) -> np.ndarray:
    """Start angles 2 pi m / M + eps_m with eps_m ~ N(0, stddev^2).

    With `boundary` and `width` given, draws whose electrodes would be out
    of order or overlap are rejected and redrawn.
    """
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    rng = np.random.default_rng(rng)
    base = TWO_PI * np.arange(M) / M
    for _ in range(max_tries):
        angles = base + stddev * rng.standard_normal(M)
        if boundary is None or width is None:
            return angles
        try:
            ElectrodeLayout(angles, width).terminal_angles(boundary)
        except LayoutError:
            continue
        return angles
    raise LayoutError(f"no admissible electrode draw in {max_tries} tries")


def inclusion_field(background: float = 1.0, inclusions=(), boundary: FourierBoundary | None = None):
    """Piecewise-constant admittivity with disc inclusions.

    `inclusions` is a sequence of (center, radius, level).  With `boundary`
    given, every disc must lie inside the domain.
    """
    incl = [(np.asarray(c, dtype=float), float(r), float(v)) for c, r, v in inclusions]
    if boundary is not None:
        t = np.linspace(0.0, TWO_PI, 256, endpoint=False)
        for c, r, _ in incl:
            ring = c + r * np.stack([np.cos(t), np.sin(t)], axis=1)
            phi = np.arctan2(ring[:, 1], ring[:, 0])
            if np.any(np.hypot(ring[:, 0], ring[:, 1]) >= boundary.radius(phi)):
                raise GeometryError(f"inclusion at {c.tolist()} with radius {r} leaves the domain")

    def sigma(x):
        x = np.asarray(x, dtype=float)
        out = np.full(len(x), float(background))
        for c, r, v in incl:
            out[np.sum((x - c) ** 2, axis=1) < r * r] = v
        return out

    return sigma


def smooth_bump(center=BUMP_CENTER, height=BUMP_HEIGHT, width=BUMP_WIDTH, background: float = 1.0):
    """background + height * exp(-|x - center|^2 / width^2)."""
    c = np.asarray(center, dtype=float)

    def sigma(x):
        d2 = np.sum((np.asarray(x, dtype=float) - c) ** 2, axis=1)
        return background + height * np.exp(-d2 / width**2)

    return sigma


@dataclass(frozen=True)
class Phantom:
    """A target: exact boundary, electrode layout, admittivity and z."""

    pid: str
    boundary: FourierBoundary
    layout: ElectrodeLayout
    sigma: object
    z: np.ndarray
    notes: tuple = ()

    @property
    def M(self) -> int:
        return self.layout.count


def make_phantom(pid: str, seed: int, M: int = 16, stddev: float = 0.1, z: float = 1.0) -> Phantom:
    """Build one of the experiment targets; electrode noise is seeded."""
    boundary = target_curve(pid)
    if pid == "exp1":
        width = 0.3
    else:
        width = COVERAGE_23 * boundary.perimeter / M
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    angles = perturb_electrodes(M, stddev, rng, boundary, width)
    layout = ElectrodeLayout(angles, width)
    notes = ()
    if pid == "exp1":
        sigma = 1.0
    elif pid == "exp2":
        sigma = smooth_bump()
        notes = (f"admittivity: Gaussian bump at {BUMP_CENTER}, height {BUMP_HEIGHT}, width {BUMP_WIDTH} ({ASSUMED_NOTE})",)
    else:
        sigma = inclusion_field(1.0, INCLUSIONS_EXP3, boundary)
        notes = (f"admittivity: discs {INCLUSIONS_EXP3} ({ASSUMED_NOTE})",)
    return Phantom(pid, boundary, layout, sigma, np.full(M, float(z)), notes)


@dataclass
class DataSet:
    """Noisy stacked voltages (drive-major) with their noise standard deviations."""

    voltages: np.ndarray
    noise_std: np.ndarray
    M: int
    meta: dict = field(default_factory=dict)
    clean: np.ndarray | None = None

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=float)
        self.noise_std = np.asarray(self.noise_std, dtype=float)
        n = self.M * (self.M - 1)
        if self.voltages.shape != (n,) or self.noise_std.shape != (n,):
            raise ValueError(f"expected {n} entries for M={self.M}")
        if np.any(self.noise_std <= 0):
            raise ValueError("noise standard deviations must be positive")

    @property
    def variance(self) -> np.ndarray:
        return self.noise_std**2

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["drive_j", "electrode_m", "voltage", "noise_std"])
        for i, (v, s) in enumerate(zip(self.voltages, self.noise_std)):
            j, m = divmod(i, self.M)
            w.writerow([j + 2, m + 1, f"{v:.17g}", f"{s:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "DataSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"drive_j", "electrode_m", "voltage", "noise_std"}:
            raise ValueError("data CSV must have columns drive_j, electrode_m, voltage, noise_std")
        M = max(int(r["electrode_m"]) for r in rows)
        if len(rows) != M * (M - 1):
            raise ValueError(f"data CSV has {len(rows)} rows, expected {M * (M - 1)} for M={M}")
        V = np.empty(len(rows))
        S = np.empty(len(rows))
        for r in rows:
            j, m = int(r["drive_j"]), int(r["electrode_m"])
            if not (2 <= j <= M and 1 <= m <= M):
                raise ValueError(f"row index out of range: drive {j}, electrode {m}")
            i = (j - 2) * M + (m - 1)
            V[i] = float(r["voltage"])
            S[i] = float(r["noise_std"])
        return cls(V, S, M, dict(meta or {}))

    def save(self, csv_path, config_hash: str) -> Path:
        """Write the CSV and a JSON sidecar next to it; returns the sidecar path."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        side = csv_path.with_suffix(".json")
        meta = dict(self.meta, config_hash=config_hash, M=self.M,
                    csv_sha256=hashlib.sha256(csv_path.read_bytes()).hexdigest())
        side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return side

    @classmethod
    def load(cls, csv_path) -> "DataSet":
        csv_path = Path(csv_path)
        side = csv_path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls.from_csv(csv_path.read_text(), meta)


def simulate(
    phantom: Phantom,
    seed: int,
    c1: float = C1_DEFAULT,
    c2: float = C2_DEFAULT,
    fine_factor: float = FINE_FACTOR,
    floor: float = 1e-12,
) -> DataSet:
    """Fine-mesh forward solve of the phantom plus seeded Gaussian noise.

    The mesh size is the reconstruction default divided by `fine_factor`.
    With c1 = c2 = 0 the data are noise-free; the recorded standard
    deviation is then `floor` so the weighted misfit stays defined.
    """
    if fine_factor < 2.0:
        raise ValueError("the simulation mesh must be at least twice as fine as the reconstruction default")
    h = default_h(phantom.boundary) / fine_factor
    model = ForwardModel(phantom.z, phantom.layout.width, h_target=h, role="simulation")
    mesh = model.mesh(phantom.boundary, phantom.layout)
    sol = model.solve(phantom.sigma, phantom.boundary, phantom.layout, mesh)
    clean = measurement_vector(sol)
    var = noise_cov(clean, phantom.M, c1, c2)
    if np.any(var <= 0) and (c1 > 0 or c2 > 0):
        raise ValueError("degenerate data: zero noise variance")
    std = np.sqrt(var)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    noisy = clean + std * rng.standard_normal(clean.size)
    meta = {
        "phantom": phantom.pid,
        "seed": int(seed),
        "c1": c1,
        "c2": c2,
        "width": phantom.layout.width,
        "angles": phantom.layout.angles.tolist(),
        "z": phantom.z.tolist(),
        "perimeter": phantom.boundary.perimeter,
        "coverage": phantom.layout.coverage(phantom.boundary),
        "mesh_h": h,
        "mesh_provenance": mesh.provenance,
        "n_dofs": sol.system.space.n_dofs,
        "notes": list(phantom.notes),
    }
    return DataSet(noisy, np.maximum(std, floor), phantom.M, meta, clean)
