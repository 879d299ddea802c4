"""Command-line front end.

Usage:
    cemshape simulate --phantom exp1 --seed 7
    cemshape reconstruct --phantom exp2 --mode simultaneous
    cemshape reconstruct --data runs/simulate-exp2-<hash>/data.csv --config run.json
    cemshape check-jacobians
    cemshape mesh --phantom exp3

Every command writes into <root>/<command>-<label>-<config hash>/, where
the root is --out, else $CEMSHAPE_OUT, else ./cemshape-runs.  An existing
output directory is never overwritten without --force.

Exit codes: 0 success, 1 validation error, 2 numeric failure,
3 acceptance-threshold breach.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GeometryError, LayoutError, hausdorff_distance
from .mesher import MeshError, build_mesh, default_h
from .phantoms import PHANTOM_IDS, DataSet, make_phantom, simulate
from .priors import C1_DEFAULT, C2_DEFAULT, NoiseModel
from .recon import MODES, ReconConfig, Settings, reconstruct, relative_l2_error

log = logging.getLogger("cemshape")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3
ENV_OUT = "CEMSHAPE_OUT"
DEFAULT_ROOT = "cemshape-runs"

# experiment settings; fields left as None in RunConfig fall back to these
PRESETS = {
    "exp1": {"N": 15, "alpha0": 2.7, "a": 1.0, "width": 0.3, "sigma_known": 1.0, "grid_radius": 3.0, "grid_h": 0.13},
    "exp2": {"N": 7, "alpha0": 2.0, "a": 0.1, "grid_radius": 3.0, "grid_h": 0.13},
    "exp3": {"N": 15, "alpha0": 1.5, "a": 0.1, "grid_radius": 3.5, "grid_h": 0.15},
}
GENERIC = {"N": 7, "alpha0": 2.0, "a": 0.1, "grid_radius": 3.0, "grid_h": 0.13}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Run configuration; see the README for the meaning of each field."""

    phantom: str | None = "exp1"
    data: str | None = None
    seed: int = 7
    mode: str = "simultaneous"
    M: int = 16
    width: float | None = None
    z: float = 1.0
    electrode_stddev: float = 0.1
    N: int | None = None
    alpha0: float | None = None
    a: float | None = None
    s: float = 1.0
    tau: float | None = None
    corr_length: float = 0.6
    sigma_std_factor: float = 0.5
    nugget: float = 1e-3
    c1: float = C1_DEFAULT
    c2: float = C2_DEFAULT
    sigma_known: float | None = None
    skip_stage1: bool = False
    rel_tol: float = 1e-4
    max_iter1: int = 25
    max_iter2: int = 30
    ls_tol: float = 1e-3
    grid_radius: float | None = None
    grid_h: float | None = None
    h_scale: float = 1.0
    fine_factor: float = 2.5

    def validate(self) -> None:
        hints = typing.get_type_hints(RunConfig)
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            t = hints[f.name]
            if isinstance(v, bool) and t is not bool:
                raise ConfigError(f"{f.name}: expected {t}, got a boolean")
            if isinstance(v, int) and not isinstance(v, bool) and float in typing.get_args(t) + (t,):
                v = float(v)
                setattr(self, f.name, v)
            if not isinstance(v, t):
                raise ConfigError(f"{f.name}: expected {t}, got {type(v).__name__}")
        if self.phantom is not None and self.phantom not in PHANTOM_IDS:
            raise ConfigError(f"phantom: unknown id {self.phantom!r}; expected one of {PHANTOM_IDS}")
        if self.phantom is None and self.data is None:
            raise ConfigError("either phantom or data must be given")
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}")
        if self.M < 2:
            raise ConfigError("M: need at least 2 electrodes")
        for name in ("z", "s", "corr_length", "sigma_std_factor", "rel_tol", "ls_tol", "h_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("width", "alpha0", "a", "tau", "grid_radius", "grid_h", "sigma_known"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name}: must be positive")
        if self.c1 < 0 or self.c2 < 0 or self.electrode_stddev < 0:
            raise ConfigError("c1, c2 and electrode_stddev must be non-negative")
        if not 0 < self.nugget < 1:
            raise ConfigError("nugget: must lie in (0, 1)")
        if self.fine_factor < 2:
            raise ConfigError("fine_factor: the simulation mesh must be at least twice as fine")

    def resolved(self) -> "RunConfig":
        """Copy with experiment presets filled in for fields left as None."""
        preset = PRESETS.get(self.phantom, GENERIC)
        out = dataclasses.replace(self)
        for k, v in preset.items():
            if getattr(out, k) is None and k != "sigma_known":
                setattr(out, k, v)
        if out.sigma_known is None and self.phantom == "exp1" and "sigma_known" in preset:
            out.sigma_known = preset["sigma_known"]
        if out.width is None and self.phantom is not None:
            out.width = make_phantom(self.phantom, self.seed, self.M, self.electrode_stddev, self.z).layout.width
        if out.width is None:
            raise ConfigError("width: required when no phantom is given")
        return out

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def recon_config(self) -> ReconConfig:
        return ReconConfig(
            N=self.N, M=self.M, width=self.width, z=self.z, alpha0=self.alpha0, a=self.a, s=self.s,
            tau=self.tau, corr_length=self.corr_length, sigma_std_factor=self.sigma_std_factor,
            nugget=self.nugget, grid_radius=self.grid_radius, grid_h=self.grid_h, h_scale=self.h_scale,
            sigma_known=self.sigma_known, skip_stage1=self.skip_stage1,
            settings=Settings(rel_tol=self.rel_tol, max_iter1=self.max_iter1, max_iter2=self.max_iter2, ls_tol=self.ls_tol),
        )


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config, apply overrides and validate.

    Errors name the file and line of the offending key.
    """
    values = {}
    text = ""
    where = "<overrides>"
    if path is not None:
        where = str(path)
        text = Path(path).read_text()
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{where}:1: top level must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{where}:{_line_of(text, key)}: unknown key {key!r}")
    values.update(overrides or {})
    for key in overrides or {}:
        if key not in known:
            raise ConfigError(f"<overrides>: unknown key {key!r}")
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        line = _line_of(text, key) if key in values and text else 0
        raise ConfigError(f"{where}:{line}: {exc}" if line else str(exc)) from None
    return cfg


def output_dir(args, command: str, label: str, digest: str) -> Path:
    root = Path(args.out or os.environ.get(ENV_OUT) or DEFAULT_ROOT)
    path = root / f"{command}-{label}-{digest}"
    if path.exists() and any(path.iterdir()) and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_simulate(cfg: RunConfig, args) -> int:
    if cfg.phantom is None:
        raise ConfigError("simulate needs a phantom")
    digest = cfg.digest()
    out = output_dir(args, "simulate", cfg.phantom, digest)
    ph = make_phantom(cfg.phantom, cfg.seed, cfg.M, cfg.electrode_stddev, cfg.z)
    ds = simulate(ph, cfg.seed, cfg.c1, cfg.c2, cfg.fine_factor)
    side = ds.save(out / "data.csv", digest)
    rel = float(np.median(ds.noise_std / np.maximum(np.abs(ds.clean), 1e-300)))
    print(f"phantom {ph.pid}: perimeter {ds.meta['perimeter']:.6f}, coverage {ds.meta['coverage']:.4f}, "
          f"median relative noise std {rel:.4g}")
    for note in ph.notes:
        print(f"note: {note}")
    print(f"wrote {out / 'data.csv'} ({ds.voltages.size} rows) and {side}")
    return EXIT_OK


@dataclass
class RunReport:
    """Summary of a reconstruction run."""

    mode: str
    config_hash: str
    phi: float
    misfit: float
    expected_misfit: int
    sigma_star: float
    iterations: dict
    converged: dict
    warnings: list
    hausdorff: float | None = None
    area_mismatch: float | None = None
    sigma_rel_l2: float | None = None
    runtime_s: float = 0.0
    artifacts: dict = field(default_factory=dict)


def _load_data(cfg: RunConfig):
    """DataSet plus the phantom behind it when ground truth is known."""
    if cfg.data is not None:
        ds = DataSet.load(cfg.data)
        if ds.M != cfg.M:
            raise ConfigError(f"data has M={ds.M} electrodes but the config says M={cfg.M}")
        pid = ds.meta.get("phantom", cfg.phantom)
        seed = ds.meta.get("seed", cfg.seed)
        ph = make_phantom(pid, seed, cfg.M, cfg.electrode_stddev, cfg.z) if pid in PHANTOM_IDS else None
        if ph is not None and "angles" in ds.meta and not np.allclose(ds.meta["angles"], ph.layout.angles):
            ph = None
        return ds, ph
    ph = make_phantom(cfg.phantom, cfg.seed, cfg.M, cfg.electrode_stddev, cfg.z)
    return simulate(ph, cfg.seed, cfg.c1, cfg.c2, cfg.fine_factor), ph


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    from . import figures

    digest = cfg.digest()
    label = cfg.phantom if cfg.data is None else Path(cfg.data).stem
    out = output_dir(args, f"reconstruct-{cfg.mode}", label, digest)
    ds, ph = _load_data(cfg)
    truth = (ph.boundary.coeffs, ph.layout.angles) if ph is not None else None
    t0 = time.perf_counter()
    res = reconstruct(ds.voltages, NoiseModel(ds.variance), cfg.recon_config(), cfg.mode, truth)
    runtime = time.perf_counter() - t0
    report = RunReport(
        cfg.mode, digest, res.phi, res.misfit, cfg.M * (cfg.M - 1), res.sigma_star,
        {k: r.iterations for k, r in res.stages.items()}, {k: r.converged for k, r in res.stages.items()},
        list(res.warnings), runtime_s=runtime,
    )
    if ph is not None:
        report.hausdorff = hausdorff_distance(res.boundary, ph.boundary)
        report.area_mismatch = abs(res.boundary.area() - ph.boundary.area()) / ph.boundary.area()
        sig = res.state["sigma"]
        report.sigma_rel_l2 = relative_l2_error(sig, res.grid, ph.sigma, ph.boundary)
    art = {}
    with open(out / "history.jsonl", "w") as fh:
        for row in res.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    art["history"] = "history.jsonl"
    state = {k: np.atleast_1d(v).tolist() for k, v in res.state.items()}
    state["sigma_grid"] = None if res.grid is None else {"radius": res.grid.radius, "nodes": res.grid.nodes.tolist()}
    _write_json(out / "state.json", state)
    art["state"] = "state.json"
    (out / "mesh.json").write_text(res.mesh.to_json())
    art["mesh"] = "mesh.json"
    layouts = [(res.boundary, res.layout, "k")] + ([(ph.boundary, ph.layout, "r")] if ph is not None else [])
    figures.boundary_overlay(out / "boundary.svg", ph.boundary if ph else None, res.boundary, layouts)
    art["boundary_svg"] = "boundary.svg"
    if res.grid is not None:
        nodal = res.grid.transfer(res.state["sigma"], res.mesh)
        figures.heat_map(out / "sigma.svg", res.mesh, nodal, title="admittivity")
        art["sigma_svg"] = "sigma.svg"
    figures.phi_history(out / "phi.svg", res.history)
    art["phi_svg"] = "phi.svg"
    report.artifacts = art
    _write_json(out / "report.json", asdict(report))
    print(f"{cfg.mode}: Phi {res.phi:.6g}, misfit {res.misfit:.6g} (expected {report.expected_misfit}), "
          f"iterations {report.iterations}")
    if ph is not None:
        err = "n/a" if report.sigma_rel_l2 is None else f"{report.sigma_rel_l2:.4f}"
        print(f"Hausdorff {report.hausdorff:.4f}, area mismatch {report.area_mismatch:.4f}, sigma rel L2 {err}")
    for w in res.warnings:
        print(f"warning: {w}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_check_jacobians(cfg: RunConfig, args) -> int:
    from .sensitivities import THRESHOLDS, CoarseCase, check_jacobians, taylor_orders

    t0 = time.perf_counter()
    case = CoarseCase.default(h=args.h, seed=cfg.seed)
    rows, n_dofs = check_jacobians(case, n_sigma=args.n_sigma, seed=cfg.seed)
    print(f"coarse case: {n_dofs} potential unknowns")
    print(f"{'component':<10}{'index':>6}{'rel. error':>14}{'threshold':>12}")
    bad = 0
    for comp, idx, err in rows:
        flag = "" if err <= THRESHOLDS[comp] else "  FAIL"
        bad += bool(flag)
        print(f"{comp:<10}{idx:>6}{err:>14.3e}{THRESHOLDS[comp]:>12.0e}{flag}")
    orders = taylor_orders(case)
    for l, (rem, ordv) in orders.items():
        flag = "" if ordv.min() >= args.min_order else "  FAIL"
        bad += bool(flag)
        print(f"Taylor alpha[{l}]: remainders {np.array2string(rem, precision=3)} orders "
              f"{np.array2string(ordv, precision=2)}{flag}")
    print(f"elapsed {time.perf_counter() - t0:.1f} s")
    return EXIT_THRESHOLD if bad else EXIT_OK


def cmd_mesh(cfg: RunConfig, args) -> int:
    from . import figures

    if cfg.phantom is None:
        raise ConfigError("mesh needs a phantom")
    out = output_dir(args, "mesh", cfg.phantom, cfg.digest())
    ph = make_phantom(cfg.phantom, cfg.seed, cfg.M, cfg.electrode_stddev, cfg.z)
    mesh = build_mesh(ph.boundary, ph.layout, default_h(ph.boundary) * cfg.h_scale)
    (out / "mesh.json").write_text(mesh.to_json())
    figures.mesh_plot(out / "mesh.svg", mesh)
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles, min angle {mesh.min_angle():.1f} deg")
    print(f"wrote {out}")
    return EXIT_OK


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cemshape", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--phantom", choices=PHANTOM_IDS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
        sp.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./{DEFAULT_ROOT})")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    common(sub.add_parser("simulate", help="simulate noisy data for a phantom"))
    sp = sub.add_parser("reconstruct", help="reconstruct from data or a simulated phantom")
    common(sp)
    sp.add_argument("--data", help="data CSV (a JSON sidecar next to it is read if present)")
    sp.add_argument("--mode", choices=MODES)
    sp = sub.add_parser("check-jacobians", help="compare analytic Jacobians with finite differences")
    common(sp)
    sp.add_argument("--h", type=float, default=0.25, help="mesh size of the coarse case")
    sp.add_argument("--n-sigma", type=int, default=6, help="number of sampled admittivity columns")
    sp.add_argument("--min-order", type=float, default=1.8, help="required Taylor order")
    common(sub.add_parser("mesh", help="export the reconstruction mesh of a phantom as JSON and SVG"))
    return p


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "check-jacobians": cmd_check_jacobians, "mesh": cmd_mesh}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = _parse_set(args.set)
        for key in ("phantom", "seed", "data", "mode"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        if getattr(args, "data", None) is not None and "phantom" not in overrides:
            # presets and ground truth follow the phantom recorded in the sidecar
            side = Path(args.data).with_suffix(".json")
            meta = json.loads(side.read_text()) if side.exists() else {}
            overrides["phantom"] = meta.get("phantom") if meta.get("phantom") in PHANTOM_IDS else None
            if "seed" in meta and "seed" not in overrides:
                overrides["seed"] = meta["seed"]
        cfg = load_config(args.config, overrides).resolved()
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshError, GeometryError, LayoutError, np.linalg.LinAlgError, RuntimeError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
