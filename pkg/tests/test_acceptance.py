"""Acceptance criteria 1-8, one PASS/FAIL line each.

The experiment runs are cached per module.  Criteria that fail are left
failing; see the decision ledger for the analysis.
"""

import time

import numpy as np
import pytest

from cemshape.cli import RunConfig
from cemshape.geometry import hausdorff_distance
from cemshape.mesher import default_h
from cemshape.model import ForwardModel
from cemshape.phantoms import make_phantom, simulate
from cemshape.priors import NoiseModel
from cemshape.recon import reconstruct, relative_l2_error
from cemshape.sensitivities import THRESHOLDS, CoarseCase, check_jacobians, taylor_orders

SEED = 7
MODES = {"i": "fixed-geometry-truth", "ii": "fixed-geometry-guess", "iii": "simultaneous"}


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return emit


def _run(pid, mode):
    cfg = RunConfig(phantom=pid, seed=SEED, mode=mode).resolved()
    ph = make_phantom(pid, SEED)
    data = simulate(ph, SEED)
    t0 = time.perf_counter()
    res = reconstruct(data.voltages, NoiseModel(data.variance), cfg.recon_config(), mode,
                      truth=(ph.boundary.coeffs, ph.layout.angles))
    return ph, data, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def experiments():
    out = {}
    for pid in ("exp2", "exp3"):
        for key, mode in MODES.items():
            ph, data, res, dt = _run(pid, mode)
            err = relative_l2_error(res.state["sigma"], res.grid, ph.sigma, ph.boundary)
            out[pid, key] = {"res": res, "err": err, "time": dt, "data": data}
    return out


def test_1_reciprocity(report):
    worst = 0.0
    for pid in ("exp1", "exp2", "exp3"):
        ph = make_phantom(pid, SEED)
        sol = ForwardModel(ph.z, ph.layout.width).solve(ph.sigma, ph.boundary, ph.layout)
        G = sol.drives.T @ sol.voltages
        worst = max(worst, np.abs(G - G.T).max() / np.abs(G).max())
    assert report(1, worst <= 1e-10, f"max relative asymmetry {worst:.2e} (limit 1e-10) on all three phantoms")


def test_2_jacobian_oracles(report):
    t0 = time.perf_counter()
    rows, n_dofs = check_jacobians(CoarseCase.default())
    dt = time.perf_counter() - t0
    worst = {c: max(e for cc, _, e in rows if cc == c) for c in THRESHOLDS}
    ok = n_dofs <= 1500 and dt < 120 and all(worst[c] <= THRESHOLDS[c] for c in THRESHOLDS)
    detail = ", ".join(f"{c} {worst[c]:.1e}/{THRESHOLDS[c]:.0e}" for c in THRESHOLDS)
    assert report(2, ok, f"{detail}; {n_dofs} unknowns; {dt:.1f} s")


def test_3_taylor_orders(report):
    t0 = time.perf_counter()
    orders = taylor_orders(CoarseCase.default())
    dt = time.perf_counter() - t0
    mins = {l: float(o.min()) for l, (_, o) in orders.items()}
    good = sum(v >= 1.8 for v in mins.values())
    detail = ", ".join(f"l={l}: {v:.2f}" for l, v in mins.items())
    assert report(3, good >= 3 and dt < 120, f"min observed orders {detail}; {good} directions >= 1.8; {dt:.1f} s")


def test_4_experiment1(report):
    ph, _, res, dt = _run("exp1", "simultaneous")
    st1 = res.stages["stage1"]
    hd = hausdorff_distance(res.boundary, ph.boundary)
    ok = st1.converged and st1.iterations <= 15 and hd <= 0.15 and dt < 600
    detail = (f"stage 1 {st1.iterations} iterations (limit 15, converged={st1.converged}), "
              f"Hausdorff {hd:.3f} (limit 0.15), misfit {res.misfit:.1f}, {dt:.0f} s")
    assert report(4, ok, detail)


def test_5_mode_ordering(experiments, report):
    ok = True
    parts = []
    total = sum(v["time"] for v in experiments.values())
    for pid in ("exp2", "exp3"):
        e = {k: experiments[pid, k]["err"] for k in MODES}
        a = e["iii"] <= 1.3 * e["i"]
        b = e["ii"] >= 1.5 * e["iii"]
        ok &= a and b
        parts.append(f"{pid}: err(i) {e['i']:.3f} err(ii) {e['ii']:.3f} err(iii) {e['iii']:.3f} "
                     f"[(iii)<=1.3(i): {'ok' if a else 'no'}, (ii)>=1.5(iii): {'ok' if b else 'no'}]")
    assert report(5, ok and total < 1800, "; ".join(parts) + f"; {total:.0f} s")


def test_6_chi2(experiments, report):
    m = {pid: experiments[pid, "iii"]["res"].misfit for pid in ("exp2", "exp3")}
    ok = all(120 <= v <= 480 for v in m.values())
    assert report(6, ok, ", ".join(f"{p} misfit {v:.1f}" for p, v in m.items()) + " (window [120, 480])")


def test_7_self_convergence(report, capsys):
    ratios = {}
    t0 = time.perf_counter()
    for pid in ("exp1", "exp2", "exp3"):
        ph = make_phantom(pid, SEED)
        h = default_h(ph.boundary)
        U = [ForwardModel(ph.z, ph.layout.width, h_target=h / k).measure(ph.sigma, ph.boundary, ph.layout)
             for k in (1, 2, 4)]
        ratios[pid] = np.linalg.norm(U[2] - U[1]) / np.linalg.norm(U[1] - U[0])
    dt = time.perf_counter() - t0
    with capsys.disabled():
        print(f"\n  info: exp3 (discontinuous inclusions, not mesh-aligned) ratio {ratios['exp3']:.2f}")
    ok = ratios["exp1"] <= 0.6 and ratios["exp2"] <= 0.6 and dt < 300
    assert report(7, ok, f"difference ratios exp1 {ratios['exp1']:.2f}, exp2 {ratios['exp2']:.2f} (limit 0.6); {dt:.0f} s")


def test_8_determinism(experiments, report):
    ph = make_phantom("exp2", SEED)
    csv_same = simulate(ph, SEED).to_csv().encode() == experiments["exp2", "i"]["data"].to_csv().encode()
    _, _, again, _ = _run("exp2", "fixed-geometry-truth")
    phi0 = experiments["exp2", "i"]["res"].phi
    rel = abs(again.phi - phi0) / phi0
    ok = csv_same and rel <= 1e-12
    assert report(8, ok, f"CSV byte-identical: {csv_same}; final Phi relative difference {rel:.1e} (limit 1e-12)")
