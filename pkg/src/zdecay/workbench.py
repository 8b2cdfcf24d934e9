"""Experiment orchestration: stages, persisted artifacts, acceptance table and report.

Stages run in the order assemble -> cascade -> mourre -> decay.  Each stage
reads its inputs from the artifacts of the upstream stages in the output
directory, so any stage can be re-run on its own.  All energies and momenta
are in GeV, times in GeV^-1.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import json
import math
import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .dynamics import (EnergyFilter, build_Q, default_filter, default_times, local_decay_trace, onset_comparison,
                       relaxation_trace)
from .errors import ConsistencyError, InvalidArgument, MissingArtifact, ResolutionError
from .fock import NU, NUBAR, algebra_residuals, build_basis, geometric_grid, toy_grid
from .hamiltonian import (assemble, cutoff_family, interior_vectors, load_operator, relative_bound_check,
                          pull_through_residual, save_operator, shell_bound_check, shell_tail_scaling)
from .kernels import (CutoffProfile, bump_form_factor, build_kernel_table, load_kernel_table,
                      power_law_surrogate, save_kernel_table)
from .mourre import (build_conjugate, c2_regularity_check, commutators, interaction_commutator_norm, lap_scan,
                     make_window, mourre_check, relative_commutator_norm, weight_lemma_checks,
                     weight_lemma_norms)
from .partialwave import bump_cutoff
from .spectral import (SectorEigensystem, dense_eigenpairs, form_bound_constants, lanczos_eigenpairs,
                       run_cascade, weyl_probe)

STAGES = ("assemble", "cascade", "mourre", "decay")
ALIASES = {"dynamics": "decay"}
FORMAT_VERSION = 1
UNITS = "energies and momenta in GeV, times in GeV^-1"

EXPECTED = {
    "assemble": ("assemble.json", "kernel_table.zdkt", "H0.zdop", "HI.zdop", "H.zdop"),
    "cascade": ("cascade.json", "cascade_levels.csv", "cascade_vectors.npz"),
    "mourre": ("mourre.json", "lap.csv"),
    "decay": ("decay.json", "decay_trace.csv", "relaxation.csv", "onset.csv"),
}
MANIFEST = "manifest.json"
SUMMARY = "summary.md"


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")
        self.stage = stage


# serialization --------------------------------------------------------------

def jsonable(x):
    """Plain JSON types; non-finite floats become None."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, complex):
        return [jsonable(x.real), jsonable(x.imag)]
    return x


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj))


def read_json(path: Path) -> dict:
    if not path.is_file():
        raise MissingArtifact(f"missing artifact {path.name} in {path.parent}")
    return json.loads(path.read_text())


def write_csv(path: Path, header: list, rows, comment: str = UNITS) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# units: {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(jsonable(obj), sort_keys=True).encode()).hexdigest()


def instance_key(cfg: ExperimentConfig) -> str:
    """Hash of the config sections that determine the operators."""
    d = cfg.data
    return _hash({k: d[k] for k in ("physics", "grid", "caps", "kernel")})[:16]


def _pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with cf.ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# instance construction ------------------------------------------------------

def build_grid(cfg: ExperimentConfig):
    gd, m_z = cfg.data["grid"], cfg.m_z
    if gd["kind"] == "toy":
        return toy_grid(*[int(v) for v in gd["toy_nodes"]], m_z=m_z)
    p_min = gd["p_min"] if gd["p_min"] is not None else m_z / 256
    p_max = gd["p_max"] if gd["p_max"] is not None else 2 * m_z
    k_max = gd["k_max"] if gd["k_max"] is not None else 1.2 * m_z
    return geometric_grid(int(gd["n_nodes"]), float(p_min), float(p_max), n_boson=int(gd["n_boson"]),
                          k_max=float(k_max), polarizations=tuple(int(p) for p in gd["polarizations"]), m_z=m_z)


def build_table(cfg: ExperimentConfig, grid):
    k, m_z = cfg.data["kernel"], cfg.m_z
    profile = CutoffProfile(f=bump_cutoff(float(k["radius"])), G1=bump_form_factor(m_z, k["edge"]),
                            G2=bump_form_factor(m_z, k["edge"]), amplitude=float(k["amplitude"]),
                            support=float(k["edge"]) * m_z)
    if k["mode"] == "quadrature":
        return build_kernel_table(grid, profile, "quadrature", resolution=float(k["resolution"]),
                                  derivatives=bool(k["derivatives"]))
    sur = power_law_surrogate(float(k["amplitude"]), float(k["radius"]), m_z, float(k["edge"]))
    return build_kernel_table(grid, profile, "surrogate", surrogate=sur, derivatives=bool(k["derivatives"]))


def caps(cfg: ExperimentConfig):
    c = cfg.data["caps"]
    return int(c["nu"]), int(c["nubar"]), int(c["boson"])


def load_instance(cfg: ExperimentConfig, out: Path, g: float):
    """Rebuild the Hamiltonian set from the persisted kernel table and check it against the stored operators."""
    head = read_json(out / "assemble.json")
    if head.get("instance_key") != instance_key(cfg):
        raise ConsistencyError(f"artifacts in {out} were assembled with a different instance configuration")
    for name in ("kernel_table.zdkt", "H0.zdop", "HI.zdop"):
        if not (out / name).is_file():
            raise MissingArtifact(f"missing artifact {name} in {out}")
    table = load_kernel_table(out / "kernel_table.zdkt")
    basis = build_basis(table.grid, caps(cfg))
    hset = assemble(basis, table, g)
    for name, op in (("H0", hset.H0), ("HI", hset.HI)):
        stored = load_operator(out / f"{name}.zdop")
        diff = abs(stored.matrix - op.matrix)
        if diff.nnz and diff.max() > 1e-12:
            raise ConsistencyError(f"stored {name} differs from the reassembled operator by {diff.max():.3e}")
    return hset


# stages ---------------------------------------------------------------------

def _herm_residual(M) -> float:
    d = M - M.conj().T
    return float(abs(d).max()) if d.nnz else 0.0


def _pull_through(hset, gs, seed: int, trials: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    psi = interior_vectors(hset.basis, trials, rng)
    out = {}
    for g in gs:
        hs = hset.with_coupling(g)
        res = [pull_through_residual(hs, sp_, m, psi) for sp_ in (NU, NUBAR)
               for m in range(hs.basis.grid.n_nu if sp_ == NU else hs.basis.grid.n_nubar)]
        out[repr(float(g))] = max(res)
    return out


def stage_assemble(cfg: ExperimentConfig, out: Path) -> dict:
    chk = cfg.data["checks"]
    g = float(cfg.data["cascade"]["g_main"])
    grid = build_grid(cfg)
    table = build_table(cfg, grid)
    basis = build_basis(grid, caps(cfg))
    hset = assemble(basis, table, g)
    save_kernel_table(table, out / "kernel_table.zdkt")
    save_operator(hset.H0, out / "H0.zdop")
    save_operator(hset.HI, out / "HI.zdop")
    save_operator(hset.H, out / "H.zdop")

    alg = algebra_residuals(basis)
    herm = {name: _herm_residual(op.matrix) for name, op in (("H0", hset.H0), ("HI", hset.HI), ("H", hset.H))}
    rel = relative_bound_check(hset, int(chk["trials"]), tuple(chk["eps"]), seed=int(cfg.data["seed"]))

    # the toy instance for the pull-through identity: two modes per species, one boson mode
    toy = build_basis(toy_grid(2, 2, 1, m_z=cfg.m_z), (2, 2, 2))
    toy_table = build_kernel_table(toy.grid, mode="surrogate",
                                   surrogate=power_law_surrogate(m_z=cfg.m_z), derivatives=False)
    pts = [float(x) for x in chk["pull_through_g"]]
    pull = {"instance": _pull_through(hset, pts, int(cfg.data["seed"])),
            "toy": _pull_through(assemble(toy, toy_table, 0.0), pts, int(cfg.data["seed"]))}
    pull["max"] = max(max(v.values()) for v in pull.values())

    sectors = {f"{k[0]},{k[1]}": len(v) for k, v in basis.sectors().items()}
    return {
        "instance_key": instance_key(cfg), "g": g, "free_hamiltonian": g == 0.0,
        "note": "free Hamiltonian" if g == 0.0 else "interacting Hamiltonian",
        "dim": basis.dim, "sector_sizes": sectors, "caps": list(caps(cfg)),
        "grid": {"nu_p": grid.nu_p, "nu_w": grid.nu_w, "nubar_p": grid.nubar_p, "k": grid.k,
                 "polarization": grid.k_pol, "m_z": grid.m_z},
        "kernel": {"mode": table.mode, "meta": table.meta, "norms": table.norms()},
        "nnz": {"H0": hset.H0.matrix.nnz, "HI": hset.HI.matrix.nnz, "H": hset.H.matrix.nnz},
        "algebra": {**alg, "hermiticity": herm, "max": max(max(alg.values()), max(herm.values()))},
        "relative_bound": rel,
        "pull_through": pull,
    }


def _lanczos_vs_dense(instances, tol: float, limit: int, seed: int, count: int = 4) -> dict:
    rows = []
    for name, M in instances:
        n = M.shape[0]
        if n > limit or n < 2:
            continue
        k = min(count, n - 1)
        d = dense_eigenpairs(M, k).values
        lz = lanczos_eigenpairs(M, k, tol=1e-12, seed=seed).values
        rows.append({"name": name, "dim": n, "count": k, "max_abs_diff": float(np.max(np.abs(d - lz)))})
    return {"instances": rows, "tol": tol,
            "max_abs_diff": max((r["max_abs_diff"] for r in rows), default=None)}


def stage_cascade(cfg: ExperimentConfig, out: Path) -> dict:
    c, chk = cfg.data["cascade"], cfg.data["checks"]
    seed = int(cfg.data["seed"])
    g_main = float(c["g_main"])
    hset = load_instance(cfg, out, g_main)
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        family = cutoff_family(hset, int(c["depth"]), cfg.sigma0, cfg.gamma)
    notes += [str(w.message) for w in caught]
    fb = form_bound_constants(family)

    def one(g):
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            rec = run_cascade(family, float(g))
        return rec, [str(x.message) for x in w]

    gs = sorted({float(g) for g in c["g"]} | {g_main})
    results = _pmap(one, gs, int(cfg.data["workers"]))
    records, vectors = [], {}
    for rec, msgs in results:
        notes += msgs
        s = rec.scalars()
        s["gs_vacuum_overlap"] = float(abs(rec.phi_gs[0]) ** 2)
        records.append(s)
        vectors[f"g={rec.g!r}/phi_gs"] = rec.phi_gs
        for n, phi in enumerate(rec.phi):
            vectors[f"g={rec.g!r}/phi_{n}"] = phi
    np.savez(out / "cascade_vectors.npz", **vectors)
    rows = [(r["g"], n, r["sigma"][n], r["E_n"][n], r["gap"][n], r["gap_free"][n], r["overlap_vac"][n],
             r["N_plus"][n], r["N_minus"][n]) for r in records for n in range(len(r["sigma"]))]
    write_csv(out / "cascade_levels.csv", ["g", "n", "sigma", "E_n", "gap", "gap_free", "overlap_vac",
                                           "N_plus", "N_minus"], rows)

    scaling = shell_tail_scaling(family) if len(family.levels) >= 2 else {"note": "fewer than 2 levels"}
    if len(family.levels) >= 2:
        scaling["shell_bounds"] = [shell_bound_check(family, n, int(chk["trials"]), seed)
                                   for n in range(len(family.levels) - 1)]
    rec_main = next(r for r, _ in results if r.g == g_main)
    grid = hset.basis.grid
    lam = float(c["weyl_lambda"])
    lo, hi = min(grid.nu_p.min(), grid.nubar_p.min()), max(grid.nu_p.max(), grid.nubar_p.max())
    weyl = (weyl_probe(hset, lam, int(c["weyl_length"]), ground=(rec_main.E, rec_main.phi_gs))
            if lo <= lam <= hi else {"note": f"lambda={lam} outside the grid energy range"})

    inst = [(f"K_{lv.n}", lv.Kn.matrix) for lv in family.levels]
    eig_blocks = [(f"H sector {k}", hset.H.matrix[idx][:, idx]) for k, idx in hset.basis.sectors().items()]
    toy = build_basis(toy_grid(m_z=cfg.m_z), (1, 1, 1))
    toy_tab = build_kernel_table(toy.grid, mode="surrogate", surrogate=power_law_surrogate(m_z=cfg.m_z),
                                 derivatives=False)
    inst.append(("toy H", assemble(toy, toy_tab, g_main).H.matrix))
    inst.append(("H", hset.H.matrix))
    lz = _lanczos_vs_dense(inst + eig_blocks, float(chk["lanczos_tol"]), int(chk["dense_limit"]), seed)

    return {
        "instance_key": instance_key(cfg), "g_main": g_main, "depth_requested": int(c["depth"]),
        "depth": len(family.levels) - 1, "sigma": family.sigmas, "gamma": family.gamma,
        "sub_dims": [lv.sub_basis.dim for lv in family.levels],
        "form_bound": fb, "C_gap": fb["C_gap"], "records": records, "scaling": scaling, "weyl": weyl,
        "lanczos": lz, "notes": sorted(set(notes)),
    }


def _record_for(cascade: dict, g: float) -> Optional[dict]:
    return next((r for r in cascade["records"] if r["g"] == g), None)


def stage_mourre(cfg: ExperimentConfig, out: Path) -> dict:
    m = cfg.data["mourre"]
    cascade = read_json(out / "cascade.json")
    g_main = float(cfg.data["cascade"]["g_main"])
    base = load_instance(cfg, out, g_main)
    c_gap = float(cascade["C_gap"])
    s = float(m["s"])
    levels = [int(n) for n in m["levels"]]
    weight = None
    try:
        weight = build_Q(base.basis)
    except ResolutionError as exc:
        weight_note = str(exc)
    else:
        weight_note = None

    conjs = {}
    for n in levels:
        try:
            conjs[n] = build_conjugate(base.basis, n, cfg.sigma0, cfg.gamma)
        except ResolutionError as exc:
            conjs[n] = exc

    def per_g(g):
        hs = base.with_coupling(g)
        eig = SectorEigensystem.build(hs.H, hs.basis)
        E = float(eig.values.min())
        rec = _record_for(cascade, g)
        if rec is not None and abs(rec["E"] - E) > 1e-9 * max(1.0, abs(E)):
            raise ConsistencyError(f"g={g}: ground energy {E} differs from the cascade value {rec['E']}")
        spectrum = eig.low(E + cfg.m_z / 3)
        out_levels, lap, wl = [], [], []
        for n in levels:
            conj = conjs[n]
            if isinstance(conj, Exception):
                out_levels.append({"n": n, "status": "unresolved", "reason": str(conj)})
                continue
            win = make_window(n, E, g, c_gap, cfg.sigma0, cfg.gamma, float(m["rho_floor"]))
            C1, C2, consistency = commutators(hs, conj)
            entry = {"n": n, "status": "ok", "sigma": win.sigma, "consistency": consistency,
                     "mourre": mourre_check(hs, conj, win, spectrum),
                     "relative_norm_C1": relative_commutator_norm(C1, hs),
                     "relative_norm_C2": relative_commutator_norm(C2, hs),
                     "interaction_commutator_norm": interaction_commutator_norm(hs, conj)}
            if g == g_main:
                entry["c2_regularity"] = c2_regularity_check(hs, conj, spectrum.vectors[:, :10])
                lap.append(lap_scan(hs, conj, win, s, eig, int(m["n_re"]), im_floor=float(m["im_floor"])))
                if weight is not None:
                    wl.append(weight_lemma_norms(hs, conj, win, spectrum, weight, s))
            out_levels.append(entry)
        rho = make_window(0, E, g, c_gap, cfg.sigma0, cfg.gamma, float(m["rho_floor"])).rho
        return {"g": g, "E": E, "rho": rho, "levels": out_levels}, lap, wl

    gs = sorted({float(g) for g in m["g"]} | {g_main})
    res = _pmap(per_g, gs, int(cfg.data["workers"]))
    records = [r for r, _, _ in res]
    lap = next(l for (r, l, _) in res if r["g"] == g_main)
    wl = next(w for (r, _, w) in res if r["g"] == g_main)
    rows = [(rec["n"], rec["sigma"], im, w, u) for rec in lap
            for im, w, u in zip(rec["im"], rec["weighted_vs_im"], rec["unweighted_vs_im"])]
    write_csv(out / "lap.csv", ["n", "sigma", "im_z", "weighted_norm", "unweighted_norm"], rows)
    weights = {"norms": wl, "checks": weight_lemma_checks(wl) if len(wl) >= 2 else None,
               "note": weight_note}
    return {"instance_key": instance_key(cfg), "g_main": g_main, "C_gap": c_gap, "s": s, "levels": levels,
            "records": records, "lap": lap, "weight_lemmas": weights}


class _IdentityWeight:
    """Stand-in for <Q>^s when the grid cannot carry the position weight."""

    def apply(self, X, s):
        return X


def stage_decay(cfg: ExperimentConfig, out: Path) -> dict:
    d, m = cfg.data["dynamics"], cfg.data["mourre"]
    cascade = read_json(out / "cascade.json")
    g_main = float(cfg.data["cascade"]["g_main"])
    base = load_instance(cfg, out, g_main)
    basis = base.basis
    s, mu = float(d["s"]), float(d["mu"])
    result = {"instance_key": instance_key(cfg), "g_main": g_main, "s": s, "mu": mu}
    try:
        weight = build_Q(basis)
    except ResolutionError as exc:
        weight, result["status"], result["reason"] = None, "unresolved", str(exc)

    # free limit: chi supported below the first excitation, so only the vacuum survives
    free_eig = SectorEigensystem.build(base.H0, basis)
    vals0 = np.sort(free_eig.values)
    gap0 = float(vals0[1] - vals0[0])
    free = free_eig.low(vals0[0] + gap0)
    chi0 = EnergyFilter(free.E + 0.25 * gap0, free.E + 0.5 * gap0)
    times0 = default_times(1e3, float(d["t_min"]), int(d["n_times"]))
    tr0 = local_decay_trace(free, weight or _IdentityWeight(), s, mu, chi0, times=times0)
    result["free"] = {"E": free.E, "first_excitation": gap0, "chi": [chi0.plateau, chi0.stop],
                      "ground_vacuum_overlap": float(abs(free.ground[0]) ** 2), "max_r": float(np.max(tr0.r)),
                      "weight": "Q" if weight is not None else "identity"}
    if weight is None:
        for name in EXPECTED["decay"][1:]:
            write_csv(out / name, ["t", "r"], [])
        result.update(trace=None, relaxation=None, onset=None)
        return result
    result["status"] = "ok"

    eig = SectorEigensystem.build(base.H, basis)
    E = float(eig.values.min())
    spectrum = eig.low(E + cfg.m_z / 3)
    rho = make_window(0, E, g_main, float(cascade["C_gap"]), cfg.sigma0, cfg.gamma, float(m["rho_floor"])).rho
    chi = default_filter(E, rho, cfg.sigma0, cfg.m_z)
    if d["chi_plateau"] is not None or d["chi_stop"] is not None:
        chi = EnergyFilter(E + float(d["chi_plateau"] if d["chi_plateau"] is not None else chi.plateau - E),
                           E + float(d["chi_stop"] if d["chi_stop"] is not None else chi.stop - E))
    probe = local_decay_trace(spectrum, weight, s, mu, chi, times=[0.0], m_z=cfg.m_z)
    times = default_times(probe.T_H, float(d["t_min"]), int(d["n_times"]))
    tr = local_decay_trace(spectrum, weight, s, mu, chi, times=times, m_z=cfg.m_z)
    tr.to_csv(out / "decay_trace.csv")
    result["trace"] = {"E": E, "rho": rho, "chi": [chi.plateau, chi.stop], "T_H": tr.T_H,
                       "exponent": tr.exponent, "target": tr.target, "fit_window": list(tr.fit_window),
                       "usable": tr.usable, "status": tr.status, "r0": float(tr.r[0]), "r_end": float(tr.r[-1])}

    rel = relaxation_trace(spectrum, weight, s, chi, basis.vacuum(), np.concatenate([[0.0], times]))
    write_csv(out / "relaxation.csv", ["t", "value", "deviation"],
              zip(rel["times"], rel["value"], rel["deviation"]))
    half = len(rel["deviation"]) // 2
    result["relaxation"] = {"limit": rel["limit"], "initial_deviation": float(rel["deviation"][0]),
                            "late_mean_deviation": float(np.mean(rel["deviation"][half:]))}

    wins, conjs = [], []
    for n in d["onset_levels"]:
        try:
            conjs.append(build_conjugate(basis, int(n), cfg.sigma0, cfg.gamma))
        except ResolutionError:
            continue
        wins.append(make_window(int(n), E, g_main, float(cascade["C_gap"]), cfg.sigma0, cfg.gamma,
                                float(m["rho_floor"])))
    if len(wins) >= 2:
        on = onset_comparison(spectrum, wins, conjs, weight, s, times, int(cfg.data["seed"]))
        write_csv(out / "onset.csv", ["n", "sigma", "q_onset", "a_onset"],
                  zip(on["levels"], on["sigma"], on["q_onset"], on["a_onset"]))
        result["onset"] = on
    else:
        write_csv(out / "onset.csv", ["n", "sigma", "q_onset", "a_onset"], [])
        result["onset"] = None
    return result


STAGE_FUNCS = {"assemble": stage_assemble, "cascade": stage_cascade, "mourre": stage_mourre,
               "decay": stage_decay}


# acceptance -----------------------------------------------------------------

@dataclass
class Check:
    id: int
    title: str
    status: str          # PASS, FAIL or SKIP
    detail: str

    def line(self) -> str:
        return f"{self.status} {self.id:2d} {self.title}: {self.detail}"


TITLES = {
    1: "Algebra exactness", 2: "Oracle equivalence", 3: "Free limit", 4: "Relative bounds",
    5: "Cascade monotonicity and convergence", 6: "Spectral gap", 7: "Vacuum overlap",
    8: "Shell/tail scalings", 9: "Pull-through", 10: "Mourre estimate", 11: "LAP scaling",
    12: "Weight lemmas", 13: "Uniform local decay", 14: "Determinism",
}
REQUIRES = {1: ("assemble",), 2: ("cascade",), 3: ("cascade", "decay"), 4: ("assemble",), 5: ("cascade",),
            6: ("cascade",), 7: ("cascade",), 8: ("cascade",), 9: ("assemble",), 10: ("mourre",),
            11: ("mourre",), 12: ("mourre",), 13: ("decay",), 14: ("determinism",)}

TOL = {
    "algebra": 1e-12, "lanczos": 1e-9, "free": 1e-12, "monotone": 1e-10, "energy_slope": (2.0, 0.3),
    "min_levels": 4, "gap_spread": 2.0, "delta_max": 0.1, "shell_slope_min": 1.0, "tail_slope": (1.0, 0.25),
    "pull_through": 1e-10, "lap_spread": 3.0, "lap_levels": 3, "hardy": (1.0, 0.3), "q_phi": (0.5, 0.25),
    "a_q": (1.0, 0.3), "q_phi_a": (0.5, 0.25), "decay_margin": 0.3, "onset_spread": 2.0,
    "a_scaling": (0.5, 2.0),
}


def _within(x, target) -> bool:
    c, w = target
    return x is not None and abs(x - c) <= w


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)


def _c1(a):
    v = a["algebra"]["max"]
    return v <= TOL["algebra"], f"max residual {_fmt(v)} (CAR, cross-species, mixed, CCR, H - H^+)"


def _c2(c):
    lz = c["lanczos"]
    if not lz["instances"]:
        return None, "no instance with dimension <= dense limit"
    v = lz["max_abs_diff"]
    return v <= TOL["lanczos"], f"max |Lanczos - dense| {_fmt(v)} over {len(lz['instances'])} instances"


def _c3(c, d):
    r = _record_for(c, 0.0)
    if r is None:
        return None, "g = 0 not in the cascade g list"
    f = d["free"]
    ok = abs(r["E"]) <= TOL["free"] and r["gs_vacuum_overlap"] >= 1 - TOL["free"] and f["max_r"] <= TOL["free"]
    return ok, f"E = {_fmt(r['E'])}, |<Omega, phi_gs>|^2 = {_fmt(r['gs_vacuum_overlap'])}, max r(t) = {_fmt(f['max_r'])}"


def _c4(a):
    rb = a["relative_bound"]
    return (rb["violations"] == 0 and rb["trials"] >= 200,
            f"{rb['violations']} violations over {rb['trials']} vectors, max ratio "
            + ", ".join(f"eps={k}: {_fmt(v)}" for k, v in rb["max_ratio"].items()))


def _c5(c):
    r = _record_for(c, 0.05)
    if r is None:
        return None, "g = 0.05 not in the cascade g list"
    E_n = np.array(r["E_n"])
    mono = bool(np.all(np.diff(E_n) <= TOL["monotone"]) and np.all(E_n <= TOL["monotone"]))
    slope = r["checks"]["energy_slope"]
    L = len(E_n)
    if L < TOL["min_levels"]:
        return None, f"only {L} levels resolved (monotone: {mono})"
    ok = mono and _within(slope, TOL["energy_slope"])
    return ok, f"monotone and nonpositive: {mono}; slope of |E - E_n| vs sigma_n {_fmt(slope)} over {L} levels (target 2 +- 0.3)"


def _c6(c):
    parts, ok = [], True
    C = c["C_gap"]
    for g in (0.01, 0.05):
        r = _record_for(c, g)
        if r is None:
            return None, f"g = {g} not in the cascade g list"
        ratio = np.array(r["checks"]["gap_ratio"])
        if len(ratio) < 2:
            return None, "stability across levels needs at least 2 levels"
        holds = bool(np.all(ratio >= 1 - C * g))
        fit = np.array(r["checks"].get("C_fit", []), dtype=float)
        finite = fit.size > 0 and bool(np.all(np.isfinite(fit)))
        same_sign = finite and (np.all(fit > 0) or np.all(fit < 0))
        spread = float(np.max(np.abs(fit)) / np.min(np.abs(fit))) if same_sign else float("inf")
        stable = spread < TOL["gap_spread"]
        ok &= holds and stable
        parts.append(f"g={g}: gap/sigma >= 1 - {C:.3g} g {holds}, C_fit {np.round(fit, 3).tolist()} spread {_fmt(spread)}")
    return ok, "; ".join(parts)


def _c7(c):
    a, b = _record_for(c, 0.01), _record_for(c, 0.1)
    if a is None or b is None:
        return None, "g = 0.01 and 0.1 needed"
    da, db = a["checks"]["delta_g"], b["checks"]["delta_g"]
    return da < db and da <= TOL["delta_max"], f"delta_0.01 = {_fmt(da)}, delta_0.1 = {_fmt(db)}"


def _c8(c):
    sc = c["scaling"]
    if "shell_slope" not in sc:
        return None, sc.get("note", "no scaling data")
    sh, tl = sc["shell_slope"], sc["tail_slope"]
    ok = sh is not None and sh >= TOL["shell_slope_min"] and _within(tl, TOL["tail_slope"])
    return ok, f"shell slope {_fmt(sh)} (>= 1), tail slope {_fmt(tl)} (1 +- 0.25)"


def _c9(a):
    p = a["pull_through"]
    return p["max"] <= TOL["pull_through"], (
        f"max residual {_fmt(p['max'])} at g in {sorted(p['instance'])} on the configured and toy instances")


def _c10(m):
    parts, ok, seen = [], True, 0
    for rec in m["records"]:
        if rec["g"] not in (0.0, 0.01, 0.05):
            continue
        for lv in rec["levels"]:
            if lv["status"] != "ok" or lv["mourre"]["status"] != "ok":
                continue
            seen += 1
            mo = lv["mourre"]
            ok &= bool(mo["passed"])
            parts.append(f"g={rec['g']} n={lv['n']}: {_fmt(mo['lambda_min'])} vs {_fmt(mo['threshold'])}")
    if not seen:
        return None, "no level with a nonempty window"
    return ok, "; ".join(parts)


def _c11(m):
    vals = [r["sup_times_sigma"] for r in m["lap"]]
    if len(vals) < TOL["lap_levels"]:
        return None, f"LAP evaluated on {len(vals)} levels"
    spread = max(vals) / min(vals)
    return spread < TOL["lap_spread"], f"sup * sigma_n = {[round(v, 3) for v in vals]}, spread {_fmt(spread)}"


def _c12(m):
    ch = m["weight_lemmas"]["checks"]
    if ch is None:
        return None, m["weight_lemmas"].get("note") or "fewer than 2 levels"
    sl = {"Hardy": (ch["hardy_slope"], TOL["hardy"]), "Q-phi": (ch["Q_phi_slope"], TOL["q_phi"]),
          "A-Q": (ch["A_Q_slope"], TOL["a_q"]), "Q-phi-A": (ch["Q_phi_A_slope"], TOL["q_phi_a"])}
    ok = all(_within(v, t) for v, t in sl.values())
    return ok, ", ".join(f"{k} {_fmt(v)} ({t[0]} +- {t[1]})" for k, (v, t) in sl.items())


def _c13(d):
    tr = d["trace"]
    if tr is None:
        return None, d.get("reason", "no decay trace")
    expo = tr["exponent"]
    bound = -(d["s"] - d["mu"]) + TOL["decay_margin"]
    ok = expo is not None and expo <= bound
    detail = f"exponent {_fmt(expo)} (<= {bound:.3g}) on [{_fmt(tr['fit_window'][0])}, {_fmt(tr['fit_window'][1])}]"
    on = d.get("onset")
    if on is None:
        return (ok if expo is not None else None), detail + "; onset comparison unavailable"
    q = on["q_spread"]
    a = on["a_ratio_per_sigma_ratio"]
    lo, hi = TOL["a_scaling"]
    a_ok = bool(a) and all(x is not None and lo <= x <= hi for x in a)
    q_ok = q is not None and q < TOL["onset_spread"]
    return ok and a_ok and q_ok, detail + f"; Q-onset spread {_fmt(q)} (< 2); A-onset ratio / sigma ratio {a}"


def _c14(det):
    return bool(det["identical"]), f"stages {det['stages']} re-run: " + (
        "identical JSON" if det["identical"] else f"differences in {det['differing']}")


EVALUATORS = {1: _c1, 2: _c2, 3: _c3, 4: _c4, 5: _c5, 6: _c6, 7: _c7, 8: _c8, 9: _c9, 10: _c10, 11: _c11,
              12: _c12, 13: _c13, 14: _c14}


def evaluate(results: dict) -> list:
    """Acceptance checks evaluable from the given stage results (missing stages are omitted)."""
    out = []
    for cid in sorted(EVALUATORS):
        req = REQUIRES[cid]
        if any(results.get(k) is None for k in req):
            continue
        ok, detail = EVALUATORS[cid](*[results[k] for k in req])
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        out.append(Check(cid, TITLES[cid], status, detail))
    return out


# orchestration --------------------------------------------------------------

def _load_manifest(out: Path) -> Optional[dict]:
    p = out / MANIFEST
    return json.loads(p.read_text()) if p.is_file() else None


def _new_manifest(cfg: ExperimentConfig) -> dict:
    return {"format": "zdecay.manifest", "version": FORMAT_VERSION, "package_version": __version__,
            "units": UNITS, "config": cfg.data, "config_hash": cfg.hash(), "seed": cfg.data["seed"],
            "stages": {}, "determinism": None}


def run_stage(cfg: ExperimentConfig, stage: str, out: Path) -> dict:
    """Run one stage, write its JSON, and return the payload."""
    payload = STAGE_FUNCS[stage](cfg, out)
    doc = {"format": f"zdecay.{stage}", "version": FORMAT_VERSION, "units": UNITS, "seed": cfg.data["seed"],
           **payload}
    write_json(out / f"{stage}.json", doc)
    return json.loads(dumps(doc))


def _normalize(stages) -> list:
    out = []
    for s in stages:
        s = ALIASES.get(s, s)
        if s not in STAGES:
            raise InvalidArgument(f"unknown stage {s!r}; choose from {STAGES}")
        out.append(s)
    return [s for s in STAGES if s in out]


def determinism_check(cfg: ExperimentConfig, out: Path, stages) -> dict:
    """Re-run ``stages`` in a scratch directory and compare the JSON outputs byte for byte."""
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for s in STAGES:
            if s in stages:
                continue
            if s == "assemble" and any(x in stages for x in STAGES[1:]):
                for name in EXPECTED["assemble"]:
                    (tmp / name).write_bytes((out / name).read_bytes())
            elif (out / f"{s}.json").is_file():
                (tmp / f"{s}.json").write_bytes((out / f"{s}.json").read_bytes())
        differing = []
        for s in stages:
            run_stage(cfg, s, tmp)
            if (tmp / f"{s}.json").read_bytes() != (out / f"{s}.json").read_bytes():
                differing.append(s)
    return {"stages": list(stages), "identical": not differing, "differing": differing}


def run(cfg: ExperimentConfig, stages=STAGES, out=None, determinism: Optional[bool] = None,
        log=print) -> tuple:
    """Execute ``stages`` and write artifacts, manifest and summary; returns (exit status, directory).

    Status is 0 when every evaluated acceptance check passes and 1 otherwise.
    A failing stage raises StageError after recording it in the manifest.
    """
    stages = _normalize(stages)
    out = Path(out if out is not None else cfg.data["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    man = _load_manifest(out)
    if man is None or man.get("config_hash") != cfg.hash():
        man = _new_manifest(cfg)
    for stage in stages:
        t0 = time.perf_counter()
        log(f"[{stage}] running")
        try:
            run_stage(cfg, stage, out)
        except Exception as exc:
            man["stages"][stage] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                    "elapsed_s": round(time.perf_counter() - t0, 3)}
            write_json(out / MANIFEST, man)
            raise StageError(stage, exc) from exc
        files = [n for n in EXPECTED[stage] if (out / n).is_file()]
        man["stages"][stage] = {"status": "ok", "files": files, "elapsed_s": round(time.perf_counter() - t0, 3),
                                "sha256": {n: hashlib.sha256((out / n).read_bytes()).hexdigest()
                                           for n in files if n.endswith(".json")}}
        write_json(out / MANIFEST, man)
        log(f"[{stage}] done in {time.perf_counter() - t0:.1f} s")
    determinism = bool(cfg.data["checks"]["determinism"]) if determinism is None else determinism
    if determinism and stages:
        t0 = time.perf_counter()
        log("[determinism] re-running " + ", ".join(stages))
        man["determinism"] = determinism_check(cfg, out, stages)
        write_json(out / MANIFEST, man)
        log(f"[determinism] done in {time.perf_counter() - t0:.1f} s")
    _, checks = report(out)
    for c in checks:
        log(c.line())
    return (1 if any(c.status == "FAIL" for c in checks) else 0), out


# report ---------------------------------------------------------------------

def _expected_files() -> list:
    return [MANIFEST] + [n for s in STAGES for n in EXPECTED[s]]


def collect(out) -> dict:
    """Stage results recorded as completed in the manifest (never recomputed)."""
    out = Path(out)
    man = _load_manifest(out)
    if man is None:
        raise MissingArtifact(f"no {MANIFEST} in {out}; expected files: " + ", ".join(_expected_files()))
    results = {"manifest": man, "determinism": man.get("determinism")}
    for stage in STAGES:
        info = man["stages"].get(stage)
        if info is None or info.get("status") != "ok":
            results[stage] = None
            continue
        missing = [n for n in EXPECTED[stage] if not (out / n).is_file()]
        if missing:
            raise MissingArtifact(f"stage {stage!r} artifacts missing in {out}: " + ", ".join(missing))
        results[stage] = read_json(out / f"{stage}.json")
    return results


def _table(header, rows) -> list:
    if not rows:
        return ["(no entries)"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return lines


def report(out) -> tuple:
    """Write summary.md from the artifacts in ``out``; returns (text, checks)."""
    out = Path(out)
    res = collect(out)
    man = res["manifest"]
    checks = evaluate(res)
    L = ["# zdecay run summary", "", f"Units: {UNITS}.", f"Config hash: `{man['config_hash']}`",
         f"Stages: {', '.join(s for s in STAGES if res[s] is not None) or 'none'}", ""]
    a = res["assemble"]
    if a is not None:
        L += ["## Assembly", "", f"g = {a['g']} ({a['note']}), dimension {a['dim']}, nnz(H) = {a['nnz']['H']}.", ""]
    c = res["cascade"]
    if c is not None:
        L += ["## Cascade", "", f"Depth {c['depth']} (requested {c['depth_requested']}), C_gap = {_fmt(c['C_gap'])}.", ""]
        L += ["### E_n table", ""]
        rows = []
        for r in c["records"]:
            for n, sig in enumerate(r["sigma"]):
                rows.append([r["g"], n, sig, r["E_n"][n], r["gap"][n], r["overlap_vac"][n]])
        L += _table(["g", "n", "sigma_n", "E_n", "gap(K_n)", "vacuum overlap"], rows) + [""]
        L += ["### Slope fit", ""]
        L += _table(["g", "E", "slope of |E - E_n| vs sigma_n"],
                    [[r["g"], r["E"], r["checks"]["energy_slope"]] for r in c["records"]]) + [""]
        for n in c["notes"]:
            L.append(f"- note: {n}")
        L.append("")
    m = res["mourre"]
    if m is not None:
        L += ["## Mourre estimate and LAP", ""]
        rows = [[rec["g"], lv["n"], lv["mourre"]["count"], lv["mourre"]["lambda_min"], lv["mourre"]["threshold"]]
                for rec in m["records"] for lv in rec["levels"] if lv["status"] == "ok"]
        L += _table(["g", "n", "window states", "lambda_min", "threshold"], rows) + [""]
        L += _table(["n", "sigma_n", "sup weighted norm", "sup * sigma_n"],
                    [[r["n"], r["sigma"], r["sup"], r["sup_times_sigma"]] for r in m["lap"]]) + [""]
        L += ["Plot data: `lap.csv`.", ""]
    d = res["decay"]
    if d is not None and d["trace"] is not None:
        tr = d["trace"]
        L += ["## Local decay", "", f"T_H = {_fmt(tr['T_H'])}, fitted exponent {_fmt(tr['exponent'])} "
              f"(target {_fmt(tr['target'])}), {tr['usable']} points in the fit window.",
              "Plot data: `decay_trace.csv`, `relaxation.csv`, `onset.csv`.", ""]
    if checks:
        L += ["## Acceptance", ""]
        for ch in checks:
            L += [f"### {ch.id}. {ch.title}: {ch.status}", "", ch.detail, ""]
    text = "\n".join(L)
    (out / SUMMARY).write_text(text)
    return text, checks
