"""Offline, online and study phases driven by a :class:`RunConfig`.

Offline: surrogate macro run, clustering, RVE training solves, POD and
(for ``ecm``/``eheim``) hyper-integration. Online: the two-scale run.
Study: an error-vs-m̃ sweep against the fully integrated ROM.

Every phase is timed with a monotonic clock. Failures are re-raised as
:class:`PipelineError` carrying the phase name.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem, hyper, meshgen, rom, sampling
from .config import RunConfig
from .materials import make_material
from .rve import MicroModel, NewtonOptions, condensed_tangent, run_path, write_load_path
from .twoscale import (HFHandler, MacroProblem, ReducedHandler, SimulationResult, SolverOptions,
                       clamped_beam, reaction_error, run_simulation)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


@contextmanager
def _phase(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _mesh(spec) -> fem.Mesh:
    if isinstance(spec, str):
        return fem.load_mesh(spec)
    p = dict(spec)
    gen = p.pop("generator")
    if gen == "rve_with_pore":
        return meshgen.rve_with_pore(**p)
    return meshgen.rectangle(p["length"], p["height"], p["nx"], p["ny"], p["etype"])


def build_micro(cfg: RunConfig) -> MicroModel:
    mats = {int(k): make_material(v) for k, v in cfg["rve"]["materials"].items()}
    return MicroModel(_mesh(cfg["rve"]["mesh"]), mats, options=NewtonOptions(**cfg["micro"]))


def build_macro(cfg: RunConfig) -> tuple[MacroProblem, np.ndarray]:
    m = cfg["macro"]
    problem = clamped_beam(_mesh(m["mesh"]), m["tip"], m["t_end"], m["thickness"])
    times = np.linspace(0.0, m["t_end"], m["steps"] + 1)[1:]
    return problem, times


def solver_options(cfg: RunConfig) -> SolverOptions:
    s = cfg["solver"]
    return SolverOptions(tol=s["tol"], max_iter=s["max_iter"], max_halvings=s["max_halvings"])


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class OfflineArtifacts:
    micro: MicroModel
    problem: MacroProblem
    times: np.ndarray
    clusters: sampling.ClusterResult | None = None
    paths: list = field(default_factory=list)
    basis: rom.ReducedBasis | None = None
    snapshots: hyper.HyperSnapshots | None = None
    scheme: hyper.HyperScheme | None = None
    timings: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def reduced_model(self) -> rom.ReducedModel:
        return rom.ReducedModel(self.micro, self.basis)

    def handler(self, mode: str):
        if mode == "hf":
            return HFHandler(self.micro)
        if mode == "rom":
            return ReducedHandler(self.reduced_model(), "rom")
        return ReducedHandler(hyper.hyper_reduced_model(self.scheme, self.micro, self.basis), mode)


def training_paths(cfg: RunConfig, micro: MicroModel, problem: MacroProblem, times, timings: dict):
    """Surrogate macro run and k-means clustering of the Gauss-point strain paths."""
    with _phase("surrogate", timings):
        dt = float(times[0])
        C0 = condensed_tangent(micro, np.zeros(micro.n), np.zeros(3), micro.init_states(), dt)
        ens = sampling.surrogate_macro_run(problem, C0, times)
    with _phase("clustering", timings):
        s = cfg["sampling"]
        cl = sampling.cluster_paths(ens, s["k"], s["seed"], s["weights"])
    return ens, cl


def train_basis(cfg: RunConfig, micro: MicroModel, paths, timings: dict) -> rom.ReducedBasis:
    with _phase("training", timings):
        cols = [sol.q for p in paths for sol in run_path(micro, p)]
    with _phase("pod", timings):
        r = cfg["rom"]
        return rom.pod(rom.SnapshotMatrix.from_columns(cols), n_modes=r["n_modes"], energy=r["energy"],
                       energy_kind=r["energy_kind"])


def select_scheme(snap: hyper.HyperSnapshots, criteria, mode: str, m_tilde: int) -> hyper.HyperScheme:
    tm = hyper.build_unified_training_matrix(snap, criteria, mode)
    return hyper.select_hyper_scheme(tm, m_tilde)


def run_offline(cfg: RunConfig, out=None) -> OfflineArtifacts:
    """Build and (if ``out`` is given) write all offline artifacts."""
    timings: dict = {}
    with _phase("setup", timings):
        micro = build_micro(cfg)
        problem, times = build_macro(cfg)
    art = OfflineArtifacts(micro, problem, times, timings=timings)
    mode = cfg.mode
    if mode != "hf":
        ens, art.clusters = training_paths(cfg, micro, problem, times, timings)
        art.paths = art.clusters.load_paths()
        art.basis = train_basis(cfg, micro, art.paths, timings)
        needs_snap = mode in ("ecm", "eheim")
        if needs_snap:
            with _phase("hyper_snapshots", timings):
                h = cfg["hyper"]
                art.snapshots = hyper.collect_hyper_snapshots(art.reduced_model(), art.paths, source=h["source"],
                                                              micro=micro)
            if cfg["hyper"]["m_tilde"] is not None:
                with _phase("selection", timings):
                    art.scheme = select_scheme(art.snapshots, cfg["hyper"]["criteria"], mode, cfg["hyper"]["m_tilde"])
    art.report = {
        "mode": mode,
        "timings": dict(timings),
        "offline_time": float(sum(timings.values())),
        "rve": {"elements": micro.mesh.n_elements, "points": micro.disc.n_points, "unknowns": micro.n,
                "V": micro.V, "V_rel": micro.V_rel},
        "macro": {"elements": problem.mesh.n_elements, "gauss_points": problem.n_gp, "steps": len(times)},
    }
    if art.clusters is not None:
        art.report["clusters"] = {"k": len(art.clusters.centroids), "inertia": art.clusters.inertia,
                                  "sizes": np.bincount(art.clusters.labels).tolist()}
    if art.basis is not None:
        art.report["basis"] = {"n_modes": art.basis.n_modes,
                               "energy": float(art.basis.energy[art.basis.n_modes - 1])}
    if art.scheme is not None:
        art.report["scheme"] = {"m_tilde": len(art.scheme.entities), "residual": art.scheme.residual,
                                "integration_points": hyper.integration_point_count(art.scheme, micro)}
    if out is not None:
        write_offline(art, out)
    return art


def write_offline(art: OfflineArtifacts, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if art.basis is not None:
        art.basis.save(out / "basis.json")
    if art.scheme is not None:
        art.scheme.save(out / "scheme.json")
    if art.paths:
        pdir = out / "paths"
        pdir.mkdir(exist_ok=True)
        for i, p in enumerate(art.paths):
            write_load_path(p, pdir / f"centroid_{i:02d}.csv")
    (out / "offline_report.json").write_text(_dumps(art.report))


def load_offline(cfg: RunConfig, out) -> OfflineArtifacts | None:
    """Rebuild the artifacts from ``out`` if every file the mode needs is there."""
    out = Path(out)
    need = {"hf": [], "rom": ["basis.json"], "ecm": ["basis.json", "scheme.json"],
            "eheim": ["basis.json", "scheme.json"]}[cfg.mode]
    if not all((out / f).is_file() for f in need):
        return None
    micro = build_micro(cfg)
    problem, times = build_macro(cfg)
    art = OfflineArtifacts(micro, problem, times)
    if "basis.json" in need:
        art.basis = rom.ReducedBasis.load(out / "basis.json")
        if art.basis.Phi.shape[0] != micro.n:
            return None
    if "scheme.json" in need:
        art.scheme = hyper.HyperScheme.load(out / "scheme.json")
        if art.scheme.mode != cfg.mode or (cfg["hyper"]["m_tilde"] is not None
                                            and art.scheme.m_tilde != cfg["hyper"]["m_tilde"]):
            return None
    return art


def count_report(mode: str, art: OfflineArtifacts, scheme: hyper.HyperScheme | None = None) -> dict:
    """DOF and integration-point counts of one two-scale run."""
    micro, n_gp = art.micro, art.problem.n_gp
    if mode == "hf":
        dofs, ips = micro.n, micro.disc.n_points
    else:
        dofs = art.basis.n_modes
        ips = micro.disc.n_points if scheme is None else hyper.integration_point_count(scheme, micro)
    out = {"micro_dofs": int(dofs), "macro_points": int(n_gp), "dofs_total": int(dofs * n_gp),
           "ips_per_rve": int(ips), "ips_total": int(ips * n_gp)}
    if scheme is not None:
        out["entities"] = len(scheme.entities)
    return out


def run_online(cfg: RunConfig, out=None, art: OfflineArtifacts | None = None) -> tuple[SimulationResult, dict]:
    """Two-scale run. Offline artifacts are read from ``out`` or rebuilt."""
    timings: dict = {}
    if art is None and out is not None:
        with _phase("load", timings):
            art = load_offline(cfg, out)
    if art is None:
        art = run_offline(cfg, out)
    if cfg.mode in ("ecm", "eheim") and art.scheme is None:
        raise PipelineError("online", ValueError("no hyper-integration scheme (set hyper.m_tilde)"))
    with _phase("online", timings):
        res = run_simulation(art.problem, art.handler(cfg.mode), art.times, cfg["solver"]["scheme"],
                             solver_options(cfg))
    report = {"mode": cfg.mode, "scheme": cfg["solver"]["scheme"], "online_time": timings["online"],
              "iterations": res.iterations, "linearizations": res.linearizations,
              "final_reaction": float(res.R[-1]),
              **count_report(cfg.mode, art, art.scheme if cfg.mode in ("ecm", "eheim") else None)}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        res.write_csv(out / "results.csv")
        (out / "online_report.json").write_text(_dumps(report))
    return res, report


STUDY_COLUMNS = ["mode", "criteria", "m_tilde", "entities", "ips_per_rve", "dofs_total", "error",
                 "selection_residual", "selection_time", "online_time", "iterations", "linearizations", "status"]


@dataclass
class StudyReport:
    rows: list
    reference: dict
    offline: dict

    def cells(self, criteria: str) -> list:
        return [r for r in self.rows if r["criteria"] == criteria]

    def errors(self, criteria: str) -> dict:
        return {r["m_tilde"]: r["error"] for r in self.cells(criteria)}

    def minimal_m(self, criteria: str, level: float = 0.01):
        ok = [m for m, e in sorted(self.errors(criteria).items()) if np.isfinite(e) and e <= level]
        return ok[0] if ok else None

    def summary(self) -> dict:
        crits = sorted({r["criteria"] for r in self.rows})
        out = {"reference": self.reference, "offline": self.offline,
               "minimal_m_tilde_1pct": {c: self.minimal_m(c) for c in crits}}
        if {"conventional", "additional"} <= set(crits):
            ec, ea = self.errors("conventional"), self.errors("additional")
            common = sorted(set(ec) & set(ea))
            better = [m for m in common if np.isfinite(ea[m]) and ea[m] <= ec[m]]
            out["additional_not_worse"] = {"count": len(better), "of": len(common),
                                           "fraction": len(better) / len(common) if common else float("nan")}
        return out

    def write(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "study.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STUDY_COLUMNS)
            w.writeheader()
            w.writerow({k: self.reference.get(k, "") for k in STUDY_COLUMNS})
            for r in self.rows:
                w.writerow({k: r.get(k, "") for k in STUDY_COLUMNS})
        (out / "study_summary.json").write_text(_dumps(self.summary()))


def run_study(cfg: RunConfig, out=None, art: OfflineArtifacts | None = None, on_cell=None) -> StudyReport:
    """Hyper-integration convergence study.

    The reference is the fully integrated ROM. Every ``(criteria, m̃)``
    cell is selected and run; a failing cell is recorded with status
    ``failed`` and an infinite error instead of aborting the sweep.
    """
    mode = cfg.mode if cfg.mode in ("ecm", "eheim") else "ecm"
    grid = list(cfg["study"]["m_tilde"]) or ([cfg["hyper"]["m_tilde"]] if cfg["hyper"]["m_tilde"] else [])
    if not grid:
        raise PipelineError("study", ValueError("study.m_tilde is empty"))
    cfg = cfg.with_overrides(mode=mode)
    if art is None or art.snapshots is None:
        art = run_offline(cfg.with_overrides(**{"hyper.m_tilde": None}), out)
    timings = dict(art.timings)
    rm = art.reduced_model()
    opts = solver_options(cfg)
    scheme_kind = cfg["solver"]["scheme"]
    with _phase("reference", timings):
        ref = run_simulation(art.problem, ReducedHandler(rm), art.times, scheme_kind, opts)
    reference = {"mode": "rom", "criteria": "reference", "m_tilde": "", "error": 0.0,
                 "online_time": timings["reference"], "iterations": ref.iterations,
                 "linearizations": ref.linearizations, "status": "reference", **count_report("rom", art)}
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        ref.write_csv(Path(out) / "reference.csv")
    rows = []
    for crit in cfg["study"]["criteria"]:
        tm = hyper.build_unified_training_matrix(art.snapshots, crit, mode)
        for m in grid:
            row = {"mode": mode, "criteria": crit, "m_tilde": int(m)}
            try:
                t0 = time.perf_counter()
                sc = hyper.select_hyper_scheme(tm, int(m))
                row["selection_time"] = time.perf_counter() - t0
                row["selection_residual"] = sc.residual
                row.update(count_report(mode, art, sc))
                t0 = time.perf_counter()
                res = run_simulation(art.problem, ReducedHandler(hyper.hyper_reduced_model(sc, art.micro, art.basis)),
                                     art.times, scheme_kind, opts)
                row["online_time"] = time.perf_counter() - t0
                row["error"] = reaction_error(res, ref)
                row["iterations"], row["linearizations"] = res.iterations, res.linearizations
                row["status"] = "ok"
            except Exception as exc:  # keep sweeping, mark the cell
                log.warning("study cell %s m=%d failed: %s", crit, m, exc)
                row["error"] = float("inf")
                row["status"] = f"failed: {type(exc).__name__}"
            rows.append(row)
            if on_cell is not None:
                on_cell(row)
    offline = {"timings": timings, "offline_time": float(sum(v for k, v in timings.items() if k != "reference"))}
    rep = StudyReport(rows, reference, offline)
    if out is not None:
        rep.write(out)
    return rep


__all__ = ["PipelineError", "OfflineArtifacts", "StudyReport", "build_micro", "build_macro", "run_offline",
           "run_online", "run_study", "load_offline", "count_report"]
