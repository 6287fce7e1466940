"""Two-scale (FE²) driver.

Every macro Gauss point hosts a micro model behind a :class:`MicroHandler`:
the high-fidelity RVE, the POD model or a hyper-integrated POD model, plus a
constant-stiffness surrogate used for training-path generation.

Monolithic solution: one Newton loop on the macro displacements. In every
macro iteration each micro model is advanced by the condensed correction
``da = -K^-1 (r + K_qE dE)`` of its last linearization and linearized once
more, returning the linearized stress ``(f_E - K_Eq K^-1 r)/V`` and the
condensed tangent. Staggered solution: the micro problems are converged in
every macro iteration.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .materials import MaterialError
from .rom import ReducedModel, _put, _take, reduced_solve_batch
from .rve import (ConvergenceError, MicroModel, SingularSystemError, condense, factorize, micro_solve,
                  newton)

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
@dataclass
class Linearization:
    """Micro response of all macro points at given amplitudes and strains."""

    stress: np.ndarray  # linearized macro stress (ngp, 3)
    tangent: np.ndarray  # (ngp, 3, 3)
    dq_r: np.ndarray | None  # (ngp, n)
    dq_dE: np.ndarray | None  # (ngp, n, 3)
    r_norm: np.ndarray  # (ngp,)
    r_tol: np.ndarray  # (ngp,)
    states: object  # trial states


class MicroHandler:
    """Interface of the micro models attached to the macro Gauss points."""

    n: int = 0
    name = "micro"

    def init(self, n_gp: int):
        raise NotImplementedError

    def linearize(self, a, E, states, dt) -> Linearization:
        raise NotImplementedError

    def solve(self, E, states, dt, a0):
        """Converged micro solutions; returns ``(a, stress, tangent, states, linearizations)``."""
        raise NotImplementedError


class ElasticHandler(MicroHandler):
    """Constant effective stiffness (training surrogate)."""

    name = "elastic"

    def __init__(self, C):
        self.C = np.asarray(C, dtype=float)
        self.n = 0

    def init(self, n_gp):
        return np.zeros((n_gp, 0)), None

    def linearize(self, a, E, states, dt):
        ng = len(E)
        return Linearization(E @ self.C.T, np.broadcast_to(self.C, (ng, 3, 3)).copy(), np.zeros((ng, 0)),
                             np.zeros((ng, 0, 3)), np.zeros(ng), np.ones(ng), None)

    def solve(self, E, states, dt, a0):
        lin = self.linearize(a0, E, states, dt)
        return a0, lin.stress, lin.tangent, None, 0


class ReducedHandler(MicroHandler):
    """POD or hyper-integrated POD RVEs, evaluated as one batch."""

    def __init__(self, rm: ReducedModel, name="rom"):
        self.rm = rm
        self.n = rm.n
        self.name = name

    def init(self, n_gp):
        return np.zeros((n_gp, self.n)), self.rm.init_states(n_gp)

    def linearize(self, a, E, states, dt):
        rm = self.rm
        out = rm.evaluate(a, E, states, dt)
        c = rm.condense(out)
        fE_norm = np.linalg.norm(out["fE"], axis=1)
        tol = rm.tol_abs + rm.options.tol_rel * fE_norm
        return Linearization(c["stress"], c["tangent"], c["dq_r"], c["dq_dE"],
                             np.linalg.norm(out["r"], axis=1), tol, out["states"])

    def solve(self, E, states, dt, a0):
        sol = reduced_solve_batch(self.rm, states, E, dt, a0=a0)
        return sol.a, sol.stress, sol.tangent, sol.states, int(sol.linearizations.sum())


class HFHandler(MicroHandler):
    """Full RVE at every macro point (sequential loop)."""

    name = "hf"

    def __init__(self, micro: MicroModel):
        self.micro = micro
        self.n = micro.n

    def init(self, n_gp):
        return np.zeros((n_gp, self.n)), [self.micro.init_states() for _ in range(n_gp)]

    def linearize(self, a, E, states, dt):
        m = self.micro
        ng = len(E)
        S = np.empty((ng, 3))
        C = np.empty((ng, 3, 3))
        dqr = np.empty((ng, self.n))
        dqE = np.empty((ng, self.n, 3))
        rn = np.empty(ng)
        tol = np.empty(ng)
        new = []
        for i in range(ng):
            out = m.evaluate(a[i], E[i], states[i], dt)
            c = condense(out["K"], out["KqE"], out["KEE"], out["r"], out["fE"], m.V)
            S[i], C[i], dqr[i], dqE[i] = c["stress"], c["tangent"], c["dq_r"], c["dq_dE"]
            rn[i] = np.linalg.norm(out["r"])
            tol[i] = m.tol_abs + m.options.tol_rel * np.linalg.norm(out["fE"])
            new.append(out["states"])
        return Linearization(S, C, dqr, dqE, rn, tol, new)

    def solve(self, E, states, dt, a0):
        ng = len(E)
        a = np.empty((ng, self.n))
        S = np.empty((ng, 3))
        C = np.empty((ng, 3, 3))
        new = []
        nlin = 0
        for i in range(ng):
            sol = micro_solve(self.micro, states[i], E[i], dt, q0=a0[i])
            a[i], S[i], C[i] = sol.q, sol.point.stress, sol.point.tangent
            new.append(sol.states)
            nlin += sol.linearizations
        return a, S, C, new, nlin


def _advance(a, lin: Linearization, dE):
    if lin.dq_r is None or a.shape[1] == 0:
        return a
    return a + lin.dq_r + np.einsum("gni,gi->gn", lin.dq_dE, dE)


# ----------------------------------------------------------------------
@dataclass
class Dirichlet:
    """Prescribed DOFs ``2*node + comp`` with values ``value * amplitude(t)``."""

    dofs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=np.int64)
        self.values = np.broadcast_to(np.asarray(self.values, dtype=float), self.dofs.shape).copy()


@dataclass
class MacroProblem:
    """Macro mesh, boundary conditions and load amplitude table.

    ``amplitude`` is a ``(times, factors)`` table interpolated linearly;
    Dirichlet values and nodal forces are scaled by it. Reactions are
    summed over ``monitor_dofs``.
    """

    mesh: fem.Mesh
    dirichlet: list
    monitor_dofs: np.ndarray
    amplitude: tuple = ((0.0, 1.0), (0.0, 1.0))
    forces: np.ndarray | None = None
    thickness: float = 1.0
    probe: int = 0
    disc: fem.Discretization = field(init=False, repr=False)

    def __post_init__(self):
        self.disc = fem.Discretization(self.mesh, thickness=self.thickness)
        self.monitor_dofs = np.asarray(self.monitor_dofs, dtype=np.int64)
        nd = self.mesh.n_dofs
        dofs = np.concatenate([d.dofs for d in self.dirichlet]) if self.dirichlet else np.zeros(0, int)
        if len(dofs) and (dofs.min() < 0 or dofs.max() >= nd):
            raise ValueError("Dirichlet DOF out of range")
        if len(np.unique(dofs)) != len(dofs):
            raise ValueError("DOF prescribed twice")
        self.fixed = dofs
        self.fixed_values = np.concatenate([d.values for d in self.dirichlet]) if self.dirichlet else np.zeros(0)
        self.free = np.setdiff1d(np.arange(nd), dofs)

    @property
    def n_gp(self):
        return self.disc.n_points

    def factor(self, t):
        ts, fs = self.amplitude
        return float(np.interp(t, ts, fs))

    def prescribed(self, t):
        return self.fixed_values * self.factor(t)

    def external(self, t):
        f = np.zeros(self.mesh.n_dofs)
        if self.forces is not None:
            f += self.forces * self.factor(t)
        return f


def cantilever(length=10.0, height=2.0, nx=8, ny=2, etype="quad8", tip=1.0, t_end=1.0) -> MacroProblem:
    """Cantilever clamped at ``x = 0`` with prescribed tip deflection."""
    from .meshgen import rectangle

    return clamped_beam(rectangle(length, height, nx, ny, etype), tip, t_end)


def clamped_beam(mesh: fem.Mesh, tip=1.0, t_end=1.0, thickness=1.0) -> MacroProblem:
    """Clamp the nodes at the smallest ``x`` and push the nodes at the
    largest ``x`` down by ``tip``. The reaction is summed over the latter."""
    x = mesh.nodes
    lo, hi = x[:, 0].min(), x[:, 0].max()
    tol = 1e-9 * max(hi - lo, 1.0)
    left = np.flatnonzero(np.abs(x[:, 0] - lo) <= tol)
    right = np.flatnonzero(np.abs(x[:, 0] - hi) <= tol)
    bc = [Dirichlet(np.concatenate([2 * left, 2 * left + 1]), 0.0), Dirichlet(2 * right + 1, -tip)]
    return MacroProblem(mesh, bc, 2 * right + 1, amplitude=((0.0, t_end), (0.0, 1.0)), thickness=thickness)


@dataclass
class TwoScaleState:
    t: float
    U: np.ndarray
    a: np.ndarray  # micro amplitudes per macro point
    E: np.ndarray  # macro strains per point
    micro: object  # committed micro states
    stress: np.ndarray

    def copy(self):
        return replace(self, U=self.U.copy(), a=self.a.copy(), E=self.E.copy(), stress=self.stress.copy())


@dataclass
class StepInfo:
    iterations: int
    linearizations: int
    residuals: list
    wall: float


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 25
    max_halvings: int = 4
    abs_tol: float = 1e-14


def initial_state(problem: MacroProblem, handler: MicroHandler) -> TwoScaleState:
    a, st = handler.init(problem.n_gp)
    ng = problem.n_gp
    return TwoScaleState(0.0, np.zeros(problem.mesh.n_dofs), a, np.zeros((ng, 3)), st, np.zeros((ng, 3)))


class _MacroLinearSolver:
    def __init__(self, problem):
        self.p = problem

    def solve(self, K, R, dU_fixed):
        p = self.p
        f, d = p.free, p.fixed
        K = K.tocsr()
        rhs = -R[f] - K[f][:, d] @ dU_fixed
        Kff = K[f][:, f]
        try:
            x = spla.splu(sp.csc_matrix(Kff)).solve(rhs)
        except RuntimeError as exc:
            raise SingularSystemError(f"singular macro stiffness: {exc}") from exc
        dU = np.zeros(len(R))
        dU[f] = x
        dU[d] = dU_fixed
        return dU


def _residual_check(problem, sysm, fext, opts: SolverOptions):
    R = sysm["r"] - fext
    Rf = R[problem.free]
    ref = max(np.linalg.norm(sysm["r"]), np.linalg.norm(fext))
    return R, float(np.linalg.norm(Rf)), opts.tol * ref + opts.abs_tol


def monolithic_step(problem: MacroProblem, handler: MicroHandler, state: TwoScaleState, t_new: float,
                    opts: SolverOptions | None = None):
    """One load step with micro and macro unknowns in a common Newton loop."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    dt = t_new - state.t
    disc = problem.disc
    U = state.U.copy()
    a = state.a.copy()
    E = state.E.copy()
    lin = handler.linearize(a, E, state.micro, dt)
    nlin = 1
    fext = problem.external(t_new)
    dU_fixed = problem.prescribed(t_new) - U[problem.fixed]
    solver = _MacroLinearSolver(problem)
    hist = []
    for it in range(opts.max_iter + 1):
        sysm = disc.assemble(lin.stress, lin.tangent)
        R, rn, tol = _residual_check(problem, sysm, fext, opts)
        hist.append(rn)
        micro_ok = bool(np.all(lin.r_norm <= lin.r_tol))
        if it > 0 and rn <= tol and micro_ok and not np.any(dU_fixed):
            return (TwoScaleState(t_new, U, a, E, lin.states, lin.stress.copy()),
                    StepInfo(it, nlin, hist, time.perf_counter() - t0), sysm)
        if it == opts.max_iter:
            break
        dU = solver.solve(sysm["K"], R, dU_fixed)
        dU_fixed = np.zeros_like(dU_fixed)
        U = U + dU
        E_new = disc.strains(U)
        a = _advance(a, lin, E_new - E)
        E = E_new
        lin = handler.linearize(a, E, state.micro, dt)
        nlin += 1
        if not np.all(np.isfinite(lin.stress)):
            raise ConvergenceError("non-finite macro stress", hist)
    raise ConvergenceError(f"monolithic step to t={t_new} did not converge, |R| = {hist[-1]:.3e}", hist)


def staggered_step(problem: MacroProblem, handler: MicroHandler, state: TwoScaleState, t_new: float,
                   opts: SolverOptions | None = None):
    """One load step with fully converged micro solves in every macro iteration."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    dt = t_new - state.t
    disc = problem.disc
    U = state.U.copy()
    a, S, C, st, nlin = handler.solve(state.E, state.micro, dt, state.a)
    E = state.E.copy()
    fext = problem.external(t_new)
    dU_fixed = problem.prescribed(t_new) - U[problem.fixed]
    solver = _MacroLinearSolver(problem)
    hist = []
    for it in range(opts.max_iter + 1):
        sysm = disc.assemble(S, C)
        R, rn, tol = _residual_check(problem, sysm, fext, opts)
        hist.append(rn)
        if it > 0 and rn <= tol:
            return (TwoScaleState(t_new, U, a, E, st, S.copy()),
                    StepInfo(it, nlin, hist, time.perf_counter() - t0), sysm)
        if it == opts.max_iter:
            break
        dU = solver.solve(sysm["K"], R, dU_fixed)
        dU_fixed = np.zeros_like(dU_fixed)
        U = U + dU
        E = disc.strains(U)
        a, S, C, st, k = handler.solve(E, state.micro, dt, a)
        nlin += k
    raise ConvergenceError(f"staggered step to t={t_new} did not converge, |R| = {hist[-1]:.3e}", hist)


@dataclass
class SimulationResult:
    t: np.ndarray
    U: np.ndarray  # monitored displacement (mean over monitor DOFs)
    R: np.ndarray  # summed reaction over monitor DOFs
    probe_stress: np.ndarray
    probe_strain: np.ndarray
    steps: list
    final: TwoScaleState | None = None
    wall: float = 0.0

    @property
    def linearizations(self) -> int:
        return int(sum(s.linearizations for s in self.steps))

    @property
    def iterations(self) -> int:
        return int(sum(s.iterations for s in self.steps))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "U_monitor", "R_monitor", "S11", "S22", "S12", "E11", "E22", "E12"])
            for k in range(len(self.t)):
                s, e = self.probe_stress[k], self.probe_strain[k]
                w.writerow([repr(float(v)) for v in (self.t[k], self.U[k], self.R[k], *s, e[0], e[1], 0.5 * e[2])])


def read_results_csv(path) -> SimulationResult:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    f = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return SimulationResult(f("t"), f("U_monitor"), f("R_monitor"),
                            np.column_stack([f("S11"), f("S22"), f("S12")]),
                            np.column_stack([f("E11"), f("E22"), 2.0 * f("E12")]), [])


def run_simulation(problem: MacroProblem, handler: MicroHandler, times, scheme: str = "monolithic",
                   opts: SolverOptions | None = None, state: TwoScaleState | None = None,
                   on_step=None) -> SimulationResult:
    """Time loop with per-step commit and step bisection on failure.

    ``times`` are the step end times. A failed step is retried as two half
    steps, at most ``opts.max_halvings`` levels deep.
    """
    opts = opts or SolverOptions()
    step = {"monolithic": monolithic_step, "staggered": staggered_step}[scheme]
    state = initial_state(problem, handler) if state is None else state
    t_out, U_out, R_out, ps, pe, infos = [], [], [], [], [], []
    t_start = time.perf_counter()

    def advance(st, t_new, depth):
        try:
            new, info, sysm = step(problem, handler, st, t_new, opts)
            return [(new, info, sysm)]
        except (ConvergenceError, MaterialError, SingularSystemError, np.linalg.LinAlgError) as exc:
            if depth >= opts.max_halvings:
                raise ConvergenceError(f"step to t={t_new} failed after {depth} halvings: {exc}") from exc
            log.info("halving step to t=%g (%s)", t_new, exc)
            t_mid = 0.5 * (st.t + t_new)
            first = advance(st, t_mid, depth + 1)
            return first + advance(first[-1][0], t_new, depth + 1)

    for t_new in times:
        if t_new <= state.t:
            continue
        for new, info, sysm in advance(state, t_new, 0):
            state = new
            infos.append(info)
        t_out.append(state.t)
        U_out.append(float(np.mean(state.U[problem.monitor_dofs])))
        R_out.append(float(np.sum(sysm["r"][problem.monitor_dofs])))
        ps.append(state.stress[problem.probe].copy())
        pe.append(state.E[problem.probe].copy())
        if on_step is not None:
            on_step(state, infos[-1])
    return SimulationResult(np.array(t_out), np.array(U_out), np.array(R_out), np.array(ps).reshape(-1, 3),
                            np.array(pe).reshape(-1, 3), infos, state, time.perf_counter() - t_start)


def reaction_error(res: SimulationResult, ref: SimulationResult) -> float:
    """``max_t |R - R_ref| / max_t |R_ref|`` on common time stations."""
    if len(res.R) != len(ref.R) or not np.allclose(res.t, ref.t):
        R = np.interp(ref.t, res.t, res.R)
    else:
        R = res.R
    return float(np.max(np.abs(R - ref.R)) / np.max(np.abs(ref.R)))
