"""Constitutive updates at integration points.

All models work internally on the four in-plane-relevant components of a
3D strain tensor, stored as ``(e11, e22, e33, g12)`` with engineering shear
(``e13 = e23 = 0`` throughout). The 2D interface used by the element loop
returns the ``(11, 22, 12)`` slice under plane strain, or condenses the
thickness component under plane stress.

Every ``update`` is a pure function of ``(strain, state, dt)``: it returns
a fresh state dict and never mutates its inputs. Point states always carry
``eps``, the strain of the last committed step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# 4-component Voigt operators (engineering shear in the strain slot)
_I4 = np.array([1.0, 1.0, 1.0, 0.0])
II4 = np.outer(_I4, _I4)
PDEV4 = np.array([[2.0, -1.0, -1.0, 0.0],
                  [-1.0, 2.0, -1.0, 0.0],
                  [-1.0, -1.0, 2.0, 0.0],
                  [0.0, 0.0, 0.0, 1.5]]) / 3.0
PSPH4 = II4 / 3.0
PLANE = [0, 1, 3]


class MaterialError(RuntimeError):
    """Local constitutive solve failed."""

    def __init__(self, msg, index=None, residuals=None):
        super().__init__(msg)
        self.index = index
        self.residuals = residuals


@dataclass
class MaterialResult:
    stress: np.ndarray
    tangent: np.ndarray
    psi: np.ndarray
    state: dict


@dataclass(frozen=True)
class ElasticParams:
    E: float
    nu: float

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("nu must lie in (-1, 0.5)")

    @property
    def kappa(self):
        return self.E / (3.0 * (1.0 - 2.0 * self.nu))

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    def matrix4(self):
        return 3.0 * self.kappa * PSPH4 + 2.0 * self.mu * PDEV4


def tensor_form(e4):
    """Engineering-shear 4-vector -> tensor components (halved shear)."""
    t = np.array(e4, dtype=float, copy=True)
    t[..., 3] *= 0.5
    return t


def ddot(a, b):
    """Double contraction of two tensors given in tensor components."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2] + 2.0 * a[..., 3] * b[..., 3]


def deviator(t):
    d = np.array(t, dtype=float, copy=True)
    m = (t[..., 0] + t[..., 1] + t[..., 2]) / 3.0
    d[..., :3] -= m[..., None]
    return d


def plane_strain_matrix(E: float, nu: float) -> np.ndarray:
    """Isotropic plane-strain stiffness in 2D Voigt form."""
    return ElasticParams(E, nu).matrix4()[np.ix_(PLANE, PLANE)]


def plane_stress_matrix(E: float, nu: float) -> np.ndarray:
    return E / (1.0 - nu ** 2) * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]])


class Material:
    """Base class. Subclasses implement :meth:`update4` and :meth:`_init`."""

    plane = "strain"

    def init_state(self, shape) -> dict:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        st = {"eps": np.zeros(shape + (3,))}
        if self.plane == "stress":
            st["e33"] = np.zeros(shape)
        st.update(self._init(shape))
        return st

    def _init(self, shape) -> dict:
        return {}

    def update4(self, eps4, state, dt):
        raise NotImplementedError

    def update(self, eps, state, dt: float = 0.0) -> MaterialResult:
        eps = np.asarray(eps, dtype=float)
        n = len(eps)
        e4 = np.zeros((n, 4))
        e4[:, PLANE] = eps
        if self.plane == "strain":
            s4, C4, psi, st = self.update4(e4, state, dt)
            st["eps"] = eps.copy()
            return MaterialResult(s4[:, PLANE], C4[:, PLANE][:, :, PLANE], psi, st)
        # plane stress: local Newton on the thickness strain
        e4[:, 2] = state["e33"]
        for it in range(30):
            s4, C4, psi, st = self.update4(e4, state, dt)
            scale = np.abs(C4[:, 2, 2]) * (np.abs(e4).max(axis=1) + 1e-300)
            if np.all(np.abs(s4[:, 2]) <= 1e-12 * scale + 1e-300):
                break
            e4[:, 2] -= s4[:, 2] / C4[:, 2, 2]
        else:
            raise MaterialError("plane-stress iteration did not converge")
        Cpp = C4[:, PLANE][:, :, PLANE]
        c3 = C4[:, PLANE, 2]
        C = Cpp - np.einsum("ni,nj->nij", c3, C4[:, 2, PLANE]) / C4[:, 2, 2][:, None, None]
        st["eps"] = eps.copy()
        st["e33"] = e4[:, 2].copy()
        return MaterialResult(s4[:, PLANE], C, psi, st)


# ----------------------------------------------------------------------
# linear elasticity
def elastic_update(params: ElasticParams, eps4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Isotropic linear elastic stress, tangent and energy on 4-vectors."""
    C = params.matrix4()
    eps4 = np.asarray(eps4, dtype=float)
    s = eps4 @ C
    psi = 0.5 * np.sum(s * eps4, axis=-1)
    return s, np.broadcast_to(C, eps4.shape[:-1] + (4, 4)).copy(), psi


class LinearElastic(Material):
    def __init__(self, E: float, nu: float, plane: str = "strain"):
        self.params = ElasticParams(E, nu)
        self.plane = plane

    @property
    def E_ref(self):
        return self.params.E

    def update4(self, eps4, state, dt):
        s, C, psi = elastic_update(self.params, eps4)
        return s, C, psi, {k: v.copy() for k, v in state.items()}


class AnisotropicElastic(Material):
    """Linear material with a given 2D Voigt stiffness (macro surrogates)."""

    def __init__(self, C):
        self.C = np.array(C, dtype=float)

    @property
    def E_ref(self):
        return float(np.abs(self.C).max())

    def update(self, eps, state, dt: float = 0.0) -> MaterialResult:
        eps = np.asarray(eps, dtype=float)
        s = eps @ self.C.T
        psi = 0.5 * np.sum(s * eps, axis=1)
        st = {k: v.copy() for k, v in state.items()}
        st["eps"] = eps.copy()
        return MaterialResult(s, np.broadcast_to(self.C, (len(eps), 3, 3)).copy(), psi, st)


# ----------------------------------------------------------------------
# J2 plasticity, linear isotropic hardening
@dataclass(frozen=True)
class J2Params:
    elastic: ElasticParams
    sigma_y0: float
    h: float

    def __post_init__(self):
        if not self.sigma_y0 > 0:
            raise ValueError("sigma_y0 must be positive")
        if self.h < 0:
            raise ValueError("h must be non-negative")


def j2_update(params: J2Params, eps4, ep, r):
    """Radial return with yield stress ``sigma_y0 + h r``.

    Parameters
    ----------
    eps4 : (n, 4) total strain
    ep : (n, 4) plastic strain (engineering shear)
    r : (n,) equivalent plastic strain

    Returns
    -------
    stress (n, 4), tangent (n, 4, 4), psi (n,), ep_new, r_new
    """
    K, mu = params.elastic.kappa, params.elastic.mu
    h, sy = params.h, params.sigma_y0
    ee = eps4 - ep
    te = tensor_form(ee)
    tr = te[:, 0] + te[:, 1] + te[:, 2]
    s_tr = 2.0 * mu * deviator(te)  # tensor components
    norm_s = np.sqrt(np.maximum(ddot(s_tr, s_tr), 0.0))
    q_tr = math.sqrt(1.5) * norm_s
    f = q_tr - (sy + h * r)
    C = np.broadcast_to(params.elastic.matrix4(), (len(eps4), 4, 4)).copy()
    plastic = f > 0.0
    s = s_tr.copy()
    ep_new = ep.copy()
    r_new = r.copy()
    if np.any(plastic):
        dr = f[plastic] / (3.0 * mu + h)
        qp = q_tr[plastic]
        theta = 1.0 - 3.0 * mu * dr / qp
        n_hat = s_tr[plastic] / norm_s[plastic][:, None]
        s[plastic] = theta[:, None] * s_tr[plastic]
        flow = 1.5 * dr[:, None] * s_tr[plastic] / qp[:, None]  # tensor components
        flow[:, 3] *= 2.0
        ep_new[plastic] += flow
        r_new[plastic] += dr
        theta_bar = 3.0 * mu / (3.0 * mu + h) - (1.0 - theta)
        C[plastic] = (K * II4 + 2.0 * mu * theta[:, None, None] * PDEV4
                      - 2.0 * mu * theta_bar[:, None, None] * np.einsum("ni,nj->nij", n_hat, n_hat))
    stress = s.copy()
    stress[:, :3] += K * tr[:, None]
    ee_new = eps4 - ep_new
    # stress has plain shear, strain engineering shear
    psi = 0.5 * np.sum(stress * ee_new, axis=1)
    return stress, C, psi, ep_new, r_new


class J2Plasticity(Material):
    """Rate-independent von Mises plasticity with linear hardening."""

    def __init__(self, E: float, nu: float, sigma_y0: float, h: float, plane: str = "strain"):
        self.params = J2Params(ElasticParams(E, nu), sigma_y0, h)
        self.plane = plane

    @property
    def E_ref(self):
        return self.params.elastic.E

    def _init(self, shape):
        return {"ep": np.zeros(shape + (4,)), "r": np.zeros(shape)}

    def yield_stress(self, r):
        return self.params.sigma_y0 + self.params.h * r

    def update4(self, eps4, state, dt):
        s, C, psi, ep, r = j2_update(self.params, eps4, state["ep"], state["r"])
        st = {k: v.copy() for k, v in state.items()}
        st["ep"], st["r"] = ep, r
        return s, C, psi, st


# ----------------------------------------------------------------------
# viscoelastic-viscoplastic-damage model
@dataclass(frozen=True)
class VevpParams:
    """Parameters of the Kelvin-Voigt chain / power-law viscoplastic /
    damage model. ``branches`` holds ``(E_vi, eta_vi)`` pairs."""

    elastic: ElasticParams
    branches: tuple = ()
    H: float = 1.0
    m: float = 1.0
    R0: float = 1.0
    K: float = 1.0
    n: float = 1.0
    S: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for Ev, eta in self.branches:
            if not (Ev > 0 and eta > 0):
                raise ValueError("branch moduli and viscosities must be positive")
        for name in ("H", "m", "R0", "K", "n", "S"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


# placeholder set, stress unit MPa, time unit s
DEFAULT_VEVP = dict(E=2000.0, nu=0.3, branches=((6000.0, 3000.0), (3000.0, 30000.0)),
                    H=150.0, m=0.5, R0=12.0, K=300.0, n=0.6, S=2.0, beta=1.2)


def _chain(params: VevpParams, dt: float):
    """Matrix inverse, per-branch coefficients and scalar ``B`` of the
    backward-Euler Kelvin-Voigt system."""
    N = len(params.branches)
    if N == 0:
        return np.zeros((0, 0)), np.zeros(0), 0.0
    E = params.elastic.E
    c = np.array([dt * E / eta for _, eta in params.branches])
    A = np.tile(c[:, None], (1, N))
    A[np.diag_indices(N)] += 1.0 + np.array([dt * Ev / eta for Ev, eta in params.branches])
    Ainv = np.linalg.inv(A)
    b = Ainv @ c  # b_i = sum_j Ainv_ij dt E / eta_j
    return Ainv, b, float(b.sum())


def damage_growth_factor(d: float) -> float:
    """``1/(1-d)`` below 0.99, smoothed polynomial branch above."""
    if d < 0.99:
        return 1.0 / (1.0 - d)
    return (3.0 * d ** 3 - 8.96 * d ** 2 + 8.92 * d - 2.96) * 1e8


def _energy(x, y, kappa, mu):
    """``x : C : y`` for an isotropic C, tensor components."""
    tx = x[0] + x[1] + x[2]
    ty = y[0] + y[1] + y[2]
    return kappa * tx * ty + 2.0 * mu * float(ddot(deviator(x), deviator(y)))


@dataclass
class VevpPointSolution:
    """Implicit solution at one point (tensor components)."""

    stress: np.ndarray
    ep: np.ndarray
    ev: np.ndarray
    r: float
    d: float
    Y: float
    seq: float
    psi: float
    residual_r: float = 0.0
    residual_d: float = 0.0
    plastic: bool = False


class VevpSolver:
    """Backward-Euler integration of the VEVP model at a single point.

    The viscoelastic strains follow from the linear branch system; when the
    yield function is exceeded, the damage equation is solved by regula
    falsi (Illinois variant) with the equivalent viscoplastic strain solved
    by a bracketed Newton iteration inside every damage evaluation.
    """

    def __init__(self, params: VevpParams, tol_r=1e-10, tol_d=1e-12, max_newton=50,
                 max_falsi=200, max_expand=60, d_step=1e-3):
        self.p = params
        self.tol_r, self.tol_d = tol_r, tol_d
        self.max_newton, self.max_falsi = max_newton, max_falsi
        self.max_expand, self.d_step = max_expand, d_step
        E, nu = params.elastic.E, params.elastic.nu
        self.kv = [ElasticParams(Ev, nu) for Ev, _ in params.branches]

    def _psi(self, ee, ev, d):
        el = self.p.elastic
        Y = 0.5 * _energy(ee, ee, el.kappa, el.mu)
        for v, k in zip(ev, self.kv):
            Y += 0.5 * _energy(v, v, k.kappa, k.mu)
        return Y, (1.0 - d) * Y

    def residual_r(self, r_new, d_new, r_old, Zeq, B, dt):
        p = self.p
        mu = p.elastic.mu
        f = 2.0 * mu * Zeq - 3.0 * mu * (1.0 - B) * (r_new - r_old) / (1.0 - d_new) - p.K * r_new ** p.n - p.R0
        return r_new - r_old - dt / p.H ** (1.0 / p.m) * max(f, 0.0) ** (1.0 / p.m)

    def solve_r(self, d, r_old, Zeq, B, dt):
        """Equivalent plastic strain increment for fixed damage."""
        p = self.p
        mu = p.elastic.mu
        c = dt / p.H ** (1.0 / p.m)
        g = 3.0 * mu * (1.0 - B) / (1.0 - d)
        im = 1.0 / p.m

        def f_of(dr):
            return 2.0 * mu * Zeq - g * dr - p.K * (r_old + dr) ** p.n - p.R0

        def R(dr):
            return dr - c * max(f_of(dr), 0.0) ** im

        lo, hi = 0.0, max((2.0 * mu * Zeq - p.R0) / g, 0.0)
        if R(0.0) >= 0.0:
            return 0.0
        dr = hi * 1e-3
        for _ in range(self.max_newton):
            Rv = R(dr)
            if abs(Rv) <= self.tol_r * max(1.0, r_old + dr):
                return dr
            if Rv < 0.0:
                lo = dr
            else:
                hi = dr
            fv = f_of(dr)
            if fv > 0.0:
                r = r_old + dr
                dfd = -g - (p.K * p.n * r ** (p.n - 1.0) if r > 0.0 else 0.0)
                dR = 1.0 - c * im * fv ** (im - 1.0) * dfd
                step = dr - Rv / dR
            else:
                step = -1.0
            dr = step if lo < step < hi else 0.5 * (lo + hi)
        Rv = R(dr)
        if abs(Rv) <= self.tol_r * max(1.0, r_old + dr):
            return dr
        raise MaterialError(f"viscoplastic Newton did not converge, |R_r| = {abs(Rv):.3e}", residuals={"R_r": Rv})

    def solve(self, eps, state, dt) -> VevpPointSolution:
        """``eps`` and state tensors in tensor components (4-vectors)."""
        p = self.p
        el = p.elastic
        mu = el.mu
        Ainv, b, B = _chain(p, dt)
        ev_old = state["ev"]
        ep_old = state["ep"]
        r_old, d_old = float(state["r"]), float(state["d"])
        gi = Ainv @ ev_old if len(b) else np.zeros((0, 4))
        g = gi.sum(axis=0) if len(b) else np.zeros(4)
        w = eps - ep_old
        Z = deviator((1.0 - B) * w - g)  # (1-B) eps_d - ev_d^mod - (1-B) ep_old
        Zeq = math.sqrt(1.5 * float(ddot(Z, Z)))
        trial_f = 2.0 * mu * Zeq - p.K * r_old ** p.n - p.R0

        def fields(dr, d):
            a = 1.5 * dr / ((1.0 - d) * Zeq) if dr > 0.0 else 0.0
            ep = ep_old + a * Z
            ev = gi + b[:, None] * (eps - ep)[None, :] if len(b) else np.zeros((0, 4))
            ee = eps - ep - ev.sum(axis=0)
            return ep, ev, ee

        if trial_f <= 0.0 or Zeq == 0.0:
            ep, ev, ee = fields(0.0, d_old)
            Y, psi = self._psi(ee, ev, d_old)
            s = (1.0 - d_old) * (el.kappa * (ee[0] + ee[1] + ee[2]) * np.array([1, 1, 1, 0.0])
                                 + 2.0 * mu * deviator(ee))
            return VevpPointSolution(s, ep, ev, r_old, d_old, Y, _seq(s), psi)

        # Y is quadratic in the flow scalar a; precompute its coefficients.
        e0 = (1.0 - B) * w - g
        e1 = -(1.0 - B) * Z
        kap = el.kappa
        Yc = [0.5 * _energy(e0, e0, kap, mu), _energy(e0, e1, kap, mu), 0.5 * _energy(e1, e1, kap, mu)]
        for i, k in enumerate(self.kv):
            v0 = gi[i] + b[i] * w
            v1 = -b[i] * Z
            Yc[0] += 0.5 * _energy(v0, v0, k.kappa, k.mu)
            Yc[1] += _energy(v0, v1, k.kappa, k.mu)
            Yc[2] += 0.5 * _energy(v1, v1, k.kappa, k.mu)

        def Y_of(dr, d):
            a = 1.5 * dr / ((1.0 - d) * Zeq)
            return max(Yc[0] + a * (Yc[1] + a * Yc[2]), 0.0)

        def R_d(d):
            dr = self.solve_r(d, r_old, Zeq, B, dt)
            return d - d_old - (Y_of(dr, d) / p.S) ** p.beta * dr * damage_growth_factor(d), dr

        da = d_old
        Ra, dra = R_d(da)
        roots = None
        if abs(Ra) <= self.tol_d:
            roots = (da, dra, Ra)
        else:
            step = self.d_step
            for _ in range(self.max_expand):
                db = min(da + step, 1.0 - 1e-12)
                Rb, drb = R_d(db)
                if Rb == 0.0 or (Rb > 0.0) != (Ra > 0.0):
                    break
                step *= 2.0
            else:
                raise MaterialError("damage bracket not found", residuals={"R_d": Ra})
            if abs(Rb) <= self.tol_d:
                roots = (db, drb, Rb)
            side = 0
            for _ in range(self.max_falsi if roots is None else 0):
                dc = (da * Rb - db * Ra) / (Rb - Ra)
                Rc, drc = R_d(dc)
                if abs(Rc) <= self.tol_d or abs(db - da) <= 1e-15:
                    roots = (dc, drc, Rc)
                    break
                if (Rc > 0.0) == (Rb > 0.0):
                    db, Rb = dc, Rc
                    if side == -1:
                        Ra *= 0.5
                    side = -1
                else:
                    da, Ra = dc, Rc
                    if side == 1:
                        Rb *= 0.5
                    side = 1
            if roots is None:
                raise MaterialError("regula falsi did not converge", residuals={"R_d": Rc})
        d, dr, Rd = roots
        Rr = self.residual_r(r_old + dr, d, r_old, Zeq, B, dt)
        seq = 2.0 * mu * (1.0 - d) * Zeq - 3.0 * mu * (1.0 - B) * dr
        ep, ev, ee = fields(dr, d)
        Y, psi = self._psi(ee, ev, d)
        s = (1.0 - d) * (kap * (ee[0] + ee[1] + ee[2]) * np.array([1, 1, 1, 0.0]) + 2.0 * mu * deviator(ee))
        return VevpPointSolution(s, ep, ev, r_old + dr, d, Y, seq, psi, Rr, Rd, True)


def _seq(s):
    sd = deviator(s)
    return math.sqrt(1.5 * float(ddot(sd, sd)))


def _vevp_state(n, N):
    return {"ev": np.zeros((n, N, 4)), "ep": np.zeros((n, 4)), "r": np.zeros(n), "d": np.zeros(n),
            "seq": np.zeros(n), "Y": np.zeros(n), "r_prev": np.zeros(n), "d_prev": np.zeros(n),
            "dt_prev": np.zeros(n)}


def vevp_implicit_update(solver: VevpSolver, eps4, state: dict, dt: float, tangent: bool = True):
    """Backward-Euler update of every point.

    Internal tensors are stored in tensor components; ``eps4`` uses
    engineering shear. Returns stress (n, 4), tangent (n, 4, 4) from central
    differences of the update, psi (n,), new state. Residuals of the
    converged local equations are stored in ``state['res_r']`` and
    ``state['res_d']``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = len(eps4)
    out = {k: np.array(v, copy=True) for k, v in state.items()}
    stress = np.zeros((n, 4))
    C = np.zeros((n, 4, 4))
    psi = np.zeros(n)
    res_r = np.zeros(n)
    res_d = np.zeros(n)
    te = tensor_form(eps4)
    for i in range(n):
        st = {k: state[k][i] for k in ("ev", "ep", "r", "d")}
        try:
            sol = solver.solve(te[i], st, dt)
        except MaterialError as exc:
            exc.index = i
            raise
        stress[i] = sol.stress
        psi[i] = sol.psi
        res_r[i], res_d[i] = sol.residual_r, sol.residual_d
        out["ev"][i], out["ep"][i] = sol.ev, sol.ep
        out["r"][i], out["d"][i], out["Y"][i], out["seq"][i] = sol.r, sol.d, sol.Y, sol.seq
        if tangent:
            h = 1e-7 * max(1e-3, float(np.abs(eps4[i]).max()))
            for j in range(4):
                dp = np.zeros(4)
                dp[j] = h
                sp_ = solver.solve(tensor_form(eps4[i] + dp), st, dt).stress
                sm_ = solver.solve(tensor_form(eps4[i] - dp), st, dt).stress
                C[i, :, j] = (sp_ - sm_) / (2.0 * h)
    out["r_prev"] = np.array(state["r"], copy=True)
    out["d_prev"] = np.array(state["d"], copy=True)
    out["dt_prev"] = np.full(n, dt)
    out["res_r"], out["res_d"] = res_r, res_d
    return stress, C, psi, out


def vevp_implex_update(solver: VevpSolver, eps4, state: dict, dt: float, d_max: float = 0.999):
    """ImplEx update: explicit stress and step-constant tangent, implicit
    state committed for the next extrapolation.

    Damage and the plastic multiplier are extrapolated from the rates of the
    last committed step (``r - r_prev``, ``d - d_prev`` over ``dt_prev``);
    with no history the rates are zero.
    """
    p = solver.p
    el = p.elastic
    kap, mu = el.kappa, el.mu
    Ainv, b, B = _chain(p, dt)
    n = len(eps4)
    r, d = state["r"], state["d"]
    dtp = state["dt_prev"]
    has = dtp > 0.0
    d_rate = np.where(has, (d - state["d_prev"]) / np.where(has, dtp, 1.0), 0.0)
    r_rate = np.where(has, (r - state["r_prev"]) / np.where(has, dtp, 1.0), 0.0)
    d_t = np.minimum(d + dt * d_rate, d_max)
    seq = state["seq"]
    denom = 2.0 * seq * (1.0 - d)
    dlam = np.where(denom > 0.0, 3.0 * r_rate * dt / np.where(denom > 0.0, denom, 1.0), 0.0)
    if len(b):
        g = np.einsum("ij,njk->nk", Ainv, state["ev"]).reshape(n, -1)
    else:
        g = np.zeros((n, 4))
    # strain-like driver (1-B)(eps - ep) - ev_mod, engineering shear
    gE = g.copy()
    gE[:, 3] *= 2.0
    ep_eng = state["ep"].copy()
    ep_eng[:, 3] *= 2.0
    drive = (1.0 - B) * (eps4 - ep_eng) - gE
    fac = 1.0 + (1.0 - d_t) * (1.0 - B) * 2.0 * mu * dlam
    Cop = 3.0 * kap * PSPH4[None] + (2.0 * mu / fac)[:, None, None] * PDEV4[None]
    stress = (1.0 - d_t)[:, None] * np.einsum("nij,nj->ni", Cop, drive)
    C = ((1.0 - d_t) * (1.0 - B))[:, None, None] * Cop
    _, _, psi, st = vevp_implicit_update(solver, eps4, state, dt, tangent=False)
    st["d_implex"] = d_t
    return stress, C, psi, st


class Vevp(Material):
    """Viscoelastic-viscoplastic-damage material.

    Parameters
    ----------
    integration : {"implicit", "implex"}
    """

    def __init__(self, E, nu, branches=(), H=1.0, m=1.0, R0=1.0, K=1.0, n=1.0, S=1.0, beta=1.0,
                 integration: str = "implex", plane: str = "strain", **solver_opts):
        self.params = VevpParams(ElasticParams(E, nu), tuple(tuple(b) for b in branches), H, m, R0, K, n, S, beta)
        if integration not in ("implicit", "implex"):
            raise ValueError("integration must be 'implicit' or 'implex'")
        self.integration = integration
        self.plane = plane
        self.solver = VevpSolver(self.params, **solver_opts)

    @property
    def E_ref(self):
        return self.params.elastic.E

    def _init(self, shape):
        n = int(np.prod(shape))
        st = _vevp_state(n, len(self.params.branches))
        return {k: v.reshape(shape + v.shape[1:]) for k, v in st.items()}

    def update4(self, eps4, state, dt):
        state = dict(state)
        if self.integration == "implicit":
            s, C, psi, st = vevp_implicit_update(self.solver, eps4, state, dt)
        else:
            s, C, psi, st = vevp_implex_update(self.solver, eps4, state, dt)
        st.pop("res_r", None)
        st.pop("res_d", None)
        st.pop("d_implex", None)
        return s, C, psi, st


def make_material(spec: dict) -> Material:
    """Build a material from a parameter block (``type`` plus parameters)."""
    spec = dict(spec)
    kind = spec.pop("type")
    plane = spec.pop("plane", "strain")
    if kind == "elastic":
        return LinearElastic(spec["E"], spec["nu"], plane=plane)
    if kind == "j2":
        return J2Plasticity(spec["E"], spec["nu"], spec["sigma_y0"], spec["h"], plane=plane)
    if kind == "vevp":
        return Vevp(plane=plane, **spec)
    raise ValueError(f"unknown material type {kind!r}")
