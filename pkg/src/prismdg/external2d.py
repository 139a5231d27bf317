"""Depth-integrated external mode: free surface and depth momentum.

Weak forms (per P1 test function phi, triangle jacobian J2D, edge jacobian
Jedge = len/2):

  free surface   <phi J2D d(eta)/dt> = <J2D grad(phi) . Q>
                   - << phi (n . {{Q}} + max(c) [[eta]]) Jedge >>
                   + <phi s J2D>

  depth momentum <phi J2D dQ/dt> = -g <phi H grad(eta) J2D>
                   + << n phi g {{H}} [[eta]] Jedge >>
                   - << max(c) [[Q]] Jedge >>
                   - <phi (H/rho0) grad(p_atm) J2D>  + F3D->2D

with {{.}} the interface mean, [[.]] half the interior-exterior difference
and c = sqrt(g H) evaluated per side at the edge quadrature points.  Closed
walls mirror the state (eta_ext = eta_int, Q_ext = Q - 2 (n.Q) n), so the
normal stabilized flux vanishes at rest and mass is conserved exactly.

Exterior traces are gathered in the neighbour's own traversal order through
the mirrored quadrature index, which keeps every shared-edge flux total
exactly antisymmetric in floating point; the sum of eta over the basin is
then reproduced bitwise, not just to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .columns import apply_mh, apply_mh_inv
from .dg import EDGE_SHAPE, EDGE_V0, EDGE_V1, NQ_SEG, SEG_QW, TRI_BARY, TRI_QW
from .errors import CflViolation, DryColumn
from .mesh import BTAG_INTERIOR, BTAG_OPEN, Mesh2D


@dataclass
class PhysParams:
    g: float = 9.81
    rho0: float = 1025.0
    f: float = 0.0          # Coriolis parameter
    cd: float = 0.0         # bottom drag coefficient
    tau_x: float = 0.0      # wind stress N/m^2 at t <= wind_t0
    tau_y: float = 0.0
    tau_x1: Optional[float] = None  # second wind state (linear in time)
    tau_y1: Optional[float] = None
    wind_t0: float = 0.0
    wind_t1: float = 0.0
    kappa_h: float = 0.0    # horizontal viscosity
    kappa_v: float = 0.0    # vertical viscosity
    nu_h: float = 0.0       # horizontal tracer diffusivity
    nu_v: float = 0.0       # vertical tracer diffusivity
    alpha: float = 0.0      # thermal expansion (rho' = -alpha (T - t_ref) ...)
    beta: float = 0.0       # haline contraction
    t_ref: float = 10.0
    s_ref: float = 35.0

    def wind(self, t: float):
        """Kinematic surface stress (tau / rho0) at time t, linear in time."""
        tx, ty = self.tau_x, self.tau_y
        if self.tau_x1 is not None and self.wind_t1 > self.wind_t0:
            w = np.clip((t - self.wind_t0) / (self.wind_t1 - self.wind_t0), 0.0, 1.0)
            tx = (1.0 - w) * self.tau_x + w * self.tau_x1
            ty = (1.0 - w) * self.tau_y + w * (self.tau_y1 if self.tau_y1 is not None else self.tau_y)
        return tx / self.rho0, ty / self.rho0


@dataclass
class State2D:
    eta: np.ndarray  # (nt, 3)
    qx: np.ndarray
    qy: np.ndarray
    t: float = 0.0

    def copy(self) -> "State2D":
        return State2D(self.eta.copy(), self.qx.copy(), self.qy.copy(), self.t)


def eos_density(T, params: PhysParams, S=None):
    """Density anomaly rho' = -alpha (T - t_ref) + beta (S - s_ref)."""
    rho = -params.alpha * (np.asarray(T) - params.t_ref)
    if params.beta != 0.0:
        s_arr = params.s_ref if S is None else np.asarray(S)
        rho = rho + params.beta * (s_arr - params.s_ref)
    return rho


# ---------------------------------------------------------------------------
# edge traces
# ---------------------------------------------------------------------------


def trace_int(field2d, els, k):
    """Interior trace of a (nt, 3) nodal field on local edge k: (nel, 2)."""
    n0 = field2d[els, EDGE_V0[k]]
    n1 = field2d[els, EDGE_V1[k]]
    return n0[:, None] * EDGE_SHAPE[None, :, 0] + n1[:, None] * EDGE_SHAPE[None, :, 1]


def trace_ext(field2d, nbr_e, nbr_k):
    """Exterior trace at the same physical points, mirrored quadrature order."""
    safe = np.maximum(nbr_e, 0)
    m0 = field2d[safe, EDGE_V0[nbr_k]]
    m1 = field2d[safe, EDGE_V1[nbr_k]]
    return m0[:, None] * EDGE_SHAPE[None, :, 1] + m1[:, None] * EDGE_SHAPE[None, :, 0]


def edge_celerity(eta_i, eta_e, b_i, b_e, g):
    """max over sides of sqrt(g H) per quadrature point."""
    h_i = eta_i - b_i
    h_e = eta_e - b_e
    if np.any(h_i <= 0.0) or np.any(h_e <= 0.0):
        raise DryColumn(-1, float(min(h_i.min(), h_e.min())))
    return np.maximum(np.sqrt(g * h_i), np.sqrt(g * h_e))


def _edge_accumulate(res, els, k, flux, elen_k):
    """res[els, edge nodes] -= Jedge * sum_q w_q phi * flux (flux: (nel, 2))."""
    jedge = 0.5 * elen_k
    for q in range(NQ_SEG):
        wq = SEG_QW[q] * jedge * flux[:, q]
        res[els, EDGE_V0[k]] -= wq * EDGE_SHAPE[q, 0]
        res[els, EDGE_V1[k]] -= wq * EDGE_SHAPE[q, 1]


def rhs_free_surface(
    state: State2D,
    mesh: Mesh2D,
    params: PhysParams,
    els=None,
    source=None,
    eta_bc: Optional[Callable[[float], float]] = None,
):
    """Weak residual of the free-surface equation on the selected elements.

    Returns the residual (NOT yet multiplied by Mh^-1), shape (nel, 3).
    """
    els = np.arange(mesh.nt) if els is None else np.asarray(els)
    eta, qx, qy = state.eta, state.qx, state.qy
    j2d = mesh.j2d[els]
    res = np.zeros((els.size, 3), dtype=eta.dtype)

    # volume: J2D grad(phi_i) . int(Q)
    qx_int = (qx[els] @ TRI_BARY.T) @ TRI_QW
    qy_int = (qy[els] @ TRI_BARY.T) @ TRI_QW
    res += j2d[:, None] * (mesh.dphx[els] * qx_int[:, None] + mesh.dphy[els] * qy_int[:, None])

    for k in range(3):
        e2 = mesh.nbr[els, k]
        k2 = mesh.nbrk[els, k]
        tag = mesh.btag[els, k]
        nxk = mesh.enx[els, k][:, None]
        nyk = mesh.eny[els, k][:, None]
        eta_i = trace_int(eta, els, k)
        qx_i = trace_int(qx, els, k)
        qy_i = trace_int(qy, els, k)
        b_i = trace_int(mesh.b, els, k)
        eta_e = trace_ext(eta, e2, k2)
        qx_e = trace_ext(qx, e2, k2)
        qy_e = trace_ext(qy, e2, k2)
        b_e = trace_ext(mesh.b, e2, k2)
        # boundary closures
        wall = tag != BTAG_INTERIOR
        if np.any(wall):
            qn = nxk * qx_i + nyk * qy_i
            eta_w = eta_i if eta_bc is None else np.full_like(eta_i, eta_bc(state.t))
            is_open = (tag == BTAG_OPEN)[:, None]
            eta_e = np.where(wall[:, None], np.where(is_open, eta_w, eta_i), eta_e)
            qx_e = np.where(wall[:, None], np.where(is_open, qx_i, qx_i - 2.0 * qn * nxk), qx_e)
            qy_e = np.where(wall[:, None], np.where(is_open, qy_i, qy_i - 2.0 * qn * nyk), qy_e)
            b_e = np.where(wall[:, None], b_i, b_e)
        c = edge_celerity(eta_i, eta_e, b_i, b_e, params.g)
        flux = (
            nxk * 0.5 * (qx_i + qx_e)
            + nyk * 0.5 * (qy_i + qy_e)
            + c * 0.5 * (eta_i - eta_e)
        )
        _edge_accumulate(res, np.arange(els.size), k, flux, mesh.elen[els, k])

    if source is not None:
        res += apply_mh(np.asarray(source)[els], j2d)
    return res


def rhs_depth_momentum(
    state: State2D,
    mesh: Mesh2D,
    params: PhysParams,
    els=None,
    f3d2d=None,
    patm=None,
    eta_bc: Optional[Callable[[float], float]] = None,
):
    """Weak residual of the depth-momentum equation: (nel, 3, 2)."""
    els = np.arange(mesh.nt) if els is None else np.asarray(els)
    eta, qx, qy = state.eta, state.qx, state.qy
    g = params.g
    j2d = mesh.j2d[els]
    res_x = np.zeros((els.size, 3), dtype=eta.dtype)
    res_y = np.zeros((els.size, 3), dtype=eta.dtype)

    detax = (eta[els] * mesh.dphx[els]).sum(axis=1)
    detay = (eta[els] * mesh.dphy[els]).sum(axis=1)
    h_q = (eta[els] - mesh.b[els]) @ TRI_BARY.T  # (nel, 6)
    if np.any(h_q <= 0.0):
        raise DryColumn(int(els[np.argmin(h_q.min(axis=1))]), float(h_q.min()))
    # int over element of H phi_i
    h_phi = (h_q * TRI_QW[None, :]) @ TRI_BARY  # (nel, 3)
    res_x -= g * j2d[:, None] * detax[:, None] * h_phi
    res_y -= g * j2d[:, None] * detay[:, None] * h_phi

    if patm is not None:
        dpx = (np.asarray(patm)[els] * mesh.dphx[els]).sum(axis=1)
        dpy = (np.asarray(patm)[els] * mesh.dphy[els]).sum(axis=1)
        res_x -= j2d[:, None] * dpx[:, None] * h_phi / params.rho0
        res_y -= j2d[:, None] * dpy[:, None] * h_phi / params.rho0

    for k in range(3):
        e2 = mesh.nbr[els, k]
        k2 = mesh.nbrk[els, k]
        tag = mesh.btag[els, k]
        nxk = mesh.enx[els, k][:, None]
        nyk = mesh.eny[els, k][:, None]
        eta_i = trace_int(eta, els, k)
        qx_i = trace_int(qx, els, k)
        qy_i = trace_int(qy, els, k)
        b_i = trace_int(mesh.b, els, k)
        eta_e = trace_ext(eta, e2, k2)
        qx_e = trace_ext(qx, e2, k2)
        qy_e = trace_ext(qy, e2, k2)
        b_e = trace_ext(mesh.b, e2, k2)
        wall = tag != BTAG_INTERIOR
        if np.any(wall):
            qn = nxk * qx_i + nyk * qy_i
            eta_w = eta_i if eta_bc is None else np.full_like(eta_i, eta_bc(state.t))
            is_open = (tag == BTAG_OPEN)[:, None]
            eta_e = np.where(wall[:, None], np.where(is_open, eta_w, eta_i), eta_e)
            qx_e = np.where(wall[:, None], np.where(is_open, qx_i, qx_i - 2.0 * qn * nxk), qx_e)
            qy_e = np.where(wall[:, None], np.where(is_open, qy_i, qy_i - 2.0 * qn * nyk), qy_e)
            b_e = np.where(wall[:, None], b_i, b_e)
        c = edge_celerity(eta_i, eta_e, b_i, b_e, g)
        h_mean = 0.5 * ((eta_i - b_i) + (eta_e - b_e))
        d_eta = 0.5 * (eta_i - eta_e)
        # + << n phi g {{H}} [[eta]] >> - << max(c) [[Q]] >>  (note the sign
        # convention of _edge_accumulate, which subtracts)
        flux_x = -(g * nxk * h_mean * d_eta) + c * 0.5 * (qx_i - qx_e)
        flux_y = -(g * nyk * h_mean * d_eta) + c * 0.5 * (qy_i - qy_e)
        _edge_accumulate(res_x, np.arange(els.size), k, flux_x, mesh.elen[els, k])
        _edge_accumulate(res_y, np.arange(els.size), k, flux_y, mesh.elen[els, k])

    if f3d2d is not None:
        res_x += f3d2d[els, :, 0]
        res_y += f3d2d[els, :, 1]
    return np.stack([res_x, res_y], axis=-1)


def external_tendencies(state, mesh, params, els=None, f3d2d=None, source=None, patm=None, eta_bc=None):
    """(d eta/dt, d Qx/dt, d Qy/dt) nodal fields on the selected elements."""
    els = np.arange(mesh.nt) if els is None else np.asarray(els)
    j2d = mesh.j2d[els]
    r_eta = rhs_free_surface(state, mesh, params, els, source=source, eta_bc=eta_bc)
    r_q = rhs_depth_momentum(state, mesh, params, els, f3d2d=f3d2d, patm=patm, eta_bc=eta_bc)
    d_eta = apply_mh_inv(r_eta, j2d)
    d_qx = apply_mh_inv(r_q[:, :, 0], j2d)
    d_qy = apply_mh_inv(r_q[:, :, 1], j2d)
    return d_eta, d_qx, d_qy


def check_cfl(state: State2D, mesh: Mesh2D, params: PhysParams, dt2d: float) -> float:
    """Raise CflViolation if dt2d max(c) / min edge length > 1/3."""
    h = state.eta - mesh.b
    if np.any(h <= 0.0):
        raise DryColumn(int(np.argmin(h.min(axis=1))), float(h.min()))
    cmax = float(np.sqrt(params.g * h.max()))
    ratio = dt2d * cmax / mesh.min_edge
    if ratio > 1.0 / 3.0:
        raise CflViolation(
            f"dt2d = {dt2d:g} gives c dt / dx = {ratio:.3f} > 1/3 "
            f"(c_max = {cmax:.3f}, min edge = {mesh.min_edge:g})"
        )
    return ratio


@dataclass
class ExternalResult:
    state: State2D          # end-of-interval 2D state
    qbar_x: np.ndarray      # mean post-stage transport over the subcycle
    qbar_y: np.ndarray
    f2d_x: np.ndarray       # nodal residual forcing for the internal mode
    f2d_y: np.ndarray
    steps: int = 0


def subcycle_external(
    state: State2D,
    mesh: Mesh2D,
    params: PhysParams,
    m: int,
    dt2d: float,
    f3d2d=None,
    source=None,
    patm=None,
    eta_bc=None,
) -> ExternalResult:
    """Advance the external mode m substeps of SSP-RK3 and accumulate.

    Q-bar is the mean of the post-substep transports; F2D is the remaining
    2D tendency  (Q1 - Q0)/Dt - Mh^-1 F3D->2D  handed back to the internal
    momentum equation as a vertically uniform forcing.
    """
    check_cfl(state, mesh, params, dt2d)
    s = state.copy()
    q0x, q0y = s.qx.copy(), s.qy.copy()
    qbx = np.zeros_like(s.qx)
    qby = np.zeros_like(s.qy)

    def rhs(st):
        return external_tendencies(st, mesh, params, f3d2d=f3d2d, source=source, patm=patm, eta_bc=eta_bc)

    for _ in range(m):
        e0, x0, y0 = s.eta, s.qx, s.qy
        d1 = rhs(s)
        s1 = State2D(e0 + dt2d * d1[0], x0 + dt2d * d1[1], y0 + dt2d * d1[2], s.t + dt2d)
        d2 = rhs(s1)
        s2 = State2D(
            0.75 * e0 + 0.25 * (s1.eta + dt2d * d2[0]),
            0.75 * x0 + 0.25 * (s1.qx + dt2d * d2[1]),
            0.75 * y0 + 0.25 * (s1.qy + dt2d * d2[2]),
            s.t + 0.5 * dt2d,
        )
        d3 = rhs(s2)
        s = State2D(
            e0 / 3.0 + (2.0 / 3.0) * (s2.eta + dt2d * d3[0]),
            x0 / 3.0 + (2.0 / 3.0) * (s2.qx + dt2d * d3[1]),
            y0 / 3.0 + (2.0 / 3.0) * (s2.qy + dt2d * d3[2]),
            s.t + dt2d,
        )
        qbx += s.qx
        qby += s.qy

    qbx /= m
    qby /= m
    dt_full = m * dt2d
    f2dx = (s.qx - q0x) / dt_full
    f2dy = (s.qy - q0y) / dt_full
    if f3d2d is not None:
        fx = apply_mh_inv(f3d2d[:, :, 0], mesh.j2d)
        fy = apply_mh_inv(f3d2d[:, :, 1], mesh.j2d)
        f2dx = f2dx - fx
        f2dy = f2dy - fy
    return ExternalResult(state=s, qbar_x=qbx, qbar_y=qby, f2d_x=f2dx, f2d_y=f2dy, steps=m)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def integrate_nodal(field2d, mesh: Mesh2D) -> float:
    """Exact integral of a P1 field over the basin."""
    return float(apply_mh(np.asarray(field2d), mesh.j2d).sum())


def diagnostics_2d(state: State2D, mesh: Mesh2D, params: PhysParams) -> dict:
    h_q = (state.eta - mesh.b) @ TRI_BARY.T
    eta_q = state.eta @ TRI_BARY.T
    qx_q = state.qx @ TRI_BARY.T
    qy_q = state.qy @ TRI_BARY.T
    e_density = 0.5 * params.g * eta_q**2 + 0.5 * (qx_q**2 + qy_q**2) / h_q
    energy = float((mesh.j2d[:, None] * e_density * TRI_QW[None, :]).sum())
    volume = integrate_nodal(state.eta - mesh.b, mesh)
    return {
        "t": state.t,
        "total_volume": volume,
        "total_energy": energy,
        "eta_min": float(state.eta.min()),
        "eta_max": float(state.eta.max()),
    }
