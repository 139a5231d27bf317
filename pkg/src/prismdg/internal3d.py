"""Layered 3D internal mode on prismatic columns.

Fields live on the 6 prism nodes (top triangle 0-2, bottom triangle 3-5) and
are discontinuous across every face.  Horizontal derivatives are taken at
fixed parent height zeta and corrected with the metric vector m = grad(zeta),
so each integral carries either the full jacobian J = J2D Jz or, for the
vertical-transport terms, J2D alone (the layer thickness is absorbed into the
projected transport q ~ Jz u, which keeps those weak forms well defined while
the mesh moves).

The lateral advective flux of momentum, tracer and the layer transport w~ all
share one stabilized flux factor per stage,

    n . {{qbar}} + {{Jz/H}} max(c) [[eta]],

evaluated at the lateral quadrature points; a constant tracer then telescopes
against the w~ balance and the moving-mesh mass difference exactly, which is
what keeps uniform fields uniform over long moving-mesh runs.

The vertical advection/diffusion operator is assembled as a banded column
matrix (one 6x6 diagonal block per layer plus 3x6 couplings) so the midpoint
scheme can apply it either implicitly (predictor) or explicitly (corrector)
with the same discrete operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .columns import (
    MH_PATTERN,
    BandedColumnMatrix,
    _lu6_factor,
    _lu6_solve,
    apply_mh,
    solve_r_column,
    solve_w_column,
)
from .dg import (
    DVERT,
    EDGE_SHAPE,
    EDGE_V0,
    EDGE_V1,
    PenaltyParams,
    SEG_QP,
    SEG_QW,
    TRI_BARY,
    TRI_QW,
    VERT_SHAPE,
    penalty_sigma,
)
from .external2d import PhysParams, trace_ext, trace_int
from .mesh import ColumnGrid, total_thickness

# quadrature tables for the 12-point tensor rule: v = vertical Gauss point,
# q = horizontal Dunavant point, node j = (j % 3 vertex, j // 3 level)
W_QP = SEG_QW[:, None] * TRI_QW[None, :]                       # (2, 6)
PHI_QP = np.empty((2, 6, 6))
DPHIZ_Q = np.empty((6, 6))
for _j in range(6):
    PHI_QP[:, :, _j] = VERT_SHAPE[:, _j // 3][:, None] * TRI_BARY[None, :, _j % 3]
    DPHIZ_Q[:, _j] = DVERT[_j // 3] * TRI_BARY[:, _j % 3]
del _j


def _els(grid: ColumnGrid, els):
    return np.arange(grid.mesh.nt) if els is None else np.asarray(els)


def _layer_view(field, grid: ColumnGrid):
    """(P, ...) prism field as (nt, L, ...)."""
    f = np.asarray(field)
    return f.reshape((grid.mesh.nt, grid.n_layers) + f.shape[1:])


def _at_hq(nodal3):
    """corner values (..., 3) -> horizontal quadrature values (..., 6)."""
    return nodal3 @ TRI_BARY.T


def _at_qp(nodal6):
    """prism nodal (..., 6) -> (..., 2, 6) values at the tensor points."""
    top = _at_hq(nodal6[..., 0:3])
    bot = _at_hq(nodal6[..., 3:6])
    return (
        VERT_SHAPE[:, 0][:, None] * top[..., None, :]
        + VERT_SHAPE[:, 1][:, None] * bot[..., None, :]
    )


def _dzeta_hq(nodal6):
    """parent vertical derivative at the horizontal points: (..., 6)."""
    return 0.5 * (_at_hq(nodal6[..., 0:3]) - _at_hq(nodal6[..., 3:6]))


def _iso_grad(nodal6, dphx, dphy):
    """per-level iso-zeta gradients: (..., 2 level, 2 xy), constant per prism."""
    gt = np.stack(
        [(nodal6[..., 0:3] * dphx).sum(-1), (nodal6[..., 0:3] * dphy).sum(-1)], axis=-1
    )
    gb = np.stack(
        [(nodal6[..., 3:6] * dphx).sum(-1), (nodal6[..., 3:6] * dphy).sum(-1)], axis=-1
    )
    return np.stack([gt, gb], axis=-2)


# ---------------------------------------------------------------------------
# per-prism mass
# ---------------------------------------------------------------------------


def prism_mass(grid: ColumnGrid, els=None):
    """(P, 6, 6) prism mass matrices (rows outside `els` stay zero)."""
    els = _els(grid, els)
    L = grid.n_layers
    jzq = _at_hq(_layer_view(grid.jz, grid)[els])          # (n, L, 6)
    meas = grid.mesh.j2d[els][:, None, None] * jzq          # (n, L, 6)
    m = np.einsum("vq,nlq,vqi,vqj->nlij", W_QP, meas, PHI_QP, PHI_QP)
    out = np.zeros((grid.n_prisms, 6, 6))
    out.reshape(grid.mesh.nt, L, 6, 6)[els] = m
    return out


def mass_apply(mass, field):
    """M @ f for mass (P, 6, 6) and f (P, 6[, nc])."""
    f = np.asarray(field)
    if f.ndim == mass.ndim - 1:
        return np.einsum("pij,pj->pi", mass, f)
    return np.einsum("pij,pjc->pic", mass, f)


def mass_solve(mass, rhs, grid: ColumnGrid, els=None):
    """Solve M x = rhs per prism with the unrolled 6x6 LU."""
    els = _els(grid, els)
    L = grid.n_layers
    f = np.asarray(rhs)
    had = f.ndim == 3
    f3 = f if had else f[..., None]
    out = np.zeros_like(f3)
    mv = _layer_view(mass, grid)
    fv = _layer_view(f3, grid)
    ov = _layer_view(out, grid)
    for l in range(L):
        a = mv[els, l].copy()
        b = fv[els, l].copy()
        _lu6_factor(a, l)
        _lu6_solve(a, b)
        ov[els, l] = b
    return out if had else out[..., 0]


def integrate_prism(mass, field) -> float:
    """Exact integral of a nodal prism field."""
    return float(mass_apply(mass, np.asarray(field)).sum())


# ---------------------------------------------------------------------------
# transport projection and the depth-consistency correction
# ---------------------------------------------------------------------------


def project_transport(grid: ColumnGrid, ux, uy, els=None, mass=None):
    """Project the layer transport (Jz u) onto the prism nodes: (P, 6, 2).

    Weak form: M q = <phi (Jz u) J2D Jz>, one 6x6 solve per prism.  For u
    constant over a layer this reproduces q = Jz u nodally.
    """
    els = _els(grid, els)
    if mass is None:
        mass = prism_mass(grid, els)
    jzq = _at_hq(_layer_view(grid.jz, grid)[els])  # (n, L, 6)
    meas = grid.mesh.j2d[els][:, None, None] * jzq * jzq
    uq = np.stack(
        [_at_qp(_layer_view(ux, grid)[els]), _at_qp(_layer_view(uy, grid)[els])], axis=-1
    )  # (n, L, 2, 6, 2)
    rhs = np.einsum("vq,nlq,nlvqc,vqi->nlic", W_QP, meas, uq, PHI_QP)
    out = np.zeros((grid.n_prisms, 6, 2))
    out.reshape(grid.mesh.nt, grid.n_layers, 6, 2)[els] = rhs
    return mass_solve(mass, out, grid, els)


def column_sum(field, grid: ColumnGrid):
    """Sum a prism field over both levels of every layer: (nt, 3[, nc])."""
    fv = _layer_view(np.asarray(field), grid)
    return fv[:, :, 0:3].sum(axis=1) + fv[:, :, 3:6].sum(axis=1)


def consistent_transport(grid: ColumnGrid, q, qbar_x, qbar_y, els=None):
    """Distribute the external-mode transport mismatch over the column.

    qbar = q + (Jz / H) (Qbar - sum_col q) per node; since the thicknesses
    2 Jz sum to H at every corner, the corrected transport column-sums to
    Qbar exactly.
    """
    els = _els(grid, els)
    qbar2d = np.stack([np.asarray(qbar_x), np.asarray(qbar_y)], axis=-1)  # (nt, 3, 2)
    h = total_thickness(grid)
    mismatch = (qbar2d - column_sum(q, grid)) / h[..., None]   # (nt, 3, 2)
    out = np.zeros_like(np.asarray(q))
    qv = _layer_view(q, grid)
    ov = _layer_view(out, grid)
    jzv = _layer_view(grid.jz, grid)
    for lev in range(2):
        sl = slice(3 * lev, 3 * lev + 3)
        ov[els, :, sl] = qv[els, :, sl] + jzv[els][..., None] * mismatch[els][:, None]
    return out


# ---------------------------------------------------------------------------
# lateral traces and the shared stabilized flux factor
# ---------------------------------------------------------------------------


def _lat_pair(x0, x1, mirror: bool):
    """Edge-point values from the two edge-node values (..., 2h)."""
    s0, s1 = (1, 0) if mirror else (0, 1)
    return x0[..., None] * EDGE_SHAPE[:, s0] + x1[..., None] * EDGE_SHAPE[:, s1]


def _lat_trace3(field3, els, k, mesh, mirror: bool):
    """Trace of an (nt, 3) corner field on lateral faces of edge k: (n, 2h)."""
    if not mirror:
        return trace_int(field3, els, k)
    return trace_ext(field3, mesh.nbr[els, k], mesh.nbrk[els, k])


def _lat_trace6(field6, grid, els, k, mirror: bool):
    """Trace of a (P, 6[, c]) prism field on edge-k lateral faces: (n, L, 2v, 2h[, c])."""
    mesh = grid.mesh
    fv = _layer_view(field6, grid)
    if not mirror:
        rows, v0, v1 = els, EDGE_V0[k], EDGE_V1[k]
        t0, t1 = fv[rows, :, v0], fv[rows, :, v1]
        b0, b1 = fv[rows, :, 3 + v0], fv[rows, :, 3 + v1]
    else:
        e2 = np.maximum(mesh.nbr[els, k], 0)
        k2 = mesh.nbrk[els, k]
        n = els.size
        rows = np.arange(n)
        g = fv[e2]
        t0, t1 = g[rows, :, EDGE_V0[k2]], g[rows, :, EDGE_V1[k2]]
        b0, b1 = g[rows, :, 3 + EDGE_V0[k2]], g[rows, :, 3 + EDGE_V1[k2]]
    if np.asarray(field6).ndim == 3:  # component axis: move it last again
        ht = _lat_pair(np.moveaxis(t0, -1, 0), np.moveaxis(t1, -1, 0), mirror)
        hb = _lat_pair(np.moveaxis(b0, -1, 0), np.moveaxis(b1, -1, 0), mirror)
        out = (
            VERT_SHAPE[:, 0][:, None] * ht[..., None, :]
            + VERT_SHAPE[:, 1][:, None] * hb[..., None, :]
        )
        return np.moveaxis(out, 0, -1)  # (n, L, 2v, 2h, c)
    ht = _lat_pair(t0, t1, mirror)
    hb = _lat_pair(b0, b1, mirror)
    return (
        VERT_SHAPE[:, 0][:, None] * ht[..., None, :]
        + VERT_SHAPE[:, 1][:, None] * hb[..., None, :]
    )


def _lat_scatter(res_v, els, k, x, jedge, sign: float):
    """res[n, l, node] += sign * Jedge * sum_vh w phi(node) x[n, l, v, h]."""
    for lev in range(2):
        for hn in range(2):
            node = 3 * lev + (EDGE_V0[k] if hn == 0 else EDGE_V1[k])
            coeff = (
                (VERT_SHAPE[:, lev] * SEG_QW)[:, None]
                * (EDGE_SHAPE[:, hn] * SEG_QW)[None, :]
            )
            res_v[els, :, node] += sign * jedge[:, None] * np.einsum(
                "vh,nlvh->nl", coeff, x
            )


def lateral_flux_factor(grid: ColumnGrid, qfield, params: PhysParams, els=None):
    """Stabilized lateral flux factor per (element, layer, edge, v, h).

    factor = n . {{q}} + {{Jz/H}} max(c) [[eta]]  with c = sqrt(g H) per side
    at the edge points.  Boundary faces are exact zeros (mirror closure), so
    advective wall fluxes vanish identically.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    eta, b = grid.eta, mesh.b
    h2d = eta - b
    jzh = grid.jz / np.repeat(h2d, L, axis=0)  # (P, 3) thickness fractions / 2
    out = np.zeros((mesh.nt, L, 3, 2, 2))
    for k in range(3):
        interior = mesh.btag[els, k] == 0
        if not np.any(interior):
            continue
        sub = els[interior]
        nxk = mesh.enx[sub, k][:, None]
        nyk = mesh.eny[sub, k][:, None]
        eta_i = _lat_trace3(eta, sub, k, mesh, False)
        eta_e = _lat_trace3(eta, sub, k, mesh, True)
        h_i = eta_i - _lat_trace3(b, sub, k, mesh, False)
        h_e = eta_e - _lat_trace3(b, sub, k, mesh, True)
        c = np.maximum(np.sqrt(params.g * h_i), np.sqrt(params.g * h_e))
        stab = 0.5 * (eta_i - eta_e) * c  # (n, 2h)
        q_i = _lat_trace6(qfield, grid, sub, k, False)
        q_e = _lat_trace6(qfield, grid, sub, k, True)
        qm = 0.5 * (q_i + q_e)  # (n, L, 2v, 2h, 2)
        jzh_i = _lat_trace6(_corner_to_prism(jzh), grid, sub, k, False)
        jzh_e = _lat_trace6(_corner_to_prism(jzh), grid, sub, k, True)
        jzh_m = 0.5 * (jzh_i + jzh_e)  # (n, L, 2v, 2h), zeta-independent
        fac = (
            nxk[:, None, None] * qm[..., 0]
            + nyk[:, None, None] * qm[..., 1]
            + jzh_m * stab[:, None, None, :]
        )
        out[sub, :, k] = fac
    return out


def _corner_to_prism(corner3):
    """(P, 3) corner data as a zeta-independent (P, 6) prism field."""
    return np.concatenate([corner3, corner3], axis=1)


# ---------------------------------------------------------------------------
# baroclinic head
# ---------------------------------------------------------------------------


def compute_r(grid: ColumnGrid, rho, params: PhysParams, els=None):
    """Vertically accumulated horizontal density-gradient force: (P, 6, 2).

    Weak right-hand side (per horizontal component):
      -g <phi grad_h(rho) J2D Jz>                         (full gradient)
      +2g << phi n_h [[rho]] |J2D/n_z| >>                 (interior top faces)
      + g << phi n_h [[rho]] {{Jz}} Jedge >>              (interior lateral)
      - Mh (g rho_surf grad_h eta)  folded into the surface rows,
    then a top-anchored column sweep.  For layer-wise constant free surface
    (grad_h eta = 0 per element) and constant rho, every term vanishes and
    r is exactly zero no matter how the layer thicknesses jump.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    g = params.g
    j2d = mesh.j2d[els]
    rhov = _layer_view(rho, grid)
    jzq = _at_hq(_layer_view(grid.jz, grid)[els])
    dphx, dphy = mesh.dphx[els], mesh.dphy[els]

    rhs = np.zeros((els.size, L, 6, 2))

    # volume: -g <phi grad_h(rho) J2D Jz>, grad_h = iso part + m_h d/dzeta
    giso = _iso_grad(rhov[els], dphx[:, None, :], dphy[:, None, :])  # (n, L, 2lev, 2)
    gq = (
        VERT_SHAPE[:, 0][:, None, None] * giso[:, :, None, 0, None, :]
        + VERT_SHAPE[:, 1][:, None, None] * giso[:, :, None, 1, None, :]
    )  # (n, L, 2v, 1, 2) iso gradient at the vertical points
    dzr = _dzeta_hq(rhov[els])  # (n, L, 6)
    mid2 = (
        _layer_view(grid.dzmid, grid)[els][:, :, None, :]
        + SEG_QP[None, None, :, None] * _layer_view(grid.djz, grid)[els][:, :, None, :]
    )  # (n, L, 2v, 2) = -m_h Jz
    m_h = -mid2[:, :, :, None, :] / jzq[:, :, None, :, None]  # (n, L, 2v, 6q, 2)
    grad_full = gq + m_h * dzr[:, :, None, :, None]
    meas = j2d[:, None, None] * jzq  # (n, L, 6)
    rhs -= g * np.einsum("vq,nlq,vqi,nlvqc->nlic", W_QP, meas, PHI_QP, grad_full)

    # interior horizontal interfaces: +2g phi n_h [[rho]] |J2D/n_z|
    # with n_h f |J2D/n_z| = -nhat_z grad_h(z_face) J2D f and nhat_z = +1
    if L > 1:
        drho = 0.5 * (rhov[els][:, 1:, 0:3] - rhov[els][:, :-1, 3:6])  # (n, L-1, 3)
        face_int = drho @ MH_PATTERN.T  # exact integral of phi_i [[rho]] over T-hat
        dzf = _layer_view(grid.dztop, grid)[els][:, 1:, :]  # (n, L-1, 2)
        contrib = 2.0 * g * j2d[:, None, None, None] * (-dzf[:, :, None, :]) * face_int[..., None]
        rhs[:, 1:, 0:3, :] += contrib

    # interior lateral faces: +g phi n_h [[rho]] {{Jz}} Jedge
    rhs_full = np.zeros((mesh.nt, L, 6, 2))
    rhs_full[els] = rhs
    jz6 = _corner_to_prism(grid.jz)
    for k in range(3):
        interior = mesh.btag[els, k] == 0
        if not np.any(interior):
            continue
        sub = els[interior]
        rho_i = _lat_trace6(rho, grid, sub, k, False)
        rho_e = _lat_trace6(rho, grid, sub, k, True)
        drho = 0.5 * (rho_i - rho_e)  # (n, L, 2v, 2h)
        jz_m = 0.5 * (
            _lat_trace6(jz6, grid, sub, k, False) + _lat_trace6(jz6, grid, sub, k, True)
        )
        jedge = 0.5 * mesh.elen[sub, k]
        for c, ncomp in ((0, mesh.enx), (1, mesh.eny)):
            x = ncomp[sub, k][:, None, None, None] * drho * jz_m
            _lat_scatter(rhs_full[..., c], sub, k, x, jedge, g)

    # surface fold: r(eta) = 0 transforms into -Mh (g rho_surf grad_h eta)
    detax = (grid.eta[els] * dphx).sum(axis=1)
    detay = (grid.eta[els] * dphy).sum(axis=1)
    mh_rho = apply_mh(rhov[els, 0, 0:3], j2d)  # (n, 3)
    rhs_full[els, 0, 0:3, 0] -= g * mh_rho * detax[:, None]
    rhs_full[els, 0, 0:3, 1] -= g * mh_rho * detay[:, None]

    r = np.zeros((grid.n_prisms, 6, 2))
    sol = solve_r_column(rhs_full[els], j2d)
    r.reshape(mesh.nt, L, 6, 2)[els] = sol
    return r


# ---------------------------------------------------------------------------
# vertical velocity diagnostics: w from continuity, w~ from the layer balance
# ---------------------------------------------------------------------------


def _geom(grid: ColumnGrid, els):
    """Per-prism geometry bundle used by the volume assemblies."""
    jzq = _at_hq(_layer_view(grid.jz, grid)[els])           # (n, L, 6)
    mid2 = (
        _layer_view(grid.dzmid, grid)[els][:, :, None, :]
        + SEG_QP[None, None, :, None] * _layer_view(grid.djz, grid)[els][:, :, None, :]
    )                                                        # (n, L, 2v, 2) = -m_h Jz
    m_h = -mid2[:, :, :, None, :] / jzq[:, :, None, :, None]  # (n, L, 2v, 6q, 2)
    return jzq, mid2, m_h


def _iso_test_scatter(res, els_rows, svals, dphx, dphy, j2d):
    """res[:, :, lev*3+i] += J2D (dphx_i S_x + dphy_i S_y) for S (n, L, lev, 2)."""
    for lev in range(2):
        for i in range(3):
            res[els_rows, :, 3 * lev + i] += j2d[:, None] * (
                dphx[:, i, None] * svals[:, :, lev, 0]
                + dphy[:, i, None] * svals[:, :, lev, 1]
            )


def compute_w(grid: ColumnGrid, q, ux, uy, params: PhysParams, factor, els=None):
    """Vertical velocity from layer-wise continuity: (P, 6).

    The bed-anchored sweep inverts the same two-level balance as the w~
    equation; the right-hand side is the full horizontal transport divergence
    (iso part plus metric correction, horizontal-face fluxes of the mean
    transport slope, and the stabilized lateral flux), and the bed boundary
    condition u . grad_h(b) enters as a folded mass term.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    j2d = mesh.j2d[els]
    dphx, dphy = mesh.dphx[els], mesh.dphy[els]
    jzq, mid2, m_h = _geom(grid, els)
    qv = _layer_view(q, grid)[els]                           # (n, L, 6, 2)
    qq = np.einsum("nljc,vqj->nlvqc", qv, PHI_QP)            # (n, L, 2v, 6q, 2)

    rhs = np.zeros((els.size, L, 6))

    # volume: + <q . grad_h(phi) J2D> with the full test-function gradient
    s_iso = np.einsum("vq,vm,nlvqc->nlmc", W_QP, VERT_SHAPE, qq)  # m = test level
    for lev in range(2):
        for i in range(3):
            rhs[:, :, 3 * lev + i] += j2d[:, None] * (
                dphx[:, i, None] * s_iso[:, :, lev, 0]
                + dphy[:, i, None] * s_iso[:, :, lev, 1]
            )
    qm = (qq * m_h).sum(axis=-1)                             # (n, L, 2v, 6q)
    met = np.einsum("vq,nlvq,qi->nli", W_QP, qm, TRI_BARY)
    rhs[:, :, 0:3] += j2d[:, None, None] * DVERT[0] * met
    rhs[:, :, 3:6] += j2d[:, None, None] * DVERT[1] * met

    # horizontal faces: - << n_h . {{q / Jz}} phi |J2D/n_z| >>, every face,
    # with the one-sided value at the surface and the bed
    ut = np.einsum("nljc,qj->nlqc", qv[:, :, 0:3], TRI_BARY) / jzq[..., None]
    ub = np.einsum("nljc,qj->nlqc", qv[:, :, 3:6], TRI_BARY) / jzq[..., None]
    dzt = _layer_view(grid.dztop, grid)[els]                 # (n, L, 2)
    dzb = _layer_view(grid.dzbot, grid)[els]
    mean_top = ut.copy()
    mean_top[:, 1:] = 0.5 * (ut[:, 1:] + ub[:, :-1])
    mean_bot = ub.copy()
    mean_bot[:, :-1] = 0.5 * (ub[:, :-1] + ut[:, 1:])
    ft = np.einsum("nlqc,nlc->nlq", mean_top, dzt)
    fb = np.einsum("nlqc,nlc->nlq", mean_bot, dzb)
    rhs[:, :, 0:3] += j2d[:, None, None] * np.einsum("q,nlq,qi->nli", TRI_QW, ft, TRI_BARY)
    rhs[:, :, 3:6] -= j2d[:, None, None] * np.einsum("q,nlq,qi->nli", TRI_QW, fb, TRI_BARY)

    # lateral stabilized flux
    rhs_full = np.zeros((mesh.nt, L, 6))
    rhs_full[els] = rhs
    for k in range(3):
        interior = mesh.btag[els, k] == 0
        if not np.any(interior):
            continue
        sub = els[interior]
        _lat_scatter(rhs_full, sub, k, factor[sub, :, k], 0.5 * mesh.elen[sub, k], -1.0)

    # bed kinematic fold: w(bed) = u . grad_h(b)
    dbx = (mesh.b[els] * dphx).sum(axis=1)
    dby = (mesh.b[els] * dphy).sum(axis=1)
    uxb = _layer_view(ux, grid)[els, L - 1, 3:6]
    uyb = _layer_view(uy, grid)[els, L - 1, 3:6]
    w_bed = uxb * dbx[:, None] + uyb * dby[:, None]
    rhs_full[els, L - 1, 3:6] += apply_mh(w_bed, j2d)

    out = np.zeros((grid.n_prisms, 6))
    out.reshape(mesh.nt, L, 6)[els] = solve_w_column(rhs_full[els], j2d)
    return out


def compute_wtilde(grid: ColumnGrid, qbar, factor, els=None):
    """Grid-relative vertical transport from the layer balance: (P, 6).

    Same left-hand side as the continuity sweep, but the right-hand side
    keeps only the iso-zeta part of the test gradient (the metric part of
    the horizontal transport is what w~ carries) and the shared stabilized
    lateral flux; the bed value is anchored at zero.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    j2d = mesh.j2d[els]
    dphx, dphy = mesh.dphx[els], mesh.dphy[els]
    qv = _layer_view(qbar, grid)[els]
    qq = np.einsum("nljc,vqj->nlvqc", qv, PHI_QP)

    rhs = np.zeros((els.size, L, 6))
    s_iso = np.einsum("vq,vm,nlvqc->nlmc", W_QP, VERT_SHAPE, qq)
    for lev in range(2):
        for i in range(3):
            rhs[:, :, 3 * lev + i] += j2d[:, None] * (
                dphx[:, i, None] * s_iso[:, :, lev, 0]
                + dphy[:, i, None] * s_iso[:, :, lev, 1]
            )

    rhs_full = np.zeros((mesh.nt, L, 6))
    rhs_full[els] = rhs
    for k in range(3):
        interior = mesh.btag[els, k] == 0
        if not np.any(interior):
            continue
        sub = els[interior]
        _lat_scatter(rhs_full, sub, k, factor[sub, :, k], 0.5 * mesh.elen[sub, k], -1.0)

    out = np.zeros((grid.n_prisms, 6))
    out.reshape(mesh.nt, L, 6)[els] = solve_w_column(rhs_full[els], j2d)
    return out


# ---------------------------------------------------------------------------
# horizontal momentum / tracer right-hand sides (explicit)
# ---------------------------------------------------------------------------


def _horizontal_diffusion(grid: ColumnGrid, fields, kh: float, kv: float, els, wall_mirror: bool):
    """Explicit part of the diffusion operator: (nt, L, 6, nc) weak residual.

    The diffusivity tensor diag(kh, kh, kv) is split about the metric vector;
    the remainder D_e = diag(kh, kh, kv - kappa_i) satisfies m . D_e . m = 0,
    so it has no flux across iso-zeta faces (their normal is parallel to m)
    and the top/bottom penalty lives entirely in the implicit operator.  Here:
    the volume term with full gradients, the mean flux through interior
    horizontal faces written with face-slope times J2D (no square roots), and
    the lateral mean flux plus interior-penalty.  Wall faces keep only the
    penalty, and only when `wall_mirror` (velocity: damps the mirrored normal
    component; tracers are insulated instead).
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    nc = fields.shape[-1]
    fv = _layer_view(fields, grid)                          # (nt, L, 6, c)
    acc = np.zeros((mesh.nt, L, 6, nc))
    if kh == 0.0 and kv == 0.0:
        return acc
    j2d = mesh.j2d[els]

    # full-mesh per-prism constants (the lateral loop gathers neighbours)
    giso_all = np.stack(
        [_iso_grad(fv[..., c], mesh.dphx[:, None, :], mesh.dphy[:, None, :]) for c in range(nc)],
        axis=-1,
    )                                                        # (nt, L, 2lev, 2, c)
    dzn_all = 0.5 * (fv[:, :, 0:3] - fv[:, :, 3:6])          # (nt, L, 3, c)
    dzn6 = np.concatenate([dzn_all, dzn_all], axis=2).reshape(-1, 6, nc)
    jz6 = _corner_to_prism(grid.jz)
    dzmid_v = _layer_view(grid.dzmid, grid)
    djz_v = _layer_view(grid.djz, grid)
    mid2_all = dzmid_v[:, :, None, :] + SEG_QP[None, None, :, None] * djz_v[:, :, None, :]

    # --- volume ---
    jzq, mid2, m_h = _geom(grid, els)
    dzq = np.einsum("nljc,qj->nlqc", dzn_all[els], TRI_BARY)  # (n, L, 6, c)
    gv = (
        VERT_SHAPE[:, 0][:, None, None] * giso_all[els][:, :, None, 0]
        + VERT_SHAPE[:, 1][:, None, None] * giso_all[els][:, :, None, 1]
    )                                                        # (n, L, 2v, 2d, c)
    gh = gv[:, :, :, None] + m_h[..., None] * dzq[:, :, None, :, None, :]  # (n,L,v,q,d,c)
    sv = np.einsum("vq,nlq,vm,nlvqdc->nlmdc", W_QP, jzq, VERT_SHAPE, gh)
    for lev in range(2):
        for i in range(3):
            acc[els, :, 3 * lev + i] -= (
                kh
                * j2d[:, None, None]
                * (
                    mesh.dphx[els][:, None, i, None] * sv[:, :, lev, 0]
                    + mesh.dphy[els][:, None, i, None] * sv[:, :, lev, 1]
                )
            )
    ghm = np.einsum("nlvqdc,nlvqd->nlvqc", gh, m_h)
    sm = np.einsum("vq,nlq,nlvqc,qi->nlic", W_QP, jzq, ghm, TRI_BARY)
    acc[els, :, 0:3] -= kh * j2d[:, None, None, None] * DVERT[0] * sm
    acc[els, :, 3:6] -= kh * j2d[:, None, None, None] * DVERT[1] * sm
    # vertical remainder: d_e,zz m_z^2 = -kh |m_h/m_z|^2 / Jz^2
    msq = (mid2**2).sum(axis=-1)                             # (n, L, 2v)
    svert = np.einsum("vq,nlv,nlq,nlqc,qi->nlic", W_QP, msq, 1.0 / jzq, dzq, TRI_BARY)
    acc[els, :, 0:3] += kh * j2d[:, None, None, None] * DVERT[0] * svert
    acc[els, :, 3:6] += kh * j2d[:, None, None, None] * DVERT[1] * svert

    # --- interior horizontal faces: mean flux, no penalty (n.D_e.n = 0) ---
    if L > 1:
        dzt = _layer_view(grid.dztop, grid)[els]             # (n, L, 2)
        dzb = _layer_view(grid.dzbot, grid)[els]
        dzf = dzt[:, 1:]                                     # face below layer l-1
        gl = giso_all[els]
        # side below the face: layer f (its top, zeta = +1)
        mlo = -dzf[:, :, None, :] / jzq[:, 1:, :, None]      # (n, L-1, 6q, 2)
        gh_lo = gl[:, 1:, 0][:, :, None] + mlo[..., None] * dzq[:, 1:, :, None, :]
        dezz_lo = -kh * (dzf**2).sum(-1)                     # (n, L-1)
        flux_lo = j2d[:, None, None, None] * (
            -kh * np.einsum("nlqdc,nld->nlqc", gh_lo, dzf)
            + dezz_lo[:, :, None, None] * dzq[:, 1:] / jzq[:, 1:, :, None]
        )
        # side above: layer f-1 (its bottom, zeta = -1)
        dzfh = dzb[:, :-1]
        mhi = -dzfh[:, :, None, :] / jzq[:, :-1, :, None]
        gh_hi = gl[:, :-1, 1][:, :, None] + mhi[..., None] * dzq[:, :-1, :, None, :]
        dezz_hi = -kh * (dzfh**2).sum(-1)
        flux_hi = j2d[:, None, None, None] * (
            -kh * np.einsum("nlqdc,nld->nlqc", gh_hi, dzfh)
            + dezz_hi[:, :, None, None] * dzq[:, :-1] / jzq[:, :-1, :, None]
        )
        mean = 0.5 * (flux_lo + flux_hi)
        face = np.einsum("q,nlqc,qi->nlic", TRI_QW, mean, TRI_BARY)
        acc[els, 1:, 0:3] += face
        acc[els, :-1, 3:6] -= face

    # --- lateral faces ---
    for k in range(3):
        tag = mesh.btag[els, k]
        interior = tag == 0
        jedge_all = 0.5 * mesh.elen[els, k]
        if np.any(interior):
            sub = els[interior]
            e2 = mesh.nbr[sub, k]
            jedge = jedge_all[interior]
            nxk, nyk = mesh.enx[sub, k], mesh.eny[sub, k]
            tr_i = _lat_trace6(fields, grid, sub, k, False)  # (n, L, v, h, c)
            tr_e = _lat_trace6(fields, grid, sub, k, True)
            jz_i = _lat_trace6(jz6, grid, sub, k, False)     # (n, L, v, h)
            jz_e = _lat_trace6(jz6, grid, sub, k, True)
            dz_i = _lat_trace6(dzn6, grid, sub, k, False)
            dz_e = _lat_trace6(dzn6, grid, sub, k, True)

            def side_flux(rows, jtr, dtr, gall, mall):
                gvs = (
                    VERT_SHAPE[:, 0][:, None, None] * gall[rows][:, :, None, 0]
                    + VERT_SHAPE[:, 1][:, None, None] * gall[rows][:, :, None, 1]
                )                                            # (n, L, v, d, c)
                mlat = -mall[rows][:, :, :, None, :] / jtr[:, :, :1, :, None]
                ghs = gvs[:, :, :, None] + mlat[..., None] * dtr[..., None, :]
                ndot = nxk[:, None, None, None] * ghs[..., 0, :] + nyk[:, None, None, None] * ghs[..., 1, :]
                return kh * jtr[..., None] * ndot

            flux_i = side_flux(sub, jz_i, dz_i, giso_all, mid2_all)
            flux_e = side_flux(e2, jz_e, dz_e, giso_all, mid2_all)
            mean = 0.5 * (flux_i + flux_e)
            sig = penalty_sigma(
                0.5 * mesh.j2d[sub] / mesh.elen[sub, k],
                0.5 * mesh.j2d[e2] / mesh.elen[sub, k],
                dim=3,
            )
            pen = sig * kh * 0.5 * (jz_i + jz_e) * 0.5  # sigma kh {{Jz}} [[.]] factor
            for c in range(nc):
                _lat_scatter(acc[..., c], sub, k, mean[..., c], jedge, 1.0)
                _lat_scatter(acc[..., c], sub, k, pen * (tr_i[..., c] - tr_e[..., c]), jedge, -1.0)
        if wall_mirror and np.any(~interior):
            sub = els[~interior]
            jedge = jedge_all[~interior]
            nxk, nyk = mesh.enx[sub, k], mesh.eny[sub, k]
            tr_i = _lat_trace6(fields, grid, sub, k, False)
            jz_i = _lat_trace6(jz6, grid, sub, k, False)
            ln = 0.5 * mesh.j2d[sub] / mesh.elen[sub, k]
            sig = penalty_sigma(ln, ln, dim=3)
            un = nxk[:, None, None, None] * tr_i[..., 0] + nyk[:, None, None, None] * tr_i[..., 1]
            pen = sig[:, None, None, None] * kh * jz_i
            _lat_scatter(acc[..., 0], sub, k, pen * un * nxk[:, None, None, None], jedge, -1.0)
            _lat_scatter(acc[..., 1], sub, k, pen * un * nyk[:, None, None, None], jedge, -1.0)
    return acc


def horizontal_rhs(
    grid: ColumnGrid,
    ux,
    uy,
    q_adv,
    factor,
    r,
    mass,
    params: PhysParams,
    els=None,
):
    """Explicit horizontal momentum forcing: (P, 6, 2) weak residual.

    Advection by the projected transport (volume term against the iso-zeta
    test gradient, upwinded stabilized lateral flux), the explicit part of
    the split diffusion, the Coriolis rotation and the baroclinic head.
    `factor` must be the lateral flux factor built from the same `q_adv`.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    j2d = mesh.j2d[els]
    fields = np.stack([np.asarray(ux), np.asarray(uy)], axis=-1)
    acc = np.zeros((mesh.nt, L, 6, 2))

    uq = np.einsum("nljc,vqj->nlvqc", _layer_view(fields, grid)[els], PHI_QP)
    qaq = np.einsum("nljd,vqj->nlvqd", _layer_view(q_adv, grid)[els], PHI_QP)
    s_adv = np.einsum("vq,vm,nlvqc,nlvqd->nlmcd", W_QP, VERT_SHAPE, uq, qaq)
    for lev in range(2):
        for i in range(3):
            acc[els, :, 3 * lev + i] += j2d[:, None, None] * (
                mesh.dphx[els][:, None, i, None] * s_adv[:, :, lev, :, 0]
                + mesh.dphy[els][:, None, i, None] * s_adv[:, :, lev, :, 1]
            )

    for k in range(3):
        interior = mesh.btag[els, k] == 0
        if not np.any(interior):
            continue
        sub = els[interior]
        fac = factor[sub, :, k]                              # (n, L, v, h)
        tr_i = _lat_trace6(fields, grid, sub, k, False)
        tr_e = _lat_trace6(fields, grid, sub, k, True)
        up = np.where(fac[..., None] >= 0.0, tr_i, tr_e)
        jedge = 0.5 * mesh.elen[sub, k]
        for c in range(2):
            _lat_scatter(acc[..., c], sub, k, up[..., c] * fac, jedge, -1.0)

    acc += _horizontal_diffusion(grid, fields, params.kappa_h, params.kappa_v, els, wall_mirror=True)

    out = acc.reshape(grid.n_prisms, 6, 2)
    if params.f != 0.0:
        mu = mass_apply(mass, fields)
        out[..., 0] += params.f * mu[..., 1]
        out[..., 1] -= params.f * mu[..., 0]
    out -= mass_apply(mass, np.asarray(r)) / params.rho0
    return out


def tracer_horizontal_rhs(grid: ColumnGrid, tr, qbar, factor, params: PhysParams, els=None):
    """Explicit horizontal tracer forcing: (P, 6) weak residual.

    Advection against the iso-zeta test gradient with the shared stabilized
    lateral flux (upwinded tracer trace), plus the explicit part of the split
    tracer diffusion; walls are insulated.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    j2d = mesh.j2d[els]
    acc = np.zeros((mesh.nt, L, 6))

    tq = np.einsum("nlj,vqj->nlvq", _layer_view(tr, grid)[els], PHI_QP)
    qaq = np.einsum("nljd,vqj->nlvqd", _layer_view(qbar, grid)[els], PHI_QP)
    s_adv = np.einsum("vq,vm,nlvq,nlvqd->nlmd", W_QP, VERT_SHAPE, tq, qaq)
    for lev in range(2):
        for i in range(3):
            acc[els, :, 3 * lev + i] += j2d[:, None] * (
                mesh.dphx[els][:, i, None] * s_adv[:, :, lev, 0]
                + mesh.dphy[els][:, i, None] * s_adv[:, :, lev, 1]
            )

    for k in range(3):
        interior = mesh.btag[els, k] == 0
        if not np.any(interior):
            continue
        sub = els[interior]
        fac = factor[sub, :, k]
        tr_i = _lat_trace6(tr, grid, sub, k, False)
        tr_e = _lat_trace6(tr, grid, sub, k, True)
        up = np.where(fac >= 0.0, tr_i, tr_e)
        _lat_scatter(acc, sub, k, up * fac, 0.5 * mesh.elen[sub, k], -1.0)

    diff = _horizontal_diffusion(
        grid, np.asarray(tr)[..., None], params.nu_h, params.nu_v, els, wall_mirror=False
    )
    acc += diff[..., 0]
    return acc.reshape(grid.n_prisms, 6)


# ---------------------------------------------------------------------------
# vertical operator (advection + implicit diffusion), banded per column
# ---------------------------------------------------------------------------


def assemble_vertical_operator(
    grid: ColumnGrid,
    wtilde,
    w_m,
    kh: float,
    kv: float,
    els=None,
    pen: PenaltyParams = PenaltyParams(),
) -> BandedColumnMatrix:
    """Banded weak operator A with A u = vertical advection + diffusion.

    Every measure is J2D-scaled only, so the same assembly serves any mesh
    snapshot; the diffusion uses the implicit scalar kappa_i = kv + kh
    |m_h/m_z|^2 from the tensor split.  The surface advective flux keeps the
    interior trace (momentum and tracer leave through the moving surface);
    the bed advective flux vanishes because the grid-relative transport and
    the mesh velocity are both zero there.  Interior horizontal faces carry
    the mean diffusive flux and the interior penalty; the surface and bed
    fluxes are replaced by stress or insulation terms on the right-hand side.
    """
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    n = els.size
    j2d = mesh.j2d[els]
    jzq, mid2, _ = _geom(grid, els)
    d = np.zeros((n, L, 6, 6))
    u = np.zeros((n, L, 3, 6))
    w = np.zeros((n, L, 3, 6))

    wtv = _layer_view(wtilde, grid)[els]
    wmv = _layer_view(w_m, grid)[els]
    spd = np.einsum("nlj,vqj->nlvq", wtv - wmv, PHI_QP)      # (n, L, 2v, 6q)

    # advective volume: + <J2D dphi/dzeta (w~ - w_m) u>
    d += np.einsum("vq,nlvq,qi,vqj->nlij", W_QP, j2d[:, None, None, None] * spd, DPHIZ_Q, PHI_QP)

    # implicit diffusion volume: - <J2D kappa_i dphi/dzeta du/dzeta / Jz>
    kiv = kv + kh * (mid2**2).sum(axis=-1)                   # (n, L, 2v)
    d -= np.einsum(
        "vq,nlv,nlq,qi,qj->nlij", W_QP, kiv, j2d[:, None, None] / jzq, DPHIZ_Q, DPHIZ_Q
    )

    wt_t = np.einsum("nlj,qj->nlq", wtv[:, :, 0:3], TRI_BARY)
    wm_t = np.einsum("nlj,qj->nlq", wmv[:, :, 0:3], TRI_BARY)
    wm_b = np.einsum("nlj,qj->nlq", wmv[:, :, 3:6], TRI_BARY)

    # advective interface fluxes: - << J2D nhat_z phi u_up (w~_below - w_m) >>
    spd_srf = wt_t[:, 0] - wm_t[:, 0]                        # (n, 6q) surface, interior trace
    d[:, 0, 0:3, 0:3] -= np.einsum(
        "q,nq,qi,qj->nij", TRI_QW, j2d[:, None] * spd_srf, TRI_BARY, TRI_BARY
    )
    if L > 1:
        spd_t = wt_t[:, 1:] - wm_t[:, 1:]                    # prism top faces, l >= 1
        pos = np.where(spd_t >= 0.0, spd_t, 0.0)
        neg = np.where(spd_t < 0.0, spd_t, 0.0)
        d[:, 1:, 0:3, 0:3] -= np.einsum(
            "q,nlq,qi,qj->nlij", TRI_QW, j2d[:, None, None] * pos, TRI_BARY, TRI_BARY
        )
        u[:, 1:, :, 3:6] -= np.einsum(
            "q,nlq,qi,qj->nlij", TRI_QW, j2d[:, None, None] * neg, TRI_BARY, TRI_BARY
        )
        spd_b = wt_t[:, 1:] - wm_b[:, :-1]                   # prism bottom faces, l <= L-2
        into = np.where(spd_b <= 0.0, spd_b, 0.0)            # upwind: interior side
        outof = np.where(spd_b > 0.0, spd_b, 0.0)
        d[:, :-1, 3:6, 3:6] += np.einsum(
            "q,nlq,qi,qj->nlij", TRI_QW, j2d[:, None, None] * into, TRI_BARY, TRI_BARY
        )
        w[:, :-1, :, 0:3] += np.einsum(
            "q,nlq,qi,qj->nlij", TRI_QW, j2d[:, None, None] * outof, TRI_BARY, TRI_BARY
        )

        # diffusion mean flux and penalty on the interior horizontal faces
        dzt = _layer_view(grid.dztop, grid)[els]
        dzb = _layer_view(grid.dzbot, grid)[els]
        ki_t = kv + kh * (dzt**2).sum(-1)                    # (n, L) at prism top faces
        ki_b = kv + kh * (dzb**2).sum(-1)
        half_int = 0.5 * j2d[:, None, None] * ki_t[:, 1:, None] / jzq[:, 1:]
        half_ext = 0.5 * j2d[:, None, None] * ki_b[:, :-1, None] / jzq[:, :-1]
        d[:, 1:, 0:3, :] += np.einsum("q,nlq,qi,qj->nlij", TRI_QW, half_int, TRI_BARY, DPHIZ_Q)
        u[:, 1:] += np.einsum("q,nlq,qi,qj->nlij", TRI_QW, half_ext, TRI_BARY, DPHIZ_Q)
        d[:, :-1, 3:6, :] -= np.einsum("q,nlq,qi,qj->nlij", TRI_QW, half_ext / 0.5 * 0.5, TRI_BARY, DPHIZ_Q) * 0.0
        # the bottom-face halves mirror the top-face ones of the layer below
        half_int_b = 0.5 * j2d[:, None, None] * ki_b[:, :-1, None] / jzq[:, :-1]
        half_ext_b = 0.5 * j2d[:, None, None] * ki_t[:, 1:, None] / jzq[:, 1:]
        d[:, :-1, 3:6, :] -= np.einsum("q,nlq,qi,qj->nlij", TRI_QW, half_int_b, TRI_BARY, DPHIZ_Q)
        w[:, :-1] -= np.einsum("q,nlq,qi,qj->nlij", TRI_QW, half_ext_b, TRI_BARY, DPHIZ_Q)

        hgt = 2.0 * _layer_view(grid.jz, grid)[els].mean(axis=2)   # (n, L) mean prism heights
        sig = penalty_sigma(hgt[:, 1:], hgt[:, :-1], dim=3, params=pen)
        kmax = np.maximum(ki_t[:, 1:], ki_b[:, :-1])
        nz_abs = 1.0 / np.sqrt(1.0 + (dzt[:, 1:] ** 2).sum(-1))
        penf = sig * kmax * nz_abs * j2d[:, None]            # (n, L-1)
        mface = np.einsum("q,qi,qj->ij", TRI_QW, TRI_BARY, TRI_BARY)
        d[:, 1:, 0:3, 0:3] -= 0.5 * penf[..., None, None] * mface
        u[:, 1:, :, 3:6] += 0.5 * penf[..., None, None] * mface
        d[:, :-1, 3:6, 3:6] -= 0.5 * penf[..., None, None] * mface
        w[:, :-1, :, 0:3] += 0.5 * penf[..., None, None] * mface

    return BandedColumnMatrix(d=d, u=u, w=w)


def build_implicit(mass, op: BandedColumnMatrix, dt: float, grid: ColumnGrid, els=None) -> BandedColumnMatrix:
    """(M - dt A) as a banded column matrix over the same element subset."""
    els = _els(grid, els)
    mv = _layer_view(mass, grid)[els]
    return BandedColumnMatrix(d=mv - dt * op.d, u=-dt * op.u, w=-dt * op.w)


def scatter_columns(x, grid: ColumnGrid, els=None, ncomp=None):
    """(n, L, 6[, nc]) column solution back to full (P, 6[, nc]) storage."""
    els = _els(grid, els)
    x = np.asarray(x)
    shape = (grid.n_prisms, 6) if x.ndim == 3 else (grid.n_prisms, 6, x.shape[-1])
    out = np.zeros(shape, dtype=x.dtype)
    out.reshape((grid.mesh.nt, grid.n_layers) + shape[1:])[els] = x
    return out


def stress_rhs(grid: ColumnGrid, tau_sx: float, tau_sy: float, cd: float, ux, uy, els=None):
    """Surface wind stress and explicit quadratic bottom drag: (P, 6, 2) weak."""
    els = _els(grid, els)
    mesh = grid.mesh
    L = grid.n_layers
    j2d = mesh.j2d[els]
    acc = np.zeros((mesh.nt, L, 6, 2))
    acc[els, 0, 0:3, 0] += j2d[:, None] / 6.0 * tau_sx
    acc[els, 0, 0:3, 1] += j2d[:, None] / 6.0 * tau_sy
    if cd != 0.0:
        uxb = _layer_view(ux, grid)[els, L - 1, 3:6]
        uyb = _layer_view(uy, grid)[els, L - 1, 3:6]
        sp = np.sqrt(uxb**2 + uyb**2)
        acc[els, L - 1, 3:6, 0] += apply_mh(-cd * sp * uxb, j2d)
        acc[els, L - 1, 3:6, 1] += apply_mh(-cd * sp * uyb, j2d)
    return acc.reshape(grid.n_prisms, 6, 2)


# ---------------------------------------------------------------------------
# budgets
# ---------------------------------------------------------------------------


def budget_3d(grid: ColumnGrid, mass, ux, uy, tr) -> dict:
    ones = np.ones((grid.n_prisms, 6))
    return {
        "volume": integrate_prism(mass, ones),
        "momentum_x": integrate_prism(mass, ux),
        "momentum_y": integrate_prism(mass, uy),
        "tracer_mass": integrate_prism(mass, tr),
        "tracer_min": float(np.asarray(tr).min()),
        "tracer_max": float(np.asarray(tr).max()),
    }
