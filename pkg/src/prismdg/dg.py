"""Reference prism element: basis, quadrature, interface operators, metric splits.

The element is the unit triangle (0,0)-(1,0)-(0,1) extruded in a vertical
parent coordinate zeta in [-1, 1].  A nodal P1 basis is used in both
directions; prism node k in 0..5 combines horizontal vertex k % 3 with the
top (k // 3 == 0) or bottom (k // 3 == 1) face.  zeta = +1 is the top.

All tables are module-level constants so that every assembly routine in the
package evaluates fields at exactly the same points with exactly the same
shape values; several conservation statements rely on that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLayer, NonPositiveLength

# ---------------------------------------------------------------------------
# horizontal quadrature: 6-point, degree 4 rule on the unit triangle
# (weights sum to the triangle area 1/2)
# ---------------------------------------------------------------------------

_A1 = 0.108103018168070
_B1 = 0.445948490915965
_W1 = 0.111690794839005
_A2 = 0.816847572980459
_B2 = 0.091576213509771
_W2 = 0.054975871827661

TRI_QW = np.array([_W1, _W1, _W1, _W2, _W2, _W2])
# barycentric coordinates (lambda0, lambda1, lambda2) = P1 shape values
TRI_BARY = np.array(
    [
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
# (xi, eta) of the same points; lambda0 = 1 - xi - eta, lambda1 = xi, lambda2 = eta
TRI_QP = TRI_BARY[:, 1:].copy()
NQ_TRI = 6

# ---------------------------------------------------------------------------
# vertical / edge quadrature: 2-point Gauss on [-1, 1]
# ---------------------------------------------------------------------------

_G = 1.0 / math.sqrt(3.0)
SEG_QP = np.array([-_G, _G])
SEG_QW = np.array([1.0, 1.0])
NQ_SEG = 2

# vertical shape values phi_top = (1+zeta)/2, phi_bot = (1-zeta)/2 at SEG_QP;
# row = quadrature point, column = (top, bottom)
VERT_SHAPE = np.array(
    [
        [(1.0 - _G) / 2.0, (1.0 + _G) / 2.0],
        [(1.0 + _G) / 2.0, (1.0 - _G) / 2.0],
    ]
)
DVERT = np.array([0.5, -0.5])  # d/dzeta of (phi_top, phi_bot)

# edge shape values for the two P1 functions attached to an edge's endpoints,
# in the edge's own traversal order.  The mirrored row order (swap the two
# points) is used to evaluate the neighbour's trace at the same physical
# points: a conforming CCW mesh traverses every shared edge in opposite
# senses, so exterior values are gathered as
#     v_ext[qp] = m0 * EDGE_SHAPE[qp, 1] + m1 * EDGE_SHAPE[qp, 0]
# which keeps shared-edge flux totals exactly (bitwise) antisymmetric.
EDGE_SHAPE = np.array(
    [
        [(1.0 + _G) / 2.0, (1.0 - _G) / 2.0],
        [(1.0 - _G) / 2.0, (1.0 + _G) / 2.0],
    ]
)

# local edge k of a triangle joins local vertices k and (k + 1) % 3
EDGE_V0 = np.array([0, 1, 2])
EDGE_V1 = np.array([1, 2, 0])

# parent-space gradients of the three P1 triangle shapes
DPHI_PARENT = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True)
class ReferenceElement:
    """Bundle of the shared tables (mostly a convenience for introspection)."""

    tri_qp: np.ndarray = None
    tri_qw: np.ndarray = None
    tri_bary: np.ndarray = None
    seg_qp: np.ndarray = None
    seg_qw: np.ndarray = None
    vert_shape: np.ndarray = None
    edge_shape: np.ndarray = None

    @staticmethod
    def make() -> "ReferenceElement":
        return ReferenceElement(
            tri_qp=TRI_QP,
            tri_qw=TRI_QW,
            tri_bary=TRI_BARY,
            seg_qp=SEG_QP,
            seg_qw=SEG_QW,
            vert_shape=VERT_SHAPE,
            edge_shape=EDGE_SHAPE,
        )


def tri_quad(values_at_qp):
    """Integrate over the reference triangle given values at the 6 points."""
    return np.tensordot(np.asarray(values_at_qp), TRI_QW, axes=([-1], [0]))


# ---------------------------------------------------------------------------
# interface operators
# ---------------------------------------------------------------------------


def iface_mean(v_int, v_ext):
    """(interior + exterior) / 2."""
    return (v_int + v_ext) * 0.5


def iface_diff(v_int, v_ext):
    """(interior - exterior) / 2; mean + diff reconstructs the interior value."""
    return (v_int - v_ext) * 0.5


def iface_max(v_int, v_ext):
    return np.maximum(v_int, v_ext)


def iface_upwind(v_int, v_ext, sign):
    """Interior value where sign >= 0, exterior otherwise.

    The tie (sign == 0) picks the interior side.  Callers multiply the result
    by the sign carrier itself, so the inconsistent tie choice across the two
    sides of a face never changes any flux.
    """
    return np.where(np.asarray(sign) >= 0.0, v_int, v_ext)


# ---------------------------------------------------------------------------
# interior-penalty coefficient
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyParams:
    n0: float = 5.0
    order: int = 1


def penalty_sigma(l_int, l_ext, dim=3, params: PenaltyParams = PenaltyParams()):
    """sigma = N0 (o+1)(o+d) / (2 d min(L_int, L_ext)).

    L is the element length scale normal-ish to the face: the mean prism
    height for horizontal faces, area/edge-length for lateral ones.
    """
    l_int = np.asarray(l_int, dtype=float)
    l_ext = np.asarray(l_ext, dtype=float)
    lmin = np.minimum(l_int, l_ext)
    if np.any(lmin <= 0.0):
        raise NonPositiveLength("penalty length scale must be positive")
    o = params.order
    return params.n0 * (o + 1.0) * (o + dim) / (2.0 * dim * lmin)


# ---------------------------------------------------------------------------
# metric vector m = grad(zeta) and the splits built on it
# ---------------------------------------------------------------------------


def metric_vector(dz_mid, dz_jz, jz, zeta):
    """m = (m_h, m_z) at parent height zeta.

    z(xi, eta, zeta) = z_mid(xi, eta) + zeta * Jz(xi, eta), so
    m_z = 1 / Jz and m_h = -(grad_h z_mid + zeta grad_h Jz) / Jz.

    dz_mid, dz_jz: (..., 2) horizontal gradients; jz: (...,) half thickness.
    Returns (m_h (..., 2), m_z (...,)).
    """
    jz = np.asarray(jz, dtype=float)
    if np.any(jz <= 0.0):
        raise DegenerateLayer("layer half-thickness must be positive")
    m_z = 1.0 / jz
    m_h = -(np.asarray(dz_mid) + np.asarray(zeta)[..., None] * np.asarray(dz_jz)) / jz[..., None]
    return m_h, m_z


def gradient_decompose(dfdxi_phys, dfdzeta, m_h, m_z):
    """Split the physical gradient of a prism P1 function into its two parts.

    dfdxi_phys: (..., 2) the iso-zeta part  sum_k f_k phi_z grad_h(phi_h^k)
                already mapped with the triangle geometry (z-component 0),
    dfdzeta:    (...,)  parent vertical derivative  sum_k f_k phi_h d(phi_z)/dzeta,
    m_h, m_z:   metric vector components at the same points.

    Returns (grad_iso (..., 3), grad_m (..., 3)); their sum is the full
    physical gradient (grad_h f, df/dz).
    """
    dfdxi_phys = np.asarray(dfdxi_phys, dtype=float)
    dfdzeta = np.asarray(dfdzeta, dtype=float)
    shape = dfdzeta.shape
    giso = np.zeros(shape + (3,))
    giso[..., :2] = dfdxi_phys
    gm = np.zeros(shape + (3,))
    gm[..., :2] = np.asarray(m_h) * dfdzeta[..., None]
    gm[..., 2] = np.asarray(m_z) * dfdzeta
    return giso, gm


def split_velocity(u, w, m_h, m_z):
    """(u, v, w) -> (utilde, wtilde) with utilde . m = 0.

    utilde = (u, v, -m_h . u / m_z) is tangent to iso-zeta surfaces and
    wtilde = w + m_h . u / m_z carries the rest vertically:
    utilde + wtilde e_z = (u, v, w).
    """
    u = np.asarray(u, dtype=float)
    aux = (u[..., 0] * np.asarray(m_h)[..., 0] + u[..., 1] * np.asarray(m_h)[..., 1]) / np.asarray(m_z)
    ut = np.concatenate([u, (-aux)[..., None]], axis=-1)
    wt = np.asarray(w, dtype=float) + aux
    return ut, wt


@dataclass(frozen=True)
class TensorDiffusivity:
    """Implicit scalar part and explicit tensor remainder of a diffusivity."""

    kappa_i: np.ndarray  # (...,) scalar vertical diffusivity, >= diagonal kv
    d_e: np.ndarray      # (..., 3, 3) explicit remainder, m . D_e . m = 0


def split_diffusivity(d_tensor, m_h, m_z):
    """D = D_i + D_e with D_i = ((m.D.m)/m_z^2) e_z x e_z.

    d_tensor: (..., 3, 3) symmetric diffusivity.  The split guarantees
    m . D_e . m = 0 (the implicit part absorbs all diffusion across moving
    iso-zeta surfaces) and n . D_e . n = 0 on top/bottom faces.
    """
    d_tensor = np.asarray(d_tensor, dtype=float)
    m_h = np.asarray(m_h, dtype=float)
    m_z = np.asarray(m_z, dtype=float)
    m = np.concatenate([m_h, m_z[..., None]], axis=-1)
    mdm = np.einsum("...i,...ij,...j->...", m, d_tensor, m)
    kappa_i = mdm / (m_z * m_z)
    d_e = d_tensor.copy()
    d_e[..., 2, 2] -= kappa_i
    return TensorDiffusivity(kappa_i=kappa_i, d_e=d_e)


def kappa_implicit(kh, kv, m_h, m_z):
    """Scalar shortcut of split_diffusivity for D = diag(kh, kh, kv)."""
    m_h = np.asarray(m_h, dtype=float)
    m2 = m_h[..., 0] ** 2 + m_h[..., 1] ** 2
    return kv + kh * m2 / (np.asarray(m_z) ** 2)
