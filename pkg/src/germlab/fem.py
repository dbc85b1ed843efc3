"""Lagrange reference elements, quadrature, and FEM assembly on domain meshes.

Elements are straight triangles in the disk chart except along the polygon
boundary, where a blended (transfinite) map follows the geodesic arc exactly;
all metric dependence enters through pointwise weights at quadrature points.
The flat Dirichlet form doubles as the Laplace-Beltrami stiffness for every
conformal metric (2d conformal invariance).
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


def reference_nodes(order):
    """Nodal points of the P_order Lagrange triangle, vertices first.

    Ordering: 3 vertices, then edge nodes along edges (0,1), (1,2), (2,0)
    (order-1 per edge, from first to second vertex), then interior nodes.
    """
    if order == 1:
        return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pts = [verts[0], verts[1], verts[2]]
    for a, b in ((0, 1), (1, 2), (2, 0)):
        for j in range(1, order):
            t = j / order
            pts.append(verts[a] * (1 - t) + verts[b] * t)
    if order == 3:
        pts.append(np.array([1.0 / 3.0, 1.0 / 3.0]))
    elif order > 3:
        raise NotImplementedError("orders above 3 are not needed here")
    return np.array(pts)


def n_edge_nodes(order):
    return order - 1


def n_interior_nodes(order):
    return {1: 0, 2: 0, 3: 1}[order]


def _vandermonde(order, pts):
    """Monomial basis values at pts for the polynomial space P_order."""
    x, y = pts[:, 0], pts[:, 1]
    cols = []
    for total in range(order + 1):
        for j in range(total + 1):
            cols.append(x ** (total - j) * y ** j)
    return np.column_stack(cols)


def _vandermonde_grad(order, pts):
    x, y = pts[:, 0], pts[:, 1]
    gx, gy = [], []
    for total in range(order + 1):
        for j in range(total + 1):
            i = total - j
            gx.append(i * x ** max(i - 1, 0) * y ** j if i > 0 else 0 * x)
            gy.append(j * x ** i * y ** max(j - 1, 0) if j > 0 else 0 * x)
    return np.column_stack(gx), np.column_stack(gy)


class ReferenceElement:
    """Lagrange basis on the reference triangle with cached quadrature data."""

    def __init__(self, order, quad_n=5):
        self.order = order
        self.nodes = reference_nodes(order)
        self.n_basis = len(self.nodes)
        v = _vandermonde(order, self.nodes)
        self.coeff = np.linalg.inv(v)  # columns: basis functions
        self.quad_ref, self.quad_w = duffy_rule(quad_n)
        self.phi_q = self.eval_basis(self.quad_ref)
        self.dphi_q = self.eval_basis_grad(self.quad_ref)
        self.phi_nodes = self.eval_basis(self.nodes)

    def eval_basis(self, pts):
        """(npts, n_basis) basis values."""
        return _vandermonde(self.order, np.atleast_2d(pts)) @ self.coeff

    def eval_basis_grad(self, pts):
        """(npts, n_basis, 2) reference gradients."""
        gx, gy = _vandermonde_grad(self.order, np.atleast_2d(pts))
        return np.stack([gx @ self.coeff, gy @ self.coeff], axis=-1)


def duffy_rule(n):
    """Quadrature on the unit triangle via the collapsed-square Duffy map."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    xi = (u * (1.0 - v)).ravel()
    eta = (u * v).ravel()
    weights = (wu * wv * u).ravel()
    return np.column_stack([xi, eta]), weights


def assemble_weighted_mass(mesh, weight_q, kind="scalar"):
    """Mass matrix int u v w dxdy with w given at quadrature points."""
    re = mesh.ref
    ntri = len(mesh.triangles)
    nq = len(re.quad_w)
    nb = re.n_basis
    jac = mesh.quad_jacdet.reshape(ntri, nq)
    w = weight_q.reshape(ntri, nq) * jac * re.quad_w[None, :]
    local = np.einsum("tq,qi,qj->tij", w, re.phi_q, re.phi_q)
    return _scatter(mesh, local, kind)


def assemble_weighted_stiffness(mesh, mat_q, kind="scalar"):
    """Stiffness int (grad u)^T M grad v dxdy with M (npts,2,2) at quad points."""
    re = mesh.ref
    ntri = len(mesh.triangles)
    nq = len(re.quad_w)
    grads = mesh.quad_physgrad  # (ntri, nq, nb, 2)
    jac = mesh.quad_jacdet.reshape(ntri, nq)
    m = mat_q.reshape(ntri, nq, 2, 2)
    scaled = np.einsum("tqab,tqjb->tqja", m, grads)
    local = np.einsum("tqia,tqja,tq->tij", grads, scaled, jac * re.quad_w[None, :])
    return _scatter(mesh, local, kind)


def assemble_flat_stiffness(mesh, kind="scalar"):
    """int grad u . grad v dxdy: Laplace-Beltrami form for conformal metrics."""
    eye = np.broadcast_to(np.eye(2), (len(mesh.triangles) * len(mesh.ref.quad_w), 2, 2))
    return assemble_weighted_stiffness(mesh, eye, kind)


def assemble_load(mesh, f_q, kind="scalar"):
    """Load vector int f v dxdy with f at quadrature points."""
    re = mesh.ref
    ntri = len(mesh.triangles)
    nq = len(re.quad_w)
    jac = mesh.quad_jacdet.reshape(ntri, nq)
    w = f_q.reshape(ntri, nq) * jac * re.quad_w[None, :]
    local = np.einsum("tq,qi->ti", w, re.phi_q)
    vec = np.zeros(mesh.n_nodes, dtype=local.dtype)
    np.add.at(vec, mesh.tri_dofs.ravel(), local.ravel())
    return mesh.reduction(kind).T.conj() @ vec


def _scatter(mesh, local, kind):
    ntri, nb, _ = local.shape
    rows = np.repeat(mesh.tri_dofs, nb, axis=1).ravel()
    cols = np.tile(mesh.tri_dofs, (1, nb)).ravel()
    a = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    red = mesh.reduction(kind)
    return (red.T.conj() @ a @ red).tocsr()


def solve_spd(a, b):
    return spla.spsolve(a.tocsc(), b)


def lumped_inverse_mass_apply(mass, vec):
    lump = np.asarray(mass.sum(axis=1)).ravel()
    return vec / lump
