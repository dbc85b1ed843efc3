"""Metrics, integration, curvature, and the Liouville uniformization solve.

Conformal metrics are stored as a log-factor u against the reference
hyperbolic metric (g = e^{2u} g_ref); general metrics as SymTensorField.
Curvature of conformal metrics uses the Galerkin-consistent discrete
Laplace-Beltrami operator (mass-projected stiffness action), so solver
postconditions hold at Newton tolerance; an independent local-fit curvature
is provided as a discretization-order oracle.
"""

import numpy as np
import scipy.sparse.linalg as spla

from . import fem, fields, mobius


class SolveError(RuntimeError):
    pass


class ConformalMetric:
    """Metric e^{2u} g_ref with u a ScalarField (u = 0: reference metric)."""

    def __init__(self, u):
        self.u = u
        self.mesh = u.mesh

    @classmethod
    def reference(cls, mesh):
        return cls(fields.ScalarField.zeros(mesh))

    def density_at_quad(self):
        """Area density against dxdy at quadrature points."""
        lam = mobius.conformal_factor(self.mesh.quad_xy_flat)
        return np.exp(2.0 * self.u.at_quad()) * lam

    def area(self):
        return self.mesh.integrate_quad(self.density_at_quad())

    def as_tensor(self):
        e2u = np.exp(2.0 * self.u.values)
        return fields.SymTensorField(
            self.mesh, e2u, np.zeros(self.mesh.n_quotient, complex)
        )


class TensorMetric:
    """General symmetric positive metric from frame components."""

    def __init__(self, field, name="tensor metric"):
        self.field = field
        self.mesh = field.mesh
        self.name = name
        if not field.is_positive():
            bad = int(np.argmin(field.a - np.abs(field.c)))
            raise SolveError(
                "%s not positive definite at node %d" % (name, bad)
            )

    def chart_at_quad(self):
        """(n_q,2,2) chart-coordinate matrices at quadrature points."""
        aq, cq = self.field.at_quad()
        lam = mobius.conformal_factor(self.mesh.quad_xy_flat)
        out = np.empty((len(aq), 2, 2))
        out[:, 0, 0] = lam * (aq + cq.real)
        out[:, 1, 1] = lam * (aq - cq.real)
        out[:, 0, 1] = out[:, 1, 0] = lam * (-cq.imag)
        return out

    def density_at_quad(self):
        aq, cq = self.field.at_quad()
        lam = mobius.conformal_factor(self.mesh.quad_xy_flat)
        det = aq ** 2 - np.abs(cq) ** 2
        if np.any(det <= 0):
            bad = int(np.argmin(det))
            raise SolveError("%s degenerate at quad point %d" % (self.name, bad))
        return lam * np.sqrt(det)

    def area(self):
        return self.mesh.integrate_quad(self.density_at_quad())

    def stiffness_weight_at_quad(self):
        """sqrt(det G) G^{-1} in chart coordinates at quadrature points."""
        g = self.chart_at_quad()
        det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
        root = np.sqrt(det)
        out = np.empty_like(g)
        out[:, 0, 0] = g[:, 1, 1]
        out[:, 0, 1] = -g[:, 0, 1]
        out[:, 1, 0] = -g[:, 1, 0]
        out[:, 1, 1] = g[:, 0, 0]
        return out * (root / det)[:, None, None]


class MeshOperators:
    """Cached FEM operators for one mesh."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.stiffness = fem.assemble_flat_stiffness(mesh)
        lam = mobius.conformal_factor(mesh.quad_xy_flat)
        self.mass_ref = fem.assemble_weighted_mass(mesh, lam)
        self._mass_ref_lu = spla.splu(self.mass_ref.tocsc())
        self._flat_mass = None
        self._flat_mass_lu = None

    def flat_mass(self):
        if self._flat_mass is None:
            ones = np.ones(len(self.mesh.quad_w_flat))
            self._flat_mass = fem.assemble_weighted_mass(self.mesh, ones)
            self._flat_mass_lu = spla.splu(self._flat_mass.tocsc())
        return self._flat_mass

    def laplace_ref(self, u_field):
        """Galerkin Laplace-Beltrami (reference metric) of a ScalarField."""
        rhs = -(self.stiffness @ u_field.values)
        return fields.ScalarField(self.mesh, self._mass_ref_lu.solve(rhs))

    def project_flat(self, quad_values):
        """L^2(dxdy) projection of quadrature-sampled data onto the FE space."""
        self.flat_mass()
        rhs = fem.assemble_load(self.mesh, quad_values)
        if np.iscomplexobj(rhs):
            return self._flat_mass_lu.solve(rhs.real) + 1j * self._flat_mass_lu.solve(
                rhs.imag
            )
        return self._flat_mass_lu.solve(rhs)

    def gradient_field(self, nodal_quot, kind="scalar"):
        """Projected gradient of a quotient field: two quotient fields."""
        full = self.mesh.reduction(kind) @ nodal_quot
        g = self.mesh.gradient_at_quad(full)
        gx = self.project_flat(g[:, 0])
        gy = self.project_flat(g[:, 1])
        return gx, gy

    def interp_and_grad_matrices(self):
        """Sparse maps full-nodal -> quadrature values / x,y derivatives."""
        if not hasattr(self, "_interp_mats"):
            import scipy.sparse as sp

            mesh = self.mesh
            re = mesh.ref
            ntri = len(mesh.triangles)
            nq = len(re.quad_w)
            nb = re.n_basis
            rows = np.repeat(np.arange(ntri * nq), nb)
            cols = np.repeat(mesh.tri_dofs[:, None, :], nq, axis=1).ravel()
            pv = np.tile(re.phi_q[None, :, :], (ntri, 1, 1)).ravel()
            gx = mesh.quad_physgrad[:, :, :, 0].ravel()
            gy = mesh.quad_physgrad[:, :, :, 1].ravel()
            shape = (ntri * nq, mesh.n_nodes)
            self._interp_mats = (
                sp.coo_matrix((pv, (rows, cols)), shape=shape).tocsr(),
                sp.coo_matrix((gx, (rows, cols)), shape=shape).tocsr(),
                sp.coo_matrix((gy, (rows, cols)), shape=shape).tocsr(),
            )
        return self._interp_mats


_OPERATOR_CACHE = {}


def operators(mesh):
    key = id(mesh)
    if key not in _OPERATOR_CACHE:
        _OPERATOR_CACHE[key] = MeshOperators(mesh)
    return _OPERATOR_CACHE[key]


def elementwise_gradient_full(mesh, full_nodal):
    """Per-node chart gradient of the FE interpolant, averaged over owners.

    No global projection: quotient seams are never mixed, so this is valid
    for non-equivariant quantities (chart components of tensors).  Returns
    full-nodal arrays (gx, gy).
    """
    key = ("_elem_grad_ops",)
    if not hasattr(mesh, "_elem_grad_cache"):
        re = mesh.ref
        ntri = len(mesh.triangles)
        nb = re.n_basis
        dphi_nodes = re.eval_basis_grad(re.nodes)  # (nb_pts, nb, 2)
        jacs = np.zeros((ntri, nb, 2, 2))
        for t in range(ntri):
            jacs[t] = mesh._map_jacobian(t, re.nodes)
        det = jacs[..., 0, 0] * jacs[..., 1, 1] - jacs[..., 0, 1] * jacs[..., 1, 0]
        inv = np.empty_like(jacs)
        inv[..., 0, 0] = jacs[..., 1, 1]
        inv[..., 0, 1] = -jacs[..., 0, 1]
        inv[..., 1, 0] = -jacs[..., 1, 0]
        inv[..., 1, 1] = jacs[..., 0, 0]
        inv /= det[..., None, None]
        # physical gradients of each basis fn at each node of each triangle
        phys = np.einsum("tnba,nib->tnia", inv, dphi_nodes)
        counts = np.zeros(mesh.n_nodes)
        np.add.at(counts, mesh.tri_dofs.ravel(), 1.0)
        mesh._elem_grad_cache = (phys, counts)
    phys, counts = mesh._elem_grad_cache
    vals = full_nodal[mesh.tri_dofs]  # (ntri, nb)
    g = np.einsum("tnia,ti->tna", phys, vals)  # (ntri, nb_pts, 2)
    gx = np.zeros(mesh.n_nodes, dtype=vals.dtype)
    gy = np.zeros(mesh.n_nodes, dtype=vals.dtype)
    np.add.at(gx, mesh.tri_dofs.ravel(), g[..., 0].ravel())
    np.add.at(gy, mesh.tri_dofs.ravel(), g[..., 1].ravel())
    return gx / counts, gy / counts


def integrate(mesh, field, metric):
    """Integral of a scalar field against the metric area element."""
    if isinstance(field, fields.ScalarField):
        fq = field.at_quad()
    elif np.isscalar(field):
        fq = float(field) * np.ones(len(mesh.quad_w_flat))
    else:
        fq = np.asarray(field)
    return mesh.integrate_quad(fq * metric.density_at_quad())


def curvature(metric, oracle=False):
    """Curvature field of a metric.

    Conformal metrics: K = e^{-2u}(-1 - lap_ref u) with the Galerkin
    operator; `oracle=True` uses instead an independent local least-squares
    second-derivative fit (discretization-order accuracy).
    """
    if isinstance(metric, ConformalMetric):
        mesh = metric.mesh
        if oracle:
            lap = _local_fit_laplacian(mesh, metric.u)
        else:
            lap = operators(mesh).laplace_ref(metric.u)
        k = np.exp(-2.0 * metric.u.values) * (-1.0 - lap.values)
        return fields.ScalarField(mesh, k)
    if isinstance(metric, TensorMetric):
        return _brioschi_curvature(metric)
    raise TypeError("unknown metric type")


def _quot_from_full(mesh, full):
    return full[mesh.quot_rep_node]


def _metric_chart_full(metric):
    mesh = metric.mesh
    a_full = mesh.reduction("scalar") @ metric.field.a
    c_full = mesh.reduction("qd") @ metric.field.c
    lam = mobius.conformal_factor(mesh.node_xy)
    return (
        lam * (a_full + c_full.real),
        lam * (-c_full.imag),
        lam * (a_full - c_full.real),
    )


def _brioschi_curvature(metric):
    """FEM curvature of a general metric via elementwise chart derivatives."""
    mesh = metric.mesh
    e_full, f_full, g_full = _metric_chart_full(metric)

    def grads(full_nodal):
        return elementwise_gradient_full(mesh, full_nodal)

    ex, ey = grads(e_full)
    fx, fy = grads(f_full)
    gx, gy = grads(g_full)
    # second derivatives needed: E_yy, F_xy, G_xx
    _, eyy = grads(ey)
    fxy_a, _ = grads(fy)
    gxx, _ = grads(gx)

    reps = mesh.quot_rep_node
    ex, ey, fx, fy, gx, gy = (v[reps] for v in (ex, ey, fx, fy, gx, gy))
    eyy, fxy_a, gxx = (v[reps] for v in (eyy, fxy_a, gxx))
    E, F, G = e_full[reps], f_full[reps], g_full[reps]
    det = E * G - F * F

    def det3(a11, a12, a13, a21, a22, a23, a31, a32, a33):
        return (
            a11 * (a22 * a33 - a23 * a32)
            - a12 * (a21 * a33 - a23 * a31)
            + a13 * (a21 * a32 - a22 * a31)
        )

    d1 = det3(
        -0.5 * eyy + fxy_a - 0.5 * gxx, 0.5 * ex, fx - 0.5 * ey,
        fy - 0.5 * gx, E, F,
        0.5 * gy, F, G,
    )
    d2 = det3(
        0.0 * E, 0.5 * ey, 0.5 * gx,
        0.5 * ey, E, F,
        0.5 * gx, F, G,
    )
    k_quot = (d1 - d2) / det ** 2
    return fields.ScalarField(mesh, k_quot)


def _local_fit_laplacian(mesh, u_field, degree=3):
    """Independent Laplacian oracle: local polynomial fits around each node."""
    full = u_field.full()
    pts = mesh.node_xy
    values = np.zeros(mesh.n_quotient)
    tree = None
    from scipy.spatial import cKDTree

    tree = cKDTree(np.column_stack([pts.real, pts.imag]))
    nterm = (degree + 1) * (degree + 2) // 2
    k = max(3 * nterm, 24)
    reps = mesh.quot_rep_node
    for i, node in enumerate(reps):
        z0 = pts[node]
        _, idx = tree.query([z0.real, z0.imag], k=k)
        dz = pts[idx] - z0
        x, y = dz.real, dz.imag
        cols = []
        for total in range(degree + 1):
            for j in range(total + 1):
                cols.append(x ** (total - j) * y ** j)
        a = np.column_stack(cols)
        scale = np.max(np.abs(dz))
        w = np.exp(-(np.abs(dz) / scale) ** 2)
        coef, *_ = np.linalg.lstsq(a * w[:, None], full[idx] * w, rcond=None)
        # laplacian at center: 2*c_{x^2} + 2*c_{y^2}
        # monomial order: 1, x, y, x2, xy, y2, ...
        values[i] = 2.0 * coef[3] + 2.0 * coef[5]
    return fields.ScalarField(mesh, values)


def newton_conformal_prescribed(mesh, source_sq, init=None, tol=1e-11, max_iter=40):
    """Solve int grad v grad phi + int (e^{2v} - 1 + s e^{-2v}) phi lam = 0.

    This is the hyperbolic-target prescribed-curvature solve for the total
    log-factor v against the reference metric; s >= 0 is a quadrature-point
    source (|phi|^2-type).  Returns (v values, residual history).
    """
    ops = operators(mesh)
    lamq = mobius.conformal_factor(mesh.quad_xy_flat)
    red = mesh.reduction("scalar")
    v = np.zeros(mesh.n_quotient) if init is None else init.copy()
    history = []
    for it in range(max_iter):
        vq = mesh.interpolate_at_quad(red @ v)
        nl = np.exp(2.0 * vq) - 1.0 + source_sq * np.exp(-2.0 * vq)
        resid = ops.stiffness @ v + fem.assemble_load(mesh, nl * lamq)
        rnorm = np.linalg.norm(resid)
        history.append(rnorm)
        if rnorm < tol:
            return v, history
        dnl = 2.0 * np.exp(2.0 * vq) - 2.0 * source_sq * np.exp(-2.0 * vq)
        jac = ops.stiffness + fem.assemble_weighted_mass(mesh, dnl * lamq)
        try:
            step = spla.spsolve(jac.tocsc(), resid)
        except RuntimeError as err:
            raise SolveError("Newton linear solve failed: %s" % err)
        # line search on the residual norm
        t = 1.0
        for _ in range(12):
            v_try = v - t * step
            vq_t = mesh.interpolate_at_quad(red @ v_try)
            nl_t = np.exp(2.0 * vq_t) - 1.0 + source_sq * np.exp(-2.0 * vq_t)
            r_try = ops.stiffness @ v_try + fem.assemble_load(mesh, nl_t * lamq)
            if np.linalg.norm(r_try) < (1.0 - 0.25 * t) * rnorm:
                break
            t *= 0.5
        v = v - t * step
    raise SolveError(
        "Newton did not converge; residual history %s" % np.array2string(
            np.array(history), precision=2
        )
    )


def liouville_uniformize(mesh, metric, tol=1e-11, max_iter=40, curvature_field=None):
    """Log-factor w with e^{2w} * metric hyperbolic (curvature -1).

    For conformal input the solve is exact in the total factor; for tensor
    input the general-metric weak equation lap_G w = K_G + e^{2w} is used,
    with K_G supplied (exact algebraic data) or FEM-computed.
    """
    if isinstance(metric, ConformalMetric):
        zeros = np.zeros(len(mesh.quad_w_flat))
        v, hist = newton_conformal_prescribed(mesh, zeros, init=metric.u.values,
                                              tol=tol, max_iter=max_iter)
        return fields.ScalarField(mesh, v - metric.u.values)

    ops = operators(mesh)
    kq = (
        mesh.interpolate_at_quad(mesh.reduction("scalar") @ curvature_field.values)
        if curvature_field is not None
        else mesh.interpolate_at_quad(
            mesh.reduction("scalar") @ _brioschi_curvature(metric).values
        )
    )
    dens = metric.density_at_quad()
    aweight = metric.stiffness_weight_at_quad()
    stiff = fem.assemble_weighted_stiffness(mesh, aweight)
    red = mesh.reduction("scalar")
    w = np.zeros(mesh.n_quotient)
    history = []
    for it in range(max_iter):
        wq = mesh.interpolate_at_quad(red @ w)
        nl = kq + np.exp(2.0 * wq)
        resid = stiff @ w + fem.assemble_load(mesh, nl * dens)
        rnorm = np.linalg.norm(resid)
        history.append(rnorm)
        if rnorm < tol:
            return fields.ScalarField(mesh, w)
        jac = stiff + fem.assemble_weighted_mass(mesh, 2.0 * np.exp(2.0 * wq) * dens)
        step = spla.spsolve(jac.tocsc(), resid)
        t = 1.0
        for _ in range(12):
            w_try = w - t * step
            wq_t = mesh.interpolate_at_quad(red @ w_try)
            r_try = stiff @ w_try + fem.assemble_load(
                mesh, (kq + np.exp(2.0 * wq_t)) * dens
            )
            if np.linalg.norm(r_try) < (1.0 - 0.25 * t) * rnorm:
                break
            t *= 0.5
        w = w - t * step
    raise SolveError(
        "Liouville Newton did not converge; residual history %s"
        % np.array2string(np.array(history), precision=2)
    )


def christoffel_symbols(metric, at_full_nodes=False):
    """Gamma^k_{ij} of a TensorMetric: (n,2,2,2) array.

    Chart derivatives are elementwise (no projection across quotient seams,
    where chart components of tensors are not single-valued).  By default the
    result is restricted to quotient representatives; at_full_nodes=True
    returns per-node values.
    """
    mesh = metric.mesh
    comp_full = list(_metric_chart_full(metric))
    comp_full = [comp_full[0], comp_full[1], comp_full[2]]
    d = {}
    for name, comp in zip("efg", comp_full):
        d[name] = elementwise_gradient_full(mesh, comp)
    if at_full_nodes:
        reps = np.arange(mesh.n_nodes)
    else:
        reps = mesh.quot_rep_node
    e, f, g = (comp_full[0][reps], comp_full[1][reps], comp_full[2][reps])
    ex, ey = (d["e"][0][reps], d["e"][1][reps])
    fx, fy = (d["f"][0][reps], d["f"][1][reps])
    gx_, gy_ = (d["g"][0][reps], d["g"][1][reps])
    n = len(e)
    # dg[i][j][k] = d_k g_{ij}
    dg = np.zeros((n, 2, 2, 2))
    dg[:, 0, 0, 0], dg[:, 0, 0, 1] = ex, ey
    dg[:, 0, 1, 0], dg[:, 0, 1, 1] = fx, fy
    dg[:, 1, 0, 0], dg[:, 1, 0, 1] = fx, fy
    dg[:, 1, 1, 0], dg[:, 1, 1, 1] = gx_, gy_
    gmat = np.zeros((n, 2, 2))
    gmat[:, 0, 0] = e
    gmat[:, 0, 1] = gmat[:, 1, 0] = f
    gmat[:, 1, 1] = g
    det = e * g - f * f
    ginv = np.empty_like(gmat)
    ginv[:, 0, 0] = g
    ginv[:, 0, 1] = ginv[:, 1, 0] = -f
    ginv[:, 1, 1] = e
    ginv /= det[:, None, None]
    gamma = np.zeros((n, 2, 2, 2))
    for k in range(2):
        for i in range(2):
            for j in range(2):
                acc = np.zeros(n)
                for m in range(2):
                    acc += ginv[:, k, m] * (
                        dg[:, m, i, j] + dg[:, m, j, i] - dg[:, i, j, m]
                    )
                gamma[:, k, i, j] = 0.5 * acc
    return gamma


def covariant_hessian(metric, scalar_field, at_full_nodes=False):
    """Hessian nabla^2 w of a scalar field w.r.t. a TensorMetric.

    Chart second derivatives via two elementwise-gradient passes minus the
    Christoffel correction.  Returns a SymTensorField on quotient dofs (its
    chart components are rebuilt from representative nodes), or raw full-node
    chart arrays with at_full_nodes=True.
    """
    mesh = metric.mesh
    w_full = mesh.reduction("scalar") @ scalar_field.values
    wx, wy = elementwise_gradient_full(mesh, w_full)
    gxx, gxy = elementwise_gradient_full(mesh, wx)
    gyx, gyy = elementwise_gradient_full(mesh, wy)
    hxx = gxx
    hxy = 0.5 * (gxy + gyx)
    hyy = gyy
    gamma = christoffel_symbols(metric, at_full_nodes=True)
    hxx = hxx - (gamma[:, 0, 0, 0] * wx + gamma[:, 1, 0, 0] * wy)
    hxy = hxy - (gamma[:, 0, 0, 1] * wx + gamma[:, 1, 0, 1] * wy)
    hyy = hyy - (gamma[:, 0, 1, 1] * wx + gamma[:, 1, 1, 1] * wy)
    if at_full_nodes:
        return hxx, hxy, hyy
    reps = mesh.quot_rep_node
    return fields.SymTensorField.from_chart_matrices(
        mesh, hxx[reps], hxy[reps], hyy[reps], at=mesh.node_xy[reps]
    )


def gradient_one_form_full(mesh, scalar_field):
    """Chart gradient (wx, wy) of an equivariant scalar at full nodes."""
    w_full = mesh.reduction("scalar") @ scalar_field.values
    return elementwise_gradient_full(mesh, w_full)


def gradient_squared(metric, scalar_field, at_full_nodes=False):
    """|dw|^2_G, plus the chart gradient one-form components."""
    mesh = metric.mesh
    wx, wy = gradient_one_form_full(mesh, scalar_field)
    lam = mobius.conformal_factor(mesh.node_xy)
    if isinstance(metric, ConformalMetric):
        e_full = np.exp(2.0 * (mesh.reduction("scalar") @ metric.u.values)) * lam
        val = (wx ** 2 + wy ** 2) / e_full
    else:
        e, f, g2 = _metric_chart_full(metric)
        det = e * g2 - f * f
        val = (g2 * wx ** 2 - 2 * f * wx * wy + e * wy ** 2) / det
    if at_full_nodes:
        return val, (wx, wy)
    reps = mesh.quot_rep_node
    return val[reps], (wx, wy)


def assemble_operators(mesh, metric=None):
    """Named elliptic operators on quotient dofs (spec surface)."""
    ops = operators(mesh)
    out = {"laplace-beltrami": ops.stiffness, "mass": ops.mass_ref}
    if metric is not None and isinstance(metric, TensorMetric):
        out["laplace-beltrami"] = fem.assemble_weighted_stiffness(
            mesh, metric.stiffness_weight_at_quad()
        )
        out["mass"] = fem.assemble_weighted_mass(mesh, metric.density_at_quad())
    return out
