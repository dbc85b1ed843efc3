"""Equivariant fields on fundamental-domain meshes.

Scalar fields store one real value per quotient dof.  Complex frame fields
store coefficients in the reference-metric frames aligned with d/dx (weight 2
for quadratic differentials, weight (-1,1) for Beltrami coefficients); their
boundary identifications differ by unimodular phases only.

Symmetric 2-tensors are stored frame-wise as (trace part a, deviator c):
    T_frame = [[a + Re c, -Im c], [-Im c, a - Re c]],
so the trace part identifies like a scalar and the deviator like a quadratic
differential.  Chart components are lambda_ref(z) * T_frame.
"""

import numpy as np

from . import mobius


class FieldShapeError(ValueError):
    pass


def _check(mesh, values, dtype):
    values = np.asarray(values, dtype=dtype)
    if values.shape != (mesh.n_quotient,):
        raise FieldShapeError(
            "expected %d quotient values, got %s" % (mesh.n_quotient, values.shape)
        )
    return values


class ScalarField:
    kind = "scalar"

    def __init__(self, mesh, values):
        self.mesh = mesh
        self.values = _check(mesh, values, float)

    @classmethod
    def zeros(cls, mesh):
        return cls(mesh, np.zeros(mesh.n_quotient))

    @classmethod
    def from_function(cls, mesh, fn):
        pts = mesh.node_positions_quot()
        return cls(mesh, np.asarray(fn(pts), dtype=float))

    def full(self):
        return self.mesh.reduction(self.kind) @ self.values

    def at_quad(self):
        return self.mesh.interpolate_at_quad(self.full())

    def grad_at_quad(self):
        return self.mesh.gradient_at_quad(self.full())

    def pairing_mismatch(self):
        """Max mismatch of identified dofs when treating values as full nodal."""
        full = self.full()
        err = 0.0
        for a, b, g in self.mesh._ident_edges:
            err = max(err, abs(full[a] - full[b]))
        return err

    def __add__(self, other):
        return ScalarField(self.mesh, self.values + _as_values(other, self.mesh))

    def __sub__(self, other):
        return ScalarField(self.mesh, self.values - _as_values(other, self.mesh))

    def __mul__(self, scalar):
        return ScalarField(self.mesh, self.values * scalar)

    __rmul__ = __mul__


def _as_values(other, mesh):
    if isinstance(other, ScalarField):
        return other.values
    return np.asarray(other, dtype=float)


class FrameField:
    """Complex field in reference frames; kind in {'qd', 'beltrami'}."""

    def __init__(self, mesh, values, kind):
        if kind not in ("qd", "beltrami"):
            raise ValueError("kind must be 'qd' or 'beltrami'")
        self.mesh = mesh
        self.kind = kind
        self.values = _check(mesh, values, complex)

    @classmethod
    def zeros(cls, mesh, kind):
        return cls(mesh, np.zeros(mesh.n_quotient, dtype=complex), kind)

    def full(self):
        return self.mesh.reduction(self.kind) @ self.values

    def at_quad(self):
        return self.mesh.interpolate_at_quad(self.full())

    def chart_at_nodes(self):
        """Chart coefficient (f with phi = f dz^2, or Beltrami m)."""
        z = self.mesh.node_positions_quot()
        lam = mobius.conformal_factor(z)
        if self.kind == "qd":
            return self.values * lam
        return self.values

    def __add__(self, other):
        return FrameField(self.mesh, self.values + other.values, self.kind)

    def __sub__(self, other):
        return FrameField(self.mesh, self.values - other.values, self.kind)

    def __mul__(self, scalar):
        return FrameField(self.mesh, self.values * scalar, self.kind)

    __rmul__ = __mul__


class SymTensorField:
    """Symmetric 2-tensor as (trace part, deviator) in reference frames."""

    def __init__(self, mesh, trace_part, deviator):
        self.mesh = mesh
        self.a = _check(mesh, trace_part, float)
        self.c = _check(mesh, deviator, complex)

    @classmethod
    def zeros(cls, mesh):
        return cls(mesh, np.zeros(mesh.n_quotient), np.zeros(mesh.n_quotient, complex))

    @classmethod
    def reference_metric(cls, mesh):
        """Frame components of the reference hyperbolic metric: identity."""
        return cls(mesh, np.ones(mesh.n_quotient), np.zeros(mesh.n_quotient, complex))

    @classmethod
    def from_frame_matrices(cls, mesh, t11, t12, t22):
        a = 0.5 * (t11 + t22)
        c = 0.5 * (t11 - t22) - 1j * t12
        return cls(mesh, a, c)

    @classmethod
    def from_chart_matrices(cls, mesh, m11, m12, m22, at=None):
        """Chart components -> frame pair; `at` overrides node positions."""
        z = mesh.node_positions_quot() if at is None else at
        lam = mobius.conformal_factor(z)
        return cls.from_frame_matrices(mesh, m11 / lam, m12 / lam, m22 / lam)

    def frame_components(self):
        t11 = self.a + self.c.real
        t22 = self.a - self.c.real
        t12 = -self.c.imag
        return t11, t12, t22

    def chart_components(self):
        z = self.mesh.node_positions_quot()
        lam = mobius.conformal_factor(z)
        t11, t12, t22 = self.frame_components()
        return lam * t11, lam * t12, lam * t22

    def chart_components_full(self):
        """Chart components at all mesh nodes (not quotient-reduced)."""
        mesh = self.mesh
        a_full = mesh.reduction("scalar") @ self.a
        c_full = mesh.reduction("qd") @ self.c
        lam = mobius.conformal_factor(mesh.node_xy)
        return (
            lam * (a_full + c_full.real),
            lam * (-c_full.imag),
            lam * (a_full - c_full.real),
        )

    def full_pair(self):
        mesh = self.mesh
        return (
            mesh.reduction("scalar") @ self.a,
            mesh.reduction("qd") @ self.c,
        )

    def at_quad(self):
        """(a_q, c_q) interpolated to quadrature points."""
        fa, fc = self.full_pair()
        return (
            self.mesh.interpolate_at_quad(fa),
            self.mesh.interpolate_at_quad(fc),
        )

    def det_frame(self):
        return self.a ** 2 - np.abs(self.c) ** 2

    def is_positive(self, tol=0.0):
        return np.all(self.a > np.abs(self.c) + tol)

    def __add__(self, other):
        return SymTensorField(self.mesh, self.a + other.a, self.c + other.c)

    def __sub__(self, other):
        return SymTensorField(self.mesh, self.a - other.a, self.c - other.c)

    def __mul__(self, s):
        return SymTensorField(self.mesh, self.a * s, self.c * s)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# pointwise frame-matrix algebra (vectorized over nodes)
# ---------------------------------------------------------------------------

def frame_matrices(field):
    """(n,2,2) frame-component matrices of a SymTensorField."""
    t11, t12, t22 = field.frame_components()
    out = np.empty((len(t11), 2, 2))
    out[:, 0, 0] = t11
    out[:, 0, 1] = t12
    out[:, 1, 0] = t12
    out[:, 1, 1] = t22
    return out


def from_frame_matrices_arrays(mesh, mats):
    return SymTensorField.from_frame_matrices(
        mesh, mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 1]
    )


def endo(metric_field, tensor_field):
    """Shape-operator style endomorphism G^{-1} T in frames: (n,2,2)."""
    g = frame_matrices(metric_field)
    t = frame_matrices(tensor_field)
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    inv = np.empty_like(g)
    inv[:, 0, 0] = g[:, 1, 1]
    inv[:, 0, 1] = -g[:, 0, 1]
    inv[:, 1, 0] = -g[:, 1, 0]
    inv[:, 1, 1] = g[:, 0, 0]
    inv /= det[:, None, None]
    return np.einsum("nab,nbc->nac", inv, t)


def trace_with(metric_field, tensor_field):
    """tr_G(T) = tr(G^{-1} T) nodewise."""
    e = endo(metric_field, tensor_field)
    return e[:, 0, 0] + e[:, 1, 1]


def inner(metric_field, t1, t2):
    """<T1, T2>_G = tr(G^{-1} T1 G^{-1} T2) nodewise."""
    e1 = endo(metric_field, t1)
    e2 = endo(metric_field, t2)
    prod = np.einsum("nab,nba->n", e1, e2)
    return prod


def norm_sq(metric_field, tensor_field):
    return inner(metric_field, tensor_field, tensor_field)


def trace_free_part(metric_field, tensor_field):
    """T - (tr_G T / 2) G."""
    tr = trace_with(metric_field, tensor_field)
    return SymTensorField(
        tensor_field.mesh,
        tensor_field.a - 0.5 * tr * metric_field.a,
        tensor_field.c - 0.5 * tr * metric_field.c,
    )


def det_ratio(metric_field, tensor_field):
    """det(G^{-1} T) nodewise."""
    e = endo(metric_field, tensor_field)
    return e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]


def compose(metric_field, t1, t2):
    """Bilinear form T1 G^{-1} T2 (symmetric when T1, T2 commute as endos)."""
    g_inv_t2 = endo(metric_field, t2)
    t1m = frame_matrices(t1)
    out = np.einsum("nab,nbc->nac", t1m, g_inv_t2)
    out = 0.5 * (out + np.transpose(out, (0, 2, 1)))
    return from_frame_matrices_arrays(t1.mesh, out)
