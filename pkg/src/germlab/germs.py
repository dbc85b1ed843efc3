"""Minimal hyperbolic germs: the Taubes equation solver and germ algebra.

A germ over a conformal structure X is the pair I = e^{2u} g_X, II = Re phi
with u solving the prescribed-curvature equation

    lap_ref u = e^{2u} - 1 + |phi|^2_ref e^{-2u}

in the Galerkin weak form (flat Dirichlet energy + reference-area weights).
Pointwise invariants are reported against the same discrete operator, so the
gauss/mean-curvature residuals sit at Newton tolerance; independent
discretization-order oracles are separate methods.
"""

import numpy as np

from . import calculus, conformal, fields, mobius

GAUSS_TOL = 1e-9
NEWTON_TOL = 1e-11


class GermError(RuntimeError):
    pass


class MinimalGerm:
    """One point of the moduli space of minimal hyperbolic germs."""

    def __init__(self, structure, phi, u, newton_history, continuation_t=1.0):
        self.structure = structure
        self.mesh = structure.mesh
        self.phi = phi
        self.u = u
        self.metric = calculus.ConformalMetric(u)
        self.newton_history = newton_history
        self.continuation_t = continuation_t
        self._residuals = None

    # -- pointwise algebra ---------------------------------------------------

    def phi_norm_sq_ref(self):
        """|phi|^2 w.r.t. the reference metric at quotient nodes."""
        return np.abs(self.phi.coeff.values) ** 2

    def det_b(self):
        """det(shape operator) = -|phi|^2_I at quotient nodes."""
        return -self.phi_norm_sq_ref() * np.exp(-4.0 * self.u.values)

    def second_fundamental_form(self):
        return conformal.hopf_encode(self.phi)

    def shape_norm_sq(self):
        """|II|^2_I = -2 det B pointwise."""
        return 2.0 * self.phi_norm_sq_ref() * np.exp(-4.0 * self.u.values)

    def af_margin(self):
        return 2.0 - float(np.max(self.shape_norm_sq()))

    def is_almost_fuchsian(self):
        return self.af_margin() > 0.0

    # -- residuals -----------------------------------------------------------

    def residuals(self):
        """(gauss, codazzi, mean curvature) residuals.

        gauss: sup of the mass-projected Taubes equation residual (the
        discrete det B - K - 1 statement); codazzi: analytic holomorphy
        residual of phi; mean curvature: trace of II against I (algebraic).
        """
        if self._residuals is not None:
            return self._residuals
        mesh = self.mesh
        ops = calculus.operators(mesh)
        resid_vec = _taubes_residual(mesh, self.u.values, self.phi_quad_source())
        pointwise = ops._mass_ref_lu.solve(resid_vec)
        gauss = float(np.max(np.abs(pointwise)))
        codazzi = self.phi.residual
        if codazzi is None:
            codazzi = conformal.analytic_dbar_residual(self.phi)
        ii = self.second_fundamental_form()
        tr = fields.trace_with(self.metric.as_tensor(), ii)
        scale = max(float(np.max(np.abs(ii.c))), 1e-300)
        mean_curv = float(np.max(np.abs(tr))) / max(1.0, scale)
        self._residuals = {
            "gauss": gauss,
            "codazzi": float(codazzi),
            "mean_curvature": mean_curv,
        }
        return self._residuals

    def gauss_pointwise_oracle(self):
        """Independent pointwise det B - K - 1 with the local-fit curvature."""
        k = calculus.curvature(self.metric, oracle=True)
        return float(np.max(np.abs(self.det_b() - k.values - 1.0)))

    def phi_quad_source(self):
        """|phi|^2_ref at quadrature points (FE interpolation of nodal phi)."""
        mesh = self.mesh
        coeff_full = mesh.reduction("qd") @ self.phi.coeff.values
        re = mesh.interpolate_at_quad(coeff_full.real)
        im = mesh.interpolate_at_quad(coeff_full.imag)
        return re ** 2 + im ** 2

    def export(self):
        res = self.residuals()
        return {
            "provenance": self.mesh.group.provenance,
            "group_params": self.mesh.group.params,
            "phi_coefficients": None,
            "af_margin": self.af_margin(),
            "residuals": res,
            "u_stats": {
                "min": float(np.min(self.u.values)),
                "max": float(np.max(self.u.values)),
                "mean": float(np.mean(self.u.values)),
            },
            "continuation_t": self.continuation_t,
            "newton_iterations": len(self.newton_history),
        }


def _taubes_residual(mesh, u, source_q):
    ops = calculus.operators(mesh)
    lamq = mobius.conformal_factor(mesh.quad_xy_flat)
    red = mesh.reduction("scalar")
    uq = mesh.interpolate_at_quad(red @ u)
    nl = np.exp(2.0 * uq) - 1.0 + source_q * np.exp(-2.0 * uq)
    from . import fem

    return ops.stiffness @ u + fem.assemble_load(mesh, nl * lamq)


def solve_taubes(structure, phi, tol=NEWTON_TOL, max_iter=40):
    """Minimal hyperbolic germ over X with Hopf differential phi.

    Direct Newton from u=0 with fallback continuation in t*phi; raises
    GermError with the last successful t when the continuation stalls.
    """
    mesh = structure.mesh
    germ = _try_solve(structure, phi, None, tol, max_iter)
    if germ is not None:
        return germ
    # continuation in t
    t, step = 0.0, 0.25
    u_init = np.zeros(mesh.n_quotient)
    while t < 1.0 - 1e-12:
        t_next = min(1.0, t + step)
        germ = _try_solve(structure, phi.scale(t_next), u_init, tol, max_iter)
        if germ is None:
            step *= 0.5
            if step < 1e-3:
                raise GermError(
                    "Taubes continuation stalled at t=%.4f (no germ in range)" % t
                )
            continue
        t = t_next
        u_init = germ.u.values.copy()
        step = min(2.0 * step, 0.25)
    final = _try_solve(structure, phi, u_init, tol, max_iter)
    if final is None:
        raise GermError("Taubes continuation reached t=1 but final solve failed")
    return final


def _try_solve(structure, phi, u_init, tol, max_iter):
    mesh = structure.mesh
    probe = MinimalGerm(structure, phi, fields.ScalarField.zeros(mesh), [])
    source = probe.phi_quad_source()
    try:
        u, hist = calculus.newton_conformal_prescribed(
            mesh, source, init=u_init, tol=tol, max_iter=max_iter
        )
    except calculus.SolveError:
        return None
    return MinimalGerm(
        structure, phi, fields.ScalarField(mesh, u), hist
    )


def linearized_small_phi(structure, phi, t):
    """Oracle: u_lin solving (lap_ref - 2) u = t^2 |phi|^2_ref."""
    from . import fem
    import scipy.sparse.linalg as spla

    mesh = structure.mesh
    ops = calculus.operators(mesh)
    probe = MinimalGerm(structure, phi, fields.ScalarField.zeros(mesh), [])
    source = probe.phi_quad_source() * t ** 2
    lamq = mobius.conformal_factor(mesh.quad_xy_flat)
    rhs = -fem.assemble_load(mesh, source * lamq)
    mat = ops.stiffness + 2.0 * ops.mass_ref
    u = spla.spsolve(mat.tocsc(), rhs)
    return fields.ScalarField(mesh, u)


def residuals_and_margin(germ):
    """(gauss, codazzi, H residuals, af margin) plus the footnote check."""
    res = germ.residuals()
    margin = germ.af_margin()
    margin_det = 2.0 + 2.0 * float(np.min(germ.det_b()))
    return {
        "gauss": res["gauss"],
        "codazzi": res["codazzi"],
        "mean_curvature": res["mean_curvature"],
        "af_margin": margin,
        "af_margin_det_route": margin_det,
        "criteria_mismatch": abs(margin - margin_det),
    }


def psi(germ):
    """The cotangent-bundle point ([I], phi) of a germ."""
    return conformal.CotangentPoint(germ.structure, germ.phi)
