"""Conformal structures, holomorphic quadratic differentials, and pairings.

A conformal structure is either the reference disk structure (metrics
conformal to the hyperbolic reference) or a deformed structure [G] given by a
general metric tensor G; the latter is encoded by its Beltrami coefficient mu
against the disk chart and pointwise oriented G-orthonormal frames.

Quadratic differentials are stored through their chart zz-component
q := psi(d_z, d_z), which transforms with gamma'^2 under deck changes for any
symmetric 2-tensor, so the same phase-weighted dofs serve both the reference
and deformed structures.  Holomorphy on [G] is the deformed equation

    D_mu q = d_{zbar} q - mu d_z q - 2 (d_z mu) q = 0 ,

which reduces to d_{zbar} q = 0 on the reference structure.

Convention ledger (fixed here once):
  * Hopf coefficient in oriented orthonormal frames: f = S(e1,e1) - i S(Je1,e1).
  * Beltrami coefficient of a metric variation: mu = conj(a)/2 where the
    trace-free part of the variation is Re(a dz^2) in frames of the base
    metric (Kodaira-Spencer normalization).
  * wp_inner(phi, psi) = int f fbar' da_hyp with hyperbolic-frame
    coefficients: the classical positive Hermitian pairing.
  * pair(phi, mu) = PAIRING_NORMALIZATION * int f m da: the duality used by
    the canonical one-form; the constant makes Re pair(phi, mu_{dG}) equal
    the tensor pairing int <Re phi, dG>_G da_G pointwise.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import calculus, fields, fem, mobius

# Re pair(phi, beltrami(dG)) == int <Re phi, dG> da requires the factor 4
# against the Kodaira-Spencer Beltrami normalization (frame algebra:
# <Re phi, dG>_G = 4 Re(f m) pointwise).
PAIRING_NORMALIZATION = 4.0


class ConformalStructure:
    """A point of Teichmueller space realized on a mesh.

    reference structure: metric is the reference hyperbolic metric, mu = 0.
    deformed structure: built from a TensorMetric via `from_tensor_metric`;
    carries mu, frames, and (optionally) the Liouville factor of its
    hyperbolic representative.
    """

    def __init__(self, mesh, mu=None, frames=None, metric=None, hyp_factor=None):
        self.mesh = mesh
        self.mu = mu  # FrameField('beltrami') or None for the reference
        self.frames = frames  # (n,2,2) chart columns e1,e2 at quotient nodes
        self.metric = metric  # TensorMetric for deformed structures
        self.hyp_factor = hyp_factor  # ScalarField w: e^{2w} G hyperbolic

    @classmethod
    def reference(cls, mesh):
        return cls(mesh)

    @property
    def is_reference(self):
        return self.mu is None

    @classmethod
    def from_tensor_metric(cls, metric, hyp_factor=None):
        """Structure of [G] for a general positive metric tensor G."""
        mesh = metric.mesh
        t11, t12, t22 = metric.field.frame_components()
        # Beltrami coefficient of G against the chart: in frame components the
        # reference factor cancels
        denom = t11 + t22 + 2.0 * np.sqrt(t11 * t22 - t12 ** 2)
        mu_vals = (t11 - t22 + 2j * t12) / denom
        mu = fields.FrameField(mesh, mu_vals, "beltrami")
        # oriented G-orthonormal frames from Gram-Schmidt on (dx, dy);
        # chart components, with the lambda_ref scale of G included
        z = mesh.node_positions_quot()
        lam = mobius.conformal_factor(z)
        g11 = lam * t11
        g12 = lam * t12
        g22 = lam * t22
        e1x = 1.0 / np.sqrt(g11)
        e1y = np.zeros_like(g11)
        # e2 = (dy - <dy,e1> e1)/norm, <dy,e1> = g12/sqrt(g11)
        vx = -g12 / g11
        vy = np.ones_like(g11)
        nrm = np.sqrt(g11 * vx ** 2 + 2 * g12 * vx * vy + g22 * vy ** 2)
        frames = np.zeros((len(z), 2, 2))
        frames[:, 0, 0] = e1x
        frames[:, 1, 0] = e1y
        frames[:, 0, 1] = vx / nrm
        frames[:, 1, 1] = vy / nrm
        return cls(mesh, mu=mu, frames=frames, metric=metric,
                   hyp_factor=hyp_factor)

    def mu_full(self):
        if self.mu is None:
            return np.zeros(self.mesh.n_nodes, dtype=complex)
        return self.mu.full()

    def ensure_hyperbolic_factor(self):
        if self.is_reference:
            return fields.ScalarField.zeros(self.mesh)
        if self.hyp_factor is None:
            kfield = None
            self.hyp_factor = calculus.liouville_uniformize(
                self.mesh, self.metric, curvature_field=kfield
            )
        return self.hyp_factor


class SeriesFamily:
    """Shared element list for Poincare theta series, with seed caches.

    Evaluates the three seed series sum_gamma (gamma z)^k gamma'(z)^2,
    k = 0,1,2, at arbitrary disk points; results for named point sets are
    cached so linear combinations evaluate as dot products.
    """

    def __init__(self, mats, n_seeds=3):
        self.mats = np.asarray(mats)  # (n, 2, 2) including the identity
        self.n_seeds = n_seeds
        self._cache = {}

    def eval_seeds(self, z, tag=None):
        """(n_seeds, len(z)) seed series values."""
        if tag is not None and tag in self._cache:
            return self._cache[tag]
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        out = np.zeros((self.n_seeds, len(z)), dtype=complex)
        # keep working arrays inside cache (chunk_elems * npts ~ 2.5e5)
        chunk = max(1, 250000 // max(len(z), 1))
        for start in range(0, len(self.mats), chunk):
            mm = self.mats[start : start + chunk]
            a = mm[:, 0, 0][:, None]
            b = mm[:, 0, 1][:, None]
            c = mm[:, 1, 0][:, None]
            d = mm[:, 1, 1][:, None]
            w = 1.0 / (c * z[None, :] + d)
            gz = (a * z[None, :] + b) * w
            w2 = w * w
            dg2 = w2 * w2
            term = dg2
            for k in range(self.n_seeds):
                out[k] += term.sum(axis=0)
                if k + 1 < self.n_seeds:
                    term = term * gz
        if tag is not None:
            self._cache[tag] = out
        return out


class SeriesEvaluator:
    """Analytic combination of the seed theta series of a SeriesFamily.

    Each term is holomorphic on the closed disk (poles sit at
    gamma^{-1}(infinity), outside), so dbar q = 0 identically; truncation
    shows up only as an equivariance defect, reported separately.
    """

    def __init__(self, family, coeffs):
        if isinstance(family, np.ndarray):
            family = SeriesFamily(family)
        self.family = family
        self.coeffs = np.asarray(coeffs, dtype=complex)

    @property
    def mats(self):
        return self.family.mats

    def __call__(self, z, tag=None):
        seeds = self.family.eval_seeds(z, tag=tag)
        return self.coeffs @ seeds


class QuadDiff:
    """Quadratic differential on a conformal structure (chart zz-component)."""

    def __init__(self, structure, coeff, residual=None, analytic=None):
        self.structure = structure
        self.mesh = structure.mesh
        self.coeff = coeff  # FrameField('qd'): chart q / lambda_ref
        self.residual = residual
        self.analytic = analytic  # SeriesEvaluator or None

    @classmethod
    def zeros(cls, structure):
        return cls(structure, fields.FrameField.zeros(structure.mesh, "qd"))

    def chart_q_full(self):
        """Full-nodal chart zz-component q."""
        z = self.mesh.node_xy
        return mobius.conformal_factor(z) * (
            self.mesh.reduction("qd") @ self.coeff.values
        )

    def scale(self, s):
        an = None
        if self.analytic is not None:
            an = SeriesEvaluator(self.analytic.family, s * self.analytic.coeffs)
        return QuadDiff(self.structure, self.coeff * s, residual=self.residual,
                        analytic=an)

    def add(self, other):
        an = None
        if self.analytic is not None and other.analytic is not None:
            an = SeriesEvaluator(
                self.analytic.family, self.analytic.coeffs + other.analytic.coeffs
            )
        return QuadDiff(self.structure, self.coeff + other.coeff, analytic=an)

    def real_part_tensor(self):
        """Re psi as a SymTensorField (chart matrix -> frame pair)."""
        mesh = self.mesh
        z = mesh.node_positions_quot()
        lam = mobius.conformal_factor(z)
        q = lam * self.coeff.values
        mu = (
            np.zeros_like(q)
            if self.structure.is_reference
            else self.structure.mu.values
        )
        pxx = np.real(q * (1.0 + mu) ** 2)
        pyy = np.real(-q * (1.0 - mu) ** 2)
        pxy = np.real(1j * q * (1.0 - mu ** 2))
        return fields.SymTensorField.from_chart_matrices(mesh, pxx, pxy, pyy)

    def hyp_frame_coeff(self):
        """Coefficient in oriented orthonormal frames of the hyperbolic
        representative of the structure (used by wp_inner)."""
        if self.structure.is_reference:
            return self.coeff.values.copy()
        # frame coefficient w.r.t. G-frames, then conformal rescale by e^{-2w}
        st = self.structure
        z = self.mesh.node_positions_quot()
        lam = mobius.conformal_factor(z)
        q = lam * self.coeff.values
        mu = st.mu.values
        # full complex tensor in chart coordinates
        pxx = q * (1.0 + mu) ** 2
        pyy = -q * (1.0 - mu) ** 2
        pxy = 1j * q * (1.0 - mu ** 2)
        e = st.frames
        # f_G = psi(e1, e1)
        f_g = (
            pxx * e[:, 0, 0] ** 2
            + 2.0 * pxy * e[:, 0, 0] * e[:, 1, 0]
            + pyy * e[:, 1, 0] ** 2
        )
        w = st.ensure_hyperbolic_factor().values
        return f_g * np.exp(-2.0 * w)


class BeltramiDiff:
    """Tangent vector at a conformal structure (Kodaira-Spencer Beltrami)."""

    def __init__(self, structure, coeff):
        self.structure = structure
        self.mesh = structure.mesh
        self.coeff = coeff  # FrameField('beltrami'); frame coeff == chart coeff

    @classmethod
    def zeros(cls, structure):
        return cls(structure, fields.FrameField.zeros(structure.mesh, "beltrami"))

    @classmethod
    def from_metric_variation(cls, structure, base_metric, dmetric):
        """KS Beltrami of t -> [G + t dG] at t=0.

        base_metric: TensorMetric or ConformalMetric representing the
        structure; dmetric: SymTensorField variation.
        """
        mesh = structure.mesh
        if structure.is_reference:
            if isinstance(base_metric, calculus.ConformalMetric):
                e2u = np.exp(2.0 * base_metric.u.values)
                base_field = fields.SymTensorField(
                    mesh, e2u, np.zeros(mesh.n_quotient, complex)
                )
            else:
                base_field = base_metric.field
        else:
            base_field = base_metric.field
        # components of dG in oriented base-orthonormal frames
        if structure.is_reference:
            # base = e^{2u} ref: frames are reference frames scaled
            scale = base_field.a  # = e^{2u}, deviator 0
            a_hat = dmetric.c / scale
            m = np.conj(a_hat) / 2.0
        else:
            e = structure.frames
            z = mesh.node_positions_quot()
            lam = mobius.conformal_factor(z)
            d11, d12, d22 = dmetric.frame_components()
            # chart components of dG
            c11 = lam * d11
            c12 = lam * d12
            c22 = lam * d22
            # frame components via E^T dG E
            f11 = (
                c11 * e[:, 0, 0] ** 2
                + 2 * c12 * e[:, 0, 0] * e[:, 1, 0]
                + c22 * e[:, 1, 0] ** 2
            )
            f12 = (
                c11 * e[:, 0, 0] * e[:, 0, 1]
                + c12 * (e[:, 0, 0] * e[:, 1, 1] + e[:, 1, 0] * e[:, 0, 1])
                + c22 * e[:, 1, 0] * e[:, 1, 1]
            )
            f22 = (
                c11 * e[:, 0, 1] ** 2
                + 2 * c12 * e[:, 0, 1] * e[:, 1, 1]
                + c22 * e[:, 1, 1] ** 2
            )
            a_hat = 0.5 * (f11 - f22) - 1j * f12
            m = np.conj(a_hat) / 2.0
        return cls(structure, fields.FrameField(mesh, m, "beltrami"))


class CotangentPoint:
    """(X, phi): a point of the cotangent bundle over Teichmueller space."""

    def __init__(self, structure, phi):
        if phi.structure is not structure:
            raise ValueError("phi must live on the given structure")
        self.structure = structure
        self.phi = phi


# ---------------------------------------------------------------------------
# pairings
# ---------------------------------------------------------------------------

def _struct_density_and_coeffs(qd, mu_diff):
    """Common frame data for pair(): (f_hat, m_hat, density at nodes).

    Frame coefficients are taken w.r.t. the structure's metric representative
    (reference hyperbolic, or G itself); pair is conformally invariant so the
    choice inside the class is immaterial.
    """
    st = qd.structure
    mesh = st.mesh
    if st.is_reference:
        f_hat = qd.coeff.values
        m_hat = mu_diff.coeff.values
        return f_hat, m_hat, None  # use reference hyperbolic density
    z = mesh.node_positions_quot()
    lam = mobius.conformal_factor(z)
    q = lam * qd.coeff.values
    mu = st.mu.values
    pxx = q * (1.0 + mu) ** 2
    pyy = -q * (1.0 - mu) ** 2
    pxy = 1j * q * (1.0 - mu ** 2)
    e = st.frames
    f_hat = (
        pxx * e[:, 0, 0] ** 2
        + 2.0 * pxy * e[:, 0, 0] * e[:, 1, 0]
        + pyy * e[:, 1, 0] ** 2
    )
    m_hat = mu_diff.coeff.values
    dens = None  # caller integrates against the structure metric density
    return f_hat, m_hat, dens


def pair(qd, mu_diff, normalization=PAIRING_NORMALIZATION):
    """Duality pairing <phi, mu> (complex)."""
    st = qd.structure
    if mu_diff.structure is not st:
        raise ValueError("pair: mismatched base structures")
    mesh = st.mesh
    f_hat, m_hat, _ = _struct_density_and_coeffs(qd, mu_diff)
    prod = f_hat * m_hat
    # weight (2,0) * (-1,1) = scalar: interpolate with the plain reduction
    vals = mesh.interpolate_at_quad(
        mesh.reduction("scalar") @ prod.real
    ) + 1j * mesh.interpolate_at_quad(mesh.reduction("scalar") @ prod.imag)
    if st.is_reference:
        dens = mobius.conformal_factor(mesh.quad_xy_flat)
    else:
        dens = st.metric.density_at_quad()
    return normalization * complex(
        np.dot(vals.real, dens * mesh.quad_w_flat)
        + 1j * np.dot(vals.imag, dens * mesh.quad_w_flat)
    )


def wp_inner(qd1, qd2):
    """Weil-Petersson Hermitian product (linear in first slot, positive)."""
    st = qd1.structure
    if qd2.structure is not st:
        raise ValueError("wp_inner: mismatched base structures")
    mesh = st.mesh
    f1 = qd1.hyp_frame_coeff()
    f2 = qd2.hyp_frame_coeff()
    prod = f1 * np.conj(f2)
    vals = mesh.interpolate_at_quad(
        mesh.reduction("scalar") @ prod.real
    ) + 1j * mesh.interpolate_at_quad(mesh.reduction("scalar") @ prod.imag)
    if st.is_reference:
        dens = mobius.conformal_factor(mesh.quad_xy_flat)
    else:
        w = st.ensure_hyperbolic_factor()
        wq = mesh.interpolate_at_quad(mesh.reduction("scalar") @ w.values)
        dens = st.metric.density_at_quad() * np.exp(2.0 * wq)
    return complex(
        np.dot(vals.real, dens * mesh.quad_w_flat)
        + 1j * np.dot(vals.imag, dens * mesh.quad_w_flat)
    )


def harmonic_representative(qd):
    """sigma^{-1} conj(psi): harmonic Beltrami with m = conj(f_hyp_frame)."""
    st = qd.structure
    vals = np.conj(qd.hyp_frame_coeff())
    return BeltramiDiff(st, fields.FrameField(st.mesh, vals, "beltrami"))


def harmonic_projection(basis, mu_diff):
    """QuadDiff psi with pair(phi_i, sigma^{-1} conj(psi)) = pair(phi_i, mu)."""
    gram = wp_gram(basis)
    rhs = np.array([pair(b, mu_diff, normalization=1.0) for b in basis])
    try:
        coef = np.conj(np.linalg.solve(gram, rhs))
    except np.linalg.LinAlgError:
        raise calculus.SolveError("harmonic projection: singular Gram system")
    out = basis[0].scale(coef[0])
    for c, b in zip(coef[1:], basis[1:]):
        out = out.add(b.scale(c))
    return out


def wp_gram(basis):
    n = len(basis)
    g = np.zeros((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            g[i, j] = wp_inner(basis[i], basis[j])
    return g


def wp_form(basis, mu1, mu2):
    """Weil-Petersson symplectic form on tangent vectors.

    omega_WP = -Im <.,.> with the dual Hermitian metric; via harmonic
    representatives this is +Im wp_inner(psi1, psi2).
    """
    psi1 = harmonic_projection(basis, mu1)
    psi2 = harmonic_projection(basis, mu2)
    return float(np.imag(wp_inner(psi1, psi2)))


# ---------------------------------------------------------------------------
# dbar operator and basis construction
# ---------------------------------------------------------------------------

def dbar_matrix(structure):
    """Sparse operator: quotient 'qd' dofs -> weighted residual at quad pts."""
    mesh = structure.mesh
    ops = calculus.operators(mesh)
    interp, gx, gy = ops.interp_and_grad_matrices()
    z = mesh.node_xy
    lam = sp.diags(mobius.conformal_factor(z))
    red = mesh.reduction("qd")
    to_chart = (lam @ red).tocsr()  # quotient coeffs -> full chart q
    dzbar = 0.5 * (gx + 1j * gy)
    if structure.is_reference:
        op = dzbar @ to_chart
    else:
        dz = 0.5 * (gx - 1j * gy)
        mu_full = structure.mu.full()
        mu_q = sp.diags(interp @ mu_full)
        # d_z mu at quadrature points
        muz_q = sp.diags((dz @ mu_full))
        op = (dzbar - mu_q @ dz - 2.0 * muz_q @ interp) @ to_chart
    w = sp.diags(np.sqrt(mesh.quad_w_flat))
    return (w @ op).tocsr()


def dbar_residual(qd):
    """Normalized L2 holomorphy residual of a quadratic differential."""
    mesh = qd.mesh
    op = dbar_matrix(qd.structure)
    r = op @ qd.coeff.values
    lamq = mobius.conformal_factor(mesh.quad_xy_flat)
    qfull = qd.chart_q_full()
    ops = calculus.operators(mesh)
    interp, _, _ = ops.interp_and_grad_matrices()
    qq = interp @ qfull
    norm = np.sqrt(np.dot(np.abs(qq) ** 2 / lamq ** 2, lamq * mesh.quad_w_flat))
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(r) / norm)


def dbar_spectrum(structure, k=8):
    """Smallest singular values/vectors of the dbar operator."""
    op = dbar_matrix(structure)
    mesh = structure.mesh
    # normalize columns against the L2(da_ref) norm of the differential:
    # mass matrix of frame coefficients
    lamq = mobius.conformal_factor(mesh.quad_xy_flat)
    mass = fem.assemble_weighted_mass(mesh, lamq, kind="qd")
    a = (op.getH() @ op).tocsc()
    # generalized problem A v = s^2 M v
    vals, vecs = spla.eigsh(a, k=k, M=mass.tocsc(), sigma=0, which="LM")
    order = np.argsort(vals)
    svals = np.sqrt(np.maximum(vals[order], 0.0))
    return svals, vecs[:, order]


def analytic_dbar_residual(qd, n_samples=24, step=1e-3):
    """Holomorphy residual of an analytically-evaluated differential.

    Fourth-order finite differences of the evaluator approximate d_zbar q at
    interior sample points; for truncated theta series this is zero to
    roundoff (every term is holomorphic on the disk).
    """
    ev = qd.analytic
    if ev is None:
        return dbar_residual(qd)
    rng = np.random.default_rng(7)
    r = 0.55 * np.sqrt(rng.random(n_samples))
    th = 2.0 * np.pi * rng.random(n_samples)
    z = r * np.exp(1j * th)
    offs = np.array([2, 1, -1, -2])
    wts = np.array([-1.0, 8.0, -8.0, 1.0]) / 12.0
    fx = sum(w * ev(z + o * step) for w, o in zip(wts, offs))
    fy = sum(w * ev(z + 1j * o * step) for w, o in zip(wts, offs))
    dbar = 0.5 * (fx + 1j * fy) / step
    lam = mobius.conformal_factor(z)
    scale = np.max(np.abs(ev(z)) / lam) + 1e-300
    return float(np.max(np.abs(dbar) / lam ** 1.5) / scale)


def qdiff_basis(structure, method="dbar-kernel", word_length=6,
                reference_basis=None, return_info=False):
    """Basis of Q(X): 3 quadratic differentials (genus 2).

    dbar-kernel: smallest singular vectors of the discrete dbar operator
    (works on any structure).  poincare-series: theta series over the
    surface group (reference structures built over a group).  With
    reference_basis given, the kernel vectors are aligned to it by L2
    projection (smooth dependence along families).
    """
    mesh = structure.mesh
    if method == "poincare-series":
        if not structure.is_reference:
            raise ValueError("series method needs a reference structure")
        basis, info = _poincare_series_basis(structure, word_length)
    elif method == "dbar-kernel":
        svals, vecs = dbar_spectrum(structure, k=8)
        gap = svals[3] / max(svals[2], 1e-300)
        info = {"singular_values": svals, "gap": float(gap)}
        raw = [vecs[:, i] for i in range(3)]
        if reference_basis is not None:
            raw = _align_to_reference(structure, raw, reference_basis)
        basis = [
            QuadDiff(structure, fields.FrameField(mesh, v, "qd"))
            for v in raw
        ]
    else:
        raise ValueError("unknown basis method %r" % method)
    basis = _wp_orthonormalize(basis)
    for b in basis:
        b.residual = (
            analytic_dbar_residual(b) if b.analytic is not None else dbar_residual(b)
        )
    if return_info:
        return basis, info
    return basis


def _wp_orthonormalize(basis):
    out = []
    for b in basis:
        cur = b
        for prev in out:
            c = wp_inner(cur, prev)
            cur = cur.add(prev.scale(-c))
        nrm = np.sqrt(abs(wp_inner(cur, cur)))
        if nrm < 1e-14:
            raise calculus.SolveError("rank-deficient quadratic differential basis")
        # deterministic phase: largest |coeff| made real positive
        vals = cur.coeff.values
        k = int(np.argmax(np.abs(vals)))
        phase = vals[k] / abs(vals[k])
        cur = cur.scale(np.conj(phase) / nrm)
        out.append(cur)
    return out


def _align_to_reference(structure, kernel_vecs, reference_basis):
    """L2-project reference coefficient vectors onto the kernel span."""
    mesh = structure.mesh
    lamq = mobius.conformal_factor(mesh.quad_xy_flat)
    mass = fem.assemble_weighted_mass(mesh, lamq, kind="qd").tocsc()
    k = np.column_stack(kernel_vecs)
    mk = mass @ k
    gram = k.conj().T @ mk
    out = []
    for ref in reference_basis:
        rhs = k.conj().T @ (mass @ ref)
        coef = np.linalg.solve(gram, rhs)
        out.append(k @ coef)
    return out


def evaluate_words(group, words):
    """Matrices of a word list, batched by letter position."""
    maxlen = max((len(w) for w in words), default=0)
    cur = np.eye(2, dtype=complex)[None, :, :].repeat(len(words), axis=0)
    for pos in range(maxlen):
        idxs = [i for i, w in enumerate(words) if len(w) > pos]
        if not idxs:
            break
        letters = {}
        for i in idxs:
            letters.setdefault(words[i][pos], []).append(i)
        for (gi, e), rows in letters.items():
            g = group.gen(gi, e)
            cur[rows] = np.einsum("nij,jk->nik", cur[rows], g)
    return cur


def _poincare_series_basis(structure, word_length, d_cap=11.5, word_list=None):
    from . import meshing as meshing_mod

    mesh = structure.mesh
    group = mesh.group
    if word_list is None:
        elements = meshing_mod.enumerate_ball(group, word_length, d_cap=d_cap)
        word_list = [w for _, w in elements]
        mats_tail = np.array([m for m, _ in elements]) if elements else np.zeros((0, 2, 2), complex)
    else:
        mats_tail = evaluate_words(group, word_list)
    mats = np.concatenate([np.eye(2, dtype=complex)[None], mats_tail], axis=0)
    orbit_d = np.array(
        [0.0] + [float(mobius.dist(0.0, m[0, 1] / m[1, 1])) for m in mats_tail]
    )
    z = mesh.node_positions_quot()
    lam = mobius.conformal_factor(z)
    total = np.zeros((3, len(z)), dtype=complex)
    shell = np.zeros((3, len(z)), dtype=complex)
    d_shell = np.max(orbit_d) - 1.0
    chunk = 256
    for start in range(0, len(mats), chunk):
        mm = mats[start : start + chunk]
        dd = orbit_d[start : start + chunk]
        a = mm[:, 0, 0][:, None]
        b = mm[:, 0, 1][:, None]
        c = mm[:, 1, 0][:, None]
        d = mm[:, 1, 1][:, None]
        gz = (a * z[None, :] + b) / (c * z[None, :] + d)
        dg2 = 1.0 / (c * z[None, :] + d) ** 4
        far = (dd >= d_shell)[:, None]
        for k in range(3):
            contrib = (gz ** k) * dg2
            total[k] += contrib.sum(axis=0)
            shell[k] += np.where(far, contrib, 0.0).sum(axis=0)
    family = SeriesFamily(mats)
    basis = []
    for k in range(3):
        coeff = total[k] / lam  # frame normalization
        seed = np.zeros(3, dtype=complex)
        seed[k] = 1.0
        basis.append(
            QuadDiff(
                structure,
                fields.FrameField(mesh, coeff, "qd"),
                analytic=SeriesEvaluator(family, seed),
            )
        )
    # outermost-shell contribution as the truncation-tail scale
    tail = [
        float(np.max(np.abs(shell[k])) / max(np.max(np.abs(total[k])), 1e-300))
        for k in range(3)
    ]
    info = {"n_elements": len(mats), "tail_estimate": tail}
    return basis, info


# ---------------------------------------------------------------------------
# Hopf correspondence
# ---------------------------------------------------------------------------

def hopf_encode(qd):
    """Re phi as a SymTensorField."""
    return qd.real_part_tensor()


def hopf_decode(structure, tensor, trace_tol=1e-8):
    """Unique quadratic differential with Re psi = tensor (trace-free input).

    Works on reference and deformed structures; raises if the input has a
    trace beyond tolerance w.r.t. the structure's metric.
    """
    mesh = structure.mesh
    if structure.is_reference:
        tr = 2.0 * tensor.a  # trace against the reference metric frames
        scale = np.max(np.abs(tensor.c)) + 1e-30
        if np.max(np.abs(tr)) > trace_tol * max(1.0, scale):
            raise ValueError(
                "hopf_decode: input not trace-free (max %.2e)" % np.max(np.abs(tr))
            )
        return QuadDiff(structure, fields.FrameField(mesh, tensor.c, "qd"))
    # deformed: S_zz and the Beltrami determine q
    z = mesh.node_positions_quot()
    lam = mobius.conformal_factor(z)
    s11, s12, s22 = tensor.frame_components()
    c11 = lam * s11
    c12 = lam * s12
    c22 = lam * s22
    tr = fields.trace_with(structure.metric.field, tensor)
    scale = np.max(np.abs(tensor.c)) + np.max(np.abs(tensor.a)) + 1e-30
    if np.max(np.abs(tr)) > trace_tol * max(1.0, scale):
        raise ValueError(
            "hopf_decode: input not trace-free (max %.2e)" % np.max(np.abs(tr))
        )
    # S_zz = (S_xx - S_yy)/4 - i S_xy / 2 ... with S = sum S_ij dx^i dx^j:
    # S(d_z, d_z) = (S_xx - S_yy - 2 i S_xy)/4
    s_zz = (c11 - c22 - 2j * c12) / 4.0
    mu = structure.mu.values
    mbar2 = np.conj(mu) ** 2
    a = 2.0 * s_zz
    q = (a - np.conj(a) * mbar2) / (1.0 - np.abs(mbar2) ** 2)
    return QuadDiff(structure, fields.FrameField(mesh, q / lam, "qd"))


def xi_eval(point, mu_diff, dphi=None):
    """Canonical one-form xi at (X, phi) on a tangent (mu, dphi)."""
    return pair(point.phi, mu_diff)


# ---------------------------------------------------------------------------
# Schwarzian derivative on grid samples
# ---------------------------------------------------------------------------

def schwarzian_grid(f_samples, spacing):
    """S(f) = (f''/f')' - (1/2)(f''/f')^2 on a 2d complex sample grid.

    f_samples: values of a holomorphic map on a square grid with complex
    spacing `spacing` (same in both axes: grid z[j,k] = z0 + (j + i k) h).
    Returns the Schwarzian on the interior of the grid (edges trimmed).
    """
    f = np.asarray(f_samples, dtype=complex)
    h = spacing

    def ddz(g):
        # fourth-order central differences along the real axis
        out = np.full_like(g, np.nan + 0j)
        out[2:-2, :] = (-g[4:, :] + 8 * g[3:-1, :] - 8 * g[1:-3, :] + g[:-4, :]) / (
            12.0 * h
        )
        return out

    fp = ddz(f)
    if np.any(np.abs(fp[4:-4, 4:-4]) < 1e-14):
        raise ValueError("schwarzian: vanishing derivative inside the chart")
    g = ddz(fp) / fp
    sf = ddz(g) - 0.5 * g * g
    return sf


def schwarzian_samples(fn, z0, half_width, n=48):
    """Sample a holomorphic map on a grid and return (z_interior, S(f))."""
    h = 2.0 * half_width / (n - 1)
    jj = np.arange(n) - (n - 1) / 2.0
    zz = z0 + jj[:, None] * h + 1j * jj[None, :] * h
    f = fn(zz)
    sf = schwarzian_grid(f, h)
    trim = 6
    return zz[trim:-trim, trim:-trim], sf[trim:-trim, trim:-trim]
