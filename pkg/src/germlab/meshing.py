"""Fundamental-domain meshes: Dirichlet polygon, triangulation, quotient dofs.

The Dirichlet domain of the group about the origin is computed as a half-plane
intersection in the Klein model (geodesics are straight chords there), then
triangulated by fanning and uniform 4-splits.  Sides of the polygon are exact
geodesic arcs; boundary triangles carry a blended map following the arc, so
paired sides match isometrically and the quotient complex is exact.

Tensor and differential fields live on nodal degrees of freedom; boundary
nodes are identified across side pairings (union-find with per-kind unimodular
factors: scalars are equal, quadratic-differential frame coefficients pick up
u^2 and Beltrami coefficients u^{-2}, u = unit(gamma')).
"""

import hashlib
import io
import json
import struct

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import fem, mobius

MESH_FORMAT_VERSION = 1
MESH_MAGIC = b"GRMLMESH"

PAIR_TOL = 1e-9


class MeshError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Dirichlet domain
# ---------------------------------------------------------------------------

def _canonical_key(m, digits=9):
    m = mobius.normalize_det(m)
    flat = m.flatten()
    k = np.argmax(np.abs(flat))
    s = flat[k] / abs(flat[k])
    m = m * np.conj(s)
    return tuple(np.round(m.flatten().view(float), digits).tolist())


def enumerate_ball(group, max_len, d_cap=None):
    """Group elements as (matrix, word) up to word length, deduped.

    d_cap optionally drops elements with d(0, gamma 0) beyond the cap (their
    series contributions are below e^{-2 d_cap}).
    """
    cut = np.inf if d_cap is None else d_cap
    return enumerate_orbit_ball(group, cut, max_len=max_len,
                                max_elements=2000000)


def _make_orbit_dedupe(seen, tol=3e-5):
    """Spatial-hash dedupe on orbit points in hyperboloid coordinates.

    Depth-robust: uses v = 2p/(1-|p|^2) whose relative point spacing stays
    bounded below (injectivity radius), while rounding jitter stays far
    smaller.  Returns probe(p) -> True if p was already seen, else inserts.
    """

    def probe(p):
        s = 1.0 - abs(p) ** 2
        v = 2.0 * p / max(s, 1e-300)
        cell = tol * (1.0 + abs(v))
        cx = int(np.floor(v.real / cell))
        cy = int(np.floor(v.imag / cell))
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                hit = seen.get((cx + dx, cy + dy))
                if hit is not None and abs(hit - v) < 1.5 * cell:
                    return True
        seen[(cx, cy)] = v
        return False

    return probe


def enumerate_orbit_ball(group, d_cut, max_elements=400000, max_len=48):
    """Elements with d(0, gamma 0) <= d_cut via pruned, vectorized BFS.

    The stabilizer of 0 is trivial (torsion-free groups), so the orbit point
    gamma(0) identifies the element; dedupe uses a spatial hash on it.
    """
    letters = [(i, e) for i in range(4) for e in (1, -1)]
    gen_mats = np.array([group.gen(i, e) for i, e in letters])
    slack = 1.2
    seen = {}
    probe_insert = _make_orbit_dedupe(seen)
    probe_insert(0.0 + 0.0j)
    out_mats = []
    out_words = []
    frontier_m = np.eye(2, dtype=complex)[None, :, :]
    frontier_w = [[]]
    total = 1
    for _ in range(max_len):
        cand = np.einsum("nij,ljk->nlik", frontier_m, gen_mats)
        n, l = cand.shape[:2]
        cand = cand.reshape(n * l, 2, 2)
        pts = cand[:, 0, 1] / cand[:, 1, 1]
        r = np.abs(pts)
        d = 2.0 * np.arctanh(np.clip(r, 0.0, 1.0 - 1e-16))
        keep = d <= d_cut + slack
        next_m = []
        next_w = []
        idxs = np.nonzero(keep)[0]
        for flat in idxs:
            wi, li = divmod(int(flat), l)
            word = frontier_w[wi]
            if word and word[-1] == (letters[li][0], -letters[li][1]):
                continue
            p = complex(pts[flat])
            if probe_insert(p):
                continue
            m2 = cand[flat]
            w2 = word + [letters[li]]
            next_m.append(m2)
            next_w.append(w2)
            if d[flat] <= d_cut:
                out_mats.append(m2)
                out_words.append(w2)
            total += 1
            if total > max_elements:
                raise MeshError("orbit ball enumeration exceeded budget")
        if not next_m:
            break
        frontier_m = np.array(next_m)
        frontier_w = next_w
    return list(zip(out_mats, out_words))


def _poincare_to_klein(z):
    return 2.0 * z / (1.0 + np.abs(z) ** 2)


def _klein_to_poincare(k):
    return k / (1.0 + np.sqrt(np.maximum(0.0, 1.0 - np.abs(k) ** 2)))


def _bisector_ideal_endpoints(w):
    """Ideal endpoints of the perpendicular bisector of [0, w] (disk model)."""
    # hyperbolic midpoint of [0,w] sits at euclidean radius tanh(d/4)
    rho = np.tanh(0.25 * mobius.dist(0.0, w))
    # center/radius of the orthogonal circle crossing the ray at radius rho
    cmag = 0.5 * (rho + 1.0 / rho)
    rad = 0.5 * (1.0 / rho - rho)
    u = w / abs(w)
    c = cmag * u
    # intersect |z - c| = rad with |z|=1
    a = (1.0 + cmag ** 2 - rad ** 2) / (2.0 * cmag)
    b = np.sqrt(max(1.0 - a * a, 0.0))
    return (a + 1j * b) * u, (a - 1j * b) * u


def _clip_halfplane(poly, supports, normal, offset, new_support):
    """Clip keeping the side n.x <= offset; new edges get new_support."""
    n = len(poly)
    vals = np.array([normal[0] * p.real + normal[1] * p.imag - offset for p in poly])
    if np.all(vals <= 1e-12):
        return poly, supports, False
    out_pts, out_sup = [], []
    for i in range(n):
        j = (i + 1) % n
        vi, vj = vals[i], vals[j]
        pi, pj = poly[i], poly[j]
        inside_i = vi <= 0.0
        inside_j = vj <= 0.0
        if inside_i:
            out_pts.append(pi)
            out_sup.append(supports[i])
            if not inside_j:
                t = vi / (vi - vj)
                out_pts.append(pi + t * (pj - pi))
                out_sup.append(new_support)
        elif inside_j:
            t = vi / (vi - vj)
            out_pts.append(pi + t * (pj - pi))
            out_sup.append(supports[i])
    return out_pts, out_sup, True


class DirichletDomain:
    """Dirichlet fundamental polygon about the origin with side pairings."""

    def __init__(self, group, d_cut=None):
        self.group = group
        nearest = min(
            mobius.dist(0.0, mobius.apply(g, 0.0)) for g in group.signed_gens
        )
        if d_cut is None:
            cuts = [nearest + 3.5, nearest + 5.0, nearest + 6.5, nearest + 8.0]
        else:
            cuts = [d_cut]
        last_err = None
        for cut in cuts:
            try:
                self._build(cut)
                return
            except MeshError as err:
                last_err = err
        raise MeshError("Dirichlet domain failed: %s" % last_err)

    def _build(self, d_cut):
        elements = enumerate_orbit_ball(self.group, d_cut)
        orbit = [(mobius.apply(m, 0.0), m, w) for m, w in elements]
        orbit = [(p, m, w) for p, m, w in orbit if abs(p) > 1e-12]
        orbit.sort(key=lambda t: abs(t[0]))

        # initial big polygon (Klein coords), radius beyond any Dirichlet side
        rmax = np.tanh(0.5 * d_cut + 1.0)
        npoly = 64
        ang = 2 * np.pi * np.arange(npoly) / npoly
        poly = list(rmax * np.exp(1j * ang))
        supports = [None] * npoly

        for k, (p, m, w) in enumerate(orbit):
            e1, e2 = _bisector_ideal_endpoints(p)
            # chord in Klein model between the same ideal points
            mid = 0.5 * (e1 + e2)
            nvec = (mid.real, mid.imag)
            nn = np.hypot(*nvec)
            if nn < 1e-14:
                continue
            nvec = (nvec[0] / nn, nvec[1] / nn)
            off = nvec[0] * e1.real + nvec[1] * e1.imag
            if off < 0:
                nvec = (-nvec[0], -nvec[1])
                off = -off
            poly, supports, _ = _clip_halfplane(poly, supports, nvec, off, k)
            if len(poly) < 3:
                raise MeshError("domain clipped away; group data invalid")

        # drop degenerate edges
        keep_pts, keep_sup = [], []
        n = len(poly)
        for i in range(n):
            j = (i + 1) % n
            if abs(poly[i] - poly[j]) > 1e-9:
                keep_pts.append(poly[i])
                keep_sup.append(supports[i])
            else:
                # merge: successor vertex absorbs; keep the support of the
                # longer edge by dropping this zero-length one
                pass
        poly, supports = keep_pts, keep_sup
        if any(s is None for s in supports):
            raise MeshError("initial polygon edges survive; enlarge word ball")

        verts_k = np.array(poly)
        verts = _klein_to_poincare(verts_k)
        nside = len(verts)
        side_elems = [orbit[supports[i]] for i in range(nside)]

        # pairing: side with element m pairs with the side of m^{-1}
        def mat_dist(a, b):
            a = mobius.normalize_det(a)
            b = mobius.normalize_det(b)
            return min(np.linalg.norm(a - b), np.linalg.norm(a + b))

        partner = [None] * nside
        for i in range(nside):
            mi = np.linalg.inv(side_elems[i][1])
            dists = [mat_dist(mi, side_elems[j][1]) for j in range(nside)]
            j = int(np.argmin(dists))
            if dists[j] > 1e-8:
                raise MeshError("side pairing incomplete; enlarge word ball")
            partner[i] = j
        for i in range(nside):
            if partner[partner[i]] != i:
                raise MeshError("pairing is not an involution")

        # verify pairing maps side[partner[i]] onto side[i] endpoint-wise:
        # gamma_i maps bisector(gamma_i^{-1}) to bisector(gamma_i)
        for i in range(nside):
            j = partner[i]
            g = side_elems[i][1]
            a = mobius.apply(g, verts[j])
            b = mobius.apply(g, verts[(j + 1) % nside])
            va, vb = verts[i], verts[(i + 1) % nside]
            err = min(
                abs(a - va) + abs(b - vb),
                abs(a - vb) + abs(b - va),
            )
            if err > PAIR_TOL:
                raise MeshError("side pairing endpoints mismatch %.2e" % err)
            # orientation-reversing correspondence expected
            self_rev = abs(a - vb) + abs(b - va) < abs(a - va) + abs(b - vb)
            if not self_rev:
                raise MeshError("pairing preserves boundary orientation")

        circum = max(mobius.dist(0.0, v) for v in verts)
        if 2.0 * circum > d_cut:
            raise MeshError("domain circumradius exceeds ball; enlarge word ball")

        self.vertices = verts
        self.n_sides = nside
        self.side_elements = [m for _, m, _ in side_elems]
        self.side_words = [w for _, _, w in side_elems]
        self.partner = partner

        # interior angles and vertex classes
        angles = self._interior_angles()
        area = (nside - 2) * np.pi - np.sum(angles)
        if abs(area - 4.0 * np.pi) > 1e-6:
            raise MeshError("domain area %.6f != 4*pi; wrong group or ball" % area)
        self.area = area
        self.angles = angles
        self.vertex_classes = self._vertex_classes()
        for cls in self.vertex_classes:
            s = sum(angles[v] for v in cls)
            if abs(s - 2.0 * np.pi) > 1e-7:
                raise MeshError("vertex cycle angle sum %.8f != 2*pi" % s)
        euler = len(self.vertex_classes) - nside // 2 + 1
        if euler != 2 - 2 * self.group.genus:
            raise MeshError("quotient Euler characteristic %d" % euler)

    def side_circle(self, i):
        """Euclidean circle (center, radius) carrying geodesic side i."""
        p = self.vertices[i]
        q = self.vertices[(i + 1) % self.n_sides]
        ax, ay = 2 * p.real, 2 * p.imag
        bx, by = 2 * q.real, 2 * q.imag
        rhs = np.array([abs(p) ** 2 + 1.0, abs(q) ** 2 + 1.0])
        mat = np.array([[ax, ay], [bx, by]])
        c = np.linalg.solve(mat, rhs)
        center = c[0] + 1j * c[1]
        rad = np.sqrt(abs(center) ** 2 - 1.0)
        return center, rad

    def _interior_angles(self):
        n = self.n_sides
        angles = np.zeros(n)
        for k in range(n):
            p = self.vertices[k]
            # tangents of adjacent sides at vertex k, pointing away from it
            t_next = self._tangent_at(k, p)
            t_prev = self._tangent_at((k - 1) % n, p)
            ang = np.angle(t_prev / t_next)
            angles[k] = ang % (2 * np.pi)
        return angles

    def _tangent_at(self, side, p):
        c, _ = self.side_circle(side)
        q_mid = mobius.geodesic_midpoint(
            self.vertices[side], self.vertices[(side + 1) % self.n_sides]
        )
        t = 1j * (p - c)
        # orient towards the interior of the side
        if np.real(np.conj(t) * (q_mid - p)) < 0:
            t = -t
        return t / abs(t)

    def _vertex_classes(self):
        n = self.n_sides
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

        for i in range(n):
            j = self.partner[i]
            # gamma_i maps (v_j, v_{j+1}) -> (v_{i+1}, v_i)
            union(j, (i + 1) % n)
            union((j + 1) % n, i)
        classes = {}
        for v in range(n):
            classes.setdefault(find(v), []).append(v)
        return list(classes.values())


# ---------------------------------------------------------------------------
# Triangulated mesh with quotient identification
# ---------------------------------------------------------------------------

class FundamentalDomainMesh:
    """Curved-boundary triangulation of a Dirichlet domain with quotient dofs."""

    def __init__(self, domain, target_h, order=2, quad_n=5):
        self.domain = domain
        self.group = domain.group
        self.order = order
        self.target_h = float(target_h)
        self.ref = fem.ReferenceElement(order, quad_n=quad_n)
        self._triangulate()
        self._build_nodes()
        self._build_geometry()
        self._identify()
        self._locator = None

    # -- triangulation ------------------------------------------------------

    def _triangulate(self):
        dom = self.domain
        verts = [0.0 + 0.0j] + list(dom.vertices)
        tris = []
        # triangle record: (i0,i1,i2, side or -1, t1, t2); curved edge is
        # always between local vertices 1 and 2
        for k in range(dom.n_sides):
            tris.append((0, 1 + k, 1 + (k + 1) % dom.n_sides, k, 0.0, 1.0))
        diam = 2.0 * max(mobius.dist(0.0, v) for v in dom.vertices)
        if self.target_h > diam / 4.0:
            raise MeshError("target h > diameter/4; domain will not triangulate")

        def max_edge(vv, tt):
            worst = 0.0
            for (i0, i1, i2, _s, _a, _b) in tt:
                worst = max(
                    worst,
                    mobius.dist(vv[i0], vv[i1]),
                    mobius.dist(vv[i1], vv[i2]),
                    mobius.dist(vv[i2], vv[i0]),
                )
            return worst

        self.n_refine = 0
        while max_edge(verts, tris) > 1.4 * self.target_h:
            verts, tris = self._refine(verts, tris)
            self.n_refine += 1
            if self.n_refine > 9:
                raise MeshError("refinement failed to reach target h")
        self.max_edge_length = max_edge(verts, tris)
        self.vertices = np.array(verts)
        self.triangles = np.array([t[:3] for t in tris], dtype=int)
        self.tri_side = np.array([t[3] for t in tris], dtype=int)
        self.tri_t = np.array([[t[4], t[5]] for t in tris])

    def _refine(self, verts, tris):
        verts = list(verts)
        midpoint = {}

        def mid(i, j, curved=None):
            key = (min(i, j), max(i, j))
            if key in midpoint:
                return midpoint[key]
            if curved is None:
                p = 0.5 * (verts[i] + verts[j])
            else:
                p = curved
            verts.append(p)
            midpoint[key] = len(verts) - 1
            return midpoint[key]

        out = []
        for (i0, i1, i2, side, ta, tb) in tris:
            if side >= 0:
                tm = 0.5 * (ta + tb)
                pm = self.domain_side_point(side, tm)
                m12 = mid(i1, i2, curved=pm)
                m01 = mid(i0, i1)
                m02 = mid(i0, i2)
                out.append((i0, m01, m02, -1, 0.0, 0.0))
                out.append((m01, i1, m12, side, ta, tm))
                out.append((m02, m12, i2, side, tm, tb))
                out.append((m01, m12, m02, -1, 0.0, 0.0))
            else:
                m01 = mid(i0, i1)
                m12 = mid(i1, i2)
                m02 = mid(i0, i2)
                out.append((i0, m01, m02, -1, 0.0, 0.0))
                out.append((m01, i1, m12, -1, 0.0, 0.0))
                out.append((m02, m12, i2, -1, 0.0, 0.0))
                out.append((m01, m12, m02, -1, 0.0, 0.0))
        return verts, out

    def domain_side_point(self, side, t):
        dom = self.domain
        return mobius.geodesic_point(
            dom.vertices[side], dom.vertices[(side + 1) % dom.n_sides], t
        )

    def _side_point_velocity(self, side, t):
        dom = self.domain
        return mobius.geodesic_point_and_velocity(
            dom.vertices[side], dom.vertices[(side + 1) % dom.n_sides], t
        )

    # -- nodes ---------------------------------------------------------------

    def _build_nodes(self):
        order = self.order
        ntri = len(self.triangles)
        nv = len(self.vertices)
        epe = fem.n_edge_nodes(order)
        nin = fem.n_interior_nodes(order)

        edge_ids = {}
        edge_list = []

        def edge_id(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_ids:
                edge_ids[key] = len(edge_list)
                edge_list.append(key)
            return edge_ids[key]

        tri_edges = np.zeros((ntri, 3), dtype=int)
        for t, (i0, i1, i2) in enumerate(self.triangles):
            tri_edges[t] = [edge_id(i0, i1), edge_id(i1, i2), edge_id(i2, i0)]
        nedge = len(edge_list)

        n_nodes = nv + nedge * epe + ntri * nin
        self.n_nodes = n_nodes
        self.edge_list = edge_list
        self.tri_edges = tri_edges

        # local->global dof map; reference ordering: verts, edge01, edge12,
        # edge20 (each low-to-high global vertex id), interior
        tri_dofs = np.zeros((ntri, self.ref.n_basis), dtype=int)
        tri_dofs[:, 0:3] = self.triangles
        for t in range(ntri):
            i0, i1, i2 = self.triangles[t]
            pairs = [(i0, i1), (i1, i2), (i2, i0)]
            for e_loc, (a, b) in enumerate(pairs):
                eid = tri_edges[t, e_loc]
                fwd = a < b
                for j in range(epe):
                    slot = 3 + e_loc * epe + j
                    jj = j if fwd else epe - 1 - j
                    tri_dofs[t, slot] = nv + eid * epe + jj
            for j in range(nin):
                tri_dofs[t, 3 + 3 * epe + j] = nv + nedge * epe + t * nin + j
        self.tri_dofs = tri_dofs

        # node positions from the geometry maps (set in _build_geometry)
        self.node_xy = np.zeros(n_nodes, dtype=complex)
        self.node_xy[:nv] = self.vertices

    # -- geometry ------------------------------------------------------------

    def _map_point(self, t, ref_pts):
        """Geometry map of triangle t at reference points (n,2) -> complex."""
        i0, i1, i2 = self.triangles[t]
        p0, p1, p2 = self.vertices[[i0, i1, i2]]
        xi = ref_pts[:, 0]
        eta = ref_pts[:, 1]
        base = p0 * (1 - xi - eta) + p1 * xi + p2 * eta
        side = self.tri_side[t]
        if side < 0:
            return base
        ta, tb = self.tri_t[t]
        ssum = xi + eta
        s = np.where(ssum > 1e-14, eta / np.maximum(ssum, 1e-300), 0.0)
        arc = np.array(
            [self.domain_side_point(side, ta + (tb - ta) * si) for si in s]
        )
        bracket = arc - ((1 - s) * p1 + s * p2)
        return base + ssum * bracket

    def _map_jacobian(self, t, ref_pts):
        """(n,2,2) Jacobian d(x,y)/d(xi,eta) of the geometry map."""
        i0, i1, i2 = self.triangles[t]
        p0, p1, p2 = self.vertices[[i0, i1, i2]]
        n = len(ref_pts)
        side = self.tri_side[t]
        if side < 0:
            j = np.zeros((n, 2, 2))
            j[:, 0, 0] = (p1 - p0).real
            j[:, 1, 0] = (p1 - p0).imag
            j[:, 0, 1] = (p2 - p0).real
            j[:, 1, 1] = (p2 - p0).imag
            return j
        xi = ref_pts[:, 0]
        eta = ref_pts[:, 1]
        ta, tb = self.tri_t[t]
        ssum = np.maximum(xi + eta, 1e-300)
        s = np.where(xi + eta > 1e-14, eta / ssum, 0.0)
        arc = np.empty(n, dtype=complex)
        darc = np.empty(n, dtype=complex)
        for k, si in enumerate(s):
            tt = ta + (tb - ta) * si
            arc[k], vel = self._side_point_velocity(side, tt)
            darc[k] = vel * (tb - ta)
        bracket = arc - ((1 - s) * p1 + s * p2)
        dbr = darc - (p2 - p1)
        dxdxi = (p1 - p0) + bracket - s * dbr
        dxdeta = (p2 - p0) + bracket + (1 - s) * dbr
        j = np.zeros((n, 2, 2))
        j[:, 0, 0] = dxdxi.real
        j[:, 1, 0] = dxdxi.imag
        j[:, 0, 1] = dxdeta.real
        j[:, 1, 1] = dxdeta.imag
        return j

    def _build_geometry(self):
        ntri = len(self.triangles)
        nq = len(self.ref.quad_w)
        nb = self.ref.n_basis
        self.quad_xy = np.zeros((ntri, nq), dtype=complex)
        self.quad_jacdet = np.zeros((ntri, nq))
        self.quad_physgrad = np.zeros((ntri, nq, nb, 2))
        for t in range(ntri):
            self.quad_xy[t] = self._map_point(t, self.ref.quad_ref)
            jac = self._map_jacobian(t, self.ref.quad_ref)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            if np.any(det <= 0):
                raise MeshError("degenerate or inverted triangle %d" % t)
            self.quad_jacdet[t] = det
            inv = np.empty_like(jac)
            inv[:, 0, 0] = jac[:, 1, 1]
            inv[:, 0, 1] = -jac[:, 0, 1]
            inv[:, 1, 0] = -jac[:, 1, 0]
            inv[:, 1, 1] = jac[:, 0, 0]
            inv /= det[:, None, None]
            # physical gradient: J^{-T} grad_ref
            self.quad_physgrad[t] = np.einsum(
                "qba,qnb->qna", inv, self.ref.dphi_q
            )
            # node positions
            pos = self._map_point(t, self.ref.nodes)
            self.node_xy[self.tri_dofs[t]] = pos
        self.quad_xy_flat = self.quad_xy.reshape(-1)
        self.quad_w_flat = (self.quad_jacdet * self.ref.quad_w[None, :]).reshape(-1)

    # -- quotient identification ---------------------------------------------

    def _boundary_nodes_by_side(self):
        """For each polygon side: {rounded param t: node id}."""
        dom = self.domain
        out = {k: {} for k in range(dom.n_sides)}
        epe = fem.n_edge_nodes(self.order)
        for t in range(len(self.triangles)):
            side = self.tri_side[t]
            if side < 0:
                continue
            ta, tb = self.tri_t[t]
            out[side][round(ta, 12)] = self.tri_dofs[t, 1]
            out[side][round(tb, 12)] = self.tri_dofs[t, 2]
            # reference slot 3+epe+j sits at fraction (j+1)/order along the
            # local (1,2) edge; tri_dofs already encodes the storage direction
            for j in range(epe):
                tt = ta + (tb - ta) * (j + 1) / self.order
                out[side][round(tt, 12)] = self.tri_dofs[t, 3 + epe + j]
        return out

    def _identify(self):
        dom = self.domain
        side_nodes = self._boundary_nodes_by_side()
        n = self.n_nodes

        # identification edges: (node_a, node_b, gamma) with
        # value(node_a) = kind_factor(gamma, z_a) * value(node_b)
        edges = []
        done = set()
        for i in range(dom.n_sides):
            j = dom.partner[i]
            if (j, i) in done:
                continue
            done.add((i, j))
            g = dom.side_elements[i]  # maps side j onto side i
            nodes_i = side_nodes[i]
            for t, nid_j in side_nodes[j].items():
                t_m = round(1.0 - t, 12)
                if t_m not in nodes_i:
                    cands = [k for k in nodes_i if abs(k - t_m) < 1e-9]
                    if not cands:
                        raise MeshError("no partner node on side %d at t=%s" % (i, t_m))
                    t_m = cands[0]
                nid_i = nodes_i[t_m]
                if nid_i != nid_j:
                    edges.append((nid_j, nid_i, g))
        self._ident_edges = edges

        adjacency = {}
        for a, b, g in edges:
            adjacency.setdefault(a, []).append((b, g, True))
            adjacency.setdefault(b, []).append((a, g, False))
        self._ident_adjacency = adjacency

        # connected components; representative = smallest node id
        comp = -np.ones(n, dtype=int)
        reps = []
        for start in range(n):
            if comp[start] >= 0:
                continue
            if start not in adjacency:
                comp[start] = len(reps)
                reps.append(start)
                continue
            cid = len(reps)
            stack = [start]
            comp[start] = cid
            members = [start]
            while stack:
                a = stack.pop()
                for b, _g, _fwd in adjacency.get(a, ()):
                    if comp[b] < 0:
                        comp[b] = cid
                        stack.append(b)
                        members.append(b)
            reps.append(min(members))
        self._root_index = comp
        self.n_quotient = len(reps)
        self.quot_rep_node = np.array(reps)
        self._reductions = {}

        # pairing metadata (spec external interface shape)
        self.boundary_pairings = [
            {
                "side": i,
                "partner": dom.partner[i],
                "word": dom.side_words[i],
            }
            for i in range(dom.n_sides)
        ]

    def _kind_factor(self, g, z, kind):
        if kind == "scalar":
            return 1.0
        du = complex(mobius.deriv(g, z))
        u = du / abs(du)
        if kind == "qd":
            return u ** 2
        if kind == "beltrami":
            return np.conj(u) ** 2
        raise ValueError("unknown field kind %r" % kind)

    def reduction(self, kind="scalar"):
        """Sparse (n_nodes, n_quotient): full values from quotient values.

        value(node) = factor(node) * value(representative of its class); the
        factors are composed along a BFS forest of the identification edges
        and checked for consistency on cycle-closing edges.
        """
        if kind in self._reductions:
            return self._reductions[kind]
        n = self.n_nodes
        dtype = float if kind == "scalar" else complex
        factor = np.ones(n, dtype=dtype)
        visited = np.zeros(n, dtype=bool)
        for rep in self.quot_rep_node:
            if rep not in self._ident_adjacency:
                visited[rep] = True
                continue
            visited[rep] = True
            stack = [rep]
            while stack:
                a = stack.pop()
                for b, g, a_is_slave in self._ident_adjacency.get(a, ()):
                    # edge meaning: value(slave) = kappa * value(master),
                    # slave the first endpoint stored, kappa at z_slave
                    if a_is_slave:
                        kappa = self._kind_factor(g, self.node_xy[a], kind)
                        fb = factor[a] / kappa
                    else:
                        kappa = self._kind_factor(g, self.node_xy[b], kind)
                        fb = factor[a] * kappa
                    if visited[b]:
                        if abs(factor[b] - fb) > 1e-8:
                            raise MeshError(
                                "inconsistent identification factor for kind %r" % kind
                            )
                        continue
                    factor[b] = fb
                    visited[b] = True
                    stack.append(b)
        rows = np.arange(n)
        red = sp.coo_matrix(
            (factor, (rows, self._root_index)), shape=(n, self.n_quotient)
        ).tocsr()
        self._reductions[kind] = red
        return red

    # -- evaluation helpers ---------------------------------------------------

    def full_values(self, quot_values, kind="scalar"):
        return self.reduction(kind) @ quot_values

    def quot_values_from_nodal(self, full_values):
        """Restrict a full nodal vector to quotient dofs (representatives)."""
        return full_values[self.quot_rep_node]

    def node_positions_quot(self):
        return self.node_xy[self.quot_rep_node]

    def integrate_quad(self, values_q):
        """Integrate a quadrature-point sampled density against dxdy."""
        return float(np.dot(values_q.reshape(-1), self.quad_w_flat))

    def interpolate_at_quad(self, full_nodal):
        """Nodal field -> values at all quadrature points (ntri*nq,)."""
        vals = full_nodal[self.tri_dofs]  # (ntri, nb)
        return np.einsum("qi,ti->tq", self.ref.phi_q, vals).reshape(-1)

    def gradient_at_quad(self, full_nodal):
        """Nodal field -> physical gradients at quadrature points (ntri*nq,2)."""
        vals = full_nodal[self.tri_dofs]
        g = np.einsum("tqia,ti->tqa", self.quad_physgrad, vals)
        return g.reshape(-1, 2)

    # -- point location -------------------------------------------------------

    def _build_locator(self):
        cent = self._map_point_all(np.array([[1 / 3, 1 / 3]]))
        pts = np.column_stack([cent.real.ravel(), cent.imag.ravel()])
        self._locator = cKDTree(pts)

    def _map_point_all(self, ref):
        out = np.zeros((len(self.triangles), len(ref)), dtype=complex)
        for t in range(len(self.triangles)):
            out[t] = self._map_point(t, ref)
        return out

    def locate(self, z, tol=1e-9):
        """Triangle index and reference coords containing point z."""
        if self._locator is None:
            self._build_locator()
        q = np.array([[z.real, z.imag]])
        k = min(24, len(self.triangles))
        _, idx = self._locator.query(q, k=k)
        best = None
        for t in np.atleast_1d(idx.ravel()):
            ref = self._invert_map(int(t), z)
            if ref is None:
                continue
            xi, eta = ref
            slack = -min(xi, eta, 1.0 - xi - eta)
            if slack <= tol:
                return int(t), (xi, eta)
            if best is None or slack < best[2]:
                best = (int(t), (xi, eta), slack)
        if best is not None and best[2] < 1e-4:
            return best[0], best[1]
        raise MeshError("point %s not located in domain" % z)

    def _invert_map(self, t, z, iters=12):
        i0, i1, i2 = self.triangles[t]
        p0, p1, p2 = self.vertices[[i0, i1, i2]]
        mat = np.array(
            [
                [(p1 - p0).real, (p2 - p0).real],
                [(p1 - p0).imag, (p2 - p0).imag],
            ]
        )
        try:
            ref = np.linalg.solve(mat, [(z - p0).real, (z - p0).imag])
        except np.linalg.LinAlgError:
            return None
        if self.tri_side[t] < 0:
            return float(ref[0]), float(ref[1])
        ref = np.clip(ref, -0.2, 1.2)
        for _ in range(iters):
            cur = self._map_point(t, np.array([ref]))[0]
            err = np.array([(cur - z).real, (cur - z).imag])
            if np.dot(err, err) < 1e-28:
                break
            jac = self._map_jacobian(t, np.array([ref]))[0]
            try:
                step = np.linalg.solve(jac, err)
            except np.linalg.LinAlgError:
                return None
            ref = ref - step
        return float(ref[0]), float(ref[1])

    def eval_field(self, full_nodal, pts, grad=False):
        """Evaluate a nodal field (and optionally gradient) at domain points."""
        pts = np.atleast_1d(pts)
        vals = np.zeros(len(pts), dtype=np.asarray(full_nodal).dtype)
        grads = np.zeros((len(pts), 2), dtype=vals.dtype) if grad else None
        for k, z in enumerate(pts):
            t, (xi, eta) = self.locate(complex(z))
            ref = np.array([[xi, eta]])
            phi = self.ref.eval_basis(ref)[0]
            loc = full_nodal[self.tri_dofs[t]]
            vals[k] = phi @ loc
            if grad:
                jac = self._map_jacobian(t, ref)[0]
                dphi = self.ref.eval_basis_grad(ref)[0]
                inv = np.linalg.inv(jac)
                grads[k] = (inv.T @ dphi.T) @ loc
        return (vals, grads) if grad else vals

    # -- reduction of points into the fundamental domain ----------------------

    def reduce_point(self, z, max_steps=256):
        """Find word w with w(z) in the domain; returns (z', matrix of w)."""
        dom = self.domain
        cur = complex(z)
        acc = np.eye(2, dtype=complex)
        for _ in range(max_steps):
            d0 = mobius.dist(cur, 0.0)
            best = None
            for m in dom.side_elements:
                mi = np.linalg.inv(m)
                cand = complex(mobius.apply(mi, cur))
                dd = mobius.dist(cand, 0.0)
                if dd < d0 - 1e-13 and (best is None or dd < best[0]):
                    best = (dd, cand, mi)
            if best is None:
                return cur, acc
            cur = best[1]
            acc = best[2] @ acc
        raise MeshError("point reduction did not terminate")

    # -- cache -----------------------------------------------------------------

    def provenance_hash(self):
        h = hashlib.sha256()
        for g in self.group.generators:
            h.update(np.ascontiguousarray(g).tobytes())
        h.update(str(self.group.provenance).encode())
        h.update(str(self.group.params).encode())
        h.update(struct.pack("<dII", self.target_h, self.order, 0))
        return h.hexdigest()

    def save(self, path):
        header = {
            "version": MESH_FORMAT_VERSION,
            "genus": self.group.genus,
            "h": self.target_h,
            "order": self.order,
            "provenance": self.provenance_hash(),
        }
        blob = io.BytesIO()
        np.savez(
            blob,
            vertices=self.vertices,
            triangles=self.triangles,
            tri_side=self.tri_side,
            tri_t=self.tri_t,
        )
        hdr = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MESH_MAGIC)
            fh.write(struct.pack("<I", MESH_FORMAT_VERSION))
            fh.write(struct.pack("<I", len(hdr)))
            fh.write(hdr)
            fh.write(blob.getvalue())

    @staticmethod
    def check_cache(path, expect_hash=None):
        with open(path, "rb") as fh:
            magic = fh.read(len(MESH_MAGIC))
            if magic != MESH_MAGIC:
                raise MeshError("not a mesh cache file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != MESH_FORMAT_VERSION:
                raise MeshError(
                    "mesh cache version %d != %d" % (version, MESH_FORMAT_VERSION)
                )
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            if expect_hash is not None and header["provenance"] != expect_hash:
                raise MeshError("mesh cache provenance mismatch")
            return header


def build_mesh(group, target_h, order=2, quad_n=5, d_cut=None):
    """Dirichlet domain + triangulation for a surface group."""
    dom = DirichletDomain(group, d_cut=d_cut)
    return FundamentalDomainMesh(dom, target_h, order=order, quad_n=quad_n)
