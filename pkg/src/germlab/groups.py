"""Marked genus-2 Fuchsian groups in the Poincare disk.

Two constructions are provided:

* the regular octagon group (vertex angle pi/4, commutator side pairing
  a1 b1 a1' b1' a2 b2 a2' b2'), and
* a Fenchel-Nielsen chart: a "dumbbell" pants decomposition with two
  one-holed tori joined along a separating curve.  Coordinates are
  (l1, l2, l3, t1, t2, t3): l1/l3 the handle curve lengths, l2 the
  separating curve length, twists measured in hyperbolic length.

Both return generators (A1, B1, A2, B2) satisfying the surface relator
[A1,B1][A2,B2] = +-Id to machine precision.
"""

import numpy as np

from . import mobius

RELATOR_TOL = 1e-10

# letters of the genus-2 relator as (generator index, exponent)
RELATOR_WORD = [(0, 1), (1, 1), (0, -1), (1, -1), (2, 1), (3, 1), (2, -1), (3, -1)]

GENERATOR_NAMES = ("a1", "b1", "a2", "b2")


class SurfaceGroup:
    """Marked Fuchsian group: generators, relator residual, word machinery."""

    def __init__(self, generators, provenance, params=None):
        if len(generators) != 4:
            raise ValueError("genus-2 marking needs 4 generators")
        self.genus = 2
        self.generators = [mobius.normalize_det(g) for g in generators]
        self.marking = GENERATOR_NAMES
        self.provenance = provenance
        self.params = params
        self.relator_residual = mobius.sl2_error(self.word_matrix(RELATOR_WORD))
        if self.relator_residual > RELATOR_TOL:
            raise ValueError(
                "relator residual %.3e exceeds %.1e; invalid construction data"
                % (self.relator_residual, RELATOR_TOL)
            )
        # 8 signed generators, index 2*i for g_i, 2*i+1 for its inverse
        self.signed_gens = []
        for g in self.generators:
            self.signed_gens.append(g)
            self.signed_gens.append(np.linalg.inv(g))

    def word_matrix(self, word):
        return mobius.matrix_word(self.generators, word)

    def gen(self, idx, exponent):
        return self.signed_gens[2 * idx + (0 if exponent > 0 else 1)]


def _octagon_vertices():
    # vertex angle pi/4 regular octagon: cosh(R) = cot^2(pi/8)
    r_h = np.arccosh(1.0 / np.tan(np.pi / 8) ** 2)
    r_e = np.tanh(0.5 * r_h)
    ang = -np.pi / 8 + np.arange(8) * np.pi / 4
    return r_e * np.exp(1j * ang)


# side k runs from vertex k to vertex k+1 (counterclockwise); the letters of
# the boundary word a1 b1 a1' b1' a2 b2 a2' b2' sit on sides 0..7.
_SIDE_LETTERS = [(0, 1), (1, 1), (0, -1), (1, -1), (2, 1), (3, 1), (2, -1), (3, -1)]


def build_octagon_group():
    """Regular-octagon genus-2 group with commutator marking.

    The raw side pairings (p1, q1, p2, q2) of the pattern on sides
    (0,2), (1,3), (4,6), (5,7) satisfy p1 q1 p1' q2' p2 q2 p2' q1' = 1,
    which rearranges to [p1, q1'][p2, q2'] = 1; the marked generators are
    therefore (p1, q1', p2, q2').
    """
    v = _octagon_vertices()
    carrier = {}
    for k, (idx, e) in enumerate(_SIDE_LETTERS):
        carrier[(idx, e)] = k
    pair_maps = []
    for idx in range(4):
        i = carrier[(idx, 1)]
        j = carrier[(idx, -1)]
        # pairing maps the side carrying the inverse letter onto the side
        # carrying the letter, reversing the boundary traversal
        g = mobius.isometry_two_points(
            v[j], v[(j + 1) % 8], v[(i + 1) % 8], v[i]
        )
        pair_maps.append(g)
    gens = [
        pair_maps[0],
        np.linalg.inv(pair_maps[1]),
        pair_maps[2],
        np.linalg.inv(pair_maps[3]),
    ]
    return SurfaceGroup(gens, "octagon")


def _sl2r_eig_frame(m, tol=1e-9):
    """S with det 1 and m = S diag(lam, 1/lam) S^{-1}, |lam| > 1, S real.

    Closed-form eigenvectors; column signs fixed deterministically.
    """
    m = np.real(m)
    a, b = m[0, 0], m[0, 1]
    c, d = m[1, 0], m[1, 1]
    t = a + d
    if abs(t) < 2.0 + tol:
        raise ValueError("element is not hyperbolic")
    disc = np.sqrt(t * t - 4.0)
    lam1 = 0.5 * (t + np.sign(t) * disc)
    lam2 = 1.0 / lam1
    cols = []
    for lam in (lam1, lam2):
        v1 = np.array([b, lam - a])
        v2 = np.array([lam - d, c])
        v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
        v = v / np.linalg.norm(v)
        pick = np.argmax(np.abs(v))
        if v[pick] < 0:
            v = -v
        cols.append(v)
    s = np.column_stack(cols)
    det = np.linalg.det(s)
    if det < 0:
        s[:, 1] = -s[:, 1]
        det = -det
    if abs(det) < 1e-14:
        raise ValueError("degenerate eigenframe")
    return s / np.sqrt(det), lam1


def _axis_translation(frame, length):
    """Translation by hyperbolic `length` along the axis with eigenframe S."""
    d = np.diag([np.exp(0.5 * length), np.exp(-0.5 * length)])
    return frame @ d @ np.linalg.inv(frame)


def _handle(l_inner, twist, l_boundary):
    """One-holed torus generators (A, B) in SL(2,R).

    A is the inner pants curve (translation length l_inner along the
    imaginary axis), tr[A,B] = -2 cosh(l_boundary/2), twist measured as
    hyperbolic length along the axis of A.
    """
    if l_inner <= 0 or l_boundary <= 0:
        raise ValueError("Fenchel-Nielsen lengths must be positive")
    a = np.diag([np.exp(0.5 * l_inner), np.exp(-0.5 * l_inner)])
    bc = (1.0 + np.cosh(0.5 * l_boundary)) / (2.0 * np.sinh(0.5 * l_inner) ** 2)
    b = np.sqrt(bc)
    diag = np.sqrt(1.0 + bc)
    b0 = np.array([[diag, b], [b, diag]])
    tw = np.diag([np.exp(0.5 * twist), np.exp(-0.5 * twist)])
    return a, tw @ b0


def _commutator(a, b):
    return a @ b @ np.linalg.inv(a) @ np.linalg.inv(b)


def build_fn_group(coords):
    """Genus-2 group from Fenchel-Nielsen coordinates (l1,l2,l3,t1,t2,t3)."""
    coords = [float(c) for c in coords]
    if len(coords) != 6:
        raise ValueError("expected 6 Fenchel-Nielsen coordinates")
    l1, l2, l3, t1, t2, t3 = coords
    if min(l1, l2, l3) <= 0:
        raise ValueError("Fenchel-Nielsen lengths must be positive")
    a1, b1 = _handle(l1, t1, l2)
    a2, b2 = _handle(l3, t3, l2)
    c1 = _commutator(a1, b1)
    c2 = _commutator(a2, b2)
    target = np.linalg.inv(c1)
    s_target, _ = _sl2r_eig_frame(target)
    s_c2, _ = _sl2r_eig_frame(c2)
    w0 = s_target @ np.linalg.inv(s_c2)
    w = _axis_translation(s_target, t2) @ w0
    # polish: products of large-entry matrices amplify rounding, so refine
    # the conjugator until the relator is at machine accuracy
    for _ in range(4):
        c2w = w @ c2 @ np.linalg.inv(w)
        if np.linalg.norm(c2w - target) < 1e-14 * np.linalg.norm(target):
            break
        s_c2w, _ = _sl2r_eig_frame(c2w)
        w = s_target @ np.linalg.inv(s_c2w) @ w
        w = w / np.sqrt(np.linalg.det(w))
    a2 = w @ a2 @ np.linalg.inv(w)
    b2 = w @ b2 @ np.linalg.inv(w)
    gens_uhp = [a1, b1, a2, b2]
    # recenter on the separating axis so both handles are near the basepoint,
    # then a small generic shift to keep the Dirichlet center off axes and
    # symmetry loci
    recenter = np.linalg.inv(s_target)
    shift = np.array([[1.0, 0.137], [0.02, 1.0]])
    shift = np.linalg.inv(shift / np.sqrt(np.linalg.det(shift)))
    conj = shift @ recenter
    gens = [mobius.uhp_to_disk(conj @ g @ np.linalg.inv(conj)) for g in gens_uhp]
    return SurfaceGroup(gens, "fenchel-nielsen", params=tuple(coords))


def build_group(spec, coords=None):
    """Entry point: spec is 'octagon' or 'fenchel-nielsen' (with 6 coords)."""
    if spec == "octagon":
        return build_octagon_group()
    if spec == "fenchel-nielsen":
        return build_fn_group(coords)
    raise ValueError("unknown group spec %r" % (spec,))
