"""Mobius transformations and hyperbolic geometry primitives in the Poincare disk.

All group elements are 2x2 complex matrices of determinant 1, considered modulo
global sign.  Disk isometries have the SU(1,1) shape [[a,b],[conj(b),conj(a)]]
and act by z -> (a z + b)/(conj(b) z + conj(a)).
"""

import numpy as np

DET_TOL = 1e-12


def normalize_det(m):
    """Rescale a 2x2 matrix so det = 1 (branch fixed by principal sqrt)."""
    m = np.asarray(m, dtype=complex)
    d = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(d) < 1e-30:
        raise ValueError("singular matrix has no PSL(2) normalization")
    return m / np.sqrt(d)


def apply(m, z):
    """Apply the Mobius map of matrix m to points z (scalar or array)."""
    z = np.asarray(z, dtype=complex)
    return (m[0, 0] * z + m[0, 1]) / (m[1, 0] * z + m[1, 1])


def deriv(m, z):
    """Derivative of the Mobius map at z: 1/(cz+d)^2 for det-1 matrices."""
    z = np.asarray(z, dtype=complex)
    return 1.0 / (m[1, 0] * z + m[1, 1]) ** 2


def dist(z, w):
    """Hyperbolic distance in the Poincare disk (curvature -1)."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    t = np.abs(z - w) / np.abs(1.0 - np.conj(z) * w)
    t = np.clip(t, 0.0, 1.0 - 1e-16)
    return 2.0 * np.arctanh(t)


def conformal_factor(z):
    """lambda with reference metric lambda |dz|^2 = 4|dz|^2/(1-|z|^2)^2."""
    z = np.asarray(z, dtype=complex)
    return 4.0 / (1.0 - np.abs(z) ** 2) ** 2


def grad_log_sqrt_factor(z):
    """Gradient (d/dx, d/dy) of v = (1/2) log lambda for the disk metric."""
    z = np.asarray(z, dtype=complex)
    s = 1.0 - np.abs(z) ** 2
    return 2.0 * z.real / s, 2.0 * z.imag / s


def translation_to_origin(w):
    """Disk isometry sending w to 0, identity rotation at w."""
    w = complex(w)
    s = 1.0 / np.sqrt(1.0 - abs(w) ** 2)
    return np.array([[s, -s * w], [-s * np.conj(w), s]], dtype=complex)


def rotation(theta):
    """Rotation about the origin by angle theta."""
    h = 0.5 * theta
    return np.array([[np.exp(1j * h), 0.0], [0.0, np.exp(-1j * h)]], dtype=complex)


def isometry_two_points(p1, p2, q1, q2, tol=1e-9):
    """Unique orientation-preserving disk isometry with p1->q1, p2->q2.

    Requires d(p1,p2) = d(q1,q2) up to tol.
    """
    if abs(dist(p1, p2) - dist(q1, q2)) > tol:
        raise ValueError("point pairs are not isometric")
    tp = translation_to_origin(p1)
    tq = translation_to_origin(q1)
    a1 = np.angle(apply(tp, p2))
    a2 = np.angle(apply(tq, q2))
    m = np.linalg.inv(tq) @ rotation(a2 - a1) @ tp
    return normalize_det(m)


def geodesic_point(p, q, frac):
    """Point at hyperbolic arc-length fraction frac along the geodesic p->q."""
    t = translation_to_origin(p)
    u = apply(t, q)
    r = abs(u)
    if r < 1e-300:
        return p
    d = 2.0 * np.arctanh(min(r, 1.0 - 1e-16))
    rr = np.tanh(0.5 * frac * d)
    return complex(apply(np.linalg.inv(t), rr * u / r))


def geodesic_midpoint(p, q):
    return geodesic_point(p, q, 0.5)


def geodesic_point_and_velocity(p, q, frac):
    """Point and d(point)/d(frac) along the geodesic p->q (arc-length fraction)."""
    p = complex(p)
    t = translation_to_origin(p)
    u = complex(apply(t, q))
    r = abs(u)
    if r < 1e-300:
        return p, 0.0j
    half = np.arctanh(min(r, 1.0 - 1e-16))
    rr = np.tanh(frac * half)
    zeta = rr * u / r
    denom = np.conj(p) * zeta + 1.0
    point = (zeta + p) / denom
    dz_dzeta = (1.0 - abs(p) ** 2) / denom ** 2
    dzeta = (u / r) * half / np.cosh(frac * half) ** 2
    return complex(point), complex(dz_dzeta * dzeta)


def trace(m):
    return m[0, 0] + m[1, 1]


def sl2_error(m):
    """Distance to +-identity in Frobenius norm (sign-lift insensitive)."""
    eye = np.eye(2)
    return min(np.linalg.norm(m - eye), np.linalg.norm(m + eye))


def matrix_word(mats, word):
    """Product of generator matrices for a word like [(0,+1),(3,-1),...].

    Each letter is (generator index, exponent +-1).
    """
    m = np.eye(2, dtype=complex)
    for idx, e in word:
        g = mats[idx]
        m = m @ (g if e > 0 else np.linalg.inv(g))
    return m


def invert_word(word):
    return [(i, -e) for i, e in reversed(word)]


# --- upper half-plane <-> disk (used by the Fenchel-Nielsen construction) ---

_CAYLEY = normalize_det(np.array([[1.0, -1.0j], [1.0, 1.0j]], dtype=complex))
_CAYLEY_INV = np.linalg.inv(_CAYLEY)


def uhp_to_disk(m):
    """Conjugate an SL(2,R) matrix acting on the half-plane to the disk model."""
    return normalize_det(_CAYLEY @ m @ _CAYLEY_INV)


def fixed_points(m):
    """Fixed points of the Mobius map on CP^1 (returns array of 1 or 2)."""
    a, b = m[0, 0], m[0, 1]
    c, d = m[1, 0], m[1, 1]
    if abs(c) < 1e-14:
        return np.array([b / (d - a)]) if abs(d - a) > 1e-14 else np.array([])
    disc = np.sqrt((a - d) ** 2 + 4 * b * c)
    return np.array([(a - d + disc) / (2 * c), (a - d - disc) / (2 * c)])
