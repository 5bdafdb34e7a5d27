"""Independent reference computations used by the tests (no genert imports)."""

import itertools
import math

import numpy as np

C = 299_792_458.0
EPS_MIN = 1e-6


def plane_bary_hit(o, d, tri):
    """Ray/triangle test via plane intersection and a barycentric solve.

    Returns ``(t, u, v)`` for a hit beyond EPS_MIN or ``None``.  ``u, v``
    weight vertices 1 and 2, matching the usual (1-u-v, u, v) split.
    """
    a, b, c = (np.asarray(p, float) for p in tri)
    n = np.cross(b - a, c - a)
    denom = float(n @ d)
    if denom == 0.0:
        return None
    t = float(n @ (a - o)) / denom
    if not t > EPS_MIN:
        return None
    p = o + t * d
    # least-squares barycentrics in the triangle plane
    m = np.stack([b - a, c - a], axis=1)
    uv, *_ = np.linalg.lstsq(m, p - a, rcond=None)
    u, v = float(uv[0]), float(uv[1])
    return t, u, v


def edge_margin(u, v):
    return min(u, v, 1.0 - u - v)


def image_reflection(tx, rx, normal, offset):
    """Specular point on plane ``normal . x = offset`` and the unfolded length."""
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    img = tx - 2.0 * (float(n @ tx) - offset) * n
    seg = rx - img
    s = (offset - float(n @ img)) / float(n @ seg)
    return img + s * seg, float(np.linalg.norm(seg))


def brute_force_assignment(cost):
    """Minimum total cost over all partial bijections of size min(n, m)."""
    cost = np.asarray(cost, float)
    n, m = cost.shape
    best = math.inf
    best_pairs = []
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            c = sum(cost[i, j] for i, j in enumerate(cols))
            if c < best:
                best, best_pairs = c, list(enumerate(cols))
    else:
        for rows in itertools.permutations(range(n), m):
            c = sum(cost[i, j] for j, i in enumerate(rows))
            if c < best:
                best, best_pairs = c, [(i, j) for j, i in enumerate(rows)]
    return (0.0 if not best_pairs else best), sorted(best_pairs)


def fresnel_reference(eps_r, sigma, f, alpha):
    """Textbook Fresnel amplitudes |r_s|, |r_p| written with refraction angles."""
    eps = complex(eps_r, -sigma / (2 * math.pi * f * 8.8541878128e-12))
    n2 = np.sqrt(eps)
    ci = math.cos(alpha)
    st = math.sin(alpha) / n2
    ct = np.sqrt(1 - st * st)
    rs = (ci - n2 * ct) / (ci + n2 * ct)
    rp = (n2 * ci - ct) / (n2 * ci + ct)
    return abs(rs), abs(rp)


def plane_bary_hits(o, d, tri):
    """Vectorized :func:`plane_bary_hit` for many rays against one triangle.

    Returns ``(t, u, v)`` arrays; ``t`` is ``nan`` where the ray is parallel
    to the plane or the plane lies behind EPS_MIN.
    """
    a, b, c = (np.asarray(p, float) for p in tri)
    e1, e2 = b - a, c - a
    n = np.cross(e1, e2)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((a - o) @ n) / denom
    t = np.where((denom != 0.0) & (t > EPS_MIN), t, np.nan)
    w = o + t[:, None] * d - a
    # normal equations of the in-plane barycentric fit
    g = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    rhs = np.stack([w @ e1, w @ e2], axis=1)
    uv = np.linalg.solve(g, rhs.T).T
    return t, uv[:, 0], uv[:, 1]
