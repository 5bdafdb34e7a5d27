"""Shooting-and-bouncing-rays tracer, generic over the interaction model.

An interaction model is any callable taking an :class:`InteractionBatch` and
returning ``(beta, gamma, field_out)``: outgoing angles, complex interaction
coefficients, and optionally the updated polarization vectors (``None`` lets
the tracer transport the field geometrically).  Models exposing
``specular = True`` can have their received paths snapped onto exact
image-method geometry with ``refine=True``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EPS_MIN, InteractionGeom, RayState, RayStatus, RxConfig, TxConfig, fibonacci_directions,
    intersect_batch, ray_count, reflect_directions,
)
from .physics import offset_angle, path_length, polarization_frames, psi_from_components
from .scene import Environment

log = logging.getLogger(__name__)

_RX_CHUNK = 1 << 20
BARY_TOL = 1e-9
SBR_CAPTURE_FACTOR = 1.0 / math.sqrt(3.0)
# Smallest round factor whose sphere covers the spherical Fibonacci lattice
# (measured covering radius is about 0.75 of the angular spacing).
COVERING_CAPTURE_FACTOR = 0.8


@dataclass(frozen=True)
class TraceLimits:
    max_interactions: int = 3
    power_floor_db: float = -40.0
    include_los: bool = True


@dataclass
class InteractionBatch:
    """Per-interaction arrays handed to an interaction model."""

    alpha: np.ndarray
    psi: np.ndarray
    gamma_offset: np.ndarray
    class_id: np.ndarray
    surface_index: np.ndarray
    normal: np.ndarray  # oriented toward the incoming side
    point: np.ndarray
    d_in: np.ndarray
    cum_gamma: np.ndarray
    e_perp: np.ndarray
    e_par_in: np.ndarray
    e_par_out: np.ndarray
    c_perp: np.ndarray  # complex field component along e_perp
    c_par: np.ndarray  # complex field component along e_par_in

    def __len__(self):
        return len(self.alpha)

    def geom(self, i: int, env: Environment) -> InteractionGeom:
        return InteractionGeom(alpha=float(self.alpha[i]), psi=float(self.psi[i]),
                               gamma_offset=float(self.gamma_offset[i]), class_id=int(self.class_id[i]),
                               normal=self.normal[i].copy(), point=self.point[i].copy(),
                               surface_id=int(env.surface_ids[self.surface_index[i]]))


def make_batch(env: Environment, d_in, points, surface_index, fields, cum_gamma) -> InteractionBatch:
    normals = env.normals[surface_index]
    dn = np.einsum("ij,ij->i", d_in, normals)
    normals = np.where((dn > 0)[:, None], -normals, normals)
    alpha = np.arccos(np.minimum(1.0, np.abs(dn)))
    e_perp, e_par_in, e_par_out, degenerate = polarization_frames(normals, d_in)
    c_perp = np.einsum("ij,ij->i", fields, e_perp)
    c_par = np.einsum("ij,ij->i", fields, e_par_in)
    return InteractionBatch(
        alpha=alpha, psi=psi_from_components(c_perp, c_par, degenerate),
        gamma_offset=offset_angle(normals, d_in), class_id=env.surface_class[surface_index],
        surface_index=surface_index, normal=normals, point=points, d_in=d_in, cum_gamma=cum_gamma,
        e_perp=e_perp, e_par_in=e_par_in, e_par_out=e_par_out, c_perp=c_perp, c_par=c_par,
    )


def transport_field(batch: InteractionBatch, field_out) -> np.ndarray:
    if field_out is None:
        field_out = batch.c_perp[:, None] * batch.e_perp + batch.c_par[:, None] * batch.e_par_out
    norm = np.sqrt(np.sum(np.abs(field_out) ** 2, axis=1))
    return field_out / np.where(norm > 0, norm, 1.0)[:, None]


def initial_fields(e_dirs: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Launch polarization: antenna E-direction projected orthogonal to each ray."""
    proj = e_dirs - np.einsum("ij,ij->i", e_dirs, directions)[:, None] * directions
    norm = np.linalg.norm(proj, axis=1)
    bad = norm < 1e-12
    if np.any(bad):
        d = directions[bad]
        helper = np.where((np.abs(d[:, 0]) < 0.9)[:, None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        alt = np.cross(d, helper)
        proj = proj.copy()
        proj[bad] = alt
        norm = norm.copy()
        norm[bad] = np.linalg.norm(alt, axis=1)
    return (proj / norm[:, None]).astype(complex)


@dataclass
class TracedPath:
    """A received path: interaction geometry plus accumulated coefficient."""

    tx_index: int
    rx_index: int
    ray_index: int
    points: np.ndarray  # (k, 3)
    surfaces: tuple  # surface ids
    surface_index: np.ndarray  # (k,) indices into env arrays
    planes: tuple
    cum_gamma: complex
    interactions: list = field(default_factory=list)
    capture_distance: float = 0.0
    length: float = 0.0

    @property
    def k(self) -> int:
        return len(self.points)

    def state(self, tx: TxConfig, rx: RxConfig) -> RayState:
        last = self.points[-1] if self.k else tx.position
        d = rx.position - last
        return RayState(origin=tx.position, direction=d / np.linalg.norm(d), points=tuple(self.points),
                        cum_gamma=self.cum_gamma, cum_distance=self.length, status=RayStatus.RECEIVED,
                        surfaces=self.surfaces)


def _reception(origins, dirs, seg_len, cum_dist, rx_pos, rx_radius, spacing, min_t, factor=SBR_CAPTURE_FACTOR):
    """Return (ray_rows, rx_cols, perp_distance) for rays whose segment passes an Rx sphere."""
    n, r = len(origins), len(rx_pos)
    rows_all, cols_all, perp_all = [], [], []
    if n == 0 or r == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    step = max(1, _RX_CHUNK // r)
    adaptive = np.isnan(rx_radius)
    k_adapt = spacing * factor
    for s in range(0, n, step):
        sl = slice(s, min(n, s + step))
        o = origins[sl]
        d = dirs[sl]
        rel = rx_pos[None, :, :] - o[:, None, :]
        t = np.einsum("nrj,nj->nr", rel, d)
        perp2 = np.einsum("nrj,nrj->nr", rel, rel) - t * t
        perp = np.sqrt(np.maximum(perp2, 0.0))
        radius = np.where(adaptive[None, :], (cum_dist[sl, None] + t) * k_adapt, rx_radius[None, :])
        ok = (t > min_t) & (t < seg_len[sl, None]) & (perp <= radius)
        rr, cc = np.nonzero(ok)
        rows_all.append(rr + s)
        cols_all.append(cc)
        perp_all.append(perp[rr, cc])
    return np.concatenate(rows_all), np.concatenate(cols_all), np.concatenate(perp_all)


def trace_multi(env: Environment, txs, rxs, interaction_model, limits: TraceLimits = TraceLimits(),
                angular_spacing: float = math.radians(0.4), refine: bool = False,
                capture_factor: float = SBR_CAPTURE_FACTOR) -> dict:
    """Trace all transmitters in one batch.

    Adaptive reception spheres have radius
    ``(cum_distance + t) * angular_spacing * capture_factor``.

    Returns ``{(tx_index, rx_index): [TracedPath, ...]}`` with an entry for
    every pair (possibly empty).  Paths within a pair are ordered by
    interaction count, then plane sequence.
    """
    txs, rxs = list(txs), list(rxs)
    n_dir = ray_count(angular_spacing)
    base = fibonacci_directions(n_dir)
    n_tx = len(txs)
    dirs = np.tile(base, (n_tx, 1))
    tx_of = np.repeat(np.arange(n_tx), n_dir)
    origins = np.array([t.position for t in txs], dtype=float)[tx_of] if n_tx else np.zeros((0, 3))
    e_dirs = np.array([t.e_field_dir for t in txs], dtype=float)[tx_of] if n_tx else np.zeros((0, 3))
    n = len(dirs)
    kmax = max(0, int(limits.max_interactions))

    fields = initial_fields(e_dirs, dirs) if n else np.zeros((0, 3), complex)
    cum_gamma = np.ones(n, dtype=complex)
    cum_dist = np.zeros(n)
    last_surf = np.full(n, -1, dtype=np.int64)
    hist_pts = np.zeros((n, max(kmax, 1), 3))
    hist_surf = np.full((n, max(kmax, 1)), -1, dtype=np.int64)
    hist_geo = np.zeros((n, max(kmax, 1), 3))  # alpha, psi, gamma_offset
    hist_cum = np.ones((n, kmax + 1), dtype=complex)  # coefficient product after each level
    alive = np.arange(n)

    rx_pos = np.array([r.position for r in rxs], dtype=float).reshape(-1, 3)
    rx_radius = np.array([np.nan if r.capture_radius is None else r.capture_radius for r in rxs], dtype=float)
    floor_lin = 10.0 ** (limits.power_floor_db / 20.0)
    captures = []  # (ray, rx, k, perp)

    for k in range(kmax + 1):
        if len(alive) == 0:
            break
        o = origins[alive] if k == 0 else hist_pts[alive, k - 1]
        d = dirs[alive]
        hits = intersect_batch(o, d, env, last_surf[alive])
        if k > 0 or limits.include_los:
            rows, cols, perp = _reception(o, d, hits.distance, cum_dist[alive], rx_pos, rx_radius,
                                          angular_spacing, 0.0 if k == 0 else EPS_MIN, capture_factor)
            if len(rows):
                captures.append(np.stack([alive[rows], cols, np.full(len(rows), k), perp], axis=1))
        if k == kmax:
            break
        hit = hits.hit
        alive = alive[hit]
        if len(alive) == 0:
            break
        sidx = hits.index[hit]
        pts = hits.point[hit]
        d_in = d[hit]
        batch = make_batch(env, d_in, pts, sidx, fields[alive], cum_gamma[alive])
        beta, gamma, field_out = interaction_model(batch)
        dirs[alive] = reflect_directions(d_in, batch.normal, np.asarray(beta, float))
        fields[alive] = transport_field(batch, field_out)
        cum_gamma[alive] = cum_gamma[alive] * np.asarray(gamma, complex)
        cum_dist[alive] += hits.distance[hit]
        last_surf[alive] = sidx
        hist_pts[alive, k] = pts
        hist_surf[alive, k] = sidx
        hist_geo[alive, k] = np.stack([batch.alpha, batch.psi, batch.gamma_offset], axis=1)
        hist_cum[alive, k + 1] = cum_gamma[alive]
        alive = alive[np.abs(cum_gamma[alive]) >= floor_lin]

    result = {(i, j): [] for i in range(n_tx) for j in range(len(rxs))}
    if not captures:
        return result
    cap = np.concatenate(captures)
    best: dict[tuple, tuple] = {}
    for ray_f, rx_f, k_f, perp in cap:
        ray, rx, k = int(ray_f), int(rx_f), int(k_f)
        planes = tuple(int(p) for p in env.plane_ids[hist_surf[ray, :k]])
        key = (int(tx_of[ray]), rx, planes)
        cand = (perp, ray, k)
        if key not in best or cand < best[key]:
            best[key] = cand
    for (ti, rj, planes), (perp, ray, k) in sorted(best.items(), key=lambda kv: (kv[0][0], kv[0][1], len(kv[0][2]), kv[0][2])):
        sidx = hist_surf[ray, :k].copy()
        path = TracedPath(tx_index=ti, rx_index=rj, ray_index=ray, points=hist_pts[ray, :k].copy(),
                          surfaces=tuple(int(s) for s in env.surface_ids[sidx]), surface_index=sidx,
                          planes=planes, cum_gamma=complex(hist_cum[ray, k]),
                          capture_distance=float(perp))
        path.interactions = [InteractionGeom(alpha=float(hist_geo[ray, i, 0]), psi=float(hist_geo[ray, i, 1]),
                                             gamma_offset=float(hist_geo[ray, i, 2]),
                                             class_id=int(env.surface_class[sidx[i]]),
                                             normal=env.normals[sidx[i]].copy(), point=hist_pts[ray, i].copy(),
                                             surface_id=int(env.surface_ids[sidx[i]]))
                             for i in range(k)]
        path.length = path_length(txs[ti].position, path.points, rxs[rj].position)
        result[(ti, rj)].append(path)

    if refine and getattr(interaction_model, "specular", False):
        _refine_specular(env, txs, rxs, result, interaction_model)
    return result


def trace_paths(env: Environment, tx: TxConfig, rxs, interaction_model, limits: TraceLimits = TraceLimits(),
                angular_spacing: float = math.radians(0.4), refine: bool = False,
                capture_factor: float = SBR_CAPTURE_FACTOR) -> list[list[TracedPath]]:
    """Received paths for one transmitter, one list per receiver."""
    res = trace_multi(env, [tx], rxs, interaction_model, limits, angular_spacing, refine, capture_factor)
    return [res[(0, j)] for j in range(len(list(rxs)))]


# ----------------------------------------------------------------------------- fixed-path evaluation


def walk_paths(env: Environment, txs, paths, interaction_model):
    """Re-evaluate an interaction model along fixed path geometry.

    Returns ``(cum_gamma, interactions, per_level)`` where ``per_level[i]``
    holds the complex coefficients of path ``i``.  Outgoing directions from
    the model are ignored: the geometry is taken as given.
    """
    m = len(paths)
    cum = np.ones(m, dtype=complex)
    geoms = [[] for _ in range(m)]
    coeffs = [[] for _ in range(m)]
    if m == 0:
        return cum, geoms, coeffs
    kmax = max(p.k for p in paths)
    tx_pos = np.array([txs[p.tx_index].position for p in paths])
    prev = tx_pos.copy()
    e_dirs = np.array([txs[p.tx_index].e_field_dir for p in paths])
    first = np.array([p.points[0] - tx_pos[i] if p.k else np.array([1.0, 0.0, 0.0]) for i, p in enumerate(paths)])
    first /= np.linalg.norm(first, axis=1, keepdims=True)
    fields = initial_fields(e_dirs, first)
    for level in range(kmax):
        rows = np.array([i for i, p in enumerate(paths) if p.k > level], dtype=np.int64)
        pts = np.array([paths[i].points[level] for i in rows])
        sidx = np.array([paths[i].surface_index[level] for i in rows], dtype=np.int64)
        d_in = pts - prev[rows]
        d_in /= np.linalg.norm(d_in, axis=1, keepdims=True)
        batch = make_batch(env, d_in, pts, sidx, fields[rows], cum[rows])
        _, gamma, field_out = interaction_model(batch)
        gamma = np.asarray(gamma, complex)
        fields[rows] = transport_field(batch, field_out)
        cum[rows] *= gamma
        prev[rows] = pts
        for j, i in enumerate(rows):
            geoms[i].append(batch.geom(j, env))
            coeffs[i].append(complex(gamma[j]))
    return cum, geoms, coeffs


def _rewalk(env, txs, paths, model):
    cum, geoms, _ = walk_paths(env, txs, paths, model)
    for p, c, g in zip(paths, cum, geoms):
        p.cum_gamma = complex(c)
        p.interactions = g


def image_points(tx_pos, rx_pos, plane_normals, plane_offsets):
    """Exact specular reflection points for a plane sequence, or ``None`` if the path does not exist."""
    images = [np.asarray(tx_pos, float)]
    for n, off in zip(plane_normals, plane_offsets):
        p = images[-1]
        images.append(p - 2.0 * (float(n @ p) - off) * n)
    q = np.asarray(rx_pos, float)
    pts = []
    for i in range(len(plane_normals), 0, -1):
        n, off = plane_normals[i - 1], plane_offsets[i - 1]
        seg = images[i] - q
        denom = float(n @ seg)
        if abs(denom) < 1e-15:
            return None
        t = (off - float(n @ q)) / denom
        if not (0.0 < t < 1.0):
            return None
        q = q + t * seg
        pts.append(q)
    return np.array(pts[::-1]).reshape(-1, 3)


def _inside_plane_group(env: Environment, point, plane_id) -> int:
    """Index of a triangle in ``plane_id`` containing ``point`` (-1 if none)."""
    for j in np.nonzero(env.plane_ids == plane_id)[0]:
        e1, e2 = env.edge1[j], env.edge2[j]
        w = point - env.v0[j]
        d00, d01, d11 = e1 @ e1, e1 @ e2, e2 @ e2
        d20, d21 = w @ e1, w @ e2
        den = d00 * d11 - d01 * d01
        b1 = (d11 * d20 - d01 * d21) / den
        b2 = (d00 * d21 - d01 * d20) / den
        if b1 >= -BARY_TOL and b2 >= -BARY_TOL and b1 + b2 <= 1.0 + BARY_TOL:
            return int(j)
    return -1


def _segment_clear(env, a, b, exclude) -> bool:
    seg = b - a
    length = float(np.linalg.norm(seg))
    if length <= EPS_MIN:
        return True
    h = intersect_batch(a[None], (seg / length)[None], env, np.array([exclude]))
    return not (h.hit[0] and h.distance[0] < length - 1e-6)


def _refine_specular(env, txs, rxs, result, model):
    kept = []
    for key, paths in result.items():
        ti, rj = key
        tx_pos, rx_pos = txs[ti].position, rxs[rj].position
        good = []
        for p in paths:
            if p.k:
                normals = [env.normals[s] for s in p.surface_index]
                offsets = [float(env.normals[s] @ env.v0[s]) for s in p.surface_index]
                pts = image_points(tx_pos, rx_pos, normals, offsets)
                if pts is None:
                    continue
                sidx = [_inside_plane_group(env, q, env.plane_ids[s]) for q, s in zip(pts, p.surface_index)]
                if min(sidx) < 0:
                    continue
                p.points = pts
                p.surface_index = np.array(sidx, dtype=np.int64)
                p.surfaces = tuple(int(env.surface_ids[s]) for s in sidx)
            chain = [tx_pos] + list(p.points) + [rx_pos]
            excl = [-1] + list(p.surface_index)
            if not all(_segment_clear(env, chain[i], chain[i + 1], excl[i]) for i in range(len(chain) - 1)):
                continue
            p.length = path_length(tx_pos, p.points, rx_pos)
            good.append(p)
        result[key] = good
        kept.extend(good)
    _rewalk(env, txs, kept, model)
