"""Deterministic ray geometry: launching, ray/triangle intersection and specular frames.

The scalar and batched intersection routines share one Möller–Trumbore kernel
written with explicit component arithmetic, so both produce bit-identical
distances for the same ray.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateTangent, InvalidConfig, InvalidSpacing, LengthMismatch, StateNotAlive
from .scene import Environment

EPS_MIN = 1e-6  # self-intersection guard, meters
DET_REL_EPS = 1e-14
TANGENT_EPS = 1e-12
SPEED_OF_LIGHT = 299_792_458.0

# Upper bound on rays x triangles evaluated per chunk in the batched kernel.
_CHUNK_ELEMS = 1 << 21


def _unit(v, what="vector") -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n == 0.0:
        raise InvalidConfig(f"{what} must be a finite non-zero vector")
    return v / n


@dataclass(frozen=True)
class TxConfig:
    position: np.ndarray
    e_field_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    gain_dbi: float = 0.0
    power_dbm: float = 0.0
    frequency_hz: float = 3.5e9

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "e_field_dir", _unit(self.e_field_dir, "e_field_dir"))
        if not self.frequency_hz > 0:
            raise InvalidConfig("frequency must be positive")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency_hz


@dataclass(frozen=True)
class RxConfig:
    position: np.ndarray
    gain_dbi: float = 0.0
    capture_radius: float | None = None  # None -> adaptive reception sphere

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.capture_radius is not None and not self.capture_radius > 0:
            raise InvalidConfig("fixed capture radius must be positive")


class RayStatus(enum.Enum):
    ALIVE = "alive"
    RECEIVED = "received"
    TERMINATED = "terminated"


@dataclass(frozen=True)
class RayState:
    origin: np.ndarray
    direction: np.ndarray
    points: tuple = ()
    cum_gamma: complex = 1.0 + 0.0j
    cum_distance: float = 0.0
    status: RayStatus = RayStatus.ALIVE
    surfaces: tuple = ()

    @property
    def k(self) -> int:
        return len(self.points)

    @property
    def position(self) -> np.ndarray:
        """Start point of the current segment."""
        return self.points[-1] if self.points else self.origin


@dataclass(frozen=True)
class Hit:
    point: np.ndarray
    surface_id: int
    distance: float
    barycentric: tuple[float, float]


@dataclass(frozen=True)
class InteractionGeom:
    alpha: float
    psi: float
    gamma_offset: float
    class_id: int
    normal: np.ndarray
    point: np.ndarray
    surface_id: int = -1


def ray_count(angular_spacing: float) -> int:
    if not (0.0 < angular_spacing <= math.pi / 2):
        raise InvalidSpacing(f"angular spacing must lie in (0, pi/2], got {angular_spacing}")
    return math.ceil(4.0 * math.pi / angular_spacing**2)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` quasi-uniform unit vectors on the sphere (spherical Fibonacci lattice)."""
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.mod(i * (math.pi * (3.0 - math.sqrt(5.0))), 2.0 * math.pi)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def launch_rays(tx: TxConfig, angular_spacing: float) -> list[RayState]:
    dirs = fibonacci_directions(ray_count(angular_spacing))
    return [RayState(origin=tx.position, direction=d) for d in dirs]


def _mt_kernel(ox, oy, oz, dx, dy, dz, v0, e1, e2, det_eps):
    """Möller–Trumbore over broadcast arrays; returns (t, u, v, valid)."""
    e1x, e1y, e1z = e1
    e2x, e2y, e2z = e2
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    ok = np.abs(det) > det_eps
    inv = 1.0 / np.where(ok, det, 1.0)
    tx_ = ox - v0[0]
    ty_ = oy - v0[1]
    tz_ = oz - v0[2]
    u = (tx_ * px + ty_ * py + tz_ * pz) * inv
    qx = ty_ * e1z - tz_ * e1y
    qy = tz_ * e1x - tx_ * e1z
    qz = tx_ * e1y - ty_ * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    valid = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > EPS_MIN)
    return t, u, v, valid


def _tri_arrays(env: Environment):
    cache = getattr(env, "_mt_cache", None)
    if cache is None:
        v0 = tuple(np.ascontiguousarray(env.v0[:, j]) for j in range(3))
        e1 = tuple(np.ascontiguousarray(env.edge1[:, j]) for j in range(3))
        e2 = tuple(np.ascontiguousarray(env.edge2[:, j]) for j in range(3))
        det_eps = DET_REL_EPS * np.linalg.norm(env.edge1, axis=1) * np.linalg.norm(env.edge2, axis=1)
        cache = (v0, e1, e2, det_eps)
        env._mt_cache = cache
    return cache


def intersect_nearest(origin, direction, env: Environment, exclude_surface: int | None = None) -> Hit | None:
    """Nearest triangle hit beyond ``EPS_MIN``; ``exclude_surface`` is a surface id."""
    if not env.surfaces:
        return None
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    v0, e1, e2, det_eps = _tri_arrays(env)
    t, u, v, valid = _mt_kernel(o[0], o[1], o[2], d[0], d[1], d[2], v0, e1, e2, det_eps)
    if exclude_surface is not None and exclude_surface >= 0:
        valid = valid.copy()
        valid[env.surface_index(exclude_surface)] = False
    t = np.where(valid, t, np.inf)
    j = int(np.argmin(t))
    if not np.isfinite(t[j]):
        return None
    dist = float(t[j])
    return Hit(point=o + dist * d, surface_id=int(env.surface_ids[j]), distance=dist,
               barycentric=(float(u[j]), float(v[j])))


@dataclass
class BatchHits:
    """Structure-of-arrays result of :func:`intersect_batch`; ``index`` is -1 on a miss."""

    hit: np.ndarray
    index: np.ndarray
    distance: np.ndarray
    u: np.ndarray
    v: np.ndarray
    point: np.ndarray

    def __len__(self):
        return len(self.hit)

    def to_list(self, env: Environment) -> list[Hit | None]:
        out = []
        for i in range(len(self.hit)):
            if not self.hit[i]:
                out.append(None)
                continue
            out.append(Hit(point=self.point[i].copy(), surface_id=int(env.surface_ids[self.index[i]]),
                           distance=float(self.distance[i]), barycentric=(float(self.u[i]), float(self.v[i]))))
        return out


def intersect_batch(origins, directions, env: Environment, exclude_index=None) -> BatchHits:
    """Nearest hits for many rays at once; element-wise equal to :func:`intersect_nearest`.

    ``exclude_index`` holds surface *indices* (``-1`` for none), one per ray.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = len(origins)
    if len(directions) != n:
        raise LengthMismatch(f"{n} origins vs {len(directions)} directions")
    if exclude_index is not None:
        exclude_index = np.asarray(exclude_index, dtype=np.int64)
        if len(exclude_index) != n:
            raise LengthMismatch("exclude_index length differs from ray count")
    dist = np.full(n, np.inf)
    index = np.full(n, -1, dtype=np.int64)
    us = np.zeros(n)
    vs = np.zeros(n)
    n_tri = len(env.surfaces)
    if n and n_tri:
        v0, e1, e2, det_eps = _tri_arrays(env)
        step = max(1, _CHUNK_ELEMS // n_tri)
        for s in range(0, n, step):
            sl = slice(s, min(n, s + step))
            o = origins[sl]
            d = directions[sl]
            t, u, v, valid = _mt_kernel(o[:, 0:1], o[:, 1:2], o[:, 2:3], d[:, 0:1], d[:, 1:2], d[:, 2:3],
                                        v0, e1, e2, det_eps)
            if exclude_index is not None:
                ex = exclude_index[sl]
                rows = np.nonzero(ex >= 0)[0]
                valid[rows, ex[rows]] = False
            t = np.where(valid, t, np.inf)
            j = np.argmin(t, axis=1)
            rows = np.arange(len(j))
            best = t[rows, j]
            found = np.isfinite(best)
            dist[sl] = best
            index[sl] = np.where(found, j, -1)
            us[sl] = np.where(found, u[rows, j], 0.0)
            vs[sl] = np.where(found, v[rows, j], 0.0)
    hit = index >= 0
    point = np.where(hit[:, None], origins + np.where(hit, dist, 0.0)[:, None] * directions, np.nan)
    return BatchHits(hit=hit, index=index, distance=dist, u=us, v=vs, point=point)


def incidence_angle(d_in, normal) -> float:
    return math.acos(min(1.0, abs(float(np.dot(d_in, normal)))))


def reflect_direction(d_in, normal, beta: float) -> np.ndarray:
    """Outgoing unit direction ``cos(beta) * n + sin(beta) * t``.

    ``n`` is the normal flipped toward the incoming side and ``t`` the
    normalized tangential part of ``d_in``.
    """
    d = np.asarray(d_in, dtype=float)
    n = np.asarray(normal, dtype=float)
    if float(d @ n) > 0.0:
        n = -n
    tang = d - float(d @ n) * n
    tn = float(np.linalg.norm(tang))
    if tn < TANGENT_EPS:
        if beta > 0.0:
            raise DegenerateTangent("tangential component undefined at normal incidence")
        return n.copy()
    out = math.cos(beta) * n + math.sin(beta) * (tang / tn)
    return out / np.linalg.norm(out)


def reflect_directions(d_in: np.ndarray, normals: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`reflect_direction`; degenerate tangents fall back to the normal."""
    dn = np.einsum("ij,ij->i", d_in, normals)
    n = np.where((dn > 0.0)[:, None], -normals, normals)
    dn = np.where(dn > 0.0, -dn, dn)
    tang = d_in - dn[:, None] * n
    tn = np.linalg.norm(tang, axis=1)
    safe = tn >= TANGENT_EPS
    t = np.where(safe[:, None], tang / np.where(safe, tn, 1.0)[:, None], 0.0)
    b = np.where(safe, beta, 0.0)
    out = np.cos(b)[:, None] * n + np.sin(b)[:, None] * t
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def update_state(state: RayState, hit: Hit, gamma_k: complex, d_out) -> RayState:
    """Append the interaction point and fold in the interaction coefficient."""
    if state.status is not RayStatus.ALIVE:
        raise StateNotAlive(f"cannot update a {state.status.value} ray")
    return replace(
        state,
        points=state.points + (np.asarray(hit.point, dtype=float),),
        surfaces=state.surfaces + (hit.surface_id,),
        direction=np.asarray(d_out, dtype=float),
        cum_gamma=complex(gamma_k) * state.cum_gamma,
        cum_distance=state.cum_distance + float(hit.distance),
    )


def direction_angles(vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(azimuth in (-pi, pi], elevation in [-pi/2, pi/2]) of direction vectors."""
    vec = np.asarray(vec, dtype=float)
    norm = np.linalg.norm(vec, axis=-1)
    az = np.arctan2(vec[..., 1], vec[..., 0])
    az = np.where(az <= -math.pi, math.pi, az)
    el = np.arcsin(np.clip(vec[..., 2] / norm, -1.0, 1.0))
    return az, el
