"""Classical reflection physics: polarization frames, Fresnel coefficients and CIR rendering.

This is the ground-truth generator for training labels and the specular
interaction model used by the tracer.

Polarization angle convention: ``psi`` is the angle between the incident
E-field and the plane of incidence, so ``psi = 0`` is a purely parallel
(TM) field and ``psi = pi/2`` purely perpendicular (TE).  The reflected
components are then ``Gamma_perp * sin(psi)`` and ``Gamma_par * cos(psi)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonPositiveDistance, NormalIncidenceDegenerate
from .geometry import SPEED_OF_LIGHT, TxConfig, RxConfig, direction_angles
from .scene import Environment, Humidity, Material, material_for

EPS0 = 8.8541878128e-12
PLANE_EPS = 1e-9
UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class PolarizationFrame:
    e_perp: np.ndarray
    e_par_in: np.ndarray
    e_par_out: np.ndarray


def _specular(d, n):
    return d - 2.0 * float(d @ n) * n


def polarization_angle(normal, d_in, e_field) -> tuple[float, PolarizationFrame]:
    """Angle between ``e_field`` and the plane of incidence, plus the local frame.

    ``e_field`` may be complex (elliptical polarization); only the component
    magnitudes along the frame axes enter ``psi``.
    """
    v = np.asarray(normal, dtype=float)
    d = np.asarray(d_in, dtype=float)
    cross = np.cross(v, d)
    cn = float(np.linalg.norm(cross))
    if cn <= PLANE_EPS:
        raise NormalIncidenceDegenerate("normal parallel to incident direction")
    e_perp = cross / cn
    e_par_in = np.cross(e_perp, d)
    e_par_out = np.cross(_specular(d, v), e_perp)
    e = np.asarray(e_field)
    c_perp = abs(complex(np.dot(e, e_perp)))
    c_par = abs(complex(np.dot(e, e_par_in)))
    psi = math.atan2(c_perp, c_par) if (c_perp or c_par) else math.pi / 2
    return psi, PolarizationFrame(e_perp, e_par_in, e_par_out)


def polarization_frames(normals: np.ndarray, d_in: np.ndarray):
    """Vectorized frames; rows at normal incidence get an arbitrary perpendicular axis.

    Returns ``(e_perp, e_par_in, e_par_out, degenerate_mask)``.
    """
    cross = np.cross(normals, d_in)
    cn = np.linalg.norm(cross, axis=1)
    degenerate = cn <= PLANE_EPS
    if np.any(degenerate):
        dd = d_in[degenerate]
        helper = np.where((np.abs(dd[:, 0]) < 0.9)[:, None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        alt = np.cross(dd, helper)
        cross = cross.copy()
        cross[degenerate] = alt
        cn = cn.copy()
        cn[degenerate] = np.linalg.norm(alt, axis=1)
    e_perp = cross / cn[:, None]
    e_par_in = np.cross(e_perp, d_in)
    dn = np.einsum("ij,ij->i", d_in, normals)
    d_out = d_in - 2.0 * dn[:, None] * normals
    e_par_out = np.cross(d_out, e_perp)
    return e_perp, e_par_in, e_par_out, degenerate


def psi_from_components(c_perp: np.ndarray, c_par: np.ndarray, degenerate=None) -> np.ndarray:
    a, b = np.abs(c_perp), np.abs(c_par)
    psi = np.where((a > 0) | (b > 0), np.arctan2(a, b), math.pi / 2)
    if degenerate is not None:
        psi = np.where(degenerate, math.pi / 2, psi)
    return psi


def offset_angle(normals: np.ndarray, d_in: np.ndarray) -> np.ndarray:
    """Polarization angle obtained by assuming a vertically oriented E-field."""
    e_perp, e_par_in, _, degenerate = polarization_frames(normals, d_in)
    return psi_from_components(e_perp @ UP, e_par_in @ UP, degenerate)


def complex_permittivity(mat: Material, frequency_hz: float) -> complex:
    return complex(mat.relative_permittivity, -mat.conductivity / (2.0 * math.pi * frequency_hz * EPS0))


def fresnel_coefficients(mat: Material, alpha, frequency_hz: float):
    """Fresnel reflection coefficients ``(gamma_perp, gamma_par)`` of an air/material half-space.

    Sign convention: both coefficients coincide at normal incidence.
    ``alpha`` may be a scalar or an array.
    """
    eps = complex_permittivity(mat, frequency_hz)
    a = np.asarray(alpha, dtype=float)
    c = np.cos(a)
    s2 = np.sin(a) ** 2
    root = np.sqrt(eps - s2 + 0j)
    g_perp = (c - root) / (c + root)
    g_par = (root - eps * c) / (root + eps * c)
    if g_perp.ndim == 0:
        return complex(g_perp), complex(g_par)
    return g_perp, g_par


def reflect_field(gamma_perp: complex, gamma_par: complex, psi: float):
    """Reflected field components for a unit incident field.

    Returns ``(gamma_eff, (e_perp_r, e_par_r))`` where ``|gamma_eff|`` is the
    reflected/incident field-magnitude ratio and its phase is that of the
    dominant component.
    """
    e_perp = gamma_perp * math.sin(psi)
    e_par = gamma_par * math.cos(psi)
    mag = math.sqrt(abs(e_perp) ** 2 + abs(e_par) ** 2)
    dominant = e_perp if abs(e_perp) >= abs(e_par) else e_par
    phase = np.angle(dominant) if dominant != 0 else 0.0
    return mag * complex(math.cos(phase), math.sin(phase)), (e_perp, e_par)


def path_attenuation(d: float, gammas, frequency_hz: float) -> complex:
    """Complex path coefficient: free-space amplitude x interaction product x propagation phase."""
    if not d > 0:
        raise NonPositiveDistance(f"path length must be positive, got {d}")
    lam = SPEED_OF_LIGHT / frequency_hz
    prod = complex(np.prod(np.asarray(list(gammas), dtype=complex))) if len(gammas) else 1.0 + 0j
    phase = -2.0 * math.pi * d / lam
    return lam / (4.0 * math.pi * d) * prod * complex(math.cos(phase), math.sin(phase))


class FresnelOracle:
    """Specular interaction model backed by Fresnel physics.

    Called by the tracer with an interaction batch.  The tracked E-field of
    each ray is decomposed in the local frame, both components are scaled by
    their Fresnel coefficients, and the magnitude ratio becomes the
    interaction coefficient (with a fixed pi phase).
    """

    specular = True

    def __init__(self, env: Environment, humidity: Humidity | str = Humidity.DRY, frequency_hz: float = 3.5e9):
        self.env = env
        self.humidity = Humidity.parse(humidity)
        self.frequency_hz = frequency_hz
        self.materials = {c.id: material_for(env, c.id, self.humidity) for c in env.classes}

    def components(self, class_id: np.ndarray, alpha: np.ndarray):
        g_perp = np.empty(len(alpha), dtype=complex)
        g_par = np.empty(len(alpha), dtype=complex)
        for cid, mat in self.materials.items():
            m = class_id == cid
            if np.any(m):
                g_perp[m], g_par[m] = fresnel_coefficients(mat, alpha[m], self.frequency_hz)
        return g_perp, g_par

    def __call__(self, batch):
        g_perp, g_par = self.components(batch.class_id, batch.alpha)
        e_perp_r = g_perp * batch.c_perp
        e_par_r = g_par * batch.c_par
        mag = np.sqrt(np.abs(e_perp_r) ** 2 + np.abs(e_par_r) ** 2)
        field_out = e_perp_r[:, None] * batch.e_perp + e_par_r[:, None] * batch.e_par_out
        field_out = field_out / np.where(mag > 0, mag, 1.0)[:, None]
        return batch.alpha.copy(), -mag.astype(complex), field_out


# ----------------------------------------------------------------------------- CIR


@dataclass
class Mpc:
    tau: float
    aod: tuple[float, float]
    aoa: tuple[float, float]
    a: complex
    k: int
    points: np.ndarray  # (k, 3)
    d: float
    surfaces: tuple = ()
    cum_gamma_mag: float = 1.0  # |product of interaction coefficients|


@dataclass
class Cir:
    tx_id: int
    rx_id: int
    mpcs: list[Mpc]
    frequency_hz: float = 3.5e9


def path_length(tx_pos, points, rx_pos) -> float:
    chain = [np.asarray(tx_pos, float)] + [np.asarray(p, float) for p in points] + [np.asarray(rx_pos, float)]
    return float(sum(np.linalg.norm(b - a) for a, b in zip(chain[:-1], chain[1:])))


def render_mpc(tx: TxConfig, rx: RxConfig, points, cum_gamma: complex, surfaces=()) -> Mpc:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    d = path_length(tx.position, pts, rx.position)
    first = pts[0] if len(pts) else rx.position
    last = pts[-1] if len(pts) else tx.position
    aod = direction_angles(first - tx.position)
    aoa = direction_angles(rx.position - last)
    gain = 10.0 ** ((tx.gain_dbi + rx.gain_dbi) / 20.0)
    a = gain * path_attenuation(d, [cum_gamma], tx.frequency_hz)
    return Mpc(tau=d / SPEED_OF_LIGHT, aod=(float(aod[0]), float(aod[1])), aoa=(float(aoa[0]), float(aoa[1])),
               a=a, k=len(pts), points=pts, d=d, surfaces=tuple(int(s) for s in surfaces),
               cum_gamma_mag=abs(complex(cum_gamma)))


def render_cir(paths, tx: TxConfig, rx: RxConfig, tx_id: int = 0, rx_id: int = 0) -> Cir:
    """Channel impulse response of one Tx–Rx pair from traced paths (sorted by delay)."""
    mpcs = [render_mpc(tx, rx, p.points, p.cum_gamma, p.surfaces) for p in paths]
    mpcs.sort(key=lambda m: (m.tau, m.surfaces))
    return Cir(tx_id=tx_id, rx_id=rx_id, mpcs=mpcs, frequency_hz=tx.frequency_hz)


def received_power_db(m: Mpc, power_dbm: float = 0.0) -> float:
    return power_dbm + 20.0 * math.log10(abs(m.a))


# ----------------------------------------------------------------------------- files

CIR_VERSION = 1


def cir_to_dict(cir: Cir) -> dict:
    return {
        "version": CIR_VERSION,
        "tx_id": cir.tx_id,
        "rx_id": cir.rx_id,
        "frequency_hz": cir.frequency_hz,
        "mpcs": [{
            "tau_s": m.tau, "aod_az": m.aod[0], "aod_el": m.aod[1], "aoa_az": m.aoa[0], "aoa_el": m.aoa[1],
            "a_re": m.a.real, "a_im": m.a.imag, "k": m.k, "d": m.d,
            "cum_gamma_mag": m.cum_gamma_mag,
            "points": [[float(x) for x in p] for p in m.points],
            "surfaces": list(m.surfaces),
        } for m in cir.mpcs],
    }


def cir_from_dict(doc: dict) -> Cir:
    mpcs = []
    for r in doc["mpcs"]:
        d = float(r.get("d", r["tau_s"] * SPEED_OF_LIGHT))
        a = complex(r["a_re"], r["a_im"])
        lam = SPEED_OF_LIGHT / doc.get("frequency_hz", 3.5e9)
        ratio = r.get("cum_gamma_mag", abs(a) * 4.0 * math.pi * d / lam)
        mpcs.append(Mpc(tau=float(r["tau_s"]), aod=(r["aod_az"], r["aod_el"]), aoa=(r["aoa_az"], r["aoa_el"]),
                        a=a, k=int(r["k"]), points=np.array(r.get("points", []), dtype=float).reshape(-1, 3),
                        d=d, surfaces=tuple(r.get("surfaces", ())), cum_gamma_mag=float(ratio)))
    return Cir(tx_id=int(doc["tx_id"]), rx_id=int(doc["rx_id"]), mpcs=mpcs,
               frequency_hz=float(doc.get("frequency_hz", 3.5e9)))


def cir_filename(tx_id: int, rx_id: int) -> str:
    return f"cir_tx{tx_id:03d}_rx{rx_id:04d}.json"


def write_cir(cir: Cir, directory) -> Path:
    Path(directory).mkdir(parents=True, exist_ok=True)
    path = Path(directory) / cir_filename(cir.tx_id, cir.rx_id)
    path.write_text(json.dumps(cir_to_dict(cir), indent=1))
    return path


def read_cir(path) -> Cir:
    return cir_from_dict(json.loads(Path(path).read_text()))


def read_cir_dir(directory) -> dict[tuple[int, int], Cir]:
    out = {}
    for p in sorted(Path(directory).glob("cir_tx*_rx*.json")):
        c = read_cir(p)
        out[(c.tx_id, c.rx_id)] = c
    return out
