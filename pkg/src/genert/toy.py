"""Synthetic street-canyon scene and Tx/Rx layouts used by tests and the CLI defaults."""

from __future__ import annotations

import numpy as np

from .scene import Humidity, itu_material

FREQUENCY_HZ = 3.5e9

GROUND, CONCRETE, GLASS = 0, 1, 2


def _quad(p0, p1, p2, p3):
    """Two triangles for the quad p0-p1-p2-p3 (counter-clockwise seen from the normal side)."""
    return [(p0, p1, p2), (p0, p2, p3)]


def _box(x0, x1, y0, y1, h):
    """Outward-facing walls and roof of an axis-aligned building; keyed by face name."""
    return {
        "south": _quad((x0, y0, 0), (x1, y0, 0), (x1, y0, h), (x0, y0, h)),
        "north": _quad((x1, y1, 0), (x0, y1, 0), (x0, y1, h), (x1, y1, h)),
        "west": _quad((x0, y1, 0), (x0, y0, 0), (x0, y0, h), (x0, y1, h)),
        "east": _quad((x1, y0, 0), (x1, y1, 0), (x1, y1, h), (x1, y0, h)),
        "roof": _quad((x0, y0, h), (x1, y0, h), (x1, y1, h), (x0, y1, h)),
    }


def box_canyon_document(frequency_hz: float = FREQUENCY_HZ) -> dict:
    """Scene dict for a street canyon: ground, one concrete block north, two blocks south.

    The western south block has a glass facade on the street side.  32 triangles.
    """
    tris: list[tuple[int, tuple]] = []
    tris += [(GROUND, t) for t in _quad((-60, -40, 0), (60, -40, 0), (60, 40, 0), (-60, 40, 0))]
    for name, faces in _box(-40, 40, 12, 30, 20).items():
        tris += [(CONCRETE, t) for t in faces]
    for name, faces in _box(-40, -5, -30, -12, 15).items():
        cls = GLASS if name == "north" else CONCRETE
        tris += [(cls, t) for t in faces]
    for name, faces in _box(5, 40, -30, -12, 25).items():
        tris += [(CONCRETE, t) for t in faces]

    surfaces = []
    for i, (cls, tri) in enumerate(tris):
        v = np.array(tri, dtype=float)
        n = np.cross(v[1] - v[0], v[2] - v[0])
        n /= np.linalg.norm(n)
        surfaces.append({"id": i, "class_id": cls, "vertices": [float(x) for x in v.reshape(-1)],
                         "normal": [float(x) + 0.0 for x in n]})

    def entry(cid, hum, mat):
        m = itu_material(mat, frequency_hz)
        return {"class_id": cid, "humidity": hum.value, "permittivity": m.relative_permittivity,
                "conductivity": m.conductivity, "itu": mat}

    materials = [
        entry(GROUND, Humidity.DRY, "very_dry_ground"),
        entry(GROUND, Humidity.MEDIUM_DRY, "medium_dry_ground"),
        entry(GROUND, Humidity.WET, "wet_ground"),
        entry(CONCRETE, Humidity.DRY, "concrete"),
        entry(GLASS, Humidity.DRY, "glass"),
    ]
    return {
        "version": 1,
        "name": "box_canyon",
        "frequency_hz": frequency_hz,
        "humidity_levels": [h.value for h in Humidity],
        "classes": [{"id": GROUND, "name": "ground", "ground": True},
                    {"id": CONCRETE, "name": "concrete", "ground": False},
                    {"id": GLASS, "name": "glass", "ground": False}],
        "materials": materials,
        "surfaces": surfaces,
        "bounds": [-60.0, -40.0, 0.0, 60.0, 40.0, 30.0],
    }


TOY_TX = (-30.0, 0.0, 10.0)


def street_rx_grid(nx: int = 12, ny: int = 10, height: float = 1.5,
                   x_range=(-35.0, 35.0), y_range=(-9.0, 9.0)) -> np.ndarray:
    """Receiver positions on a regular grid inside the canyon, shape (nx*ny, 3)."""
    xs = np.linspace(*x_range, nx)
    ys = np.linspace(*y_range, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, height)], axis=1)
