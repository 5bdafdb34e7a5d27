"""Propagation environment: semantic-tagged triangles plus per-humidity materials.

Scene files are JSON documents::

    {
      "version": 1,
      "classes":   [{"id": 0, "name": "ground", "ground": true}, ...],
      "materials": [{"class_id": 0, "humidity": "dry",
                     "permittivity": 3.0, "conductivity": 0.0035}, ...],
      "surfaces":  [{"id": 0, "class_id": 0, "vertices": [9 reals],
                     "normal": [3 reals]}, ...],          # normal optional
      "bounds":    [xmin, ymin, zmin, xmax, ymax, zmax]
    }

All lengths are meters.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateSurface, GenertError, MissingMaterial, ParseError, UnknownSemanticClass

AREA_EPS = 1e-12
UNIT_TOL = 1e-9

SCENE_VERSION = 1


class Humidity(str, enum.Enum):
    DRY = "dry"
    MEDIUM_DRY = "medium_dry"
    WET = "wet"

    @classmethod
    def parse(cls, value: "Humidity | str") -> "Humidity":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"mediumdry": "medium_dry", "medium": "medium_dry"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ParseError(f"unknown humidity level {value!r}") from None


# Non-ground classes scale both material fields by these factors.
HUMIDITY_SCALE = {Humidity.DRY: 1.0, Humidity.MEDIUM_DRY: 1.30, Humidity.WET: 1.60}


@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    ground: bool = False

    @property
    def one_hot_index(self) -> int:
        return self.id


@dataclass(frozen=True)
class Material:
    relative_permittivity: float
    conductivity: float

    def __post_init__(self):
        eps, sig = self.relative_permittivity, self.conductivity
        if not (math.isfinite(eps) and math.isfinite(sig)) or eps < 1.0 or sig < 0.0:
            raise ParseError(f"invalid material (eps_r={eps}, sigma={sig})")

    def scaled(self, factor: float) -> "Material":
        return Material(self.relative_permittivity * factor, self.conductivity * factor)


@dataclass(frozen=True)
class Surface:
    id: int
    vertices: np.ndarray  # (3, 3)
    normal: np.ndarray  # (3,)
    class_id: int

    @property
    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(_winding_cross(self.vertices)))


def _winding_cross(vertices: np.ndarray) -> np.ndarray:
    return np.cross(vertices[1] - vertices[0], vertices[2] - vertices[0])


# ITU-R P.2040 material model: eps_r = a * f**b, sigma = c * f**d, f in GHz.
ITU_MATERIALS = {
    "vacuum": (1.0, 0.0, 0.0, 0.0),
    "concrete": (5.24, 0.0, 0.0462, 0.7822),
    "brick": (3.91, 0.0, 0.0238, 0.16),
    "plasterboard": (2.73, 0.0, 0.0085, 0.9395),
    "wood": (1.99, 0.0, 0.0047, 1.0718),
    "glass": (6.31, 0.0, 0.0036, 1.3394),
    "ceiling_board": (1.48, 0.0, 0.0011, 1.075),
    "chipboard": (2.58, 0.0, 0.0217, 0.78),
    "floorboard": (3.66, 0.0, 0.0044, 1.3515),
    "metal": (1.0, 0.0, 1e7, 0.0),
    "very_dry_ground": (3.0, 0.0, 0.00015, 2.52),
    "medium_dry_ground": (15.0, -0.1, 0.035, 1.63),
    "wet_ground": (30.0, -0.4, 0.15, 1.30),
}


def itu_material(name: str, frequency_hz: float) -> Material:
    """Material parameters of a named ITU-R P.2040 entry at ``frequency_hz``."""
    a, b, c, d = ITU_MATERIALS[name]
    f_ghz = frequency_hz / 1e9
    return Material(a * f_ghz**b, c * f_ghz**d)


class Environment:
    """Immutable set of triangles with semantic classes and material tables.

    The constructor does not validate; use :func:`load_environment` or
    :func:`validate_environment` for that.  Packed arrays for the vectorized
    intersection kernels are built once here.
    """

    def __init__(self, surfaces, classes, materials, bounds=None, humidity_levels=None, name=""):
        self.surfaces: tuple[Surface, ...] = tuple(surfaces)
        self.classes: tuple[SemanticClass, ...] = tuple(classes)
        self.materials: dict[tuple[int, Humidity], Material] = dict(materials)
        self.name = name
        if humidity_levels is None:
            humidity_levels = sorted({h for _, h in self.materials}, key=list(Humidity).index)
        self.humidity_levels = tuple(Humidity.parse(h) for h in humidity_levels)
        n = len(self.surfaces)
        verts = np.array([s.vertices for s in self.surfaces], dtype=float).reshape(n, 3, 3)
        self.v0 = np.ascontiguousarray(verts[:, 0])
        self.edge1 = np.ascontiguousarray(verts[:, 1] - verts[:, 0])
        self.edge2 = np.ascontiguousarray(verts[:, 2] - verts[:, 0])
        self.normals = np.array([s.normal for s in self.surfaces], dtype=float).reshape(n, 3)
        self.surface_class = np.array([s.class_id for s in self.surfaces], dtype=np.int64)
        self.surface_ids = np.array([s.id for s in self.surfaces], dtype=np.int64)
        if bounds is None:
            if n:
                lo, hi = verts.reshape(-1, 3).min(axis=0), verts.reshape(-1, 3).max(axis=0)
            else:
                lo = hi = np.zeros(3)
            bounds = np.concatenate([lo, hi])
        self.bounds = np.asarray(bounds, dtype=float)
        self.plane_ids = _plane_groups(self.normals, self.v0)
        self._index = {s.id: i for i, s in enumerate(self.surfaces)}

    @property
    def vocab_size(self) -> int:
        return len(self.classes)

    def class_by_id(self, class_id: int) -> SemanticClass:
        for c in self.classes:
            if c.id == class_id:
                return c
        raise UnknownSemanticClass(f"class id {class_id} not declared")

    def class_by_name(self, name: str) -> SemanticClass:
        for c in self.classes:
            if c.name == name:
                return c
        raise UnknownSemanticClass(f"class {name!r} not declared")

    def surface_index(self, surface_id: int) -> int:
        return self._index[surface_id]

    def with_materials(self, materials) -> "Environment":
        return Environment(self.surfaces, self.classes, materials, self.bounds,
                           self.humidity_levels, self.name)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Environment":
        """Rigidly moved copy (used by the spatial-independence tests)."""
        rot = np.asarray(rotation, float)
        t = np.asarray(translation, float)
        surfs = [Surface(s.id, s.vertices @ rot.T + t, rot @ s.normal, s.class_id) for s in self.surfaces]
        return Environment(surfs, self.classes, self.materials, None, self.humidity_levels, self.name)


def _plane_groups(normals: np.ndarray, points: np.ndarray, tol: float = 1e-7) -> np.ndarray:
    """Label coplanar triangles with a shared plane id (sign of normal ignored)."""
    ids = np.full(len(normals), -1, dtype=np.int64)
    reps: list[tuple[np.ndarray, float]] = []
    for i, (n, p) in enumerate(zip(normals, points)):
        norm = np.linalg.norm(n)
        if norm == 0:
            ids[i] = len(reps)
            reps.append((np.zeros(3), 0.0))
            continue
        n = n / norm
        off = float(n @ p)
        for j, (rn, ro) in enumerate(reps):
            dot = float(n @ rn)
            if abs(abs(dot) - 1.0) < tol and abs(off - math.copysign(1.0, dot) * ro) < tol * max(1.0, abs(off)):
                ids[i] = j
                break
        else:
            ids[i] = len(reps)
            reps.append((n, off))
    return ids


def material_for(env: Environment, class_id: int, humidity: Humidity | str) -> Material:
    """Material of ``class_id`` under a humidity level.

    Ground classes carry one table entry per humidity level.  Every other
    class scales its dry entry by 1.30 (medium dry) or 1.60 (wet).
    """
    humidity = Humidity.parse(humidity)
    cls = env.class_by_id(class_id)
    if cls.ground:
        try:
            return env.materials[(class_id, humidity)]
        except KeyError:
            raise MissingMaterial(f"ground class {cls.name!r} has no {humidity.value} entry") from None
    try:
        base = env.materials[(class_id, Humidity.DRY)]
    except KeyError:
        raise MissingMaterial(f"class {cls.name!r} has no dry entry") from None
    return base.scaled(HUMIDITY_SCALE[humidity])


def validate_environment(env: Environment) -> list[dict]:
    """List invariant violations; an empty list means the environment is valid."""
    report = []
    class_ids = [c.id for c in env.classes]
    if sorted(class_ids) != list(range(len(class_ids))):
        report.append({"kind": "class ids", "detail": f"ids must be dense 0..n-1, got {class_ids}"})
    lo, hi = env.bounds[:3], env.bounds[3:]
    for s in env.surfaces:
        cross = _winding_cross(s.vertices)
        area = 0.5 * float(np.linalg.norm(cross))
        if not np.all(np.isfinite(s.vertices)) or not np.all(np.isfinite(s.normal)):
            report.append({"kind": "non-finite", "surface": s.id})
            continue
        if area <= AREA_EPS:
            report.append({"kind": "degenerate", "surface": s.id, "detail": f"area {area:.3e}"})
            continue
        norm = float(np.linalg.norm(s.normal))
        if abs(norm - 1.0) > UNIT_TOL:
            report.append({"kind": "non-unit normal", "surface": s.id, "detail": f"norm {norm!r}",
                           "renormalized": (s.normal / norm).tolist() if norm > 0 else None})
        if norm > 0:
            n = s.normal / norm
            e1, e2 = s.vertices[1] - s.vertices[0], s.vertices[2] - s.vertices[0]
            if abs(n @ e1) > UNIT_TOL * max(1.0, np.linalg.norm(e1)) or \
               abs(n @ e2) > UNIT_TOL * max(1.0, np.linalg.norm(e2)):
                report.append({"kind": "normal not orthogonal", "surface": s.id})
        if s.class_id not in class_ids:
            report.append({"kind": "unknown class", "surface": s.id, "detail": f"class_id {s.class_id}"})
        if np.any(s.vertices < lo - 1e-9) or np.any(s.vertices > hi + 1e-9):
            report.append({"kind": "bounds", "surface": s.id})
    for c in env.classes:
        levels = env.humidity_levels if c.ground else (Humidity.DRY,)
        for h in levels:
            if (c.id, h) not in env.materials:
                report.append({"kind": "missing material", "class": c.id, "humidity": h.value})
    return report


def _parse_surface(raw: dict) -> Surface:
    try:
        sid = int(raw["id"])
        cid = int(raw["class_id"])
        verts = np.array(raw["vertices"], dtype=float).reshape(3, 3)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed surface entry {raw!r}: {exc}") from None
    if not np.all(np.isfinite(verts)):
        raise ParseError(f"surface {sid}: non-finite vertex")
    cross = _winding_cross(verts)
    area = 0.5 * float(np.linalg.norm(cross))
    if area <= AREA_EPS:
        raise DegenerateSurface(f"surface {sid} has area {area:.3e} m^2")
    winding = cross / np.linalg.norm(cross)
    if raw.get("normal") is not None:
        stored = np.array(raw["normal"], dtype=float).reshape(3)
        norm = float(np.linalg.norm(stored))
        if not np.isfinite(norm) or norm == 0.0:
            raise ParseError(f"surface {sid}: invalid normal {raw['normal']!r}")
        stored = stored / norm
        if abs(abs(float(stored @ winding)) - 1.0) > UNIT_TOL:
            raise ParseError(f"surface {sid}: stored normal inconsistent with vertex winding")
        normal = stored
    else:
        normal = winding
    return Surface(sid, verts, normal, cid)


def environment_from_dict(doc: dict, name: str = "") -> Environment:
    try:
        classes = [SemanticClass(int(c["id"]), str(c["name"]),
                                 bool(c.get("ground", c["name"] == "ground")))
                   for c in doc["classes"]]
        raw_surfaces = doc["surfaces"]
        raw_materials = doc.get("materials", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed scene document: {exc}") from None
    materials = {}
    for m in raw_materials:
        try:
            key = (int(m["class_id"]), Humidity.parse(m.get("humidity", "dry")))
            materials[key] = Material(float(m["permittivity"]), float(m["conductivity"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed material entry {m!r}: {exc}") from None
    surfaces = [_parse_surface(s) for s in raw_surfaces]
    known = {c.id for c in classes}
    for s in surfaces:
        if s.class_id not in known:
            raise UnknownSemanticClass(f"surface {s.id} references undeclared class {s.class_id}")
    ids = [s.id for s in surfaces]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate surface ids")
    levels = doc.get("humidity_levels", [h.value for h in Humidity])
    bounds = doc.get("bounds")
    if bounds is not None:
        bounds = np.array(bounds, dtype=float)
        if bounds.shape != (6,) or not np.all(np.isfinite(bounds)):
            raise ParseError("bounds must be 6 finite reals")
    env = Environment(surfaces, classes, materials, bounds, levels, name=name or doc.get("name", ""))
    for v in validate_environment(env):
        if v["kind"] == "missing material":
            raise MissingMaterial(f"class {v['class']} lacks a {v['humidity']} material entry")
        if v["kind"] == "bounds":
            raise ParseError(f"surface {v['surface']} lies outside the declared bounds")
        if v["kind"] == "class ids":
            raise ParseError(v["detail"])
    return env


def load_environment(path) -> Environment:
    """Load and validate a scene file; ``path`` may also name a bundled scene."""
    path = resolve_scene_path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read scene {path}: {exc}") from None
    return environment_from_dict(doc, name=Path(path).stem)


def environment_to_dict(env: Environment) -> dict:
    materials = [{"class_id": cid, "humidity": h.value, "permittivity": float(m.relative_permittivity),
                  "conductivity": float(m.conductivity)}
                 for (cid, h), m in sorted(env.materials.items(), key=lambda kv: (kv[0][0], list(Humidity).index(kv[0][1])))]
    return {
        "version": SCENE_VERSION,
        "name": env.name,
        "humidity_levels": [h.value for h in env.humidity_levels],
        "classes": [{"id": c.id, "name": c.name, "ground": c.ground} for c in env.classes],
        "materials": materials,
        "surfaces": [{"id": s.id, "class_id": s.class_id,
                      "vertices": [float(x) for x in s.vertices.reshape(-1)],
                      "normal": [float(x) for x in s.normal]} for s in env.surfaces],
        "bounds": [float(x) for x in env.bounds],
    }


def save_environment(env: Environment, path) -> None:
    Path(path).write_text(json.dumps(environment_to_dict(env), indent=1))


def bundled_scenes() -> list[str]:
    root = resources.files("genert") / "scenes"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_scene_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    candidate = resources.files("genert") / "scenes" / f"{name}.json"
    if candidate.is_file():
        return Path(str(candidate))
    raise ParseError(f"scene file {path} not found")


def validate_file(path) -> list[dict]:
    """Validation report for a scene file, including problems the strict loader would raise on.

    Stored normals are checked as written (the loader silently renormalizes
    them), so a ``(0, 0, 2)`` normal shows up as a "non-unit normal" entry
    carrying the renormalized vector.
    """
    try:
        p = resolve_scene_path(path)
        doc = json.loads(Path(p).read_text())
    except (GenertError, OSError, json.JSONDecodeError) as exc:
        return [{"kind": "unreadable", "detail": str(exc)}]
    report = []
    for raw in doc.get("surfaces", []) if isinstance(doc, dict) else []:
        stored = raw.get("normal") if isinstance(raw, dict) else None
        if stored is None:
            continue
        try:
            n = np.array(stored, dtype=float).reshape(3)
        except (TypeError, ValueError):
            continue
        norm = float(np.linalg.norm(n))
        if np.isfinite(norm) and norm > 0 and abs(norm - 1.0) > UNIT_TOL:
            report.append({"kind": "non-unit normal", "surface": raw.get("id"), "detail": f"norm {norm!r}",
                           "renormalized": (n / norm).tolist()})
    try:
        env = load_environment(p)
    except GenertError as exc:
        return report + [{"kind": type(exc).__name__, "detail": str(exc)}]
    return report + validate_environment(env)
