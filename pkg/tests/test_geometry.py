import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genert.errors import DegenerateTangent, InvalidSpacing, LengthMismatch, StateNotAlive
from genert.geometry import (
    EPS_MIN, Hit, RayState, RayStatus, TxConfig, direction_angles, fibonacci_directions,
    intersect_batch, intersect_nearest, launch_rays, ray_count, reflect_direction, reflect_directions,
    update_state,
)
from genert.scene import Environment, SemanticClass, Surface

from oracles import edge_margin, plane_bary_hit


def tri_env(*tris):
    surfs = []
    for i, t in enumerate(tris):
        v = np.asarray(t, float).reshape(3, 3)
        n = np.cross(v[1] - v[0], v[2] - v[0])
        surfs.append(Surface(i, v, n / np.linalg.norm(n), 0))
    return Environment(surfs, [SemanticClass(0, "c")], {})


UNIT_TRI = [(-1, -1, 1), (1, -1, 1), (0, 1, 1)]


def test_ray_count_one_radian():
    assert ray_count(1.0) == 13
    rays = launch_rays(TxConfig((0, 0, 0)), 1.0)
    assert len(rays) == 13
    assert np.allclose([np.linalg.norm(r.direction) for r in rays], 1.0)


def test_ray_count_default_spacing():
    assert ray_count(math.radians(0.4)) == math.ceil(4 * math.pi / math.radians(0.4) ** 2) == 257_832


@pytest.mark.parametrize("bad", [0.0, -0.1, math.pi])
def test_ray_count_rejects(bad):
    with pytest.raises(InvalidSpacing):
        ray_count(bad)


def test_fresh_states():
    for r in launch_rays(TxConfig((1, 2, 3)), 0.5):
        assert r.points == () and r.k == 0 and r.cum_gamma == 1
        assert r.status is RayStatus.ALIVE


def test_fibonacci_directions_cover_sphere():
    d = fibonacci_directions(4000)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    assert abs(d.mean(axis=0)).max() < 1e-3


def test_axis_aligned_hit():
    env = tri_env(UNIT_TRI)
    h = intersect_nearest((0, 0, 0), (0, 0, 1), env)
    assert np.allclose(h.point, (0, 0, 1))
    assert h.distance == 1.0


def test_behind_origin_misses():
    env = tri_env([(-1, -1, -1), (1, -1, -1), (0, 1, -1)])
    assert intersect_nearest((0, 0, 0), (0, 0, 1), env) is None


def test_nearest_selected():
    far = [(x, y, 2.0) for x, y, _ in UNIT_TRI]
    env = tri_env(far, UNIT_TRI)
    h = intersect_nearest((0, 0, 0), (0, 0, 1), env)
    assert h.surface_id == 1 and h.distance == 1.0


def test_exclude_surface():
    far = [(x, y, 2.0) for x, y, _ in UNIT_TRI]
    env = tri_env(far, UNIT_TRI)
    assert intersect_nearest((0, 0, 0), (0, 0, 1), env, exclude_surface=1).surface_id == 0


def test_self_intersection_guard():
    env = tri_env(UNIT_TRI)
    assert intersect_nearest((0, 0, 1 - EPS_MIN / 2), (0, 0, 1), env) is None


def test_batch_of_one_matches_scalar(rng):
    env = tri_env(UNIT_TRI, [(-3, -3, 0), (3, -3, 0), (0, 3, 4)])
    d = np.array([0.1, -0.05, 1.0])
    d /= np.linalg.norm(d)
    b = intersect_batch([[0.0, 0.0, 0.0]], [d], env).to_list(env)[0]
    s = intersect_nearest((0, 0, 0), d, env)
    assert b.surface_id == s.surface_id and b.distance == s.distance


def test_empty_batch():
    env = tri_env(UNIT_TRI)
    res = intersect_batch(np.zeros((0, 3)), np.zeros((0, 3)), env)
    assert len(res) == 0


def test_batch_length_mismatch():
    with pytest.raises(LengthMismatch):
        intersect_batch(np.zeros((2, 3)), np.zeros((3, 3)), tri_env(UNIT_TRI))


def test_batch_equals_scalar_loop_on_canyon(canyon, rng):
    n = 2000
    o = rng.uniform(canyon.bounds[:3], canyon.bounds[3:], size=(n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    batch = intersect_batch(o, d, canyon)
    for i in range(n):
        s = intersect_nearest(o[i], d[i], canyon)
        assert (s is None) == (not batch.hit[i])
        if s is not None:
            assert canyon.surface_ids[batch.index[i]] == s.surface_id
            assert batch.distance[i] == s.distance


def test_hits_agree_with_plane_oracle(rng):
    n = 3000
    tris = rng.uniform(-1, 1, size=(n, 3, 3))
    o = rng.uniform(-2, 2, size=(n, 3))
    target = tris.mean(axis=1) + rng.normal(scale=0.6, size=(n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for i in range(n):
        env = tri_env(tris[i])
        h = intersect_nearest(o[i], d[i], env)
        ref = plane_bary_hit(o[i], d[i], tris[i])
        inside = ref is not None and edge_margin(ref[1], ref[2]) > 1e-9
        outside = ref is None or edge_margin(ref[1], ref[2]) < -1e-9
        if inside:
            assert h is not None and abs(h.distance - ref[0]) <= 1e-9 * max(1.0, ref[0])
        elif outside:
            assert h is None


def test_barycentric_containment(canyon, rng):
    n = 5000
    o = rng.uniform(canyon.bounds[:3], canyon.bounds[3:], size=(n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    b = intersect_batch(o, d, canyon)
    h = b.hit
    assert np.all(b.u[h] >= -1e-9) and np.all(b.v[h] >= -1e-9)
    assert np.all(b.u[h] + b.v[h] <= 1 + 1e-9)
    assert np.allclose(b.point[h], o[h] + b.distance[h, None] * d[h], atol=1e-9, rtol=0)


def test_reflect_mirror_45():
    out = reflect_direction(np.array([1, 0, -1]) / math.sqrt(2), np.array([0, 0, 1.0]), math.radians(45))
    assert np.allclose(out, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-12)


def test_reflect_beta_zero_gives_normal():
    d = np.array([0.3, -0.4, -0.866])
    d /= np.linalg.norm(d)
    assert np.allclose(reflect_direction(d, np.array([0, 0, 1.0]), 0.0), [0, 0, 1])


def test_reflect_degenerate_tangent():
    with pytest.raises(DegenerateTangent):
        reflect_direction(np.array([0, 0, -1.0]), np.array([0, 0, 1.0]), 0.2)


def test_reflect_flips_normal_to_incoming_side():
    out = reflect_direction(np.array([1, 0, -1]) / math.sqrt(2), np.array([0, 0, -1.0]), math.radians(45))
    assert out[2] > 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(0, 1.5))
def test_reflect_unit_norm(xs, beta):
    d = np.array(xs[:3])
    n = np.array(xs[3:])
    if np.linalg.norm(d) < 1e-3 or np.linalg.norm(n) < 1e-3:
        return
    d /= np.linalg.norm(d)
    n /= np.linalg.norm(n)
    if np.linalg.norm(np.cross(d, n)) < 1e-6:
        return
    assert abs(np.linalg.norm(reflect_direction(d, n, beta)) - 1) < 1e-9


def test_specular_beta_reproduces_mirror_law(rng):
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = rng.normal(size=(10_000, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    alpha = np.arccos(np.abs(np.einsum("ij,ij->i", d, n)))
    out = reflect_directions(d, n, alpha)
    mirror = d - 2 * np.einsum("ij,ij->i", d, n)[:, None] * n
    assert np.abs(out - mirror).max() < 1e-9


def test_vectorized_reflect_matches_scalar(rng):
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    beta = rng.uniform(0, 1.5, 50)
    ref = np.array([reflect_direction(d[i], n[i], beta[i]) for i in range(50)])
    assert np.allclose(reflect_directions(d, n, beta), ref, atol=1e-14)


def test_update_state_accumulates():
    s = RayState(origin=np.zeros(3), direction=np.array([1.0, 0, 0]))
    p1, p2 = np.array([3.0, 0, 0]), np.array([3.0, 4.0, 0])
    s = update_state(s, Hit(p1, 0, 3.0, (0.2, 0.2)), 0.5 + 0j, np.array([0, 1.0, 0]))
    assert s.k == 1 and s.cum_gamma == 0.5 and np.array_equal(s.points[0], p1)
    s = update_state(s, Hit(p2, 1, 4.0, (0.2, 0.2)), 0.4 + 0j, np.array([-1.0, 0, 0]))
    assert s.k == 2 and s.cum_gamma == pytest.approx(0.2)
    assert s.cum_distance == 7.0
    assert s.surfaces == (0, 1)


def test_update_dead_state():
    s = RayState(origin=np.zeros(3), direction=np.array([1.0, 0, 0]), status=RayStatus.TERMINATED)
    with pytest.raises(StateNotAlive):
        update_state(s, Hit(np.zeros(3), 0, 1.0, (0, 0)), 1.0, np.array([1.0, 0, 0]))


def test_direction_angles_axes():
    az, el = direction_angles(np.array([[0, 0, 1.0], [-1, 0, 0], [0, -1, 0]]))
    assert el[0] == pytest.approx(math.pi / 2)
    assert az[1] == pytest.approx(math.pi)
    assert az[2] == pytest.approx(-math.pi / 2)
