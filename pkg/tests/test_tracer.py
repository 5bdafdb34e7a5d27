import math

import numpy as np
import pytest

from genert.geometry import RxConfig, TxConfig
from genert.physics import FresnelOracle, render_cir
from genert.scene import Environment, SemanticClass, Surface, environment_from_dict
from genert.toy import TOY_TX, street_rx_grid
from genert.tracer import (
    COVERING_CAPTURE_FACTOR, TraceLimits, fibonacci_directions, image_points, trace_multi, trace_paths,
    walk_paths,
)

from conftest import ground_quad_doc
from oracles import image_reflection


class Mirror:
    """Lossless specular model with a constant coefficient."""

    specular = True

    def __init__(self, gamma=-0.9):
        self.gamma = gamma

    def __call__(self, batch):
        return batch.alpha.copy(), np.full(len(batch), self.gamma, complex), None


def empty_env():
    return Environment([], [SemanticClass(0, "c")], {})


def test_empty_env_single_los():
    d = fibonacci_directions(math.ceil(4 * math.pi / 0.05**2))[17]
    rx = RxConfig(10.0 * d)
    paths = trace_paths(empty_env(), TxConfig((0, 0, 0)), [rx], Mirror(), angular_spacing=0.05)[0]
    assert len(paths) == 1 and paths[0].k == 0


def test_ground_single_reflection(ground_env):
    tx, rx = TxConfig((0, 0, 1)), RxConfig((2, 0, 1))
    for refine in (False, True):
        paths = trace_paths(ground_env, tx, [rx], Mirror(), angular_spacing=math.radians(0.5),
                            refine=refine, capture_factor=COVERING_CAPTURE_FACTOR)[0]
        ks = sorted(p.k for p in paths)
        assert ks == [0, 1]
        refl = next(p for p in paths if p.k == 1)
        tol = 1e-9 if refine else 0.05
        assert np.allclose(refl.points[0], (1, 0, 0), atol=tol)
        assert refl.length == pytest.approx(2 * math.sqrt(2), abs=tol)


def mirror_box():
    doc = ground_quad_doc(size=10.0)
    verts = []
    for axis in range(3):
        for side in (-5.0, 5.0):
            quad = []
            for a, b in ((-5, -5), (5, -5), (5, 5), (-5, 5)):
                p = [0.0, 0.0, 0.0]
                p[axis] = side
                p[(axis + 1) % 3], p[(axis + 2) % 3] = a, b
                quad.append(p)
            verts += [quad[0] + quad[1] + quad[2], quad[0] + quad[2] + quad[3]]
    doc["surfaces"] = [{"id": i, "class_id": 0, "vertices": v} for i, v in enumerate(verts)]
    doc["bounds"] = [-5, -5, -5, 5, 5, 5]
    return environment_from_dict(doc)


@pytest.mark.parametrize("kmax", [0, 1, 3])
def test_mirror_box_respects_limit(kmax):
    env = mirror_box()
    res = trace_paths(env, TxConfig((0.3, -1, 0.2)), [RxConfig((2, 1.5, -1))], Mirror(-1.0),
                      limits=TraceLimits(kmax, -200.0), angular_spacing=math.radians(2))[0]
    assert res
    assert max(p.k for p in res) <= kmax
    if kmax == 3:
        assert max(p.k for p in res) == 3


def test_power_floor_terminates():
    env = mirror_box()
    res = trace_paths(env, TxConfig((0.3, -1, 0.2)), [RxConfig((2, 1.5, -1))], Mirror(-0.1),
                      limits=TraceLimits(3, -30.0), angular_spacing=math.radians(2))[0]
    # 0.1**2 is -40 dB, so rays die after their second interaction
    assert max(p.k for p in res) <= 2


def test_energy_non_increasing(canyon):
    oracle = FresnelOracle(canyon, "dry")
    rxs = [RxConfig(p) for p in street_rx_grid(3, 3)]
    res = trace_multi(canyon, [TxConfig(TOY_TX)], rxs, oracle, angular_spacing=math.radians(1.0))
    paths = [p for v in res.values() for p in v if p.k >= 1]
    assert paths
    cum, _, coeffs = walk_paths(canyon, [TxConfig(TOY_TX)], paths, oracle)
    for c in coeffs:
        mags = np.cumprod(np.abs(c))
        assert np.all(np.diff(mags) <= 1e-15)
        assert np.all(np.abs(c) <= 1 + 1e-12)


def test_determinism_and_unique_sequences(canyon):
    oracle = FresnelOracle(canyon, "dry")
    rxs = [RxConfig(p) for p in street_rx_grid(2, 2)]
    a = trace_multi(canyon, [TxConfig(TOY_TX)], rxs, oracle, angular_spacing=math.radians(1.0))
    b = trace_multi(canyon, [TxConfig(TOY_TX)], rxs, oracle, angular_spacing=math.radians(1.0))
    for key in a:
        assert [p.surfaces for p in a[key]] == [p.surfaces for p in b[key]]
        assert [p.cum_gamma for p in a[key]] == [p.cum_gamma for p in b[key]]
        planes = [p.planes for p in a[key]]
        assert len(planes) == len(set(planes))


def test_multi_tx_equals_separate_traces(canyon):
    oracle = FresnelOracle(canyon, "dry")
    txs = [TxConfig(TOY_TX), TxConfig((10.0, 3.0, 6.0))]
    rxs = [RxConfig(p) for p in street_rx_grid(2, 2)]
    joint = trace_multi(canyon, txs, rxs, oracle, angular_spacing=math.radians(1.0))
    for ti, tx in enumerate(txs):
        alone = trace_paths(canyon, tx, rxs, oracle, angular_spacing=math.radians(1.0))
        for rj in range(len(rxs)):
            assert [p.surfaces for p in joint[(ti, rj)]] == [p.surfaces for p in alone[rj]]


def test_walk_reproduces_traced_coefficients(canyon):
    oracle = FresnelOracle(canyon, "wet")
    tx = TxConfig(TOY_TX)
    rxs = [RxConfig(p) for p in street_rx_grid(2, 3)]
    res = trace_multi(canyon, [tx], rxs, oracle, angular_spacing=math.radians(1.0))
    paths = [p for v in res.values() for p in v if p.k]
    cum, geoms, _ = walk_paths(canyon, [tx], paths, oracle)
    for p, c, g in zip(paths, cum, geoms):
        # the walk uses the exact segment directions, the trace the launched ones
        assert abs(abs(c) - abs(p.cum_gamma)) < 1e-2 * abs(p.cum_gamma)
        assert [x.surface_id for x in g] == list(p.surfaces)


def test_first_bounce_offset_equals_psi(canyon):
    # vertical Tx field: the offset angle is the incident polarization angle
    oracle = FresnelOracle(canyon, "dry")
    res = trace_multi(canyon, [TxConfig(TOY_TX)], [RxConfig(p) for p in street_rx_grid(3, 3)], oracle,
                      angular_spacing=math.radians(1.0))
    firsts = [p.interactions[0] for v in res.values() for p in v if p.k]
    assert firsts
    for g in firsts:
        assert g.gamma_offset == pytest.approx(g.psi, abs=1e-9)


def test_image_points_single_plane(rng):
    for _ in range(20):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        t1 = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        off = rng.uniform(-1, 1)
        tx = off * n + rng.uniform(0.5, 3) * n + rng.uniform(-3, 3) * t1 + rng.uniform(-3, 3) * t2
        rx = off * n + rng.uniform(0.5, 3) * n + rng.uniform(-3, 3) * t1 + rng.uniform(-3, 3) * t2
        got = image_points(tx, rx, [n], [off])
        ref, _ = image_reflection(tx, rx, n, off)
        assert got is not None
        assert np.allclose(got[0], ref, atol=1e-9)
    # opposite sides of the plane: no reflection path
    assert image_points((0, 0, 1.0), (0, 0, -1.0), [np.array([0, 0, 1.0])], [0.0]) is None


def test_render_cir_from_trace_is_sorted(canyon):
    tx, rx = TxConfig(TOY_TX), RxConfig((5.0, 2.0, 1.5))
    paths = trace_paths(canyon, tx, [rx], FresnelOracle(canyon), angular_spacing=math.radians(1.0), refine=True)[0]
    cir = render_cir(paths, tx, rx)
    taus = [m.tau for m in cir.mpcs]
    assert taus == sorted(taus)
    assert len({m.surfaces for m in cir.mpcs}) == len(cir.mpcs)
