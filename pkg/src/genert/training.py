"""Datasets and the two training phases: layer-wise pre-training and end-to-end training."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyDataset, InsufficientGeometry, ScheduleError
from .geometry import RxConfig, TxConfig, intersect_batch
from .nn import Adam, nmse, sincos_mse
from .physics import Cir, FresnelOracle, Mpc, polarization_angle, render_cir
from .predictor import Network, NeuralInteractionModel
from .scene import Environment, Humidity
from .tracer import COVERING_CAPTURE_FACTOR, TraceLimits, initial_fields, make_batch, trace_multi

log = logging.getLogger(__name__)

ALPHA_RANGE = (math.radians(2.0), math.radians(88.0))
GEO_FLOOR = 1e-12
# Matched pairs enter the end-to-end loss only if their interaction counts agree
# and their geometric cost is below this gate.
MATCH_GATE = 0.05


class Polarization(str, enum.Enum):
    PERP = "Perp"
    PAR = "Par"


@dataclass(frozen=True)
class PreTrainSample:
    zeta: int
    alpha: float
    beta: float
    gamma_component: float
    polarization: Polarization


@dataclass
class PolarizedSet:
    """Column-wise single-polarization samples (one row per single-reflection path)."""

    polarization: Polarization
    zeta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray
    tx: np.ndarray
    rx: np.ndarray
    point: np.ndarray

    def __len__(self):
        return len(self.zeta)

    def subset(self, idx) -> "PolarizedSet":
        return PolarizedSet(self.polarization, *(getattr(self, f)[idx] for f in
                                                  ("zeta", "alpha", "beta", "gamma", "psi", "tx", "rx", "point")))

    def samples(self) -> list[PreTrainSample]:
        return [PreTrainSample(int(z), float(a), float(b), float(g), self.polarization)
                for z, a, b, g in zip(self.zeta, self.alpha, self.beta, self.gamma)]

    def split(self, train_fraction: float, rng: np.random.Generator):
        perm = rng.permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        return self.subset(np.sort(perm[:cut])), self.subset(np.sort(perm[cut:]))


def _tangent_frame(n, rng):
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return math.cos(phi) * u + math.sin(phi) * w


def _clear(env, a, b, exclude) -> bool:
    seg = b - a
    length = float(np.linalg.norm(seg))
    h = intersect_batch(a[None], (seg / length)[None], env, np.array([exclude]))
    return not (h.hit[0] and h.distance[0] < length - 1e-6)


def build_polarized_datasets(env: Environment, classes=None, budget: int = 10_000, seed: int = 0,
                             humidity: Humidity | str = Humidity.DRY, frequency_hz: float = 3.5e9,
                             distance_range=(2.0, 12.0), max_tries: int = 200):
    """Single-reflection samples with pure parallel / perpendicular polarization.

    For each class and polarization, incidence angles are stratified over
    [2 deg, 88 deg].  Each sample places the reflection point on a random
    surface of the class, picks a random in-plane propagation direction and
    sets Tx and Rx on the specular rays at a random distance, backing off
    until neither leg is blocked.  The Tx E-field is aligned with the
    parallel (or perpendicular) frame vector, so the incident field has
    psi = 0 (or pi/2).  Labels come from :class:`FresnelOracle`.

    Returns ``(S_perp, S_par)``.
    """
    rng = np.random.default_rng(seed)
    classes = [c.id for c in env.classes] if classes is None else list(classes)
    if not classes:
        raise InsufficientGeometry("no semantic classes to sample")
    oracle = FresnelOracle(env, humidity, frequency_hz)
    per_bucket = budget // (2 * len(classes))
    extra = budget - per_bucket * 2 * len(classes)
    areas = 0.5 * np.linalg.norm(np.cross(env.edge1, env.edge2), axis=1)
    out = {Polarization.PERP: [], Polarization.PAR: []}
    bucket = 0
    for cid in classes:
        surf = np.nonzero(env.surface_class == cid)[0]
        if len(surf) == 0:
            raise InsufficientGeometry(f"class {cid} has no surfaces")
        weights = areas[surf] / areas[surf].sum()
        for pol in (Polarization.PERP, Polarization.PAR):
            n_b = per_bucket + (1 if bucket < extra else 0)
            bucket += 1
            lo, hi = ALPHA_RANGE
            alphas = lo + (hi - lo) * (np.arange(n_b) + rng.uniform(0.0, 1.0, n_b)) / max(n_b, 1)
            for alpha in alphas:
                for _ in range(max_tries):
                    s = int(surf[rng.choice(len(surf), p=weights)])
                    b1, b2 = rng.uniform(0.0, 1.0, 2)
                    if b1 + b2 > 1.0:
                        b1, b2 = 1.0 - b1, 1.0 - b2
                    b1, b2 = 0.02 + 0.96 * b1, 0.02 + 0.96 * b2
                    p = env.v0[s] + b1 * env.edge1[s] + b2 * env.edge2[s]
                    n = env.normals[s]
                    t = _tangent_frame(n, rng)
                    d_in = math.sin(alpha) * t - math.cos(alpha) * n
                    d_out = math.sin(alpha) * t + math.cos(alpha) * n
                    r = rng.uniform(*distance_range)
                    for _halve in range(6):
                        tx, rx = p - r * d_in, p + r * d_out
                        if _clear(env, tx, p, -1) and _clear(env, p, rx, s):
                            break
                        r *= 0.5
                    else:
                        continue
                    if r < 0.05:
                        continue
                    out[pol].append((cid, alpha, s, p, d_in, tx, rx))
                    break
                else:
                    raise InsufficientGeometry(f"class {cid}: no unobstructed placement found")

    sets = {}
    for pol, rows in out.items():
        if not rows:
            raise InsufficientGeometry("empty polarized set")
        zeta = np.array([r[0] for r in rows], dtype=np.int64)
        sidx = np.array([r[2] for r in rows], dtype=np.int64)
        pts = np.array([r[3] for r in rows])
        d_in = np.array([r[4] for r in rows])
        normals = env.normals[sidx]
        e_perp = np.cross(normals, d_in)
        e_perp /= np.linalg.norm(e_perp, axis=1, keepdims=True)
        e_field = e_perp if pol is Polarization.PERP else np.cross(e_perp, d_in)
        fields = initial_fields(e_field, d_in)
        batch = make_batch(env, d_in, pts, sidx, fields, np.ones(len(rows), complex))
        beta, gamma, _ = oracle(batch)
        psi = np.array([polarization_angle(normals[i], d_in[i], e_field[i])[0] for i in range(len(rows))])
        sets[pol] = PolarizedSet(pol, zeta, batch.alpha, np.asarray(beta, float), np.abs(gamma), psi,
                                 np.array([r[5] for r in rows]), np.array([r[6] for r in rows]), pts)
    return sets[Polarization.PERP], sets[Polarization.PAR]


# ----------------------------------------------------------------------------- pre-training

PRETRAIN_STAGES = ("par", "perp", "angle")
STAGE_GROUPS = {"par": ("Embedding", "LatentMlp", "ParBranch"), "perp": ("PerpBranch",), "angle": ("AngleBranch",)}


@dataclass
class Schedule:
    epochs: int
    lr: float
    halve_every: int
    batch_size: int = 64
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.halve_every)

    def validate(self):
        if self.epochs < 0 or self.lr <= 0 or self.halve_every < 1 or self.batch_size < 1:
            raise ScheduleError(f"invalid schedule {self}")
        return self


@dataclass
class PretrainSchedule(Schedule):
    epochs: int = 400
    lr: float = 1e-3
    halve_every: int = 80
    stages: tuple = PRETRAIN_STAGES
    val_fraction: float = 0.2

    def validate(self):
        super().validate()
        if tuple(self.stages) != PRETRAIN_STAGES:
            raise ScheduleError(f"stages must run in order {PRETRAIN_STAGES}, got {tuple(self.stages)}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ScheduleError("val_fraction must be in (0, 1)")
        return self


@dataclass
class PretrainResult:
    curves: dict = field(default_factory=dict)  # stage -> {"train": [...], "val": [...]}
    val_nmse_par: float = float("nan")
    val_nmse_perp: float = float("nan")
    val_angle_loss: float = float("nan")
    val_beta_mae_deg: float = float("nan")
    stage_snapshots: dict = field(default_factory=dict)  # stage -> params after the stage


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _step(net: Network, opt: Adam, lr: float):
    for name in sorted(net.trainable):
        opt.step(net.groups[name], lr)


def _sincos(beta):
    return np.stack([np.sin(beta), np.cos(beta)], axis=1)


def pretrain(net: Network, s_par: PolarizedSet, s_perp: PolarizedSet, schedule: PretrainSchedule = PretrainSchedule(),
             val: tuple | None = None, record_snapshots: bool = False):
    """Greedy layer-wise pre-training: parallel branch (+ shared trunk), perpendicular branch, angle branch.

    ``val`` is an optional ``(val_par, val_perp)`` pair; otherwise a
    ``schedule.val_fraction`` split of each set is held out.
    """
    schedule.validate()
    if len(s_par) == 0 or len(s_perp) == 0:
        raise EmptyDataset("pre-training needs non-empty parallel and perpendicular sets")
    rng = np.random.default_rng(schedule.seed)
    if val is None:
        s_par, v_par = s_par.split(1.0 - schedule.val_fraction, rng)
        s_perp, v_perp = s_perp.split(1.0 - schedule.val_fraction, rng)
    else:
        v_par, v_perp = val
    if min(len(s_par), len(s_perp), len(v_par), len(v_perp)) == 0:
        raise EmptyDataset("a training or validation split is empty")
    opt = Adam()
    result = PretrainResult()
    saved_trainable = net.trainable

    def feats(s):
        return net.features(s.alpha, s.zeta)[0]

    for stage in schedule.stages:
        net.set_trainable(STAGE_GROUPS[stage])
        for name in STAGE_GROUPS[stage]:
            opt.reset(net.groups[name])
        srng = np.random.default_rng([schedule.seed, PRETRAIN_STAGES.index(stage)])
        curve = {"train": [], "val": []}
        if stage == "par":
            for epoch in range(schedule.epochs):
                lr, tot = schedule.lr_at(epoch), 0.0
                for b in _batches(len(s_par), schedule.batch_size, srng):
                    net.zero_grad()
                    h, c = net.features(s_par.alpha[b], s_par.zeta[b])
                    y, cb = net.par.forward(h)
                    loss, dy = nmse(y[:, 0], s_par.gamma[b])
                    dh = net.par.backward(dy[:, None], cb, True)
                    net.features_backward(dh, c)
                    _step(net, opt, lr)
                    tot += loss * len(b)
                curve["train"].append(tot / len(s_par))
                curve["val"].append(nmse(net.par.forward(feats(v_par))[0][:, 0], v_par.gamma)[0])
        elif stage == "perp":
            h_tr, h_va = feats(s_perp), feats(v_perp)  # trunk is frozen from here on
            for epoch in range(schedule.epochs):
                lr, tot = schedule.lr_at(epoch), 0.0
                for b in _batches(len(s_perp), schedule.batch_size, srng):
                    net.zero_grad()
                    y, cb = net.perp.forward(h_tr[b])
                    loss, dy = nmse(y[:, 0], s_perp.gamma[b])
                    net.perp.backward(dy[:, None], cb, False)
                    _step(net, opt, lr)
                    tot += loss * len(b)
                curve["train"].append(tot / len(s_perp))
                curve["val"].append(nmse(net.perp.forward(h_va)[0][:, 0], v_perp.gamma)[0])
        else:
            h_tr = np.concatenate([feats(s_par), feats(s_perp)])
            sc_tr = _sincos(np.concatenate([s_par.beta, s_perp.beta]))
            h_va = np.concatenate([feats(v_par), feats(v_perp)])
            sc_va = _sincos(np.concatenate([v_par.beta, v_perp.beta]))
            for epoch in range(schedule.epochs):
                lr, tot = schedule.lr_at(epoch), 0.0
                for b in _batches(len(h_tr), schedule.batch_size, srng):
                    net.zero_grad()
                    u, cache = net.angle_forward(h_tr[b])
                    loss, du = sincos_mse(u, sc_tr[b])
                    net.angle_backward(du, cache, False)
                    _step(net, opt, lr)
                    tot += loss * len(b)
                curve["train"].append(tot / len(h_tr))
                curve["val"].append(sincos_mse(net.angle_forward(h_va)[0], sc_va)[0])
        result.curves[stage] = curve
        if record_snapshots:
            result.stage_snapshots[stage] = net.snapshot()
        log.info("pretrain stage %s: final val loss %.3e", stage, curve["val"][-1] if curve["val"] else float("nan"))

    net.zero_grad()
    net.set_trainable(saved_trainable)
    ev = evaluate_pretraining(net, v_par, v_perp)
    result.val_nmse_par, result.val_nmse_perp = ev["nmse_par"], ev["nmse_perp"]
    result.val_angle_loss, result.val_beta_mae_deg = ev["angle_loss"], ev["beta_mae_deg"]
    return net, result


def evaluate_pretraining(net: Network, v_par: PolarizedSet, v_perp: PolarizedSet) -> dict:
    """Held-out branch NMSEs (linear), angle loss and mean |beta_hat - beta| in degrees."""
    out_par = net.predict(v_par.alpha, v_par.zeta, 0.0, 1.0)
    out_perp = net.predict(v_perp.alpha, v_perp.zeta, 0.0, 1.0)
    beta_hat = np.concatenate([out_par.beta, out_perp.beta])
    beta = np.concatenate([v_par.beta, v_perp.beta])
    return {
        "nmse_par": nmse(out_par.gamma_par_mag, v_par.gamma)[0],
        "nmse_perp": nmse(out_perp.gamma_perp_mag, v_perp.gamma)[0],
        "angle_loss": sincos_mse(_sincos(beta_hat), _sincos(beta))[0],
        "beta_mae_deg": float(np.degrees(np.mean(np.abs(beta_hat - beta)))),
    }


# ----------------------------------------------------------------------------- matching


@dataclass
class Matching:
    pairs: list  # (predicted index, label index)
    cost: float
    unmatched_pred: list = field(default_factory=list)
    unmatched_label: list = field(default_factory=list)


def wrap_angle(x):
    """Wrap onto (-pi, pi]."""
    y = np.mod(np.asarray(x, float) + math.pi, 2.0 * math.pi) - math.pi
    return np.where(y == -math.pi, math.pi, y)


def geo_loss(pred: Mpc, label: Mpc) -> float:
    """Delay plus arrival-angle discrepancy, each normalized by the label's squared norm."""
    tau = (pred.tau - label.tau) ** 2 / max(label.tau**2, GEO_FLOOR)
    d_az = float(wrap_angle(pred.aoa[0] - label.aoa[0]))
    d_el = pred.aoa[1] - label.aoa[1]
    phi = (d_az * d_az + d_el * d_el) / max(label.aoa[0] ** 2 + label.aoa[1] ** 2, GEO_FLOOR)
    return tau + phi


def geo_cost_matrix(predicted, labels) -> np.ndarray:
    if not predicted or not labels:
        return np.zeros((len(predicted), len(labels)))
    pt = np.array([m.tau for m in predicted])
    pa = np.array([m.aoa for m in predicted]).reshape(-1, 2)
    lt = np.array([m.tau for m in labels])
    la = np.array([m.aoa for m in labels]).reshape(-1, 2)
    tau = (pt[:, None] - lt[None, :]) ** 2 / np.maximum(lt**2, GEO_FLOOR)[None, :]
    d_az = wrap_angle(pa[:, None, 0] - la[None, :, 0])
    d_el = pa[:, None, 1] - la[None, :, 1]
    phi = (d_az**2 + d_el**2) / np.maximum(np.sum(la**2, axis=1), GEO_FLOOR)[None, :]
    return tau + phi


def match_paths(predicted, labels) -> Matching:
    """Minimum-total-cost assignment between predicted and label MPCs (min-cardinality when sizes differ)."""
    cost = geo_cost_matrix(predicted, labels)
    if cost.size == 0:
        return Matching([], 0.0, list(range(len(predicted))), list(range(len(labels))))
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    total = float(sum(cost[r, c] for r, c in pairs))
    um_p = sorted(set(range(len(predicted))) - set(rows.tolist()))
    um_l = sorted(set(range(len(labels))) - set(cols.tolist()))
    if um_p or um_l:
        log.debug("matching left %d predicted and %d label paths unmatched", len(um_p), len(um_l))
    return Matching(pairs, total, um_p, um_l)


# ----------------------------------------------------------------------------- end-to-end


@dataclass
class EndToEndSample:
    env: Environment
    tx: TxConfig
    rx: RxConfig
    labels: list  # Mpc sorted by tau
    tx_id: int = 0
    rx_id: int = 0


@dataclass
class EndToEndDataset:
    env: Environment
    txs: list
    rxs: list
    samples: list
    split: dict  # "train" / "val" / "test" -> list of sample indices
    humidity: Humidity = Humidity.DRY
    seed: int = 0

    def part(self, name: str) -> list:
        return [self.samples[i] for i in self.split[name]]


def split_by_rx(n_rx: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Assign receiver indices to train/val/test."""
    perm = np.random.default_rng(seed).permutation(n_rx)
    n_tr = int(round(fractions[0] * n_rx))
    n_va = int(round(fractions[1] * n_rx))
    return {"train": sorted(perm[:n_tr].tolist()), "val": sorted(perm[n_tr:n_tr + n_va].tolist()),
            "test": sorted(perm[n_tr + n_va:].tolist())}


def build_e2e_dataset(env: Environment, txs, rxs, humidity: Humidity | str = Humidity.DRY, seed: int = 0,
                      limits: TraceLimits = TraceLimits(), angular_spacing: float = math.radians(0.4),
                      frequency_hz: float | None = None,
                      capture_factor: float = COVERING_CAPTURE_FACTOR) -> EndToEndDataset:
    """Oracle-labelled CIRs for every Tx–Rx pair, split 80/10/10 by receiver."""
    txs, rxs = list(txs), list(rxs)
    humidity = Humidity.parse(humidity)
    freq = frequency_hz or (txs[0].frequency_hz if txs else 3.5e9)
    oracle = FresnelOracle(env, humidity, freq)
    traced = trace_multi(env, txs, rxs, oracle, limits, angular_spacing, refine=True,
                         capture_factor=capture_factor)
    split_rx = split_by_rx(len(rxs), seed)
    samples, split = [], {"train": [], "val": [], "test": []}
    where = {rj: name for name, ids in split_rx.items() for rj in ids}
    for ti, tx in enumerate(txs):
        for rj, rx in enumerate(rxs):
            cir = render_cir(traced[(ti, rj)], tx, rx, ti, rj)
            split[where[rj]].append(len(samples))
            samples.append(EndToEndSample(env, tx, rx, cir.mpcs, ti, rj))
    return EndToEndDataset(env, txs, rxs, samples, split, humidity, seed)


@dataclass
class E2ESchedule(Schedule):
    epochs: int = 200
    lr: float = 4e-4
    halve_every: int = 50


TRAINABLE_PRESETS = {
    "fusion": frozenset({"FusionModule"}),
    "fusion+branches": frozenset({"FusionModule", "PerpBranch", "ParBranch"}),
    "all": frozenset({"Embedding", "LatentMlp", "AngleBranch", "PerpBranch", "ParBranch", "FusionModule"}),
}


@dataclass
class _PathTable:
    """Matched non-LOS paths flattened for vectorized re-evaluation of interaction coefficients."""

    alpha: np.ndarray  # (P, K)
    zeta: np.ndarray
    gamma_offset: np.ndarray
    mask: np.ndarray  # (P, K) bool
    scale: np.ndarray  # (P,) |a| / |prod Gamma| of the predicted path
    target: np.ndarray  # (P,) label |a|
    sample: np.ndarray  # (P,) sample index the path belongs to

    def __len__(self):
        return len(self.scale)


@dataclass
class _Traced:
    cirs: list  # predicted Cir per sample
    matchings: list
    table: _PathTable
    pred_index: list  # per table row: (sample, predicted mpc index)
    no_match: int


def _trace_samples(net: Network, samples: list, limits: TraceLimits, angular_spacing: float,
                   capture_factor: float = COVERING_CAPTURE_FACTOR, gate: float = MATCH_GATE) -> _Traced:
    model = NeuralInteractionModel(net)
    cirs, matchings, rows, no_match = [], [], [], 0
    by_tx: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_tx.setdefault(s.tx_id, []).append(i)
    traced_paths = [None] * len(samples)
    for tid in sorted(by_tx):
        idx = by_tx[tid]
        res = trace_multi(samples[idx[0]].env, [samples[idx[0]].tx], [samples[i].rx for i in idx], model,
                          limits, angular_spacing, capture_factor=capture_factor)
        for j, i in enumerate(idx):
            traced_paths[i] = res[(0, j)]
    kmax = max(1, limits.max_interactions)
    alpha, zeta, goff, mask, scale, target, owner = [], [], [], [], [], [], []
    for i, s in enumerate(samples):
        paths = traced_paths[i]
        cir = render_cir(paths, s.tx, s.rx, s.tx_id, s.rx_id)
        paths_by_key = {tuple(p.surfaces): p for p in paths}
        m = match_paths(cir.mpcs, s.labels)
        cirs.append(cir)
        matchings.append(m)
        cost = geo_cost_matrix(cir.mpcs, s.labels)
        used = 0
        for pi, li in m.pairs:
            mpc, lab = cir.mpcs[pi], s.labels[li]
            if mpc.k == 0 or mpc.k != lab.k or cost[pi, li] > gate:
                continue
            p = paths_by_key[tuple(mpc.surfaces)]
            a = np.zeros(kmax)
            z = np.zeros(kmax, np.int64)
            g = np.zeros(kmax)
            mk = np.zeros(kmax, bool)
            for lv, ig in enumerate(p.interactions):
                a[lv], z[lv], g[lv], mk[lv] = ig.alpha, ig.class_id, ig.gamma_offset, True
            alpha.append(a)
            zeta.append(z)
            goff.append(g)
            mask.append(mk)
            scale.append(abs(mpc.a) / max(mpc.cum_gamma_mag, 1e-300))
            target.append(abs(lab.a))
            owner.append(i)
            rows.append((i, pi))
            used += 1
        if used == 0:
            no_match += 1
    table = _PathTable(np.array(alpha).reshape(-1, kmax), np.array(zeta, np.int64).reshape(-1, kmax),
                       np.array(goff).reshape(-1, kmax), np.array(mask, bool).reshape(-1, kmax),
                       np.array(scale), np.array(target), np.array(owner, np.int64))
    return _Traced(cirs, matchings, table, rows, no_match)


def _path_products(net: Network, tb: _PathTable, rows, train: bool):
    """Forward the coefficient products of ``rows``; returns (prod, per-level caches)."""
    n = len(rows)
    K = tb.mask.shape[1]
    cum = np.ones(n)
    levels = []
    need_branch_grad = train and bool({"PerpBranch", "ParBranch"} & net.trainable)
    for lv in range(K):
        live = np.nonzero(tb.mask[rows, lv])[0]
        if len(live) == 0:
            break
        r = rows[live]
        h, _ = net.features(tb.alpha[r, lv], tb.zeta[r, lv])
        gp, cp = net.perp.forward(h)
        gpar, cpar = net.par.forward(h)
        x = net.fusion_input(gp, gpar, cum[live], tb.gamma_offset[r, lv])
        g, cf = net.fusion.forward(x)
        g = g[:, 0]
        levels.append((live, g, cf, (cp, cpar) if need_branch_grad else None))
        cum[live] = cum[live] * g  # the next level sees this product as a detached input
    return cum, levels


def _train_batch(net: Network, tb: _PathTable, rows, opt: Adam, lr: float) -> float:
    net.zero_grad()
    prod, levels = _path_products(net, tb, rows, train=True)
    pred = tb.scale[rows] * prod
    tgt = tb.target[rows]
    err = (pred - tgt) / tgt
    loss = float(np.mean(err**2))
    dpred = 2.0 * err / tgt / len(rows)
    dprod = dpred * tb.scale[rows]
    for live, g, cf, branch in levels:
        # d prod / d g_level = prod / g_level (g_level is a sigmoid output, strictly positive)
        dg = dprod[live] * prod[live] / g
        need_in = branch is not None
        dx = net.fusion.backward(dg[:, None], cf, need_in)
        if need_in:
            cp, cpar = branch
            if "PerpBranch" in net.trainable:
                net.perp.backward(dx[:, 0:1], cp, False)
            if "ParBranch" in net.trainable:
                net.par.backward(dx[:, 1:2], cpar, False)
    _step(net, opt, lr)
    return loss


def _eval_loss(net: Network, tb: _PathTable) -> float:
    if len(tb) == 0:
        return float("nan")
    rows = np.arange(len(tb))
    prod, _ = _path_products(net, tb, rows, train=False)
    return float(np.mean(((tb.scale * prod - tb.target) / tb.target) ** 2))


def _refresh_cirs(net: Network, tr: _Traced, samples: list) -> list:
    """Predicted CIRs with coefficients re-evaluated by the current network (geometry unchanged)."""
    tb = tr.table
    prod, _ = _path_products(net, tb, np.arange(len(tb)), train=False) if len(tb) else (np.zeros(0), None)
    new = [Cir(c.tx_id, c.rx_id, [Mpc(**vars(m)) for m in c.mpcs], c.frequency_hz) for c in tr.cirs]
    for row, (si, pi) in enumerate(tr.pred_index):
        m = new[si].mpcs[pi]
        old = m.cum_gamma_mag
        m.a = m.a * (prod[row] / old) if old > 0 else m.a
        m.cum_gamma_mag = float(prod[row])
    return new


@dataclass
class E2EResult:
    history: dict = field(default_factory=lambda: {"train_loss": [], "val_loss": []})
    baseline_val_loss: float = float("nan")
    final_val_loss: float = float("nan")
    no_match: int = 0
    val_pred_cirs: list = field(default_factory=list)
    val_label_cirs: list = field(default_factory=list)


def train_end_to_end(net: Network, train_samples: list, schedule: E2ESchedule = E2ESchedule(),
                     trainable_groups=TRAINABLE_PRESETS["fusion"], val_samples: list = (),
                     limits: TraceLimits = TraceLimits(), angular_spacing: float = math.radians(0.4),
                     capture_factor: float = COVERING_CAPTURE_FACTOR, gate: float = MATCH_GATE):
    """Fit interaction coefficients to receiver-side labels along neural-traced, label-matched paths.

    Geometry and matching are fixed after one neural trace; each step
    re-evaluates the coefficient products of a batch of matched paths and
    minimizes the NMSE of their attenuation magnitudes.  Pairs whose
    interaction counts differ or whose geometric cost exceeds ``gate`` are
    left out of the loss.  Only ``trainable_groups`` are updated.
    """
    schedule.validate()
    if not train_samples:
        raise EmptyDataset("end-to-end training needs samples")
    saved = net.trainable
    tr = _trace_samples(net, list(train_samples), limits, angular_spacing, capture_factor, gate)
    va = _trace_samples(net, list(val_samples), limits, angular_spacing, capture_factor, gate) if val_samples else None
    result = E2EResult(no_match=tr.no_match)
    if tr.no_match:
        log.warning("%d training samples have no matched interaction paths", tr.no_match)
    net.set_trainable(trainable_groups)
    opt = Adam()
    for name in net.trainable:
        opt.reset(net.groups[name])
    rng = np.random.default_rng(schedule.seed)
    if va is not None:
        result.baseline_val_loss = _eval_loss(net, va.table)
    tb = tr.table
    for epoch in range(schedule.epochs):
        lr, tot = schedule.lr_at(epoch), 0.0
        for b in _batches(len(tb), schedule.batch_size, rng):
            tot += _train_batch(net, tb, b, opt, lr) * len(b)
        result.history["train_loss"].append(tot / max(len(tb), 1))
        if va is not None:
            result.history["val_loss"].append(_eval_loss(net, va.table))
    net.zero_grad()
    net.set_trainable(saved)
    if va is not None:
        result.final_val_loss = _eval_loss(net, va.table)
        result.val_pred_cirs = _refresh_cirs(net, va, list(val_samples))
        result.val_label_cirs = [Cir(s.tx_id, s.rx_id, s.labels) for s in val_samples]
    return net, result


def predicted_cirs(net: Network, samples: list, limits: TraceLimits = TraceLimits(),
                   angular_spacing: float = math.radians(0.4),
                   capture_factor: float = COVERING_CAPTURE_FACTOR) -> list:
    """Neural-traced CIRs for each sample."""
    return _trace_samples(net, list(samples), limits, angular_spacing, capture_factor).cirs
