"""Evaluation metrics over matched predicted/label MPC sets and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySet, NoMatchedPaths, NonPositiveMagnitude
from .physics import Cir, Mpc
from .training import GEO_FLOOR, match_paths, wrap_angle

DB_FLOOR = -120.0


def to_db(linear: float) -> float:
    """``10 log10`` with a floor of -120 dB for (near-)zero linear errors."""
    if linear <= 10.0 ** (DB_FLOOR / 10.0):
        return DB_FLOOR
    return 10.0 * math.log10(linear)


def _nmse_scalar(x_hat: float, x: float) -> float:
    return (x_hat - x) ** 2 / max(x * x, GEO_FLOOR)


def _nmse_angle(hat, ref) -> float:
    d_az = float(wrap_angle(hat[0] - ref[0]))
    d_el = hat[1] - ref[1]
    return (d_az * d_az + d_el * d_el) / max(ref[0] ** 2 + ref[1] ** 2, GEO_FLOOR)


def path_error(pred: Mpc, label: Mpc, include_aod: bool = True) -> dict:
    """Element-wise NMSEs of one matched path."""
    e = {"tau": _nmse_scalar(pred.tau, label.tau), "aoa": _nmse_angle(pred.aoa, label.aoa),
         "a": _nmse_scalar(abs(pred.a), abs(label.a))}
    if include_aod:
        e["aod"] = _nmse_angle(pred.aod, label.aod)
    return e


def overall_error_linear(pairs, include_aod: bool = True) -> float:
    if not pairs:
        raise NoMatchedPaths("overall error needs at least one matched path")
    return float(np.mean([sum(path_error(p, l, include_aod).values()) for p, l in pairs]))


def overall_error(pairs, include_aod: bool = True) -> float:
    """Mean over matched paths of the summed element NMSEs, in dB."""
    return to_db(overall_error_linear(pairs, include_aod))


def rcm_values(pairs):
    """``(predicted, label)`` cumulative-coefficient magnitudes in dB for matched interaction paths."""
    hat, ref = [], []
    for p, l in pairs:
        if l.k == 0:
            continue
        if p.cum_gamma_mag <= 0.0 or l.cum_gamma_mag <= 0.0:
            raise NonPositiveMagnitude("cumulative reflection magnitude must be positive")
        hat.append(20.0 * math.log10(p.cum_gamma_mag))
        ref.append(20.0 * math.log10(l.cum_gamma_mag))
    return np.array(hat), np.array(ref)


def rcm_error(pairs) -> float:
    """Per-path NMSE of the cumulative reflection magnitude in dB, averaged, in dB.

    Label line-of-sight paths carry no reflection and are skipped.
    """
    hat, ref = rcm_values(pairs)
    if len(ref) == 0:
        raise NoMatchedPaths("no matched paths with interactions")
    return to_db(float(np.mean((hat - ref) ** 2 / np.maximum(ref * ref, GEO_FLOOR))))


def avg_delay(mpcs) -> float:
    """Power-weighted mean delay in seconds with ``p = |a|^2``."""
    if not mpcs:
        raise EmptySet("average delay of an empty MPC set")
    p = np.array([abs(m.a) ** 2 for m in mpcs])
    tau = np.array([m.tau for m in mpcs])
    total = float(p.sum())
    if not total > 0.0:
        raise EmptySet("MPC set has zero total power")
    return float(np.sum(p * tau) / total)


def avg_delay_error(pair_sets) -> float:
    """Mean absolute difference of average delays over ``(predicted, label)`` set pairs, in ns."""
    if not pair_sets:
        raise EmptySet("no Tx-Rx pairs")
    return float(np.mean([abs(avg_delay(p) - avg_delay(l)) for p, l in pair_sets])) * 1e9


@dataclass
class PairDetail:
    tx_id: int
    rx_id: int
    n_pred: int
    n_label: int
    n_matched: int
    match_cost: float
    pairs: list  # (pred index, label index)
    avg_delay_pred_ns: float = float("nan")
    avg_delay_label_ns: float = float("nan")


@dataclass
class MetricsReport:
    overall_error_db: float
    rcm_error_db: float
    avg_delay_error_ns: float
    matched_fraction: float
    n_pairs: int
    n_matched_paths: int
    include_aod: bool = True
    details: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_cirs(pred: dict | list, label: dict | list, include_aod: bool = True) -> MetricsReport:
    """Match each Tx–Rx pair's MPCs and compute all three metrics.

    ``pred`` and ``label`` are CIR lists or ``{(tx_id, rx_id): Cir}`` maps;
    pairs are joined on ``(tx_id, rx_id)``.
    """
    pmap = pred if isinstance(pred, dict) else {(c.tx_id, c.rx_id): c for c in pred}
    lmap = label if isinstance(label, dict) else {(c.tx_id, c.rx_id): c for c in label}
    matched, sets, details = [], [], []
    n_label = 0
    for key in sorted(lmap):
        lc = lmap[key]
        pc = pmap.get(key, Cir(key[0], key[1], []))
        m = match_paths(pc.mpcs, lc.mpcs)
        n_label += len(lc.mpcs)
        matched += [(pc.mpcs[i], lc.mpcs[j]) for i, j in m.pairs]
        d = PairDetail(key[0], key[1], len(pc.mpcs), len(lc.mpcs), len(m.pairs), m.cost, m.pairs)
        if pc.mpcs and lc.mpcs:
            try:
                tp, tl = avg_delay(pc.mpcs), avg_delay(lc.mpcs)
            except EmptySet:
                pass
            else:
                sets.append((pc.mpcs, lc.mpcs))
                d.avg_delay_pred_ns, d.avg_delay_label_ns = tp * 1e9, tl * 1e9
        details.append(d)
    if not matched:
        raise NoMatchedPaths("no matched paths across all pairs")
    try:
        rcm = rcm_error(matched)
    except NoMatchedPaths:
        rcm = float("nan")
    return MetricsReport(
        overall_error_db=overall_error(matched, include_aod), rcm_error_db=rcm,
        avg_delay_error_ns=avg_delay_error(sets) if sets else float("nan"),
        matched_fraction=len(matched) / n_label if n_label else 0.0,
        n_pairs=len(lmap), n_matched_paths=len(matched), include_aod=include_aod, details=details,
    )


def write_report(report: MetricsReport, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
    """Write ``<stem>.json`` (headline numbers, per-pair breakdown, match manifest) and ``<stem>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / f"{stem}.json"
    jpath.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    cpath = out / f"{stem}.csv"
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tx_id", "rx_id", "n_pred", "n_label", "n_matched", "match_cost",
                    "avg_delay_pred_ns", "avg_delay_label_ns"])
        for d in report.details:
            w.writerow([d.tx_id, d.rx_id, d.n_pred, d.n_label, d.n_matched, repr(d.match_cost),
                        repr(d.avg_delay_pred_ns), repr(d.avg_delay_label_ns)])
    return jpath, cpath
