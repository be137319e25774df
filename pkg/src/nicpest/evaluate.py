"""Agreement statistics, error bands, rank correlation, and reports.

All statistics operate on mean-ICP estimation errors in mmHg. Report
files are deterministic for fixed input: floats are printed with six
significant digits and rows follow sorted group order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.stats

from . import util
from .errors import ConfigInvalid, Degenerate, MissingPatientIds, TooFew

LOA_FACTOR = 1.96
BAND_LOW_MMHG = 2.0
BAND_HIGH_MMHG = 6.0


class Level(str, Enum):
    ENTRY = "entry"
    PATIENT = "patient"


@dataclass(frozen=True)
class AgreementStats:
    """Bland-Altman summary of estimate-minus-truth differences."""

    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    n: int

    def to_dict(self) -> dict:
        return {"mean_diff": self.mean_diff, "sd_diff": self.sd_diff,
                "loa_low": self.loa_low, "loa_high": self.loa_high,
                "n": self.n}


@dataclass(frozen=True)
class BandReport:
    """Percentages of errors below 2, in [2, 6), and below 6 mmHg."""

    pct_lt2: float
    pct_2to6: float
    pct_lt6: float
    level: Level
    n: int

    def to_dict(self) -> dict:
        return {"pct_lt2": self.pct_lt2, "pct_2to6": self.pct_2to6,
                "pct_lt6": self.pct_lt6, "level": self.level.value,
                "n": self.n}


@dataclass
class EstimateRecord:
    """One estimation outcome, the row unit consumed by ``report``."""

    entry_id: str
    patient_id: str
    scenario: str
    algorithm: str
    est_mean_icp: float
    true_mean_icp: float | None = None

    @property
    def error(self) -> float | None:
        if self.true_mean_icp is None:
            return None
        return self.est_mean_icp - self.true_mean_icp


def bland_altman(true_vals, est_vals) -> AgreementStats:
    """Limits of agreement for estimate-minus-truth differences.

    Uses the sample standard deviation (n-1 denominator) and the
    conventional 1.96 multiplier.
    """
    t = np.asarray(true_vals, dtype=float)
    e = np.asarray(est_vals, dtype=float)
    if t.shape != e.shape or t.ndim != 1:
        raise ConfigInvalid("inputs must be equal-length 1-D sequences")
    if len(t) < 2:
        raise TooFew("limits of agreement need at least 2 pairs")
    d = e - t
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    return AgreementStats(mean_diff=mean, sd_diff=sd,
                          loa_low=mean - LOA_FACTOR * sd,
                          loa_high=mean + LOA_FACTOR * sd, n=len(d))


def error_bands(errors, level: Level = Level.ENTRY,
                patient_ids=None) -> BandReport:
    """Band percentages of signed estimation errors.

    ENTRY level bands each entry's |error| directly. PATIENT level
    first averages the signed errors within each patient, then bands
    the absolute per-patient means. Bands are <2, [2, 6), and <6 mmHg,
    additive before rounding.
    """
    err = np.asarray(errors, dtype=float)
    if err.ndim != 1 or err.size == 0:
        raise ConfigInvalid("errors must be a non-empty 1-D sequence")
    if level == Level.PATIENT:
        if patient_ids is None or len(patient_ids) != len(err):
            raise MissingPatientIds(
                "patient-level bands need one patient id per error")
        groups = sorted(set(patient_ids))
        ids = np.asarray(patient_ids)
        vals = np.array([float(np.mean(err[ids == p])) for p in groups])
    else:
        vals = err
    a = np.abs(vals)
    n = len(a)
    lt2 = float(np.sum(a < BAND_LOW_MMHG)) * 100.0 / n
    mid = float(np.sum((a >= BAND_LOW_MMHG) & (a < BAND_HIGH_MMHG))) \
        * 100.0 / n
    return BandReport(pct_lt2=lt2, pct_2to6=mid, pct_lt6=lt2 + mid,
                      level=level, n=n)


def kendall_tau(x, y) -> float:
    """Tie-corrected (tau-b) Kendall rank correlation."""
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise ConfigInvalid("inputs must be equal-length 1-D sequences")
    if len(xv) < 2:
        raise TooFew("rank correlation needs at least 2 pairs")
    if np.all(xv == xv[0]) or np.all(yv == yv[0]):
        raise Degenerate("rank correlation undefined for constant input")
    return float(scipy.stats.kendalltau(xv, yv, variant="b").statistic)


def delta_meanicp_bins(test_errors, test_means, train_means,
                       bin_width: float = 2.0) -> list[dict]:
    """Signed-error statistics binned by distance from the training mean.

    Each test entry's offset is its mean ICP minus the average training
    mean ICP; offsets map to bins centered at integer multiples of
    ``bin_width``. Empty bins are omitted. Returns one dict per
    occupied bin, sorted by center, with n, mean, and quartiles of the
    signed errors.
    """
    err = np.asarray(test_errors, dtype=float)
    tm = np.asarray(test_means, dtype=float)
    if err.shape != tm.shape or err.ndim != 1 or err.size == 0:
        raise ConfigInvalid("errors and test means must match, non-empty")
    train = np.asarray(train_means, dtype=float)
    if train.size == 0:
        raise ConfigInvalid("need at least one training mean")
    if bin_width <= 0:
        raise ConfigInvalid("bin_width must be positive")
    delta = tm - float(np.mean(train))
    k = np.round(delta / bin_width).astype(int)
    out = []
    for kk in sorted(set(k.tolist())):
        sel = err[k == kk]
        q25, q50, q75 = np.percentile(sel, [25.0, 50.0, 75.0])
        out.append({"center": float(kk * bin_width), "n": int(len(sel)),
                    "mean": float(np.mean(sel)), "q25": float(q25),
                    "q50": float(q50), "q75": float(q75)})
    return out


# ---------------------------------------------------------------------------
# report files


def _csv_line(fields) -> str:
    return ",".join(fields) + "\n"


def _fmt(x: float) -> str:
    return util.sig6(float(x))


def _svg_bland_altman(truth: np.ndarray, est: np.ndarray,
                      stats: AgreementStats, title: str) -> str:
    """Minimal deterministic scatter of difference against mean."""
    mean_ax = (truth + est) / 2.0
    diff_ax = est - truth
    w, h, m = 640, 480, 60
    x_lo, x_hi = float(np.min(mean_ax)), float(np.max(mean_ax))
    pad_y = max(stats.sd_diff * LOA_FACTOR, 1e-9)
    y_lo = min(float(np.min(diff_ax)), stats.loa_low) - 0.2 * pad_y
    y_hi = max(float(np.max(diff_ax)), stats.loa_high) + 0.2 * pad_y
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0

    def sx(v):
        return m + (v - x_lo) / (x_hi - x_lo) * (w - 2 * m)

    def sy(v):
        return h - m - (v - y_lo) / (y_hi - y_lo) * (h - 2 * m)

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
             f'height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w // 2}" y="24" text-anchor="middle" '
             f'font-size="14">{title}</text>']
    for val, dash, label in (
            (stats.mean_diff, "", "mean"),
            (stats.loa_low, "6,4", "low"),
            (stats.loa_high, "6,4", "high")):
        y = _fmt(sy(val))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        lines.append(f'<line x1="{m}" y1="{y}" x2="{w - m}" y2="{y}" '
                     f'stroke="black"{dash_attr}/>')
        lines.append(f'<text x="{w - m + 4}" y="{y}" font-size="10">'
                     f'{label} {_fmt(val)}</text>')
    for mx, dy in zip(mean_ax, diff_ax):
        lines.append(f'<circle cx="{_fmt(sx(mx))}" cy="{_fmt(sy(dy))}" '
                     f'r="3" fill="steelblue" fill-opacity="0.7"/>')
    lines.append(f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" '
                 f'stroke="black"/>')
    lines.append(f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" '
                 f'stroke="black"/>')
    lines.append(f'<text x="{w // 2}" y="{h - 20}" text-anchor="middle" '
                 f'font-size="12">mean of estimate and reference (mmHg)'
                 f'</text>')
    lines.append(f'<text x="16" y="{h // 2}" font-size="12" transform='
                 f'"rotate(-90 16 {h // 2})" text-anchor="middle">'
                 f'estimate minus reference (mmHg)</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def report(records: list, out_dir) -> list[str]:
    """Write band tables, agreement stats, per-entry errors, and plots.

    Records are grouped by (scenario, algorithm). Rows without a true
    mean ICP appear in the per-entry table but are excluded from the
    statistics. Output is deterministic for fixed input.
    """
    if not records:
        raise ConfigInvalid("no records to report")
    os.makedirs(out_dir, exist_ok=True)
    groups: dict = {}
    for r in records:
        groups.setdefault((r.scenario, r.algorithm), []).append(r)
    written = []

    path = os.path.join(out_dir, "errors.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_csv_line(["entry_id", "patient_id", "scenario",
                            "algorithm", "true_mean_icp", "est_mean_icp",
                            "error"]))
        for key in sorted(groups):
            for r in sorted(groups[key], key=lambda r: r.entry_id):
                truth = "" if r.true_mean_icp is None \
                    else _fmt(r.true_mean_icp)
                err = "" if r.error is None else _fmt(r.error)
                fh.write(_csv_line([r.entry_id, r.patient_id, r.scenario,
                                    r.algorithm, truth,
                                    _fmt(r.est_mean_icp), err]))
    written.append(path)

    band_path = os.path.join(out_dir, "bands.csv")
    agree_path = os.path.join(out_dir, "agreement.csv")
    with open(band_path, "w", encoding="utf-8", newline="\n") as bf, \
            open(agree_path, "w", encoding="utf-8", newline="\n") as af:
        bf.write(_csv_line(["scenario", "algorithm", "level", "n",
                            "pct_lt2", "pct_2to6", "pct_lt6"]))
        af.write(_csv_line(["scenario", "algorithm", "n", "mean_diff",
                            "sd_diff", "loa_low", "loa_high"]))
        for key in sorted(groups):
            scen, alg = key
            scored = [r for r in groups[key] if r.true_mean_icp is not None]
            if not scored:
                continue
            errs = np.array([r.error for r in scored])
            pids = [r.patient_id for r in scored]
            for level in (Level.ENTRY, Level.PATIENT):
                br = error_bands(errs, level, patient_ids=pids)
                bf.write(_csv_line([scen, alg, level.value, str(br.n),
                                    _fmt(br.pct_lt2), _fmt(br.pct_2to6),
                                    _fmt(br.pct_lt6)]))
            if len(scored) >= 2:
                truth = np.array([r.true_mean_icp for r in scored])
                est = np.array([r.est_mean_icp for r in scored])
                stats = bland_altman(truth, est)
                af.write(_csv_line([scen, alg, str(stats.n),
                                    _fmt(stats.mean_diff),
                                    _fmt(stats.sd_diff),
                                    _fmt(stats.loa_low),
                                    _fmt(stats.loa_high)]))
                svg = _svg_bland_altman(truth, est, stats,
                                        f"{scen} / {alg}")
                svg_path = os.path.join(
                    out_dir, f"bland_altman_{scen}_{alg}.svg")
                with open(svg_path, "w", encoding="utf-8",
                          newline="\n") as sf:
                    sf.write(svg)
                written.append(svg_path)
    written.extend([band_path, agree_path])
    return sorted(written)
