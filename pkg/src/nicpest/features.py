"""Noninvasive feature families computed from a segmented entry.

Four families are concatenated in a fixed registry order: slow-wave
impulse-response coefficients, beat-onset latencies, pulse-wise
compliance regressions, and mean-pulse morphology metrics. Failed
families or absent landmarks yield NaN values that are imputed with
training medians downstream.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.signal

from . import sysid
from .errors import (ConfigInvalid, NoLandmarks, PipelineError,
                     RankDeficientInput, UnstableModel)
from .signals import Channel, Entry, minmax_normalize

SLOW_BAND = (0.013, 0.155)
SLOW_FS = 1.0


@dataclass(frozen=True)
class FeatureConfig:
    impulse_len: int = 20
    impulse_max_order: int = 6
    impulse_hankel_rows: int = 12
    mocaip_smooth_s: float = 0.02
    mocaip_extended: bool = False
    standardize: bool = False

    def __post_init__(self) -> None:
        if self.impulse_len < 1:
            raise ConfigInvalid("impulse_len must be >= 1")
        if not 1 <= self.impulse_max_order <= self.impulse_hankel_rows:
            raise ConfigInvalid(
                "impulse_max_order must lie in [1, impulse_hankel_rows]")
        if self.mocaip_smooth_s <= 0:
            raise ConfigInvalid("mocaip_smooth_s must be positive")

    def to_dict(self) -> dict:
        return {
            "impulse_len": self.impulse_len,
            "impulse_max_order": self.impulse_max_order,
            "impulse_hankel_rows": self.impulse_hankel_rows,
            "mocaip_smooth_s": self.mocaip_smooth_s,
            "mocaip_extended": self.mocaip_extended,
            "standardize": self.standardize,
        }

    @staticmethod
    def from_dict(d: dict) -> "FeatureConfig":
        return FeatureConfig(**d)


@dataclass(frozen=True)
class PulseLandmarks:
    """Sub-peak and valley indices on a mean pulse; None marks absent."""

    onset: int
    p1: int | None
    p2: int | None
    p3: int | None
    v1: int | None
    v2: int | None
    v3: int | None


@dataclass
class FeatureVector:
    values: np.ndarray
    registry: tuple[str, ...]
    imputed: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or len(self.values) != len(self.registry):
            raise ValueError("values must align with the registry")


_MOCAIP_LANDMARKS = ("p1", "p2", "p3", "v1", "v2", "v3")


def feature_registry(cfg: FeatureConfig) -> tuple[str, ...]:
    """Ordered feature names; a pure function of configuration."""
    names: list[str] = []
    for chan in ("abp", "rr"):
        names += [f"impulse.{chan}.{k:02d}" for k in range(cfg.impulse_len)]
    names += ["latency.abp_mean", "latency.abp_sd",
              "latency.cbv_mean", "latency.cbv_sd"]
    names += ["compliance.slope_mean", "compliance.slope_sd",
              "compliance.intercept_mean", "compliance.intercept_sd"]
    names += [f"mocaip.amp.{m}" for m in _MOCAIP_LANDMARKS]
    names += [f"mocaip.relamp.{m}" for m in _MOCAIP_LANDMARKS]
    names += [f"mocaip.lat.{m}" for m in _MOCAIP_LANDMARKS]
    names += ["mocaip.slope.rise", "mocaip.slope.decay",
              "mocaip.ratio.p2_p1", "mocaip.ratio.p3_p1",
              "mocaip.ratio.v2_p1", "mocaip.mean"]
    if cfg.mocaip_extended:
        names += ["mocaip.duration", "mocaip.curv.p1", "mocaip.curv.p2",
                  "mocaip.curv.p3"]
    return tuple(names)


def _slow_sos():
    return scipy.signal.butter(2, SLOW_BAND, btype="bandpass",
                               fs=SLOW_FS, output="sos")


def slow_wave(per_beat_series: np.ndarray, rr_series: np.ndarray) -> np.ndarray:
    """Band-limited slow oscillation of a per-beat series.

    The beat series is placed on its cumulative-RR time base, linearly
    resampled to a uniform 1 Hz grid, and band-passed (zero phase) to
    0.013-0.155 Hz. The result is re-centered so DC is removed exactly.
    """
    series = np.asarray(per_beat_series, dtype=float)
    rr = np.asarray(rr_series, dtype=float)
    if series.shape != rr.shape or series.ndim != 1:
        raise ValueError("per_beat_series and rr_series must match 1-D")
    t = np.concatenate([[0.0], np.cumsum(rr[:-1])])
    grid = np.arange(0.0, t[-1] + 1e-9, 1.0 / SLOW_FS)
    x = np.interp(grid, t, series)
    x = x - np.mean(x)
    y = scipy.signal.sosfiltfilt(_slow_sos(), x)
    return y - np.mean(y)


def _per_beat_means(samples: np.ndarray, windows) -> np.ndarray:
    return np.array([float(np.mean(samples[a:b])) for a, b in windows])


def impulse_features(entry: Entry, cfg: FeatureConfig = FeatureConfig(),
                     normalize: bool = False) -> np.ndarray:
    """First impulse-response coefficients of a slow-wave model.

    A 2-input (slow ABP, slow RR) / 1-output (slow CBv) model is
    identified at the 1 Hz slow-wave rate; the leading ``impulse_len``
    coefficients per input are concatenated. Raises the identification
    errors of the subspace routine when the fit is not possible.
    """
    windows = entry.beat_windows()
    abp = np.asarray(entry.samples[Channel.ABP], dtype=float)
    cbv = np.asarray(entry.samples[Channel.CBV], dtype=float)
    rr_vals = np.asarray(entry.rr_series, dtype=float)
    if normalize:
        abp = minmax_normalize(abp)
        cbv = minmax_normalize(cbv)
        rr_vals = minmax_normalize(rr_vals)
    s_abp = slow_wave(_per_beat_means(abp, windows), entry.rr_series)
    s_cbv = slow_wave(_per_beat_means(cbv, windows), entry.rr_series)
    s_rr = slow_wave(rr_vals, entry.rr_series)
    ident = sysid.IdentConfig(max_order=cfg.impulse_max_order,
                              hankel_rows=cfg.impulse_hankel_rows)
    model = sysid.identify(np.vstack([s_abp, s_rr]), s_cbv[None, :], ident,
                           fs=SLOW_FS, source_entry_id=entry.entry_id)
    h = sysid.impulse_response(model, cfg.impulse_len)
    return h.reshape(-1)


def latency_features(entry: Entry) -> np.ndarray:
    """Mean and spread of ABP and CBv onset delays from the beat reference."""
    fs = entry.fs
    ref = np.asarray(entry.beat_starts, dtype=float)
    lat_abp = (np.asarray(entry.abp_onsets, dtype=float) - ref) / fs
    lat_cbv = (np.asarray(entry.cbv_onsets, dtype=float) - ref) / fs
    return np.array([
        float(np.mean(lat_abp)), float(np.std(lat_abp, ddof=1)),
        float(np.mean(lat_cbv)), float(np.std(lat_cbv, ddof=1)),
    ])


def compliance_features(entry: Entry, normalize: bool = False) -> np.ndarray:
    """Pulse-wise linear fits of CBv against the ABP derivative.

    Per beat window, CBv samples are regressed on dABP/dt (central
    differences); the mean and standard deviation of the slopes and
    intercepts are returned. Pulses with a flat derivative are skipped.
    """
    fs = entry.fs
    abp = np.asarray(entry.samples[Channel.ABP], dtype=float)
    cbv = np.asarray(entry.samples[Channel.CBV], dtype=float)
    if normalize:
        abp = minmax_normalize(abp)
        cbv = minmax_normalize(cbv)
    slopes, intercepts = [], []
    for a, b in entry.beat_windows():
        if b - a < 3:
            continue
        dabp = np.gradient(abp[a:b]) * fs
        if np.ptp(dabp) == 0.0:
            continue
        M = np.column_stack([dabp, np.ones(b - a)])
        coef, *_ = np.linalg.lstsq(M, cbv[a:b], rcond=None)
        slopes.append(coef[0])
        intercepts.append(coef[1])
    if len(slopes) < 2:
        return np.full(4, np.nan)
    slopes = np.asarray(slopes)
    intercepts = np.asarray(intercepts)
    return np.array([
        float(np.mean(slopes)), float(np.std(slopes, ddof=1)),
        float(np.mean(intercepts)), float(np.std(intercepts, ddof=1)),
    ])


def mean_pulse(entry: Entry, normalize: bool = False) -> np.ndarray:
    """Onset-aligned average CBv beat, truncated to the shortest beat."""
    cbv = np.asarray(entry.samples[Channel.CBV], dtype=float)
    if normalize:
        cbv = minmax_normalize(cbv)
    onsets = np.asarray(entry.cbv_onsets, dtype=int)
    min_len = int(np.diff(onsets).min())
    rows = [cbv[o:o + min_len] for o in onsets if o + min_len <= len(cbv)]
    return np.mean(np.asarray(rows), axis=0)


def mocaip_landmarks(pulse: np.ndarray,
                     smooth_samples: int = 9) -> PulseLandmarks:
    """Locate up to three sub-peaks and their preceding valleys.

    Candidates are interior local maxima of the lightly smoothed pulse;
    the three largest by prominence are kept in temporal order. Each
    valley v_i is the minimum between the previous landmark (onset for
    v1) and p_i.
    """
    pulse = np.asarray(pulse, dtype=float)
    if len(pulse) < 5:
        raise NoLandmarks("pulse too short for landmark analysis")
    sm = scipy.ndimage.uniform_filter1d(pulse, size=max(int(smooth_samples), 1))
    peaks, _ = scipy.signal.find_peaks(sm)
    if peaks.size == 0:
        raise NoLandmarks("no interior local maximum on the mean pulse")
    prom = scipy.signal.peak_prominences(sm, peaks)[0]
    order = np.argsort(prom)[::-1][:3]
    chosen = np.sort(peaks[order])
    ps: list[int | None] = [None, None, None]
    vs: list[int | None] = [None, None, None]
    prev = 0
    for i, p in enumerate(chosen):
        ps[i] = int(p)
        seg = pulse[prev:p + 1]
        vs[i] = prev + int(np.argmin(seg))
        prev = int(p)
    return PulseLandmarks(onset=0, p1=ps[0], p2=ps[1], p3=ps[2],
                          v1=vs[0], v2=vs[1], v3=vs[2])


def mocaip_metrics(lm: PulseLandmarks, pulse: np.ndarray, rr_mean: float,
                   fs: float, cfg: FeatureConfig = FeatureConfig()
                   ) -> np.ndarray:
    """Morphology metrics of a mean pulse given its landmarks.

    Metrics depending on an absent landmark are NaN; they are imputed
    with training medians downstream.
    """
    pulse = np.asarray(pulse, dtype=float)
    base = float(pulse[lm.onset])
    idx = {name: getattr(lm, name) for name in _MOCAIP_LANDMARKS}

    def amp(name):
        i = idx[name]
        return float(pulse[i]) if i is not None else np.nan

    def relamp(name):
        i = idx[name]
        return float(pulse[i]) - base if i is not None else np.nan

    def lat(name):
        i = idx[name]
        return i / fs if i is not None else np.nan

    vals = [amp(m) for m in _MOCAIP_LANDMARKS]
    vals += [relamp(m) for m in _MOCAIP_LANDMARKS]
    vals += [lat(m) for m in _MOCAIP_LANDMARKS]

    if lm.p1 is not None and lm.p1 > lm.onset:
        vals.append((float(pulse[lm.p1]) - base) / ((lm.p1 - lm.onset) / fs))
    else:
        vals.append(np.nan)
    if lm.p3 is not None and lm.p3 < len(pulse) - 1:
        vals.append((float(pulse[-1]) - float(pulse[lm.p3]))
                    / ((len(pulse) - 1 - lm.p3) / fs))
    else:
        vals.append(np.nan)

    dp1 = relamp("p1")
    for name in ("p2", "p3", "v2"):
        d = relamp(name)
        vals.append(d / dp1 if np.isfinite(dp1) and dp1 != 0.0
                    and np.isfinite(d) else np.nan)
    vals.append(float(np.mean(pulse)))

    if cfg.mocaip_extended:
        vals.append(float(rr_mean))
        d2 = np.gradient(np.gradient(pulse))
        for name in ("p1", "p2", "p3"):
            i = idx[name]
            vals.append(float(d2[i]) if i is not None else np.nan)
    return np.asarray(vals, dtype=float)


def extract_features(entry: Entry, cfg: FeatureConfig = FeatureConfig(),
                     normalize: bool = False) -> FeatureVector:
    """Concatenated feature vector for one entry.

    Families that fail (rank-deficient slow waves, missing landmarks)
    contribute NaN values and are listed in ``imputed``; downstream
    training replaces them with training-set medians.
    """
    registry = feature_registry(cfg)
    blocks: list[np.ndarray] = []
    failed: list[str] = []

    n_imp = 2 * cfg.impulse_len
    try:
        blocks.append(impulse_features(entry, cfg, normalize=normalize))
    except (RankDeficientInput, UnstableModel, PipelineError):
        blocks.append(np.full(n_imp, np.nan))
        failed.extend(registry[:n_imp])

    blocks.append(latency_features(entry))
    blocks.append(compliance_features(entry, normalize=normalize))

    n_moc = len(registry) - n_imp - 8
    try:
        pulse = mean_pulse(entry, normalize=normalize)
        lm = mocaip_landmarks(
            pulse, smooth_samples=max(int(cfg.mocaip_smooth_s * entry.fs), 1))
        moc = mocaip_metrics(lm, pulse, float(np.mean(entry.rr_series)),
                             entry.fs, cfg)
    except NoLandmarks:
        moc = np.full(n_moc, np.nan)
    blocks.append(moc)

    values = np.concatenate(blocks)
    if len(values) != len(registry):
        raise RuntimeError("feature blocks out of sync with the registry")
    nan_names = tuple(registry[i] for i in np.flatnonzero(~np.isfinite(values)))
    return FeatureVector(values=values, registry=registry, imputed=nan_names)


def feature_matrix(entries, cfg: FeatureConfig = FeatureConfig(),
                   normalize: bool = False) -> tuple[np.ndarray, tuple[str, ...]]:
    """Stack per-entry features row-wise; NaN cells left for imputation."""
    registry = feature_registry(cfg)
    rows = [extract_features(e, cfg, normalize=normalize).values
            for e in entries]
    return np.asarray(rows, dtype=float), registry


def impute_with_medians(F: np.ndarray,
                        medians: np.ndarray | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Replace NaN cells with per-column medians.

    When ``medians`` is None they are computed from the finite cells of
    F (training time); otherwise the stored medians are applied
    (estimation time). All-NaN training columns fall back to 0.
    """
    F = np.asarray(F, dtype=float)
    if medians is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            medians = np.nanmedian(F, axis=0)
        medians = np.where(np.isfinite(medians), medians, 0.0)
    out = np.where(np.isfinite(F), F, medians[None, :])
    return out, medians
