"""Waveform types, beat detection, alignment, and entry segmentation.

All beat-level processing runs at the pipeline rate of 400 Hz. QRS
detection follows the derivative-square-integrate scheme with an
adaptive threshold; arterial onsets come from a slope-sum transform
with the foot placed at the local minimum preceding the steepest
upslope of each pulse.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction

import numpy as np
import scipy.ndimage
import scipy.signal

from .errors import (DegenerateSignal, EmptySignal, NoBeatsFound, TooShort)

PIPELINE_FS = 400.0
BEATS_PER_ENTRY = 360
RR_BOUNDS = (0.25, 2.5)            # physiologic beat interval range, seconds
ALIGN_WINDOW = (-0.5, 0.15)        # onset search window around a reference beat
_REFRACTORY = 0.25                 # minimum beat separation, seconds
_FOOT_LP_HZ = 16.0                 # foot localization low-pass corner


class Channel(str, Enum):
    ECG = "ecg"
    ABP = "abp"
    CBV = "cbv"
    ICP = "icp"


class BeatSource(str, Enum):
    ECG_R_PEAK = "ecg_r_peak"
    ABP_ONSET = "abp_onset"


@dataclass
class Waveform:
    samples: np.ndarray
    fs: float
    channel: Channel

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Recording:
    channels: dict[Channel, Waveform]
    patient_id: str
    recording_id: str

    def __post_init__(self) -> None:
        for ch, w in self.channels.items():
            if w.channel != ch:
                raise ValueError(f"channel map mismatch for {ch}")


@dataclass
class BeatIndex:
    onsets: np.ndarray
    source: BeatSource

    def __post_init__(self) -> None:
        self.onsets = np.asarray(self.onsets, dtype=int).ravel()
        if np.any(np.diff(self.onsets) <= 0):
            raise ValueError("onsets must be strictly increasing")

    def __len__(self) -> int:
        return len(self.onsets)


@dataclass
class Entry:
    """One fixed-length block of beat-synchronous multimodal samples.

    Sample arrays cover the entry span; index arrays are local to it.
    ``beat_starts`` holds the reference onset of each beat; per-channel
    onset arrays carry the aligned pulse feet used by latency features.
    """

    entry_id: str
    patient_id: str
    recording_id: str
    fs: float
    has_ecg: bool
    samples: dict[Channel, np.ndarray]
    beat_starts: np.ndarray
    rr_series: np.ndarray
    abp_onsets: np.ndarray
    cbv_onsets: np.ndarray
    icp_onsets: np.ndarray | None = None
    mean_icp: float | None = None

    @property
    def n_beats(self) -> int:
        return len(self.beat_starts)

    def beat_windows(self) -> list[tuple[int, int]]:
        """Per-beat (start, stop) local sample windows."""
        n_total = len(next(iter(self.samples.values())))
        out = []
        for s, rr in zip(self.beat_starts, self.rr_series):
            stop = min(int(s) + int(round(rr * self.fs)), n_total)
            out.append((int(s), stop))
        return out


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Affine map of a series onto [0, 1]."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two samples to normalize")
    lo = float(np.min(x))
    hi = float(np.max(x))
    if hi == lo:
        raise DegenerateSignal("constant signal has no range")
    return (x - lo) / (hi - lo)


def _kaiser_eval(x: np.ndarray, beta: float) -> np.ndarray:
    inside = np.clip(1.0 - x * x, 0.0, None)
    return np.i0(beta * np.sqrt(inside)) / np.i0(beta)


def resample(w: Waveform, target_fs: float, lobes: int = 32,
             beta: float = 8.6) -> Waveform:
    """Band-limited rate conversion with a normalized windowed-sinc kernel.

    Kernel weights are renormalized per output sample so constants are
    exact fixed points. Equal rates return a copy with identical samples.
    """
    if target_fs <= 0:
        raise ValueError("target_fs must be positive")
    if len(w) < 2:
        raise EmptySignal("resampling needs at least two samples")
    if target_fs == w.fs:
        return Waveform(w.samples.copy(), w.fs, w.channel)

    frac = Fraction(target_fs / w.fs).limit_denominator(1_000_000)
    up, down = frac.numerator, frac.denominator
    n_in = len(w)
    n_out = (n_in * up) // down
    if n_out < 1:
        raise EmptySignal("resampled length would be zero")

    c = min(1.0, up / down)             # cutoff relative to input Nyquist
    half = int(np.ceil(lobes / c))      # kernel half width in input samples
    x = np.pad(w.samples, (half, half + 1), mode="edge")
    offsets = np.arange(-half + 1, half + 1)

    out = np.empty(n_out)
    idx = np.arange(n_out, dtype=np.int64)
    base = (idx * down) // up
    fracnum = (idx * down) % up
    if up <= 512:
        # One weight row per output phase; gather each phase by stride.
        for phase in range(up):
            sel = np.nonzero(fracnum == phase)[0]
            if sel.size == 0:
                continue
            delta = phase / up - offsets
            wrow = c * np.sinc(c * delta) * _kaiser_eval(delta / half, beta)
            wrow = wrow / wrow.sum()
            gathered = x[(base[sel][:, None] + half) + offsets[None, :]]
            out[sel] = gathered @ wrow
    else:
        chunk = 1 << 15
        for s in range(0, n_out, chunk):
            e = min(s + chunk, n_out)
            delta = (fracnum[s:e, None] / up) - offsets[None, :]
            wmat = c * np.sinc(c * delta) * _kaiser_eval(delta / half, beta)
            wmat /= wmat.sum(axis=1, keepdims=True)
            gathered = x[(base[s:e, None] + half) + offsets[None, :]]
            out[s:e] = np.einsum("ij,ij->i", wmat, gathered)
    return Waveform(out, float(target_fs), w.channel)


def _adaptive_peaks(detector: np.ndarray, fs: float) -> np.ndarray:
    """Adaptive-threshold peak gate over a non-negative detector signal."""
    distance = max(int(_REFRACTORY * fs), 1)
    cand, _ = scipy.signal.find_peaks(detector, distance=distance)
    if cand.size == 0:
        return cand
    lead = detector[: min(len(detector), int(2.0 * fs))]
    spk = float(np.max(lead)) * 0.6 if lead.size else 0.0
    npk = float(np.mean(lead)) * 0.5 if lead.size else 0.0
    if spk <= 0:
        spk = float(np.max(detector[cand])) * 0.6
    accepted = []
    for p in cand:
        v = detector[p]
        thr = npk + 0.25 * (spk - npk)
        if v > thr:
            accepted.append(p)
            spk = 0.125 * v + 0.875 * spk
        else:
            npk = 0.125 * v + 0.875 * npk
    return np.asarray(accepted, dtype=int)


def detect_qrs(ecg: Waveform) -> BeatIndex:
    """R-peak detection: band-pass, derivative, square, integrate, gate.

    R locations are refined to the raw-signal maximum near each
    integrator peak. Raises NoBeatsFound with fewer than two beats.
    """
    if ecg.channel != Channel.ECG:
        raise ValueError("detect_qrs expects the ECG channel")
    if ecg.fs != PIPELINE_FS:
        raise ValueError(f"detect_qrs runs at {PIPELINE_FS} Hz")
    x = ecg.samples
    if len(x) < int(1.0 * ecg.fs):
        raise NoBeatsFound("record shorter than one second")
    sos = scipy.signal.butter(2, [5.0, 15.0], btype="band", fs=ecg.fs, output="sos")
    band = scipy.signal.sosfiltfilt(sos, x)
    sq = np.gradient(band) ** 2
    integ = scipy.ndimage.uniform_filter1d(sq, size=int(0.150 * ecg.fs))
    peaks = _adaptive_peaks(integ, ecg.fs)
    if peaks.size < 2:
        raise NoBeatsFound("fewer than two QRS complexes detected")
    half = int(0.075 * ecg.fs)
    refined = []
    for p in peaks:
        lo = max(p - half, 0)
        hi = min(p + half + 1, len(x))
        refined.append(lo + int(np.argmax(x[lo:hi])))
    refined = np.asarray(sorted(set(refined)), dtype=int)
    # enforce refractory after refinement, keeping the taller peak
    keep = [0]
    min_gap = int(_REFRACTORY * ecg.fs)
    for i in range(1, len(refined)):
        if refined[i] - refined[keep[-1]] >= min_gap:
            keep.append(i)
        elif x[refined[i]] > x[refined[keep[-1]]]:
            keep[-1] = i
    onsets = refined[keep]
    if onsets.size < 2:
        raise NoBeatsFound("fewer than two QRS complexes after refinement")
    return BeatIndex(onsets=onsets, source=BeatSource.ECG_R_PEAK)


def _foot_lowpass(x: np.ndarray, fs: float) -> np.ndarray:
    sos = scipy.signal.butter(2, _FOOT_LP_HZ, btype="low", fs=fs, output="sos")
    return scipy.signal.sosfiltfilt(sos, x)


def _slope_threshold(d: np.ndarray) -> float:
    """Minimum certified upstroke slope for foot detection.

    Scaled from a high quantile of the positive slopes so isolated
    artifacts (e.g. a startup transient) cannot inflate the bar and
    reject genuine low-amplitude pulses.
    """
    pos = d[d > 0]
    if pos.size == 0:
        return 0.0
    return 0.05 * float(np.quantile(pos, 0.995))


def _foot_in_window(xf: np.ndarray, lo: int, hi: int,
                    min_upslope: float) -> int | None:
    """Pulse foot inside [lo, hi) by intersecting tangents.

    The steepest-upstroke tangent is extrapolated back to the baseline
    level preceding the rise; their intersection marks the foot. Returns
    None when the window holds no acceptable rising edge, or when the
    rise enters the window already in progress (no certified baseline).
    """
    lo = max(lo, 0)
    hi = min(hi, len(xf))
    if hi - lo < 3:
        return None
    seg = xf[lo:hi]
    d = np.diff(seg)
    imax = int(np.argmax(d))
    if d[imax] <= min_upslope:
        return None
    i = imax
    while i > 0 and d[i - 1] > 0:
        i -= 1
    if i == 0:
        return None
    baseline = float(np.min(seg[max(i - 10, 0): i + 1]))
    est = imax - (seg[imax] - baseline) / d[imax]
    return lo + int(round(min(max(est, 0.0), hi - lo - 1)))


def detect_abp_onsets(abp: Waveform) -> BeatIndex:
    """Arterial pulse onsets via a slope-sum transform.

    Windowed sums of positive slopes mark upstrokes; each onset is then
    localized by the intersecting-tangent rule on its pulse.
    """
    if abp.channel != Channel.ABP:
        raise ValueError("detect_abp_onsets expects the ABP channel")
    if abp.fs != PIPELINE_FS:
        raise ValueError(f"detect_abp_onsets runs at {PIPELINE_FS} Hz")
    x = abp.samples
    if len(x) < int(1.0 * abp.fs):
        raise NoBeatsFound("record shorter than one second")
    xf = _foot_lowpass(x, abp.fs)
    d = np.diff(xf, prepend=xf[0])
    ssf = scipy.ndimage.uniform_filter1d(np.maximum(d, 0.0),
                                         size=int(0.128 * abp.fs))
    peaks = _adaptive_peaks(ssf, abp.fs)
    if peaks.size < 2:
        raise NoBeatsFound("fewer than two arterial pulses detected")
    global_thr = _slope_threshold(d)
    back = int(0.35 * abp.fs)
    fwd = int(0.10 * abp.fs)
    onsets = []
    for p in peaks:
        foot = _foot_in_window(xf, p - back, p + fwd, global_thr)
        if foot is not None:
            onsets.append(foot)
    onsets = sorted(set(onsets))
    # drop feet violating the refractory gap, keep the earlier one
    min_gap = int(_REFRACTORY * abp.fs)
    kept = []
    for o in onsets:
        if not kept or o - kept[-1] >= min_gap:
            kept.append(o)
    if len(kept) < 2:
        raise NoBeatsFound("fewer than two arterial onsets localized")
    return BeatIndex(onsets=np.asarray(kept, dtype=int), source=BeatSource.ABP_ONSET)


def align_onsets(reference: BeatIndex, target: Waveform
                 ) -> tuple[BeatIndex, np.ndarray]:
    """Locate per-beat pulse onsets of ``target`` near reference beats.

    The search window spans ALIGN_WINDOW seconds around each reference
    onset, truncated at midpoints between neighboring reference beats so
    windows never overlap. Returns the found onsets plus a boolean mask
    over reference beats; beats without a certified foot are unmarked.
    """
    if target.fs != PIPELINE_FS:
        raise ValueError(f"align_onsets runs at {PIPELINE_FS} Hz")
    r = reference.onsets
    xf = _foot_lowpass(target.samples, target.fs)
    d = np.diff(xf)
    global_thr = _slope_threshold(d) if d.size else 0.0
    lo_off = int(round(ALIGN_WINDOW[0] * target.fs))
    hi_off = int(round(ALIGN_WINDOW[1] * target.fs))
    found = np.full(len(r), -1, dtype=int)
    for i, onset in enumerate(r):
        lo = onset + lo_off
        hi = onset + hi_off
        if i > 0:
            lo = max(lo, (r[i - 1] + onset) // 2)
        if i + 1 < len(r):
            hi = min(hi, (onset + r[i + 1]) // 2)
        foot = _foot_in_window(xf, lo, hi, global_thr)
        if foot is not None:
            found[i] = foot
    kept = found >= 0
    idx = BeatIndex(onsets=found[kept], source=BeatSource.ABP_ONSET) \
        if np.any(kept) else BeatIndex(onsets=np.empty(0, dtype=int),
                                       source=BeatSource.ABP_ONSET)
    return idx, kept


def _ensure_pipeline_rate(rec: Recording) -> Recording:
    chans = {}
    for ch, w in rec.channels.items():
        chans[ch] = resample(w, PIPELINE_FS) if w.fs != PIPELINE_FS else w
    n = min(len(w) for w in chans.values())
    chans = {ch: Waveform(w.samples[:n], PIPELINE_FS, ch) for ch, w in chans.items()}
    return Recording(channels=chans, patient_id=rec.patient_id,
                     recording_id=rec.recording_id)


def segment_entries(rec: Recording, beats_per_entry: int = BEATS_PER_ENTRY
                    ) -> list[Entry]:
    """Cut a recording into beat-synchronous entries.

    Detects reference beats (ECG R peaks when ECG is present, arterial
    onsets otherwise), aligns every pulsatile channel to them, drops any
    beat that fails alignment in any channel or falls outside the RR
    bounds, and chunks the surviving beats. The residue short of a full
    entry is discarded.
    """
    if beats_per_entry < 2:
        raise ValueError("beats_per_entry must be >= 2")
    for need in (Channel.ABP, Channel.CBV):
        if need not in rec.channels:
            raise ValueError(f"recording lacks required channel {need.value}")
    rec = _ensure_pipeline_rate(rec)
    fs = PIPELINE_FS
    has_ecg = Channel.ECG in rec.channels
    if has_ecg:
        ref = detect_qrs(rec.channels[Channel.ECG])
    else:
        ref = detect_abp_onsets(rec.channels[Channel.ABP])
    n = len(ref.onsets)
    sig_len = len(rec.channels[Channel.ABP].samples)

    # rr from consecutive reference onsets, last value carried forward
    rr = np.empty(n)
    rr[:-1] = np.diff(ref.onsets) / fs
    rr[-1] = rr[-2] if n >= 2 else 0.0
    kept = (rr >= RR_BOUNDS[0]) & (rr <= RR_BOUNDS[1])

    chan_onsets: dict[Channel, np.ndarray] = {}
    if has_ecg:
        to_align = [Channel.ABP, Channel.CBV]
    else:
        chan_onsets[Channel.ABP] = ref.onsets.copy()
        to_align = [Channel.CBV]
    if Channel.ICP in rec.channels:
        to_align.append(Channel.ICP)
    for ch in to_align:
        onsets_full = np.full(n, -1, dtype=int)
        idx, mask = align_onsets(ref, rec.channels[ch])
        onsets_full[mask] = idx.onsets
        chan_onsets[ch] = onsets_full
        kept &= mask

    # final beat must fit inside the record
    beat_end = ref.onsets + np.round(rr * fs).astype(int)
    kept &= beat_end <= sig_len

    usable = np.nonzero(kept)[0]
    if len(usable) < beats_per_entry:
        raise TooShort(
            f"{len(usable)} usable beats < {beats_per_entry} required")

    entries: list[Entry] = []
    n_entries = len(usable) // beats_per_entry
    for k in range(n_entries):
        beats = usable[k * beats_per_entry: (k + 1) * beats_per_entry]
        start = int(ref.onsets[beats[0]])
        stop = int(min(beat_end[beats[-1]], sig_len))
        samples = {ch: w.samples[start:stop].copy()
                   for ch, w in rec.channels.items()}
        local_ref = ref.onsets[beats] - start
        rr_local = rr[beats]

        def _local(ch: Channel) -> np.ndarray:
            return chan_onsets[ch][beats] - start

        icp_onsets = _local(Channel.ICP) if Channel.ICP in chan_onsets else None
        mean_icp = None
        if Channel.ICP in samples:
            icp = samples[Channel.ICP]
            mask = np.zeros(len(icp), dtype=bool)
            ends = np.minimum(local_ref + np.round(rr_local * fs).astype(int), len(icp))
            for s, e in zip(local_ref, ends):
                mask[s:e] = True
            mean_icp = float(np.mean(icp[mask]))
        entries.append(Entry(
            entry_id=f"{rec.recording_id}:{k:03d}",
            patient_id=rec.patient_id,
            recording_id=rec.recording_id,
            fs=fs,
            has_ecg=has_ecg,
            samples=samples,
            beat_starts=local_ref,
            rr_series=rr_local.copy(),
            abp_onsets=_local(Channel.ABP),
            cbv_onsets=_local(Channel.CBV),
            icp_onsets=icp_onsets,
            mean_icp=mean_icp,
        ))
    return entries


def entry_inputs(entry: Entry, normalize: bool = False) -> np.ndarray:
    """Stack the model input channels of an entry: ABP, CBv, held RR.

    The RR row holds each beat's interval constant across that beat's
    samples. With ``normalize`` each input is min-max normalized using
    the entry's own statistics (beat boundaries stay physical).
    """
    abp = entry.samples[Channel.ABP]
    cbv = entry.samples[Channel.CBV]
    rr_vals = entry.rr_series
    if normalize:
        abp = minmax_normalize(abp)
        cbv = minmax_normalize(cbv)
        rr_vals = minmax_normalize(rr_vals)
    T = len(abp)
    pos = np.arange(T)
    beat_of = np.searchsorted(entry.beat_starts, pos, side="right") - 1
    beat_of = np.clip(beat_of, 0, len(rr_vals) - 1)
    rr_row = np.asarray(rr_vals, dtype=float)[beat_of]
    return np.vstack([abp, cbv, rr_row])


def entry_output(entry: Entry) -> np.ndarray:
    if Channel.ICP not in entry.samples:
        raise ValueError("entry has no ICP channel")
    return entry.samples[Channel.ICP][None, :]
