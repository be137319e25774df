"""Seeded synthetic multimodal recordings with known ground truth.

Each recording is built from a bounded RR random walk, per-beat pulse
templates for ABP and CBv (slowly amplitude-modulated inside the
slow-wave band), an ECG spike train, and an ICP channel produced by
simulating a known stable state-space system on the rendered inputs.
Everything is a deterministic function of (seed, config).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import signals, sysid, util
from .errors import ConfigInvalid, TooShort
from .signals import Channel, Recording, Waveform


@dataclass(frozen=True)
class GeneratorConfig:
    beats: int = 375
    fs: float = 400.0
    mean_rr: float = 0.8
    rr_walk_step: float = 0.006
    rr_span: tuple[float, float] = (0.62, 1.02)
    snr_db: float | None = None
    with_ecg: bool = True
    with_icp: bool = True
    abp_lag: float = 0.08
    cbv_lag: float = 0.12
    cbv_lag_jitter: float = 0.0
    pad: float = 1.5
    system_orders: tuple[int, ...] = (2, 3)
    icp_target_range: tuple[float, float] = (8.0, 22.0)
    separation_floor: float = 0.2

    def validate(self) -> None:
        if self.beats < 2:
            raise ConfigInvalid("beats must be >= 2")
        if not (signals.RR_BOUNDS[0] <= self.rr_span[0] < self.rr_span[1]
                <= signals.RR_BOUNDS[1]):
            raise ConfigInvalid("rr_span must sit inside the RR bounds")
        if not self.rr_span[0] <= self.mean_rr <= self.rr_span[1]:
            raise ConfigInvalid("mean_rr outside rr_span")
        if self.snr_db is not None and self.snr_db <= 0:
            raise ConfigInvalid("snr_db must be positive when given")
        if not 0 < self.abp_lag < signals.ALIGN_WINDOW[1]:
            raise ConfigInvalid("abp_lag must fall inside the alignment window")
        if not 0 < self.cbv_lag < signals.ALIGN_WINDOW[1]:
            raise ConfigInvalid("cbv_lag must fall inside the alignment window")
        lo, hi = self.icp_target_range
        if not 5.0 <= lo < hi <= 25.0:
            raise ConfigInvalid("icp_target_range must sit inside [5, 25]")

    def to_dict(self) -> dict:
        return {
            "beats": self.beats, "fs": self.fs, "mean_rr": self.mean_rr,
            "rr_walk_step": self.rr_walk_step, "rr_span": list(self.rr_span),
            "snr_db": self.snr_db, "with_ecg": self.with_ecg,
            "with_icp": self.with_icp, "abp_lag": self.abp_lag,
            "cbv_lag": self.cbv_lag, "cbv_lag_jitter": self.cbv_lag_jitter,
            "pad": self.pad,
            "system_orders": list(self.system_orders),
            "icp_target_range": list(self.icp_target_range),
            "separation_floor": self.separation_floor,
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        kw = dict(d)
        for key in ("rr_span", "system_orders", "icp_target_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return GeneratorConfig(**kw)


Multisine = tuple[tuple[float, float, float], ...]   # (freq, amp, phase)


@dataclass(frozen=True)
class Morphology:
    """Per-system pulse shape and slow-modulation parameters.

    Slow modulations are random multisines spread across the 0.013-0.155
    Hz band so the slow waves of every channel stay persistently
    exciting for subspace identification.
    """

    abp_rise: float
    abp_decay: float
    abp_dicrotic: tuple[float, float, float]       # center, width, amplitude
    abp_amp: float
    abp_base: float
    abp_mod: Multisine                             # relative amplitude
    abp_wander: Multisine                          # additive baseline, mmHg
    cbv_rise: float
    cbv_decay: float
    cbv_bumps: tuple[tuple[float, float, float], ...]
    cbv_amp: float
    cbv_base: float
    cbv_mod: Multisine
    cbv_coupling_gain: float
    cbv_coupling_alpha: float

    def to_dict(self) -> dict:
        return {
            "abp_rise": self.abp_rise, "abp_decay": self.abp_decay,
            "abp_dicrotic": list(self.abp_dicrotic), "abp_amp": self.abp_amp,
            "abp_base": self.abp_base,
            "abp_mod": [list(c) for c in self.abp_mod],
            "abp_wander": [list(c) for c in self.abp_wander],
            "cbv_rise": self.cbv_rise, "cbv_decay": self.cbv_decay,
            "cbv_bumps": [list(b) for b in self.cbv_bumps],
            "cbv_amp": self.cbv_amp, "cbv_base": self.cbv_base,
            "cbv_mod": [list(c) for c in self.cbv_mod],
            "cbv_coupling_gain": self.cbv_coupling_gain,
            "cbv_coupling_alpha": self.cbv_coupling_alpha,
        }

    @staticmethod
    def from_dict(d: dict) -> "Morphology":
        def tt(rows):
            return tuple(tuple(r) for r in rows)
        return Morphology(
            abp_rise=d["abp_rise"], abp_decay=d["abp_decay"],
            abp_dicrotic=tuple(d["abp_dicrotic"]), abp_amp=d["abp_amp"],
            abp_base=d["abp_base"], abp_mod=tt(d["abp_mod"]),
            abp_wander=tt(d["abp_wander"]),
            cbv_rise=d["cbv_rise"], cbv_decay=d["cbv_decay"],
            cbv_bumps=tt(d["cbv_bumps"]),
            cbv_amp=d["cbv_amp"], cbv_base=d["cbv_base"],
            cbv_mod=tt(d["cbv_mod"]),
            cbv_coupling_gain=d["cbv_coupling_gain"],
            cbv_coupling_alpha=d["cbv_coupling_alpha"],
        )


def _multisine(comps: Multisine, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t, dtype=float)
    for f, a, ph in comps:
        out += a * np.sin(2 * np.pi * f * t + ph)
    return out


def _sample_multisine(rng: np.random.Generator, total_amp: float,
                      n: int = 6, band: tuple[float, float] = (0.015, 0.15),
                      ) -> Multisine:
    freqs = rng.uniform(*band, size=n)
    amps = rng.uniform(0.5, 1.0, size=n)
    amps *= total_amp / np.sum(amps)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    return tuple((float(f), float(a), float(p))
                 for f, a, p in zip(freqs, amps, phases))


@dataclass
class GroundTruth:
    """Everything needed to audit or regenerate one recording."""

    seed: int
    config: GeneratorConfig
    true_system: sysid.StateSpaceModel
    morphology: Morphology
    rr_series: np.ndarray                 # seconds, length beats
    r_samples: np.ndarray                 # R-peak sample indices
    abp_feet: np.ndarray
    cbv_feet: np.ndarray
    icp_feet: np.ndarray
    mean_icp_per_entry: np.ndarray        # per full 360-beat chunk

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "true_system": self.true_system.to_dict(),
            "morphology": self.morphology.to_dict(),
            "rr_series": [float(v) for v in self.rr_series],
            "r_samples": [int(v) for v in self.r_samples],
            "abp_feet": [int(v) for v in self.abp_feet],
            "cbv_feet": [int(v) for v in self.cbv_feet],
            "icp_feet": [int(v) for v in self.icp_feet],
            "mean_icp_per_entry": [float(v) for v in self.mean_icp_per_entry],
        }


@dataclass
class Cohort:
    entries: list
    system_ids: list[int]
    systems: list[sysid.StateSpaceModel]
    truths: list[GroundTruth]
    recordings: list[Recording]


def _smooth_rise(t: np.ndarray) -> np.ndarray:
    # quadratic ramp: value 0 slope 2 at t=0, value 1 slope 0 at t=1
    return 2.0 * t - t * t


def _pulse_shape(tau: np.ndarray, rise: float, decay: float,
                 bumps) -> np.ndarray:
    """V-footed pulse on tau in [0, 1): zero at both ends, strictly
    rising from tau=0, decaying into the next foot."""
    tau = np.asarray(tau, dtype=float)
    out = np.where(
        tau < rise,
        _smooth_rise(np.clip(tau / rise, 0.0, 1.0)),
        np.exp(-decay * (tau - rise)),
    )
    for c, wdt, amp in bumps:
        out = out + amp * np.exp(-0.5 * ((tau - c) / wdt) ** 2)
    end = float(np.exp(-decay * (1.0 - rise))
                + sum(a * np.exp(-0.5 * ((1.0 - c) / w) ** 2) for c, w, a in bumps))
    start = float(sum(a * np.exp(-0.5 * ((0.0 - c) / w) ** 2) for c, w, a in bumps))
    return out - start - (end - start) * tau


def sample_morphology(rng: np.random.Generator) -> Morphology:
    r2 = rng.uniform(0.55, 0.8)
    r3 = rng.uniform(0.5, 0.7)
    return Morphology(
        abp_rise=rng.uniform(0.10, 0.15),
        abp_decay=rng.uniform(2.2, 3.2),
        abp_dicrotic=(rng.uniform(0.38, 0.48), 0.05, rng.uniform(0.12, 0.22)),
        abp_amp=rng.uniform(22.0, 30.0),
        abp_base=rng.uniform(72.0, 85.0),
        abp_mod=_sample_multisine(rng, rng.uniform(0.15, 0.3)),
        abp_wander=_sample_multisine(rng, rng.uniform(2.0, 4.0)),
        cbv_rise=rng.uniform(0.09, 0.13),
        cbv_decay=rng.uniform(2.0, 3.0),
        cbv_bumps=(
            (rng.uniform(0.24, 0.28), 0.04, r2),
            (rng.uniform(0.46, 0.52), 0.045, r3),
        ),
        cbv_amp=rng.uniform(16.0, 24.0),
        cbv_base=rng.uniform(35.0, 50.0),
        cbv_mod=_sample_multisine(rng, rng.uniform(0.12, 0.25)),
        cbv_coupling_gain=rng.uniform(0.15, 0.3),
        cbv_coupling_alpha=float(np.exp(-1.0 / (400.0 * rng.uniform(0.3, 0.7)))),
    )


def sample_system(rng: np.random.Generator, cfg: GeneratorConfig,
                  u_dc: np.ndarray) -> sysid.StateSpaceModel:
    """Random stable system calibrated so mean ICP hits a target level."""
    target = rng.uniform(*cfg.icp_target_range)
    for _ in range(200):
        order = int(rng.choice(cfg.system_orders))
        blocks = []
        left = order
        while left >= 2:
            r = rng.uniform(0.45, 0.9)
            th = rng.uniform(0.05, 0.8)
            blocks.append(r * np.array([[np.cos(th), np.sin(th)],
                                        [-np.sin(th), np.cos(th)]]))
            left -= 2
        if left == 1:
            blocks.append(np.array([[rng.uniform(0.2, 0.85)]]))
        A0 = np.zeros((order, order))
        at = 0
        for b in blocks:
            k = b.shape[0]
            A0[at:at + k, at:at + k] = b
            at += k
        Q, _ = np.linalg.qr(rng.normal(size=(order, order)))
        A = Q @ A0 @ Q.T
        # balance input columns against their DC levels
        B = rng.normal(size=(order, 3)) / np.maximum(np.abs(u_dc), 1e-3)
        C = rng.normal(size=(1, order))
        D = rng.normal(size=(1, 3)) * 0.02 / np.maximum(np.abs(u_dc), 1e-3)
        model = sysid.StateSpaceModel(A, B, C, D, fs=cfg.fs)
        gain = (model.C @ np.linalg.solve(np.eye(order) - model.A, model.B)
                + model.D)
        level = float((gain @ u_dc)[0])
        if abs(level) < 1e-2:
            continue
        s = target / level
        model.C = model.C * s
        model.D = model.D * s
        # keep the ICP pulsatile: nominal pulse amplitudes (25 mmHg ABP,
        # 20 cm/s CBv) through the beat-rate response must reach ~1 mmHg
        z = np.exp(2j * np.pi / (cfg.mean_rr * cfg.fs))
        Gp = (model.C @ np.linalg.solve(z * np.eye(order) - model.A, model.B)
              + model.D)[0]
        if 25.0 * abs(Gp[0]) + 20.0 * abs(Gp[1]) < 1.0:
            continue
        return model
    raise RuntimeError("system sampling failed to converge")


def _acceptable_icp(icp: np.ndarray, r_samples: np.ndarray,
                    fs: float) -> bool:
    """True when every beat of the rendered ICP has an alignable foot."""
    if fs != signals.PIPELINE_FS:
        return True
    ref = signals.BeatIndex(onsets=r_samples,
                            source=signals.BeatSource.ECG_R_PEAK)
    wave = Waveform(icp, fs, Channel.ICP)
    _, mask = signals.align_onsets(ref, wave)
    return bool(np.all(mask))


def _render_pulse_train(total: int, feet: np.ndarray, fs: float,
                        rise: float, decay: float, bumps,
                        amps: np.ndarray) -> np.ndarray:
    out = np.zeros(total)
    for i in range(len(feet) - 1):
        s, e = int(feet[i]), int(feet[i + 1])
        if e <= s:
            continue
        tau = (np.arange(s, min(e, total)) - feet[i]) / (feet[i + 1] - feet[i])
        out[s:min(e, total)] = amps[i] * _pulse_shape(tau, rise, decay, bumps)
    return out


def markov_distance(a: sysid.StateSpaceModel, b: sysid.StateSpaceModel,
                    count: int = 20) -> float:
    """Relative impulse-response distance between two systems."""
    ma = sysid.markov_parameters(a, count)
    mb = sysid.markov_parameters(b, count)
    denom = max(np.linalg.norm(ma), np.linalg.norm(mb), 1e-300)
    return float(np.linalg.norm(ma - mb) / denom)


def generate_recording(seed: int, config: GeneratorConfig,
                       system: sysid.StateSpaceModel | None = None,
                       morphology: Morphology | None = None,
                       patient_id: str = "p000",
                       recording_id: str = "r000",
                       avoid_systems: tuple = (),
                       ) -> tuple[Recording, GroundTruth]:
    """Render one recording and its ground truth.

    In noise-free mode (snr_db None) the stored ICP equals the exact
    simulation of the true system on the rendered input channels. When
    no system is given, candidates are rejection-sampled until the
    rendered ICP has a certified foot on every beat (arbitrary phase at
    the beat rate would otherwise defeat onset alignment) and clears the
    separation floor against every model in ``avoid_systems``.
    """
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    fs = config.fs
    B = config.beats

    morph = morphology if morphology is not None else sample_morphology(rng)

    # RR bounded random walk
    rr = np.empty(B)
    rr[0] = config.mean_rr
    lo, hi = config.rr_span
    for i in range(1, B):
        rr[i] = np.clip(rr[i - 1] + rng.normal(0.0, config.rr_walk_step), lo, hi)
    rr = np.clip(rr, *signals.RR_BOUNDS)

    # beat timeline (R events), one virtual closing beat for rendering
    t_r = config.pad + np.concatenate([[0.0], np.cumsum(rr)])   # length B+1
    total = int(round((t_r[-1] + config.pad) * fs))
    t_grid = np.arange(total) / fs

    r_samples = np.round(t_r[:B] * fs).astype(int)
    abp_feet_t = t_r + config.abp_lag
    cbv_lag = config.cbv_lag + (
        rng.uniform(-config.cbv_lag_jitter, config.cbv_lag_jitter, size=B + 1)
        if config.cbv_lag_jitter > 0 else 0.0)
    cbv_feet_t = t_r + cbv_lag
    abp_feet = np.round(abp_feet_t * fs).astype(int)
    cbv_feet = np.round(cbv_feet_t * fs).astype(int)

    t_beats = t_r[:B]
    abp_amps = morph.abp_amp * (1.0 + _multisine(morph.abp_mod, t_beats))
    abp = (morph.abp_base
           + _multisine(morph.abp_wander, t_grid)
           + _render_pulse_train(total, abp_feet, fs, morph.abp_rise,
                                 morph.abp_decay, (morph.abp_dicrotic,),
                                 np.append(abp_amps, abp_amps[-1])))

    cbv_amps = morph.cbv_amp * (1.0 + _multisine(morph.cbv_mod, t_beats))
    cbv = (morph.cbv_base
           + _render_pulse_train(total, cbv_feet, fs, morph.cbv_rise,
                                 morph.cbv_decay, morph.cbv_bumps,
                                 np.append(cbv_amps, cbv_amps[-1])))
    # known LTI coupling path from ABP
    import scipy.signal as _sig
    alpha = morph.cbv_coupling_alpha
    cbv = cbv + morph.cbv_coupling_gain * _sig.lfilter(
        [1.0 - alpha], [1.0, -alpha], abp - float(np.mean(abp)))

    # ECG: R spikes plus low T and P waves
    ecg = np.zeros(total)
    for i in range(B):
        center = t_r[i]
        dur = rr[i]
        for amp, offset, width in ((1.0, 0.0, 0.008),
                                   (0.12, 0.30 * dur, 0.045),
                                   (-0.07, -0.14 * dur, 0.022)):
            c = center + offset
            loidx = max(int((c - 5 * width) * fs), 0)
            hiidx = min(int((c + 5 * width) * fs) + 1, total)
            if hiidx > loidx:
                tt = t_grid[loidx:hiidx]
                ecg[loidx:hiidx] += amp * np.exp(-0.5 * ((tt - c) / width) ** 2)

    # held RR input channel
    rr_row = np.empty(total)
    edges = np.round(t_r * fs).astype(int)
    rr_row[: edges[0]] = rr[0]
    for i in range(B):
        rr_row[edges[i]: min(edges[i + 1], total)] = rr[i]
    rr_row[edges[B]:] = rr[B - 1]

    u_dc = np.array([float(np.mean(abp)), float(np.mean(cbv)), float(np.mean(rr))])
    U = np.vstack([abp, cbv, rr_row])
    if system is not None:
        sysm = system
        icp = sysid.simulate(sysm, U)[0]
        if not _acceptable_icp(icp, r_samples, fs):
            raise RuntimeError(
                "fixed system rendered an ICP without certified feet on "
                "this realization; retry with another seed")
    else:
        for _ in range(400):
            cand = sample_system(rng, config, u_dc)
            if any(markov_distance(cand, other) < config.separation_floor
                   for other in avoid_systems):
                continue
            icp = sysid.simulate(cand, U)[0]
            if _acceptable_icp(icp, r_samples, fs):
                sysm = cand
                break
        else:
            raise RuntimeError("no acceptable system after 400 candidates")
    # ground-truth ICP feet: minima of the clean waveform after each beat
    look = int(0.22 * fs)
    icp_feet = np.array([r + int(np.argmin(icp[r:r + look]))
                         for r in r_samples], dtype=int)

    if config.snr_db is not None:
        for arr in (ecg, abp, cbv, icp):
            ac = arr - np.mean(arr)
            sigma = float(np.sqrt(np.mean(ac * ac))) * 10 ** (-config.snr_db / 20)
            arr += rng.normal(0.0, sigma, size=total)

    chans = {
        Channel.ABP: Waveform(abp, fs, Channel.ABP),
        Channel.CBV: Waveform(cbv, fs, Channel.CBV),
    }
    if config.with_ecg:
        chans[Channel.ECG] = Waveform(ecg, fs, Channel.ECG)
    if config.with_icp:
        chans[Channel.ICP] = Waveform(icp, fs, Channel.ICP)
    rec = Recording(channels=chans, patient_id=patient_id,
                    recording_id=recording_id)

    n_entries = B // signals.BEATS_PER_ENTRY
    mean_icps = []
    for k in range(n_entries):
        a = edges[k * signals.BEATS_PER_ENTRY]
        b = edges[min((k + 1) * signals.BEATS_PER_ENTRY, B)]
        mean_icps.append(float(np.mean(icp[a:b])))

    truth = GroundTruth(
        seed=seed, config=config, true_system=sysm, morphology=morph,
        rr_series=rr, r_samples=r_samples,
        abp_feet=abp_feet[:B], cbv_feet=cbv_feet[:B], icp_feet=icp_feet[:B],
        mean_icp_per_entry=np.asarray(mean_icps),
    )
    return rec, truth


def generate_cohort(seed: int, n_systems: int, entries_per_system: int,
                    config: GeneratorConfig | None = None) -> Cohort:
    """Labeled multi-system entry set built through the real segmentation.

    Systems are rejection-sampled until pairwise relative impulse
    response distances clear the configured separation floor. Each
    requested entry comes from its own recording (one patient per
    recording) and is labeled with its system index.
    """
    cfg = config if config is not None else GeneratorConfig()
    cfg.validate()

    expected = cfg.beats // signals.BEATS_PER_ENTRY
    morph_rng = np.random.default_rng(np.random.PCG64(util.derive_seed(seed, 1)))
    systems: list[sysid.StateSpaceModel] = []
    morphs: list[Morphology] = []
    entries = []
    labels = []
    truths = []
    recs = []
    for s_idx in range(n_systems):
        # the first recording of each system doubles as its sampler:
        # candidates must render an alignable ICP and clear the
        # separation floor against every previously accepted system
        first = None
        for attempt in range(40):
            morph = sample_morphology(morph_rng)
            rec_seed = util.derive_seed(
                seed, 1000 + s_idx * 100 + 100000 * attempt)
            try:
                rec, truth = generate_recording(
                    rec_seed, cfg, system=None, morphology=morph,
                    patient_id=f"s{s_idx:02d}e00",
                    recording_id=f"rec_s{s_idx:02d}e00",
                    avoid_systems=tuple(systems))
                ents = signals.segment_entries(rec)
            except (RuntimeError, TooShort):
                continue
            if len(ents) == expected:
                first = (rec, truth, ents, morph)
                break
        if first is None:
            raise RuntimeError("cohort system sampling failed")
        rec, truth, ents, morph = first
        systems.append(truth.true_system)
        morphs.append(morph)

        per_system = [(rec, truth, ents)]
        for e_idx in range(1, entries_per_system):
            # same dynamics and morphology; fresh RR walk and modulation
            # phases. Realizations that defeat onset alignment are
            # rejection-sampled away on derived seeds.
            got = None
            for attempt in range(40):
                rec_seed = util.derive_seed(
                    seed, 1000 + s_idx * 100 + e_idx + 100000 * attempt)
                pid = f"s{s_idx:02d}e{e_idx:02d}"
                try:
                    rec, truth = generate_recording(
                        rec_seed, cfg, system=systems[s_idx],
                        morphology=morph, patient_id=pid,
                        recording_id=f"rec_{pid}")
                    ents = signals.segment_entries(rec)
                except (RuntimeError, TooShort):
                    continue
                if len(ents) == expected:
                    got = (rec, truth, ents)
                    break
            if got is None:
                raise RuntimeError(
                    f"no alignable realization for system {s_idx} "
                    f"entry {e_idx} after 40 attempts")
            per_system.append(got)
        for rec, truth, ents in per_system:
            for entry in ents:
                entries.append(entry)
                labels.append(s_idx)
            truths.append(truth)
            recs.append(rec)
    return Cohort(entries=entries, system_ids=labels, systems=systems,
                  truths=truths, recordings=recs)
