import dataclasses
import json

import numpy as np
import pytest

from nicpest import signals, synth, sysid
from nicpest.errors import ConfigInvalid
from nicpest.signals import Channel
from nicpest.synth import (GeneratorConfig, Morphology, generate_recording,
                           markov_distance, sample_morphology)


@pytest.fixture(scope="module")
def recording():
    return generate_recording(42, GeneratorConfig())


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    for bad in (
            dict(beats=1),
            dict(rr_span=(0.1, 1.0)),
            dict(mean_rr=2.0),
            dict(snr_db=0.0),
            dict(snr_db=-3.0),
            dict(abp_lag=0.2),
            dict(cbv_lag=0.0),
            dict(icp_target_range=(4.0, 22.0)),
            dict(icp_target_range=(8.0, 26.0))):
        with pytest.raises(ConfigInvalid):
            dataclasses.replace(GeneratorConfig(), **bad).validate()
    GeneratorConfig().validate()


def test_config_round_trip():
    cfg = GeneratorConfig(beats=400, snr_db=15.0, system_orders=(3,),
                          cbv_lag_jitter=0.01)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


def test_morphology_round_trip():
    m = sample_morphology(np.random.default_rng(3))
    assert Morphology.from_dict(m.to_dict()) == m
    json.dumps(m.to_dict())


# ---------------------------------------------------------------------------
# single recordings


def test_recording_deterministic(recording):
    rec, truth = recording
    rec2, truth2 = generate_recording(42, GeneratorConfig())
    for ch in rec.channels:
        assert np.array_equal(rec.channels[ch].samples,
                              rec2.channels[ch].samples)
    assert np.array_equal(truth.rr_series, truth2.rr_series)
    assert np.array_equal(truth.true_system.A, truth2.true_system.A)


def test_icp_is_exact_simulation_of_true_system(recording):
    rec, truth = recording
    cfg = truth.config
    abp = rec.channels[Channel.ABP].samples
    cbv = rec.channels[Channel.CBV].samples
    icp = rec.channels[Channel.ICP].samples
    rr = truth.rr_series
    t_r = cfg.pad + np.concatenate([[0.0], np.cumsum(rr)])
    edges = np.round(t_r * cfg.fs).astype(int)
    total = len(abp)
    rr_row = np.empty(total)
    rr_row[:edges[0]] = rr[0]
    for i in range(cfg.beats):
        rr_row[edges[i]:min(edges[i + 1], total)] = rr[i]
    rr_row[edges[-1]:] = rr[-1]
    sim = sysid.simulate(truth.true_system,
                         np.vstack([abp, cbv, rr_row]))[0]
    assert np.max(np.abs(sim - icp)) < 1e-9


def test_truth_matches_segmentation(recording):
    rec, truth = recording
    entries = signals.segment_entries(rec)
    assert len(entries) == len(truth.mean_icp_per_entry)
    for k, e in enumerate(entries):
        assert e.mean_icp == pytest.approx(truth.mean_icp_per_entry[k],
                                           abs=0.01)


def test_rr_walk_stays_in_span(recording):
    _, truth = recording
    cfg = truth.config
    assert len(truth.rr_series) == cfg.beats
    assert truth.rr_series.min() >= cfg.rr_span[0]
    assert truth.rr_series.max() <= cfg.rr_span[1]


def test_truth_serializes(recording):
    _, truth = recording
    d = truth.to_dict()
    json.dumps(d)
    assert GeneratorConfig.from_dict(d["config"]) == truth.config
    model = sysid.StateSpaceModel.from_dict(d["true_system"])
    assert np.array_equal(model.A, truth.true_system.A)


def test_noise_injection_hits_requested_snr(recording):
    clean_rec, clean_truth = recording
    cfg = dataclasses.replace(GeneratorConfig(), snr_db=20.0)
    noisy_rec, noisy_truth = generate_recording(42, cfg)
    # the clean render and the chosen system are unchanged; only the
    # final additive noise differs
    assert np.array_equal(noisy_truth.true_system.A,
                          clean_truth.true_system.A)
    for ch in (Channel.ABP, Channel.CBV, Channel.ICP, Channel.ECG):
        clean = clean_rec.channels[ch].samples
        noise = noisy_rec.channels[ch].samples - clean
        assert np.any(noise != 0.0)
        ac = clean - clean.mean()
        snr = 10.0 * np.log10(np.mean(ac * ac) / np.mean(noise * noise))
        assert snr == pytest.approx(20.0, abs=0.5)


def test_optional_channels():
    cfg = dataclasses.replace(GeneratorConfig(), with_ecg=False)
    rec, _ = generate_recording(42, cfg)
    assert Channel.ECG not in rec.channels
    entries = signals.segment_entries(rec)
    assert entries and not entries[0].has_ecg

    cfg = dataclasses.replace(GeneratorConfig(), with_icp=False)
    rec, _ = generate_recording(42, cfg)
    assert Channel.ICP not in rec.channels


# ---------------------------------------------------------------------------
# system geometry


def test_markov_distance_hand_case():
    a = sysid.StateSpaceModel(A=np.zeros((1, 1)), B=np.ones((1, 1)),
                              C=np.ones((1, 1)), D=np.zeros((1, 1)), fs=1.0)
    b = sysid.StateSpaceModel(A=np.zeros((1, 1)), B=np.ones((1, 1)),
                              C=2.0 * np.ones((1, 1)), D=np.zeros((1, 1)),
                              fs=1.0)
    assert markov_distance(a, a) == 0.0
    assert markov_distance(a, b) == pytest.approx(0.5)
    assert markov_distance(a, b) == markov_distance(b, a)


# ---------------------------------------------------------------------------
# cohorts


def test_cohort_structure(cohort):
    assert len(cohort.entries) == 10
    assert cohort.system_ids == [i // 2 for i in range(10)]
    assert len(cohort.systems) == 5
    assert len(cohort.truths) == 10
    assert len(cohort.recordings) == 10
    ids = [e.entry_id for e in cohort.entries]
    assert len(set(ids)) == len(ids)
    for e in cohort.entries:
        assert e.mean_icp is not None
        assert 6.0 < e.mean_icp < 24.0


def test_cohort_systems_are_separated(cohort):
    floor = GeneratorConfig().separation_floor
    for i in range(len(cohort.systems)):
        for j in range(i + 1, len(cohort.systems)):
            assert markov_distance(cohort.systems[i],
                                   cohort.systems[j]) >= floor


def test_cohort_entries_share_their_system(cohort):
    for truth, sid in zip(cohort.truths, cohort.system_ids):
        assert np.array_equal(truth.true_system.A, cohort.systems[sid].A)
        assert np.array_equal(truth.true_system.C, cohort.systems[sid].C)


def test_cohort_deterministic(cohort):
    again = synth.generate_cohort(1234, n_systems=5, entries_per_system=2)
    assert [e.entry_id for e in again.entries] \
        == [e.entry_id for e in cohort.entries]
    np.testing.assert_array_equal(
        np.array([e.mean_icp for e in again.entries]),
        np.array([e.mean_icp for e in cohort.entries]))
