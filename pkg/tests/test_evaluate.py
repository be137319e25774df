import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nicpest import evaluate
from nicpest.errors import (ConfigInvalid, Degenerate, MissingPatientIds,
                            TooFew)
from nicpest.evaluate import (EstimateRecord, Level, bland_altman,
                              delta_meanicp_bins, error_bands, kendall_tau,
                              report)


def tau_b_oracle(x, y):
    """Direct pair-counting definition of tie-corrected tau."""
    n = len(x)
    nc = nd = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            sx = np.sign(x[j] - x[i])
            sy = np.sign(y[j] - y[i])
            if sx == 0 and sy == 0:
                continue
            if sx == 0:
                tx += 1
            elif sy == 0:
                ty += 1
            elif sx == sy:
                nc += 1
            else:
                nd += 1
    denom = math.sqrt((nc + nd + tx) * (nc + nd + ty))
    return (nc - nd) / denom


# ---------------------------------------------------------------------------
# agreement


def test_bland_altman_hand_case():
    s = bland_altman([10.0, 12.0, 14.0, 16.0], [11.0, 11.0, 15.0, 15.0])
    assert s.mean_diff == pytest.approx(0.0, abs=1e-14)
    assert s.sd_diff == pytest.approx(math.sqrt(4.0 / 3.0))
    assert s.loa_low == pytest.approx(-1.96 * math.sqrt(4.0 / 3.0))
    assert s.loa_high == pytest.approx(1.96 * math.sqrt(4.0 / 3.0))
    assert s.n == 4


def test_bland_altman_constant_offset():
    s = bland_altman([10.0, 20.0, 30.0], [13.0, 23.0, 33.0])
    assert s.mean_diff == pytest.approx(3.0)
    assert s.sd_diff == pytest.approx(0.0, abs=1e-12)


def test_bland_altman_validation():
    with pytest.raises(ConfigInvalid):
        bland_altman([1.0, 2.0], [1.0])
    with pytest.raises(ConfigInvalid):
        bland_altman(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(TooFew):
        bland_altman([1.0], [2.0])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40),
       st.integers(0, 2 ** 32 - 1))
def test_bland_altman_interval_ordering(truth, seed):
    est = [t + v for t, v in zip(
        truth, np.random.default_rng(seed).normal(size=len(truth)))]
    s = bland_altman(truth, est)
    assert s.loa_low <= s.mean_diff <= s.loa_high
    assert s.loa_high - s.loa_low == pytest.approx(2 * 1.96 * s.sd_diff)


# ---------------------------------------------------------------------------
# error bands


def test_error_bands_entry_hand_case():
    br = error_bands([0.5, -1.9, 2.0, -5.9, 6.0, 7.5])
    assert br.pct_lt2 == pytest.approx(100.0 / 3.0)
    assert br.pct_2to6 == pytest.approx(100.0 / 3.0)
    assert br.pct_lt6 == pytest.approx(200.0 / 3.0)
    assert br.level == Level.ENTRY and br.n == 6


def test_error_bands_boundaries():
    at2 = error_bands([2.0])
    assert (at2.pct_lt2, at2.pct_2to6, at2.pct_lt6) == (0.0, 100.0, 100.0)
    at6 = error_bands([6.0])
    assert (at6.pct_lt2, at6.pct_2to6, at6.pct_lt6) == (0.0, 0.0, 0.0)
    neg = error_bands([-1.0])
    assert neg.pct_lt2 == 100.0


def test_error_bands_patient_level_signed_average():
    br = error_bands([3.0, -3.0, 5.0], Level.PATIENT,
                     patient_ids=["a", "a", "b"])
    # patient a's signed errors cancel before the bands apply
    assert br.n == 2
    assert br.pct_lt2 == pytest.approx(50.0)
    assert br.pct_2to6 == pytest.approx(50.0)
    assert br.pct_lt6 == pytest.approx(100.0)


def test_error_bands_validation():
    with pytest.raises(ConfigInvalid):
        error_bands([])
    with pytest.raises(ConfigInvalid):
        error_bands(np.ones((2, 2)))
    with pytest.raises(MissingPatientIds):
        error_bands([1.0, 2.0], Level.PATIENT)
    with pytest.raises(MissingPatientIds):
        error_bands([1.0, 2.0], Level.PATIENT, patient_ids=["a"])


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=50))
def test_error_bands_additive_and_consistent(errors):
    br = error_bands(errors)
    a = np.abs(np.asarray(errors))
    assert br.pct_lt2 == pytest.approx(np.mean(a < 2.0) * 100.0)
    assert br.pct_lt6 == pytest.approx(np.mean(a < 6.0) * 100.0)
    assert br.pct_lt6 == br.pct_lt2 + br.pct_2to6
    assert 0.0 <= br.pct_lt2 <= br.pct_lt6 <= 100.0


# ---------------------------------------------------------------------------
# rank correlation


def test_kendall_tau_extremes():
    assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_kendall_tau_matches_pair_counting():
    rng = np.random.default_rng(5)
    for _ in range(25):
        n = int(rng.integers(3, 12))
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        assert kendall_tau(x, y) == pytest.approx(tau_b_oracle(x, y))


def test_kendall_tau_validation():
    with pytest.raises(TooFew):
        kendall_tau([1.0], [2.0])
    with pytest.raises(Degenerate):
        kendall_tau([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(Degenerate):
        kendall_tau([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ConfigInvalid):
        kendall_tau([1.0, 2.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# offset bins


def test_delta_bins_hand_case():
    bins = delta_meanicp_bins(
        test_errors=[1.0, 2.0, 3.0, 4.0],
        test_means=[11.0, 12.2, 9.5, 15.1],
        train_means=[10.0, 12.0], bin_width=2.0)
    assert [b["center"] for b in bins] == [-2.0, 0.0, 2.0, 4.0]
    assert [b["n"] for b in bins] == [1, 1, 1, 1]
    assert [b["mean"] for b in bins] == [3.0, 1.0, 2.0, 4.0]
    single = bins[0]
    assert single["q25"] == single["q50"] == single["q75"] == 3.0


def test_delta_bins_quartiles():
    bins = delta_meanicp_bins([1.0, 2.0, 3.0, 4.0], [11.0] * 4,
                              [11.0], bin_width=2.0)
    assert len(bins) == 1
    b = bins[0]
    assert b["center"] == 0.0 and b["n"] == 4
    assert b["mean"] == pytest.approx(2.5)
    assert b["q25"] == pytest.approx(1.75)
    assert b["q50"] == pytest.approx(2.5)
    assert b["q75"] == pytest.approx(3.25)


def test_delta_bins_half_offsets_round_to_even():
    bins = delta_meanicp_bins([1.0, 1.0], [11.0, 13.0], [10.0],
                              bin_width=2.0)
    assert [b["center"] for b in bins] == [0.0, 4.0]


def test_delta_bins_validation():
    with pytest.raises(ConfigInvalid):
        delta_meanicp_bins([], [], [10.0])
    with pytest.raises(ConfigInvalid):
        delta_meanicp_bins([1.0], [1.0, 2.0], [10.0])
    with pytest.raises(ConfigInvalid):
        delta_meanicp_bins([1.0], [1.0], [])
    with pytest.raises(ConfigInvalid):
        delta_meanicp_bins([1.0], [1.0], [10.0], bin_width=0.0)


# ---------------------------------------------------------------------------
# records and report files


def test_estimate_record_error():
    r = EstimateRecord("e", "p", "n0", "lm_w_c", est_mean_icp=12.0,
                       true_mean_icp=10.0)
    assert r.error == pytest.approx(2.0)
    assert EstimateRecord("e", "p", "n0", "lm_w_c", 12.0).error is None


def sample_records():
    rows = [
        ("e01", "pa", "n0", "lm_w_c", 11.0, 10.0),
        ("e02", "pa", "n0", "lm_w_c", 14.5, 12.0),
        ("e03", "pb", "n0", "lm_w_c", 19.0, 20.0),
        ("e04", "pb", "n0", "lm_w_c", 8.0, None),
        ("e05", "pa", "n1", "lm_wo_c", 15.0, 14.0),
        ("e06", "pb", "n1", "lm_wo_c", 21.0, 27.5),
    ]
    return [EstimateRecord(e, p, s, a, est, t)
            for e, p, s, a, est, t in rows]


def test_report_writes_expected_files(tmp_path):
    out = tmp_path / "rep"
    written = report(sample_records(), out)
    names = {p.split("/")[-1] for p in written}
    assert {"errors.csv", "bands.csv", "agreement.csv",
            "bland_altman_n0_lm_w_c.svg",
            "bland_altman_n1_lm_wo_c.svg"} == names
    assert written == sorted(written)

    lines = (out / "errors.csv").read_text().splitlines()
    assert lines[0].startswith("entry_id,")
    assert len(lines) == 7
    # the unscored record keeps its row with empty truth and error fields
    e04 = [l for l in lines if l.startswith("e04,")][0]
    assert e04.split(",")[4] == "" and e04.split(",")[6] == ""


def test_report_stats_match_direct_calls(tmp_path):
    records = sample_records()
    report(records, tmp_path / "rep")
    scored = [r for r in records if r.scenario == "n0"
              and r.true_mean_icp is not None]
    errs = np.array([r.error for r in scored])

    bands = (tmp_path / "rep" / "bands.csv").read_text().splitlines()
    entry_row = [l for l in bands
                 if l.startswith("n0,lm_w_c,entry")][0].split(",")
    br = error_bands(errs)
    assert entry_row[3] == str(br.n)
    assert float(entry_row[4]) == pytest.approx(br.pct_lt2, abs=1e-4)

    agree = (tmp_path / "rep" / "agreement.csv").read_text().splitlines()
    row = [l for l in agree if l.startswith("n0,lm_w_c")][0].split(",")
    stats = bland_altman([r.true_mean_icp for r in scored],
                         [r.est_mean_icp for r in scored])
    assert float(row[3]) == pytest.approx(stats.mean_diff, abs=1e-4)
    assert float(row[6]) == pytest.approx(stats.loa_high, abs=1e-4)


def test_report_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    report(sample_records(), a)
    report(sample_records(), b)
    for name in ("errors.csv", "bands.csv", "agreement.csv",
                 "bland_altman_n0_lm_w_c.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_report_single_scored_record_skips_agreement(tmp_path):
    records = [EstimateRecord("e1", "p", "n0", "lm_w_c", 11.0, 10.0),
               EstimateRecord("e2", "p", "n0", "lm_w_c", 12.0, None)]
    written = report(records, tmp_path / "rep")
    assert not any("bland_altman" in p for p in written)
    agree = (tmp_path / "rep" / "agreement.csv").read_text().splitlines()
    assert len(agree) == 1
    bands = (tmp_path / "rep" / "bands.csv").read_text().splitlines()
    assert len(bands) == 3


def test_report_svg_point_count(tmp_path):
    written = report(sample_records(), tmp_path / "rep")
    svg_path = [p for p in written if p.endswith("n0_lm_w_c.svg")][0]
    svg = open(svg_path).read()
    assert svg.startswith("<svg")
    assert svg.count("<circle") == 3


def test_report_rejects_empty_input(tmp_path):
    with pytest.raises(ConfigInvalid):
        report([], tmp_path / "rep")
