"""Cohort-level acceptance checks for the full estimation stack.

Each test prints exactly one PASS/FAIL verdict line on the real stdout
so the gate is readable even under capture. Baselines marked as pinned
were recorded from the first verified run and guard against regression.
"""
import dataclasses
import math
import sys
import time

import numpy as np
import pytest

from nicpest import estimator, evaluate, io, mapping, signals, synth, sysid, util
from nicpest.errors import Degenerate
from nicpest.estimator import TrainConfig
from nicpest.features import (FeatureConfig, feature_matrix,
                              impute_with_medians, slow_wave)
from nicpest.mapping import KernelSpec, build_error_matrix
from nicpest.signals import Channel, entry_inputs, entry_output
from nicpest.synth import GeneratorConfig
from nicpest.sysid import IdentConfig

# ranking-fit hyperparameters pinned by the tuning study in scripts/
TAU_GAMMA = 1e4
TAU_RHO = 1e-4
# pinned fraction of held-out entries within 2 mmHg on the first
# verified end-to-end run; later runs may not regress more than 1 point
HELDOUT_BASELINE = 0.8


@pytest.fixture
def verdict(request):
    """One PASS/FAIL line per check, written through pytest's capture."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _inner(tag: str, ok: bool, detail: str = "") -> None:
        line = f"ACCEPTANCE {tag}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  [{detail}]"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                sys.stdout.write(line + "\n")
                sys.stdout.flush()
        else:
            print(line, flush=True)
        assert ok, line

    return _inner


def _mean_row_tau(F, E, B):
    Eh = F @ B
    return float(np.mean([evaluate.kendall_tau(Eh[j], E[j])
                          for j in range(E.shape[0])]))


def test_01_subspace_identification_oracle(verdict):
    def stable_system(rng, order):
        A = rng.normal(size=(order, order))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        return sysid.StateSpaceModel(A, rng.normal(size=(order, 3)),
                                     rng.normal(size=(1, order)),
                                     rng.normal(size=(1, 3)), fs=1.0)

    t0 = time.monotonic()
    ok = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        true = stable_system(rng, 2 + seed % 2)
        u = rng.normal(size=(3, 4000))
        y = sysid.simulate(true, u)[0][None, :]
        model = sysid.identify(u, y, IdentConfig(), fs=1.0)
        rel = (np.linalg.norm(sysid.markov_parameters(model, 20)
                              - sysid.markov_parameters(true, 20))
               / np.linalg.norm(sysid.markov_parameters(true, 20)))
        ok += rel <= 1e-6
    elapsed = time.monotonic() - t0
    verdict("01 subspace-id-oracle", ok >= 49 and elapsed < 60.0,
             f"recovered {ok}/50, {elapsed:.1f}s")


def test_02_full_ranking_qp_second_solver(verdict):
    cp = pytest.importorskip("cvxpy")
    worst_obj = worst_kkt = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(3, 9))
        d = int(rng.integers(2, 5))
        n_e = int(rng.integers(3, 7))
        F = rng.normal(size=(n_e, d))
        E = rng.normal(scale=2.0, size=(n_e, N))
        gamma = [1.0, 10.0, 100.0][seed % 3]
        fit = mapping.fit_full_qp(F, E, gamma=gamma)

        pairs = []
        for m in range(n_e):
            for k in range(N):
                for l in range(k + 1, N):
                    if E[m, k] == E[m, l]:
                        continue
                    lo, hi = (k, l) if E[m, k] < E[m, l] else (l, k)
                    pairs.append((m, lo, hi))
        B = cp.Variable((d, N))
        s = cp.Variable(len(pairs), nonneg=True)
        cons = [s[p] >= F[m] @ (B[:, lo] - B[:, hi])
                for p, (m, lo, hi) in enumerate(pairs)]
        prob = cp.Problem(cp.Minimize(cp.sum_squares(F @ B - E)
                                      + gamma * cp.sum_squares(s)), cons)
        prob.solve(solver=cp.CLARABEL)

        viol = np.array([max(0.0, F[m] @ (fit.B[:, lo] - fit.B[:, hi]))
                         for m, lo, hi in pairs])
        mine = float(np.sum((F @ fit.B - E) ** 2) + gamma * viol @ viol)
        worst_obj = max(worst_obj,
                        abs(mine - prob.value) / (1.0 + abs(prob.value)))

        H0 = np.kron(np.eye(N), 2.0 * (F.T @ F))
        c0 = (F.T @ E).reshape(-1, order="F") * 2.0
        G = np.zeros((len(pairs), N * d))
        for p, (m, lo, hi) in enumerate(pairs):
            G[p, lo * d:(lo + 1) * d] = F[m]
            G[p, hi * d:(hi + 1) * d] = -F[m]
        x = fit.B.reshape(-1, order="F")
        g = H0 @ x - c0 + 2.0 * gamma * (G.T @ np.maximum(G @ x, 0.0))
        worst_kkt = max(worst_kkt,
                        float(np.max(np.abs(g)) / (1.0 + np.max(np.abs(c0)))))
    verdict("02 ranking-qp-second-solver",
             worst_obj <= 1e-6 and worst_kkt <= 1e-8,
             f"obj gap {worst_obj:.2e}, kkt {worst_kkt:.2e}")


def test_03_ridge_closed_form(verdict):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_e = int(rng.integers(3, 41))
        d = int(rng.integers(1, 11))
        N = int(rng.integers(1, 11))
        rho = float(10.0 ** rng.uniform(-4, 2))
        F = rng.normal(size=(n_e, d))
        E = rng.normal(size=(n_e, N))
        fit = mapping.fit_unconstrained(F, E, rho=rho)
        ref = np.linalg.solve(F.T @ F + rho * np.eye(d), F.T @ E)
        worst = max(worst, float(np.max(np.abs(fit.B - ref))))
    verdict("03 ridge-closed-form", worst <= 1e-10, f"max dev {worst:.2e}")


def _tau_instance(seed: int):
    cohort = synth.generate_cohort(seed, n_systems=10, entries_per_system=3)
    entries = cohort.entries
    models = [sysid.identify(entry_inputs(e), entry_output(e), IdentConfig(),
                             fs=e.fs, source_entry_id=e.entry_id)
              for e in entries]
    F_raw, _ = feature_matrix(entries, FeatureConfig(), normalize=False)
    F, _ = impute_with_medians(F_raw)
    em = build_error_matrix(models, entries, jobs=1)
    return F, em.E


def test_04_ranking_constraints_improve_training_tau(verdict):
    wins = losses = 0
    cons_means = []
    unc_means = []
    for seed in range(20):
        F, E = _tau_instance(seed)
        ridge = mapping.fit_unconstrained(F, E, rho=TAU_RHO)
        seq = mapping.fit_sequential(F, E, gamma=TAU_GAMMA, rho=TAU_RHO,
                                     seed=0)
        t_u = _mean_row_tau(F, E, ridge.B)
        t_c = _mean_row_tau(F, E, seq.B)
        cons_means.append(t_c)
        unc_means.append(t_u)
        wins += t_c > t_u + 1e-12
        losses += t_c < t_u - 1e-12
    mean_c = float(np.mean(cons_means))
    mean_u = float(np.mean(unc_means))
    verdict("04 ranking-benefit",
             mean_c >= mean_u and wins >= 15,
             f"tau {mean_c:.6f} vs {mean_u:.6f}, "
             f"wins {wins}/20, losses {losses}/20")


def test_05_linear_kernel_consistency(verdict):
    worst = 0.0
    for s in range(10):
        rng = np.random.default_rng(100 + s)
        F = rng.normal(size=(6, 10))
        E = rng.normal(size=(6, 6))
        km = mapping.fit_kernel(F, E, gamma=0.0, rho=0.5,
                                kernel=KernelSpec("linear"))
        lm = mapping.fit_unconstrained(F, E, rho=0.5)
        worst = max(worst, float(np.max(np.abs(
            mapping.predict_errors(km, F) - F @ lm.B))))
    verdict("05 kernel-linear-consistency", worst <= 1e-6,
             f"max gap {worst:.2e}")


def test_06_end_to_end_heldout_accuracy(verdict):
    t0 = time.monotonic()
    cohort = synth.generate_cohort(0, n_systems=10, entries_per_system=3)
    cfg = GeneratorConfig()
    holdout = []
    for s_idx in range(10):
        morph = cohort.truths[3 * s_idx].morphology
        got = None
        for attempt in range(40):
            rec_seed = util.derive_seed(777, s_idx * 100 + attempt)
            pid = f"h{s_idx:02d}"
            try:
                rec, _ = synth.generate_recording(
                    rec_seed, cfg, system=cohort.systems[s_idx],
                    morphology=morph, patient_id=pid,
                    recording_id=f"rec_{pid}")
                ents = signals.segment_entries(rec)
            except RuntimeError:
                continue
            if ents:
                got = ents[0]
                break
        assert got is not None, f"no held-out realization for system {s_idx}"
        holdout.append(got)

    db = estimator.train_database(
        cohort.entries, TrainConfig(gamma=TAU_GAMMA, rho=TAU_RHO, seed=0))
    errs = np.array([estimator.estimate(db, e).mean_nicp - e.mean_icp
                     for e in holdout])
    frac = float(np.mean(np.abs(errs) < 2.0))

    em = build_error_matrix(db.models, holdout)
    rng = np.random.default_rng(0)
    draws = rng.integers(0, em.E.shape[1], size=(1000, em.E.shape[0]))
    random_frac = float(np.mean(
        np.abs(em.E[np.arange(em.E.shape[0]), draws]) < 2.0))
    elapsed = time.monotonic() - t0
    verdict("06 end-to-end-heldout",
             frac >= HELDOUT_BASELINE - 0.01
             and frac > random_frac and elapsed < 300.0,
             f"frac {frac:.2f} (pinned {HELDOUT_BASELINE:.2f}), "
             f"random {random_frac:.3f}, {elapsed:.0f}s")


def test_07_statistics_oracles(verdict):
    s = evaluate.bland_altman([10.0, 12.0, 14.0, 16.0],
                              [11.0, 11.0, 15.0, 15.0])
    sd = math.sqrt(4.0 / 3.0)
    loa_ok = (abs(s.mean_diff) <= 1e-12 and abs(s.sd_diff - sd) <= 1e-12
              and abs(s.loa_low + 1.96 * sd) <= 1e-12
              and abs(s.loa_high - 1.96 * sd) <= 1e-12)

    def brute_tau(x, y):
        nc = nd = tx = ty = 0
        for i in range(len(x)):
            for j in range(i + 1, len(x)):
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
        return (nc - nd) / math.sqrt((nc + nd + tx) * (nc + nd + ty))

    rng = np.random.default_rng(11)
    tau_ok = True
    checked = 0
    while checked < 1000:
        n = int(rng.integers(2, 11))
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        checked += 1
        if abs(evaluate.kendall_tau(x, y) - brute_tau(x, y)) > 1e-12:
            tau_ok = False
            break

    bands_ok = True
    for seed in range(200):
        vals = np.random.default_rng(seed).uniform(-10, 10,
                                                   size=seed % 17 + 1)
        br = evaluate.error_bands(vals)
        if br.pct_lt6 != br.pct_lt2 + br.pct_2to6:
            bands_ok = False
            break
    verdict("07 statistics-oracles", loa_ok and tau_ok and bands_ok,
             f"loa {loa_ok}, tau x{checked} {tau_ok}, bands {bands_ok}")


def test_08_segmentation_accuracy(verdict):
    hits = total = 0
    counts_ok = True
    for seed, beats in ((201, 375), (202, 375), (203, 750), (204, 750),
                        (205, 1125)):
        cfg = dataclasses.replace(GeneratorConfig(), snr_db=20.0,
                                  beats=beats)
        rec, truth = synth.generate_recording(seed, cfg)
        det = signals.detect_qrs(rec.channels[Channel.ECG])
        tol = int(round(0.020 * cfg.fs))
        for r in truth.r_samples:
            hits += int(np.min(np.abs(det.onsets - r)) <= tol)
        total += len(truth.r_samples)
        counts_ok &= len(signals.segment_entries(rec)) == beats // 360
    rate = hits / total
    verdict("08 segmentation-accuracy", rate >= 0.99 and counts_ok,
             f"beat hit rate {rate:.4f} over {total}, "
             f"entry counts exact: {counts_ok}")


def test_09_determinism_round_trip(verdict, entries, tmp_path):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        db = estimator.train_database(
            list(entries), TrainConfig(gamma=10.0, rho=1.0, seed=5))
        db.save(d / "db.json")
        loaded = estimator.ModelDatabase.load(d / "db.json")
        results = [estimator.estimate(loaded, e) for e in entries]
        io.write_results(results, entries, loaded.algorithm.value,
                         d / "results.csv")
        digests.append(((d / "db.json").read_bytes(),
                        (d / "results.csv").read_bytes()))
    same_db = digests[0][0] == digests[1][0]
    same_res = digests[0][1] == digests[1][1]
    verdict("09 determinism-round-trip", same_db and same_res,
             f"db bytes equal: {same_db}, results bytes equal: {same_res}")


def test_10_slow_wave_band_response(verdict):
    n = 900
    rr = np.full(n, 0.8)
    t = np.cumsum(rr) - rr[0]

    def gain(freq):
        if freq == 0.0:
            out = slow_wave(np.full(n, 5.0), rr)
            return float(np.max(np.abs(out))) / 5.0
        out = slow_wave(np.sin(2 * np.pi * freq * t), rr)
        core = out[len(out) // 4: -len(out) // 4]
        return float(np.max(core) - np.min(core)) / 2.0

    g_dc, g_pass, g_stop = gain(0.0), gain(0.05), gain(0.5)
    verdict("10 slow-wave-band",
             g_dc <= 0.1 and 0.9 <= g_pass <= 1.1 and g_stop <= 0.1,
             f"dc {g_dc:.3f}, 0.05Hz {g_pass:.3f}, 0.5Hz {g_stop:.4f}")
