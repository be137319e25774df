"""Command-line surface: synth, segment, train, estimate, evaluate.

Each command is a pure function of its inputs, config, and seed. A
single JSON config file can preset any flag; explicit flags override
the file. Failures print one machine-readable JSON line to stderr and
exit with a stable code per error class.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import estimator, evaluate, io, synth, util
from .errors import PipelineError
from .mapping import (DEFAULT_GAMMA_GRID, DEFAULT_RHO_GRID, Algorithm)
from .signals import segment_entries

EXIT_CODES = {"E_IO": 2, "E_PARSE": 3, "E_VALIDATION": 4, "E_RUNTIME": 5}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return EXIT_CODES.get(code, EXIT_CODES["E_RUNTIME"])


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError("E_IO", f"config file not found: {path}")
    try:
        cfg = util.load_json(path)
    except json.JSONDecodeError as err:
        raise CliError("E_PARSE", f"config is not valid JSON: {err}")
    if not isinstance(cfg, dict):
        raise CliError("E_PARSE", "config root must be a JSON object")
    return cfg


def _setting(args, cfg: dict, section: str, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    sec = cfg.get(section, {})
    if key in sec:
        return sec[key]
    if key in cfg:
        return cfg[key]
    return default


def _require_seed(args, cfg: dict, section: str) -> int:
    seed = _setting(args, cfg, section, "seed")
    if seed is None:
        raise CliError("E_VALIDATION",
                       "a seed is required (flag --seed or config key "
                       "'seed'); wall-clock defaults are not used")
    return int(seed)


def _need_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError("E_IO", f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: dict) -> int:
    seed = _require_seed(args, cfg, "synth")
    n_systems = int(_setting(args, cfg, "synth", "systems", 2))
    per_system = int(_setting(args, cfg, "synth", "entries-per-system", 1))
    out_dir = _setting(args, cfg, "synth", "out")
    if out_dir is None:
        raise CliError("E_VALIDATION", "synth needs an output directory")
    gen_overrides = dict(cfg.get("synth", {}).get("generator", {}))
    snr = _setting(args, cfg, "synth", "snr")
    if snr is not None:
        gen_overrides["snr_db"] = float(snr)
    beats = _setting(args, cfg, "synth", "beats")
    if beats is not None:
        gen_overrides["beats"] = int(beats)
    gcfg = synth.GeneratorConfig(**gen_overrides) if gen_overrides \
        else synth.GeneratorConfig()

    cohort = synth.generate_cohort(seed, n_systems, per_system, config=gcfg)
    os.makedirs(out_dir, exist_ok=True)
    truth_dir = os.path.join(out_dir, "truth")
    os.makedirs(truth_dir, exist_ok=True)
    descriptors = []
    for rec, gt in zip(cohort.recordings, cohort.truths):
        csv_name = f"{rec.recording_id}.csv"
        io.write_recording(rec, os.path.join(out_dir, csv_name))
        util.dump_json(gt.to_dict(),
                       os.path.join(truth_dir, f"{rec.recording_id}.json"))
        descriptors.append({
            "path": csv_name, "patient_id": rec.patient_id,
            "recording_id": rec.recording_id,
            "fs": float(gcfg.fs),
            "channels": sorted(c.value for c in rec.channels)})
    manifest = os.path.join(out_dir, "manifest.json")
    io.write_manifest(descriptors, manifest)
    print(json.dumps({"recordings": len(descriptors),
                      "manifest": manifest}))
    return 0


def cmd_segment(args, cfg: dict) -> int:
    manifest = _need_file(_setting(args, cfg, "segment", "manifest"),
                          "manifest")
    out = _setting(args, cfg, "segment", "out")
    if out is None:
        raise CliError("E_VALIDATION", "segment needs an output path")
    entries = []
    for rec in io.load_recordings(manifest):
        entries.extend(segment_entries(rec))
    io.write_entries(entries, out)
    print(json.dumps({"entries": len(entries), "out": out}))
    return 0


def cmd_train(args, cfg: dict) -> int:
    seed = _require_seed(args, cfg, "train")
    entries_path = _need_file(_setting(args, cfg, "train", "entries"),
                              "entries file")
    out = _setting(args, cfg, "train", "out")
    if out is None:
        raise CliError("E_VALIDATION", "train needs an output path")
    gamma = _setting(args, cfg, "train", "gamma")
    rho = _setting(args, cfg, "train", "rho")
    tcfg = estimator.TrainConfig(
        algorithm=Algorithm(_setting(args, cfg, "train", "algorithm",
                                     Algorithm.LM_W_C.value)),
        gamma=None if gamma is None else float(gamma),
        rho=None if rho is None else float(rho),
        gamma_grid=tuple(_setting(args, cfg, "train", "gamma_grid",
                                  DEFAULT_GAMMA_GRID)),
        rho_grid=tuple(_setting(args, cfg, "train", "rho_grid",
                                DEFAULT_RHO_GRID)),
        folds=int(_setting(args, cfg, "train", "folds", 3)),
        seed=seed,
        jobs=int(_setting(args, cfg, "train", "jobs", os.cpu_count() or 1)),
    )
    entries = io.read_entries(entries_path)
    db = estimator.train_database(entries, tcfg)
    db.save(out)
    print(json.dumps({"models": db.n_models, "gamma": db.gamma,
                      "rho": db.rho, "out": out}))
    return 0


def cmd_estimate(args, cfg: dict) -> int:
    db_path = _need_file(_setting(args, cfg, "estimate", "db"),
                         "database file")
    entries_path = _need_file(_setting(args, cfg, "estimate", "entries"),
                              "entries file")
    out = _setting(args, cfg, "estimate", "out")
    if out is None:
        raise CliError("E_VALIDATION", "estimate needs an output path")
    db = estimator.ModelDatabase.load(db_path)
    scen_name = _setting(args, cfg, "estimate", "scenario",
                         db.default_scenario)
    scenario = estimator.Scenario.from_name(scen_name)
    entries = io.read_entries(entries_path)
    results = [estimator.estimate(db, e, scenario) for e in entries]
    io.write_results(results, entries, db.algorithm.value, out)
    print(json.dumps({"estimates": len(results), "scenario": scenario.name,
                      "out": out}))
    return 0


def cmd_evaluate(args, cfg: dict) -> int:
    paths = _setting(args, cfg, "evaluate", "results")
    if not paths:
        raise CliError("E_VALIDATION", "evaluate needs results files")
    if isinstance(paths, str):
        paths = [paths]
    out_dir = _setting(args, cfg, "evaluate", "out")
    if out_dir is None:
        raise CliError("E_VALIDATION", "evaluate needs an output directory")
    records = []
    for p in paths:
        records.extend(io.read_results(_need_file(p, "results file")))
    written = evaluate.report(records, out_dir)
    print(json.dumps({"records": len(records), "files": written}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nicpest",
        description="Noninvasive mean ICP estimation pipeline")
    p.add_argument("--config", help="JSON config file presetting any flag")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic cohort")
    ps.add_argument("--seed", type=int, help="master random seed")
    ps.add_argument("--systems", type=int,
                    help="number of distinct ground-truth systems")
    ps.add_argument("--entries-per-system", type=int, dest="entries_per_system",
                    help="recordings per system")
    ps.add_argument("--snr", type=float,
                    help="additive noise SNR in dB (omit for noise-free)")
    ps.add_argument("--beats", type=int, help="beats per recording")
    ps.add_argument("--out", help="output directory for CSVs and manifest")
    ps.set_defaults(func=cmd_synth)

    pg = sub.add_parser("segment", help="segment recordings into entries")
    pg.add_argument("--manifest", help="recording manifest JSON")
    pg.add_argument("--out", help="output entries JSON path")
    pg.set_defaults(func=cmd_segment)

    pt = sub.add_parser("train", help="train a model database")
    pt.add_argument("--entries", help="entries JSON from segment")
    pt.add_argument("--out", help="output database JSON path")
    pt.add_argument("--seed", type=int, help="training seed")
    pt.add_argument("--algorithm",
                    choices=[a.value for a in Algorithm],
                    help="mapping algorithm")
    pt.add_argument("--gamma", type=float,
                    help="fixed constraint weight (skips cross-validation)")
    pt.add_argument("--rho", type=float,
                    help="fixed ridge weight (skips cross-validation)")
    pt.add_argument("--folds", type=int, help="cross-validation folds")
    pt.add_argument("--jobs", type=int,
                    help="worker threads for the error matrix")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("estimate", help="estimate mean ICP for entries")
    pe.add_argument("--db", help="database JSON from train")
    pe.add_argument("--entries", help="entries JSON to estimate")
    pe.add_argument("--scenario",
                    choices=sorted(estimator.SCENARIOS),
                    help="processing scenario")
    pe.add_argument("--out", help="output results CSV path")
    pe.set_defaults(func=cmd_estimate)

    pv = sub.add_parser("evaluate", help="summarize estimation results")
    pv.add_argument("--results", nargs="+", help="results CSV file(s)")
    pv.add_argument("--out", help="report output directory")
    pv.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except CliError as err:
        return _fail(err.code, str(err))
    except PipelineError as err:
        return _fail(err.code, str(err))
    except FileNotFoundError as err:
        return _fail("E_IO", str(err))
    except OSError as err:
        return _fail("E_IO", str(err))
    except json.JSONDecodeError as err:
        return _fail("E_PARSE", str(err))
    except (ValueError, KeyError, TypeError) as err:
        return _fail("E_VALIDATION", f"{type(err).__name__}: {err}")


if __name__ == "__main__":
    sys.exit(main())
