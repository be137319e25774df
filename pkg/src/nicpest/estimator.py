"""Offline training and online estimation around a model database.

Training identifies one dynamic model per entry, extracts noninvasive
features, builds the entry-by-model error matrix, cross-validates the
mapping hyperparameters, and fits the configured mapping. Estimation
extracts features for a new entry, predicts each stored model's error,
ranks models by predicted magnitude, simulates the selected model(s),
and aggregates their simulated means into one reported value.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import sysid, util
from .errors import (ConfigInvalid, InsufficientModels, PipelineError,
                     RegistryMismatch)
from .features import (FeatureConfig, extract_features, feature_matrix,
                       feature_registry, impute_with_medians)
from .mapping import (DEFAULT_GAMMA_GRID, DEFAULT_RHO_GRID, Algorithm,
                      build_error_matrix, cross_validate, fit_mapping,
                      mapping_from_dict, predict_errors)
from .signals import Entry, entry_inputs, entry_output

_TOP_K = 5


class Aggregate(str, Enum):
    BEST1 = "best1"
    MEDIAN5 = "median5"
    MEAN5 = "mean5"


@dataclass(frozen=True)
class Scenario:
    """Estimation-time processing switches.

    ``normalize`` min-max normalizes the input waveforms (entry-local
    statistics) before both feature extraction and simulation;
    ``aggregate`` selects how the top-ranked models' simulated means
    are combined.
    """

    normalize: bool = False
    aggregate: Aggregate = Aggregate.BEST1

    @property
    def name(self) -> str:
        base = "n1" if self.normalize else "n0"
        suffix = {Aggregate.BEST1: "", Aggregate.MEDIAN5: "-med",
                  Aggregate.MEAN5: "-mean"}[self.aggregate]
        return base + suffix

    @staticmethod
    def from_name(name: str) -> "Scenario":
        try:
            return SCENARIOS[name.lower()]
        except KeyError:
            raise ConfigInvalid(
                f"unknown scenario {name!r}; choose one of "
                f"{sorted(SCENARIOS)}") from None


SCENARIOS = {
    "n0": Scenario(False, Aggregate.BEST1),
    "n0-med": Scenario(False, Aggregate.MEDIAN5),
    "n0-mean": Scenario(False, Aggregate.MEAN5),
    "n1": Scenario(True, Aggregate.BEST1),
    "n1-med": Scenario(True, Aggregate.MEDIAN5),
    "n1-mean": Scenario(True, Aggregate.MEAN5),
}


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = Algorithm.LM_W_C
    ident: sysid.IdentConfig = field(default_factory=sysid.IdentConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gamma: float | None = None
    rho: float | None = None
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    rho_grid: tuple = DEFAULT_RHO_GRID
    folds: int = 3
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if (self.gamma is None) != (self.rho is None):
            raise ConfigInvalid(
                "gamma and rho must be fixed together or both left to "
                "cross-validation")
        if self.folds < 2:
            raise ConfigInvalid("folds must be >= 2")
        if not self.gamma_grid or not self.rho_grid:
            raise ConfigInvalid("hyperparameter grids must be non-empty")
        if self.jobs < 1:
            raise ConfigInvalid("jobs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm.value,
            "ident": self.ident.to_dict(),
            "features": self.features.to_dict(),
            "gamma": self.gamma,
            "rho": self.rho,
            "gamma_grid": list(self.gamma_grid),
            "rho_grid": list(self.rho_grid),
            "folds": self.folds,
            "seed": self.seed,
            "jobs": self.jobs,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            algorithm=Algorithm(d.get("algorithm", "lm_w_c")),
            ident=sysid.IdentConfig.from_dict(d["ident"])
            if "ident" in d else sysid.IdentConfig(),
            features=FeatureConfig.from_dict(d["features"])
            if "features" in d else FeatureConfig(),
            gamma=d.get("gamma"),
            rho=d.get("rho"),
            gamma_grid=tuple(d.get("gamma_grid", DEFAULT_GAMMA_GRID)),
            rho_grid=tuple(d.get("rho_grid", DEFAULT_RHO_GRID)),
            folds=int(d.get("folds", 3)),
            seed=int(d["seed"]) if "seed" in d else 0,
            jobs=int(d.get("jobs", 1)),
        )


@dataclass
class ModelDatabase:
    """Immutable-by-convention bundle the online estimator runs against.

    Holds the identified models, the fitted error mapping, the feature
    registry the mapping was trained under, and the training medians
    used to impute missing feature values at estimation time.
    """

    models: list
    mapping: object
    feature_config: FeatureConfig
    registry: tuple
    medians: np.ndarray
    algorithm: Algorithm
    gamma: float
    rho: float
    seed: int
    training: dict = field(default_factory=dict)
    default_scenario: str = "n0"

    def __post_init__(self) -> None:
        self.medians = np.asarray(self.medians, dtype=float)
        self.registry = tuple(self.registry)
        if tuple(feature_registry(self.feature_config)) != self.registry:
            raise ConfigInvalid(
                "stored registry does not match the feature configuration")
        if len(self.medians) != len(self.registry):
            raise ConfigInvalid("medians must align with the registry")
        if len(self.models) != self.mapping.n_models:
            raise ConfigInvalid(
                "model count must equal the mapping output dimension")
        if self.mapping.registry_hash \
                and self.mapping.registry_hash != self.registry_hash:
            raise ConfigInvalid(
                "mapping was trained under a different feature registry")
        if self.default_scenario not in SCENARIOS:
            raise ConfigInvalid(f"unknown scenario {self.default_scenario!r}")

    @property
    def n_models(self) -> int:
        return len(self.models)

    @property
    def registry_hash(self) -> str:
        return util.registry_hash(self.registry)

    @property
    def model_ids(self) -> list:
        return [m.source_entry_id for m in self.models]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "algorithm": self.algorithm.value,
            "gamma": float(self.gamma),
            "rho": float(self.rho),
            "default_scenario": self.default_scenario,
            "feature_config": self.feature_config.to_dict(),
            "registry": list(self.registry),
            "medians": [float(v) for v in self.medians],
            "models": [m.to_dict() for m in self.models],
            "mapping": self.mapping.to_dict(),
            "training": self.training,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelDatabase":
        if int(d.get("version", 1)) != 1:
            raise ConfigInvalid("unsupported database version")
        return ModelDatabase(
            models=[sysid.StateSpaceModel.from_dict(m) for m in d["models"]],
            mapping=mapping_from_dict(d["mapping"]),
            feature_config=FeatureConfig.from_dict(d["feature_config"]),
            registry=tuple(d["registry"]),
            medians=np.asarray(d["medians"], dtype=float),
            algorithm=Algorithm(d["algorithm"]),
            gamma=float(d["gamma"]),
            rho=float(d["rho"]),
            seed=int(d["seed"]),
            training=d.get("training", {}),
            default_scenario=d.get("default_scenario", "n0"),
        )

    def save(self, path) -> None:
        util.dump_json(self.to_dict(), path)

    @staticmethod
    def load(path) -> "ModelDatabase":
        return ModelDatabase.from_dict(util.load_json(path))


@dataclass
class EstimateResult:
    entry_id: str
    scenario: str
    mean_nicp: float
    chosen_model_ids: list
    predicted_errors: np.ndarray
    simulated_means: np.ndarray

    def to_dict(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "scenario": self.scenario,
            "mean_nicp": float(self.mean_nicp),
            "chosen_model_ids": list(self.chosen_model_ids),
            "predicted_errors": [float(v) for v in self.predicted_errors],
            "simulated_means": [float(v) for v in self.simulated_means],
        }


def train_database(entries: list, config: TrainConfig) -> ModelDatabase:
    """Build the full offline side: models, features, mapping.

    One model is identified per training entry on the unnormalized
    input stack; entries whose identification fails stay in the
    feature/error rows but contribute no model. Models failing to
    simulate on more than 20% of entries are excluded. Hyperparameters
    come from patient-wise cross-validation unless fixed in the config.
    Deterministic given the config seed.
    """
    if len(entries) < 2:
        raise ConfigInvalid("training needs at least 2 entries")
    for e in entries:
        if e.mean_icp is None:
            raise ConfigInvalid(f"entry {e.entry_id} lacks measured ICP")

    models = []
    excluded_entries = {}
    for e in entries:
        u = entry_inputs(e)
        y = entry_output(e)
        try:
            model = sysid.identify(u, y, config.ident, fs=e.fs)
        except PipelineError as err:
            excluded_entries[e.entry_id] = f"{type(err).__name__}: {err}"
            continue
        model.source_entry_id = e.entry_id
        models.append(model)
    if len(models) < 2:
        raise ConfigInvalid(
            "fewer than 2 entries produced usable models; cannot rank")

    F_raw, registry = feature_matrix(entries, config.features,
                                     normalize=False)
    F, medians = impute_with_medians(F_raw)

    em = build_error_matrix(models, entries, jobs=config.jobs)
    if em.excluded_model_ids:
        keep = {mid for mid in em.model_ids}
        models = [m for m in models if m.source_entry_id in keep]
    if len(models) < 2:
        raise ConfigInvalid(
            "fewer than 2 models survived simulation checks; cannot rank")

    patient_ids = [e.patient_id for e in entries]
    if config.gamma is not None:
        gamma, rho = float(config.gamma), float(config.rho)
        cv_results = []
    else:
        gamma, rho, cv_results = cross_validate(
            F, em.E, patient_ids, algorithm=config.algorithm,
            gamma_grid=config.gamma_grid, rho_grid=config.rho_grid,
            folds=config.folds, seed=config.seed)

    mapping = fit_mapping(config.algorithm, F, em.E, gamma, rho,
                          seed=config.seed)
    mapping.registry_hash = util.registry_hash(registry)
    mapping.seed = config.seed

    training = {
        "entry_ids": [e.entry_id for e in entries],
        "patient_ids": patient_ids,
        "mean_icps": [float(e.mean_icp) for e in entries],
        "excluded_entries": excluded_entries,
        "excluded_models": list(em.excluded_model_ids),
        "filled_cells": len(em.filled_cells),
        "cv_results": cv_results,
    }
    return ModelDatabase(
        models=models, mapping=mapping, feature_config=config.features,
        registry=registry, medians=medians, algorithm=config.algorithm,
        gamma=gamma, rho=rho, seed=config.seed, training=training)


def estimate(db: ModelDatabase, entry: Entry,
             scenario: Scenario = Scenario()) -> EstimateResult:
    """Rank the database models for one entry and report mean nICP.

    Models are ordered by |predicted error|; BEST1 simulates the single
    best model, MEDIAN5/MEAN5 aggregate the five best models' simulated
    means. Under a normalizing scenario the entry's waveforms are
    min-max normalized (entry-local statistics) before both feature
    extraction and simulation. The database is never mutated.
    """
    need = 1 if scenario.aggregate == Aggregate.BEST1 else _TOP_K
    if db.n_models < need:
        raise InsufficientModels(
            f"scenario {scenario.name} needs {need} models, "
            f"database holds {db.n_models}")

    fv = extract_features(entry, db.feature_config,
                          normalize=scenario.normalize)
    if tuple(fv.registry) != db.registry:
        raise RegistryMismatch(
            "entry features were extracted under a different registry")
    row, _ = impute_with_medians(fv.values[None, :], db.medians)
    pred = predict_errors(db.mapping, row[0],
                          registry_hash=db.registry_hash)

    order = np.argsort(np.abs(pred), kind="stable")
    chosen = order[:need]
    u = entry_inputs(entry, normalize=scenario.normalize)
    sim_means = np.array([float(np.mean(sysid.simulate(db.models[j], u)[0]))
                          for j in chosen])
    if scenario.aggregate == Aggregate.BEST1:
        value = float(sim_means[0])
    elif scenario.aggregate == Aggregate.MEDIAN5:
        value = float(np.median(sim_means))
    else:
        value = float(np.mean(sim_means))
    return EstimateResult(
        entry_id=entry.entry_id, scenario=scenario.name, mean_nicp=value,
        chosen_model_ids=[db.models[j].source_entry_id for j in chosen],
        predicted_errors=pred, simulated_means=sim_means)


def split_by_patient(entries: list, test_fraction: float, seed: int
                     ) -> tuple[list, list]:
    """Partition entries into train/test keeping each patient whole.

    Exactly round(test_fraction * n_patients) patients land in the
    test side; the draw is a seeded permutation. A single-patient set
    cannot be split and goes entirely to training with a warning.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigInvalid("test_fraction must lie in (0, 1)")
    patients = sorted({e.patient_id for e in entries})
    if len(patients) < 2:
        warnings.warn("single patient: all entries stay in training")
        return list(entries), []
    n_test = int(round(test_fraction * len(patients)))
    n_test = min(max(n_test, 0), len(patients))
    perm = np.random.default_rng(seed).permutation(len(patients))
    test_patients = {patients[i] for i in perm[:n_test]}
    train = [e for e in entries if e.patient_id not in test_patients]
    test = [e for e in entries if e.patient_id in test_patients]
    if not train or not test:
        warnings.warn("patient split left one side empty")
    return train, test
