"""Noninvasive mean ICP estimation from multimodal waveforms.

The pipeline identifies a per-entry linear dynamic model from ABP,
CBv, and heart-period inputs, learns a mapping from noninvasive
features to each model's expected estimation error, and at run time
ranks the stored models by predicted error to simulate mean ICP for
unseen entries.
"""

from .estimator import (Aggregate, EstimateResult, ModelDatabase, Scenario,
                        TrainConfig, estimate, split_by_patient,
                        train_database)
from .features import FeatureConfig, extract_features, feature_registry
from .mapping import Algorithm, KernelSpec, build_error_matrix, fit_mapping
from .signals import Entry, Recording, Waveform, segment_entries
from .synth import GeneratorConfig, generate_cohort, generate_recording
from .sysid import IdentConfig, StateSpaceModel, identify, simulate

__version__ = "0.1.0"

__all__ = [
    "Aggregate", "Algorithm", "EstimateResult", "Entry", "FeatureConfig",
    "GeneratorConfig", "IdentConfig", "KernelSpec", "ModelDatabase",
    "Recording", "Scenario", "StateSpaceModel", "TrainConfig", "Waveform",
    "build_error_matrix", "estimate", "extract_features", "feature_registry",
    "fit_mapping", "generate_cohort", "generate_recording", "identify",
    "segment_entries", "simulate", "split_by_patient", "train_database",
    "__version__",
]
