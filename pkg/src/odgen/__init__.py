"""Conditional graph diffusion for commuting origin-destination matrices.

Generates a city's OD matrix from regional attributes, contiguity, and
inter-region distances via a denoising diffusion model whose graph
transformer injects both spatial priors into attention. Ships with gravity
baselines, evaluation metrics, an urban-structure classifier, and a
KernelSHAP feature-attribution tool, all behind one CLI (`odgen`).
"""

__version__ = "0.1.0"

from .city import (LOG_OVERFLOW_LIMIT, ODMatrix, UrbanGraph, inverse_transform,
                   log_transform, mask_features)
from .dataset import (CityRecord, Dataset, apply_stored_normalization,
                      load_city, load_dataset, normalize_features, save_city,
                      save_dataset)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (NoiseSchedule, cosine_schedule, ddim_sample,
                        ddpm_sample, generate_averaged, q_sample, train,
                        train_step)
from .errors import NumericalError, ValidationError
from .explain import ShapConfig, ShapResult, kernel_shap, kernel_weight, masked_evaluate
from .gravity import GravityParams, gravity_fit, gravity_predict
from .metrics import (aggregate_metrics, cpc, distance_decay_profile,
                      evaluate_pair, jsd, jsd_suite, nrmse, rmse, spatial_stats)
from .structure import (StructureReport, betweenness_centrality, city_indicators,
                        classify, gini, hhi, max_betweenness, mfs,
                        pareto_exponent, primacy, size_category)
from .synth import SynthSpec, archetype_city, make_archetype_set, make_dataset, synth_city

__all__ = [
    "CityRecord", "Dataset", "Denoiser", "DenoiserConfig", "GravityParams",
    "LOG_OVERFLOW_LIMIT", "NoiseSchedule", "NumericalError", "ODMatrix",
    "ShapConfig", "ShapResult", "StructureReport", "SynthSpec", "UrbanGraph",
    "ValidationError", "aggregate_metrics", "apply_stored_normalization",
    "archetype_city", "betweenness_centrality", "city_indicators", "classify",
    "cosine_schedule", "cpc", "ddim_sample", "ddpm_sample",
    "distance_decay_profile", "evaluate_pair", "generate_averaged", "gini",
    "gravity_fit", "gravity_predict", "hhi", "inverse_transform", "jsd",
    "jsd_suite", "kernel_shap", "kernel_weight", "load_city", "load_dataset",
    "log_transform", "make_archetype_set", "make_dataset", "mask_features",
    "masked_evaluate", "max_betweenness", "mfs", "nrmse",
    "normalize_features", "pareto_exponent", "primacy", "q_sample", "rmse",
    "save_city", "save_dataset", "size_category", "spatial_stats",
    "synth_city", "train", "train_step",
]
