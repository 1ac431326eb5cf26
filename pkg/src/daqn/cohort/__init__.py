"""Cohort data model, ingestion, rewards and synthetic generation."""

from .episode import Episode, Normalizer
from .io import IngestionError, load_cohort, load_sidecar, save_cohort, save_sidecar
from .rewards import hypotension_reward, sepsis_reward
from .schema import (ActionChannel, CohortSchema, Feature, discretize_action, fit_dose_edges,
                     get_schema, hypotension_schema, sepsis_schema, synthetic_schema)
from .synthetic import (SyntheticCohort, SyntheticEnvSpec, default_env_spec, generate_synthetic_cohort,
                        severity_memory_env_spec, simulate_policy)
from .windows import Transition, TransitionSet, build_history_windows, encode_observations

__all__ = [
    "ActionChannel", "CohortSchema", "Episode", "Feature", "IngestionError", "Normalizer",
    "SyntheticCohort", "SyntheticEnvSpec", "Transition", "TransitionSet", "build_history_windows",
    "default_env_spec", "discretize_action", "encode_observations", "fit_dose_edges",
    "generate_synthetic_cohort", "get_schema", "hypotension_reward", "hypotension_schema",
    "load_cohort", "load_sidecar", "save_cohort", "save_sidecar", "sepsis_reward", "sepsis_schema",
    "severity_memory_env_spec", "simulate_policy", "synthetic_schema",
]
