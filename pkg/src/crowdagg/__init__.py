"""Crowd label aggregation: generalized EM over a skill / intention /
difficulty answer model, and energy-constrained weighted plurality."""

from .data import (AnswerMatrix, AssignmentGraph, CategorySpace, DataError, ProbeSet,
                   generate_regular_bipartite, load_answer_matrix, load_probes, restrict)
from .experiment import ExperimentSpec, load_spec, recovery_stats, run_experiment, score
from .gem import GemConfig, GemResult, run_gem
from .models import CrowdGenConfig, ModelParams, generate_dataset, generate_sha_dataset
from .plurality import PluralityResult, objective, plu, ss_plu, us_hyb, us_neg, us_sw

__version__ = "0.1.0"
