"""Reversible behavioral adaptation on a small frozen-core model."""

from .adapters import (
    AdaptationTask,
    BehavioralModule,
    MutationSpec,
    PerturbationSpec,
    adapt_behavioral,
    adapt_weights,
    attach,
    eliminate,
    layer_stats,
    load_module,
    new_module,
    perturb,
    rollback_heuristic,
    save_module,
    unload,
)
from .exceptions import (
    CompatibilityError,
    ConfigurationError,
    LifecycleError,
    NumericalDivergenceError,
    ProtocolError,
    RevlearnError,
)
from .harness import ExperimentSpec, PromptSet, make_prompt_set, pretrain, run_experiment, run_protocol
from .metrics import divergence_report, ils, js, kl, recoverability, svar
from .model import CoreParams, ModelConfig, OutputDistribution, Prompt, entropy, evaluate, forward, grad_check, init_core

__all__ = [
    "AdaptationTask", "BehavioralModule", "CompatibilityError", "ConfigurationError", "CoreParams",
    "ExperimentSpec", "LifecycleError", "ModelConfig", "MutationSpec", "NumericalDivergenceError",
    "OutputDistribution", "PerturbationSpec", "Prompt", "PromptSet", "ProtocolError", "RevlearnError",
    "adapt_behavioral", "adapt_weights", "attach", "divergence_report", "eliminate", "entropy", "evaluate",
    "forward", "grad_check", "ils", "init_core", "js", "kl", "layer_stats", "load_module", "make_prompt_set",
    "new_module", "perturb", "pretrain", "recoverability", "rollback_heuristic", "run_experiment",
    "run_protocol", "save_module", "svar", "unload",
]
