"""Dynamic-label adversarial training laboratory.

A small, fully deterministic stack for studying adversarial training at
desk scale: a from-scratch reverse-mode autodiff core over float64
numpy arrays, compact MLP/CNN models, L-inf attacks, joint guide/target
training with dynamic labels plus static-label baselines, and an
experiment driver that writes byte-reproducible metrics and
checkpoints.
"""

from .attacks import (AdversarialBatch, AttackStats, PerturbationBudget,
                      attack_success_stats, fgsm, pgd, project_linf)
from .autodiff import (Tensor, backward, grad_check, reset_tape, tensor_new)
from .config import format_config, load_config, parse_config_text
from .data import BatchStream, Dataset, load_idx, split, synthetic_blobs, write_idx
from .experiments import (CompareReport, ExperimentConfig, compare_report,
                          evaluate, load_experiment_config, read_metrics,
                          resolve_datasets, run_experiment)
from .models import (Model, ModelSpec, build_model, frozen, load_checkpoint,
                     named_spec, save_checkpoint)
from .training import (SGD, DynamicLabel, LossWeights, OptimizerSettings,
                       StepReport, TrainPlan, clean_step, combined_loss,
                       dynamic_label, dynat_train_step, guide_loss,
                       inner_optimize, lbgat_step, pgd_at_step, sgd_update,
                       target_loss)

__all__ = [
    "AdversarialBatch", "AttackStats", "BatchStream", "CompareReport",
    "Dataset", "DynamicLabel", "ExperimentConfig", "LossWeights", "Model",
    "ModelSpec", "OptimizerSettings", "PerturbationBudget", "SGD",
    "StepReport", "Tensor", "TrainPlan", "attack_success_stats", "backward",
    "build_model", "clean_step", "combined_loss", "compare_report",
    "dynamic_label", "dynat_train_step", "evaluate", "fgsm", "format_config",
    "frozen", "grad_check", "guide_loss", "inner_optimize", "lbgat_step",
    "load_checkpoint", "load_config", "load_experiment_config", "load_idx",
    "named_spec", "parse_config_text", "pgd", "pgd_at_step", "project_linf",
    "read_metrics", "reset_tape", "resolve_datasets", "run_experiment",
    "save_checkpoint", "sgd_update", "split", "synthetic_blobs",
    "target_loss", "tensor_new", "write_idx",
]

__version__ = "0.1.0"
