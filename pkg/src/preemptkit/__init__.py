"""Preemptive adversarial defense toolkit: Fast Preemption, Preemptive
Reversion and a desk-scale evaluation pipeline."""

__version__ = "0.1.0"

from .attacks import AttackBudget, fgsm_attack, pgd_attack, pgd_multi_restart
from .diffnet import Network, NetworkDef, TrainConfig, desk_cnn, load_weights, save_weights
from .fore_back import DefenseConfig, RobustExample, batch_defend, fast_preemption, label_input
from .reversion import corrupt_labels, noise_distortion, preemptive_reversion, run_reversion_protocol

__all__ = [
    "AttackBudget", "fgsm_attack", "pgd_attack", "pgd_multi_restart",
    "Network", "NetworkDef", "TrainConfig", "desk_cnn", "load_weights", "save_weights",
    "DefenseConfig", "RobustExample", "batch_defend", "fast_preemption", "label_input",
    "corrupt_labels", "noise_distortion", "preemptive_reversion", "run_reversion_protocol",
]
