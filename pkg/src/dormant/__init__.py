"""Dormant backdoors: measuring backdoor existence after defenses and re-activating them."""

from .attack import PerturbationBudget, QueryOracle, bba_square, loss_total, project, ta_ensemble, wba_pgd
from .bec import bec, cka, select_backdoor_neurons, tac_scores
from .data import InvalidInputError, TriggerSpec, apply_trigger, make_trigger, poison_dataset
from .defense import DefenseConfig, defend
from .model import Classifier, TrainConfig, train

__all__ = [
    "Classifier", "DefenseConfig", "InvalidInputError", "PerturbationBudget", "QueryOracle", "TrainConfig",
    "TriggerSpec", "apply_trigger", "bba_square", "bec", "cka", "defend", "loss_total", "make_trigger",
    "poison_dataset", "project", "select_backdoor_neurons", "ta_ensemble", "tac_scores", "train", "wba_pgd",
]
