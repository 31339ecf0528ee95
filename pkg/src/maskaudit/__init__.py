"""Numerical audit of CLEVER-style robustness scores under gradient masking."""

from .clever import CleverParams, clever_score, masking_diagnostic
from .network import Model, forward, scalar_head_gradient
from .oracles import AttackParams, brute_force_min_perturbation, min_perturbation_bisect

__version__ = "0.1.0"

__all__ = [
    "AttackParams",
    "CleverParams",
    "Model",
    "brute_force_min_perturbation",
    "clever_score",
    "forward",
    "masking_diagnostic",
    "min_perturbation_bisect",
    "scalar_head_gradient",
]
