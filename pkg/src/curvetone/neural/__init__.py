"""Network substrate: autodiff tensor ops, the policy/Q architectures, Adam, and weight archives."""

from .autodiff import Tensor, no_grad
from .networks import (
    ACTION_DIM,
    ACTION_SCALE,
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    BackboneCnn,
    PolicyNetwork,
    QNetwork,
    deterministic_action,
    log_prob_np,
    parameter_count,
    sample_action,
    squashed_gaussian,
)
from .optim import Adam
from .archive import load_archive, load_weights, save_archive, save_weights

__all__ = [
    "ACTION_DIM", "ACTION_SCALE", "LOG_SIGMA_MAX", "LOG_SIGMA_MIN",
    "Adam", "BackboneCnn", "PolicyNetwork", "QNetwork", "Tensor",
    "deterministic_action", "load_archive", "load_weights", "log_prob_np",
    "no_grad", "parameter_count", "sample_action", "save_archive",
    "save_weights", "squashed_gaussian",
]
