"""Minimal tape-based reverse-mode differentiation over the network op set."""
from . import ops
from .gradcheck import GradCheckResult, check_op_gradients, finite_diff_check, relative_error
from .optim import AdamState, adam_step
from .tape import ParamStore, Tape, TapeError, Var, backward, const, leaf

__all__ = [
    "AdamState", "GradCheckResult", "ParamStore", "Tape", "TapeError", "Var",
    "adam_step", "backward", "check_op_gradients", "const", "finite_diff_check", "leaf", "ops", "relative_error",
]
