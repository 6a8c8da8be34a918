"""Emulators sharing an estimator interface (fit / predict / get_params)."""
from .base import Emulator, load_emulator, read_model_file, write_model_file
from .ffnn import (FFNNRegressor, Network, TrainConfig, TrainResult, ffnn_forward, ffnn_grad_input,
                   ffnn_grad_weights, ffnn_init, ffnn_loss, ffnn_train)
from .gp import GPRegressor, GpError, log_marginal_likelihood, rbf_kernel
from .pce import (PCERegressor, PceBasis, PceError, PceModel, basis_enumerate, basis_size, design_matrix,
                  legendre_orthonormal, pce_eval, pce_fit, pce_loo_error, pce_sobol)
from .sequence import SeqModel, SequenceRegressor, relative_l2, seq_forward, seq_init, seq_loss_grad, seq_train

REGISTRY = {cls.kind: cls for cls in (FFNNRegressor, PCERegressor, GPRegressor, SequenceRegressor)}


def make_emulator(kind: str, **params) -> Emulator:
    try:
        return REGISTRY[kind](**params)
    except KeyError:
        raise ValueError(f"unknown emulator kind {kind!r}; choose from {sorted(REGISTRY)}") from None


__all__ = [
    "Emulator", "FFNNRegressor", "PCERegressor", "GPRegressor", "SequenceRegressor", "REGISTRY", "make_emulator",
    "load_emulator", "read_model_file", "write_model_file", "Network", "TrainConfig", "TrainResult", "ffnn_init",
    "ffnn_forward", "ffnn_loss", "ffnn_train", "ffnn_grad_weights", "ffnn_grad_input", "rbf_kernel",
    "log_marginal_likelihood", "GpError", "PceBasis", "PceModel", "PceError", "basis_enumerate", "basis_size",
    "design_matrix", "legendre_orthonormal", "pce_fit", "pce_eval", "pce_loo_error", "pce_sobol", "SeqModel",
    "seq_init", "seq_forward", "seq_loss_grad", "seq_train", "relative_l2",
]
