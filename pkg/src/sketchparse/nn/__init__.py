"""Minimal differentiable computation: tensors, tape gradients, LSTMs,
attention, losses and RMSProp."""

from .tensor import Tape, Tensor, no_grad, softmax_nll_smoothed
from .params import ParamSet, load_checkpoint, read_checkpoint, save_checkpoint
from .optim import RMSProp, rmsprop_step
from .gradcheck import grad_check
from .layers import LSTM, BiLSTM, Linear, Scorer, attended_output, attention, bilstm_encode, lstm_step

__all__ = [
    "Tape", "Tensor", "no_grad", "softmax_nll_smoothed", "ParamSet", "load_checkpoint", "read_checkpoint",
    "save_checkpoint", "RMSProp", "rmsprop_step", "grad_check", "LSTM", "BiLSTM", "Linear",
    "Scorer", "attended_output", "attention", "bilstm_encode", "lstm_step",
]
