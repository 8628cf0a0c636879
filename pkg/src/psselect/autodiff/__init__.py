from psselect.autodiff.convlstm import ConvLstmParams, ConvLstmState, convlstm_sequence, convlstm_step
from psselect.autodiff.gradcheck import GradCheckReport, grad_check
from psselect.autodiff.loss import soft_counts, soft_f1_loss
from psselect.autodiff.ops import BatchNormState, batchnorm, conv, dropout, pixel_dense, relu, sigmoid, tanh
from psselect.autodiff.optim import Adam, AdamState, adam_step
from psselect.autodiff.tensor import Tensor, concat, no_grad, stack

__all__ = [
    "Adam", "AdamState", "BatchNormState", "ConvLstmParams", "ConvLstmState",
    "GradCheckReport", "Tensor", "adam_step", "batchnorm", "concat", "conv",
    "convlstm_sequence", "convlstm_step", "dropout", "grad_check", "no_grad", "pixel_dense",
    "relu", "sigmoid", "soft_counts", "soft_f1_loss", "stack", "tanh",
]
