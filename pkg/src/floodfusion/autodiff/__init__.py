"""Minimal reverse-mode automatic differentiation over dense fp64 arrays."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (EmptyMaskError, batch_norm, concat_channels, conv2d, conv_transpose2d,
                         dropout, fully_connected, global_avg_pool, gru_cell, linear, lstm_cell,
                         masked_mse, max_pool2d, max_unpool2d)
from .optim import Adam, AdamState, adam_step, clip_gradients
from .tensor import (ShapeError, Tensor, add, as_tensor, backward, broadcast_to, concat, exp,
                     leaky_relu, matmul, mul, relu, reshape, sigmoid, square, sub, tanh, transpose,
                     where)

max_pool_with_indices = max_pool2d
max_unpool = max_unpool2d
