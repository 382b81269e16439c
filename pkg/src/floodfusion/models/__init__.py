"""CNN skeletons, recurrent rainfall encoders and their hybrid assemblies."""

from .cnn import CNN_KINDS, WIDTHS, CNNSkeleton, build_cnn
from .hybrid import (HEAD_KINDS, AssemblyError, HybridModel, ModelSpec, ModelSpecError,
                     assemble_hybrid, load_model, save_model)
from .layers import Module
from .rnn import RNN_KINDS, RecurrentEncoder, build_rnn

ALL_COMBOS = [(c, r) for c in CNN_KINDS for r in RNN_KINDS]
