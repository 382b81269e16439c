"""Urban flood depth prediction with hybrid CNN-RNN models on terrain feature stacks."""

__version__ = "0.1.0"
