"""Efficient neural image codec: a variable-rate hyperprior model, mask-decay distillation and scalable encoders."""

__version__ = "0.1.0"
