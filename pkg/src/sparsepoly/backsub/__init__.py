"""Backsubstitution engine: bound matrices, per-layer steps and full passes."""
from .engine import (BacksubOptions, BoundsContext, backsub_dense_step, backsub_relu_step,
                     backsub_residual, chunk_size, compact_rows, concretize, dense_conv_matrix,
                     gbc_step, identity_matrix, init_bound_matrix, materialized_conv_step,
                     run_backsubstitution, step)
from .matrix import BoundMatrix, PassStats, Polarity

__all__ = [
    "BacksubOptions", "BoundMatrix", "BoundsContext", "PassStats", "Polarity",
    "backsub_dense_step", "backsub_relu_step", "backsub_residual", "chunk_size",
    "compact_rows", "concretize", "dense_conv_matrix", "gbc_step", "identity_matrix",
    "init_bound_matrix", "materialized_conv_step", "run_backsubstitution", "step",
]
