"""Python bindings for the binary-weight SNN core.

The heavy lifting lives in the compiled ``_seibw`` module; this package
re-exports its operations under one flat namespace.
"""

from ._seibw import (
    __version__,
    avg_pool2d,
    binarize_weights,
    binary_dot,
    combined_loss,
    conv2d,
    cosine_lr,
    direct_encode,
    kl_snn_loss,
    lif_forward,
    matmul,
    membrane_regularizer,
    read_container,
    softmax,
    ste_weight_gradient,
    sws_standardize,
    tet_ce_loss,
    triangle_surrogate,
    write_container,
)

__all__ = [
    "__version__",
    "avg_pool2d",
    "binarize_weights",
    "binary_dot",
    "combined_loss",
    "conv2d",
    "cosine_lr",
    "direct_encode",
    "kl_snn_loss",
    "lif_forward",
    "matmul",
    "membrane_regularizer",
    "read_container",
    "softmax",
    "ste_weight_gradient",
    "sws_standardize",
    "tet_ce_loss",
    "triangle_surrogate",
    "write_container",
]
