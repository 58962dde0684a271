"""Quantized CPU inference for Danube3-family models."""

from ._core import (
    DanubeError,
    Model,
    ModelConfig,
    Tokenizer,
    Vocabulary,
    count_parameters,
    danube3_4b,
    danube3_500m,
    dequantize,
    inspect,
    mean_kl_divergence,
    predict_model_size,
    quantize,
    quantize_file,
    set_num_threads,
    write_random_model,
)

__all__ = [
    "DanubeError",
    "Model",
    "ModelConfig",
    "Tokenizer",
    "Vocabulary",
    "count_parameters",
    "danube3_4b",
    "danube3_500m",
    "dequantize",
    "inspect",
    "mean_kl_divergence",
    "predict_model_size",
    "quantize",
    "quantize_file",
    "set_num_threads",
    "write_random_model",
]
__version__ = "0.1.0"
