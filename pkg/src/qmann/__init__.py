"""Quantized memory-augmented neural networks with bounded Hamming-similarity addressing."""
from .fxp import QFormat, FixedScalar, FixedTensor, quantize, dequantize, error_bound, fx_add, fx_mul
from .model import MannModel, QuantConfig

__version__ = "0.1.0"
