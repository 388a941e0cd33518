"""Hierarchical linear quantization (HLQ) and bit-serial LUT GEMM on the CPU."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CalibrationError, ConfigError, CorruptContainerError, DataError, HlqError, NumericalError,
    TuningError,
)
from .quant import (  # noqa: F401
    HlqParams, QuantConfig, UniformQuant, build_codebook, candidate_set, hlq_alternating,
    hlq_assign, hlq_dequantize, hlq_gradient, hlq_init, hlq_lse, rtn_dequantize, rtn_quantize,
)
