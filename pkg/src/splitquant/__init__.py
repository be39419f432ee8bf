"""Low-bit quantization of intermediate features for split learning."""

from .codec import compression_rate, decode_frame, encode_frame, measured_ratio, pack, unpack
from .entropy import convergence_probe, kde_density, recommend_bits, scott_bandwidth
from .quantizer import CommitmentForm, QuantizedBlock, QuantizerConfig, Scaling, quantize, reconstruct
from .tensor import stats

__version__ = "0.1.0"

__all__ = [
    "CommitmentForm",
    "QuantizedBlock",
    "QuantizerConfig",
    "Scaling",
    "compression_rate",
    "convergence_probe",
    "decode_frame",
    "encode_frame",
    "kde_density",
    "measured_ratio",
    "pack",
    "quantize",
    "recommend_bits",
    "reconstruct",
    "scott_bandwidth",
    "stats",
    "unpack",
]
