"""Post-training quantization for chunk-wise autoregressive denoisers."""

__version__ = "0.1.0"
