"""SDR-to-HDR inverse tone mapping conditioned on disentangled luma/chroma degradation priors."""

from .color import (EncodedImage, LinearImage, YCbCrImage, pq_decode, pq_encode, rgb_to_ycbcr,
                    ycbcr_to_rgb)
from .config import ConfigError, TrainConfig
from .model import RealRep, predict

__version__ = "0.1.0"

__all__ = ["EncodedImage", "LinearImage", "YCbCrImage", "pq_encode", "pq_decode",
           "rgb_to_ycbcr", "ycbcr_to_rgb", "ConfigError", "TrainConfig", "RealRep", "predict"]
