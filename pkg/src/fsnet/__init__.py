"""fsnet: detect hands and objects in video, and forecast where they go next.

The package couples a two-stream convolutional detector (RGB + optical flow,
fused and squeezed through a convolutional autoencoder bottleneck) with a
fully convolutional regressor that advances the bottleneck representation
into the future.  Decoding a regressed bottleneck yields bounding boxes for
frames that have not been observed yet.

Everything runs on a small self-contained numpy layer engine (`fsnet.nn`);
there is no GPU framework underneath.
"""

from fsnet.errors import ConfigError, DataError, FsnetError, TrainingError, UsageError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FsnetError",
    "TrainingError",
    "UsageError",
    "__version__",
]
