"""Semi-supervised stripe-like space target segmentation.

Modules: ``synthgen`` (synthetic star-field scenes), ``network`` (the
segmentation network), ``losses``, ``apl`` (pseudo-label selection),
``trainer`` (static/dynamic teacher training), ``metrics``,
``experiment`` (run directories) and ``cli``.
"""

from .network import MSSANet, NetworkConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, infer, train

__version__ = "0.1.0"

__all__ = ["MSSANet", "NetworkConfig", "TrainConfig", "infer", "train", "load_checkpoint", "save_checkpoint"]
