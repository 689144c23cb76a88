"""PCONet: a self-contained NumPy/Cython CNN engine that trains and
evaluates a binary ovarian-ultrasound classifier."""

from pconet.model import (
    TrainConfig,
    build_pconet,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    summary,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "build_pconet",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "summary",
    "train",
    "__version__",
]
