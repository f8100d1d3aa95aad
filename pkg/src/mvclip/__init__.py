"""Multi-view contrastive learning between molecules and cell images.

Submodules:

* :mod:`mvclip.losses` holds the CLIP, EMM and IMM objectives with exact gradients.
* :mod:`mvclip.preprocess` turns 16-bit TIFF trees into sampled 8-bit PNGs.
* :mod:`mvclip.retrieval` and :mod:`mvclip.batch_effect` hold the evaluation code.
* :mod:`mvclip.toy_train` trains a small numpy two-tower model on synthetic data.
"""

from mvclip._kernels import BACKEND
from mvclip.losses import LossConfig, MultiviewBatch, clip_loss, compute_loss, emm_loss, imm_loss

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "LossConfig",
    "MultiviewBatch",
    "clip_loss",
    "compute_loss",
    "emm_loss",
    "imm_loss",
    "__version__",
]
