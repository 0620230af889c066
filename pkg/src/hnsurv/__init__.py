"""Multimodal discrete-time survival prediction from volumetric images.

3D residual encoders with convolutional block attention, max fusion of
modality embeddings and a discrete-time hazard head, built on a small
numpy reverse-mode autodiff engine.
"""

from .errors import HnsurvError
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["HnsurvError", "Tape", "Tensor", "__version__"]
