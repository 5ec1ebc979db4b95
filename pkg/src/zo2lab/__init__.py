"""zo2lab: zeroth-order training with block-wise host/device offloading.

Dual-forward ZO-SGD where the monolithic and block-wise engines are
bit-identical in F64, blocks stream through a fixed ring of device arenas
under a three-lane overlap scheduler, and transfers optionally compress to
low-bit formats.
"""

__version__ = "0.1.0"

from .model import ModelSpec, init_params
from .numerics import ElemFormat, RngState, TensorBuf, gaussian_fill
from .zo_ref import RefEngine, ZOConfig
from .zo2_engine import Zo2Engine

__all__ = [
    "__version__",
    "ModelSpec", "init_params",
    "ElemFormat", "RngState", "TensorBuf", "gaussian_fill",
    "RefEngine", "ZOConfig", "Zo2Engine",
]
