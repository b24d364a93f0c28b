"""Motion guided attention for video salient object detection, on a small numpy autodiff engine."""

from .attention import AttentionKind, AttentionParams, apply_attention, mga_m, mga_t, mga_tm, mga_tmc
from .errors import DimensionError, FormatError, GraphStateError, MGAError, NonFiniteError, ValidationError
from .network import Network, NetworkSpec, build_network
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionKind", "AttentionParams", "apply_attention", "mga_m", "mga_t", "mga_tm", "mga_tmc",
    "DimensionError", "FormatError", "GraphStateError", "MGAError", "NonFiniteError", "ValidationError",
    "Network", "NetworkSpec", "build_network", "Parameter", "Tensor", "backward", "no_grad",
]
