"""Multi-modal few-shot meta-learning engine and experiment harness."""

from .diffcore import GradMode, Graph, Mode, Tensor, grad
from .episodes import ClassRecord, MetaSplit, SyntheticConfig, Task

__version__ = "0.1.0"

__all__ = [
    "GradMode",
    "Graph",
    "Mode",
    "Tensor",
    "grad",
    "ClassRecord",
    "MetaSplit",
    "SyntheticConfig",
    "Task",
    "__version__",
]
