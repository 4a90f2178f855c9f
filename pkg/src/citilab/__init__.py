"""Component-importance guided tool fine-tuning on a tiny numpy transformer."""

from .errors import ContractError, NumericFault, ShapeError

__version__ = "0.1.0"

__all__ = ["ContractError", "NumericFault", "ShapeError", "__version__"]
