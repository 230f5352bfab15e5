from .tensor import (
    NonFiniteError, Value, as_value, backward, concat, nearest_rotation, no_grad, pad, release_tape, stack, where,
)

__all__ = [
    "NonFiniteError", "Value", "as_value", "backward", "concat", "nearest_rotation", "no_grad", "pad",
    "release_tape", "stack", "where",
]
