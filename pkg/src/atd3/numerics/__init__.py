from .adam import Adam
from .autodiff import NonFiniteError, ShapeError, Node, Tape, grad_check
from .io import load_manifest, load_params, save_params

__all__ = [
    "Adam",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "grad_check",
    "load_manifest",
    "load_params",
    "save_params",
]
