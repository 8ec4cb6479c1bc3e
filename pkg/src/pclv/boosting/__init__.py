from .model import (
    FORMAT_VERSION,
    GbtModel,
    GbtParams,
    ModelFormatError,
    Tree,
    load_model,
    predict,
    save_model,
    sigmoid,
    train,
)

__all__ = [
    "FORMAT_VERSION",
    "GbtModel",
    "GbtParams",
    "ModelFormatError",
    "Tree",
    "load_model",
    "predict",
    "save_model",
    "sigmoid",
    "train",
]
