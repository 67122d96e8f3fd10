"""Tiny numpy/torch dispatch so kernel formulas are written once."""
import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


def is_torch(x):
    return torch is not None and isinstance(x, torch.Tensor)


def xp(x):
    return torch if is_torch(x) else np


def concat(arrays, axis=-1):
    if is_torch(arrays[0]):
        return torch.cat(arrays, dim=axis)
    return np.concatenate(arrays, axis=axis)


def eye(d, like):
    if is_torch(like):
        return torch.eye(d, dtype=like.dtype, device=like.device)
    return np.eye(d, dtype=like.dtype)


def zeros(shape, like):
    if is_torch(like):
        return torch.zeros(shape, dtype=like.dtype, device=like.device)
    return np.zeros(shape, dtype=like.dtype)


def ones(shape, like):
    if is_torch(like):
        return torch.ones(shape, dtype=like.dtype, device=like.device)
    return np.ones(shape, dtype=like.dtype)


def as_like(a, like):
    """Convert a numpy constant to the array type (and dtype) of ``like``."""
    if is_torch(like):
        return torch.as_tensor(np.asarray(a), dtype=like.dtype, device=like.device)
    return np.asarray(a, dtype=like.dtype)
