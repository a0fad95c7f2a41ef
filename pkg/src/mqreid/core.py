"""Numerical primitives shared by every module: errors, rng, cosine, softmax."""

from __future__ import annotations

import numpy as np

VIEWPOINTS = ("front", "side", "rear")
VIEW_INDEX = {name: i for i, name in enumerate(VIEWPOINTS)}


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or degenerate input."""


class DataError(InvalidInputError):
    """Input data (records, files, datasets) violates a documented invariant."""


class ModelError(InvalidInputError):
    """A model is missing, malformed, or incompatible with its inputs."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by PCG64.

    PCG64 streams are specified bit-for-bit by numpy, so the same seed gives
    the same draws on every platform.
    """
    if seed < 0 or seed >= 2**64:
        raise InvalidInputError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(seed: int, *tags: int | str) -> int:
    """Derive an independent 64-bit seed from a parent seed and some tags."""
    words = [seed & 0xFFFFFFFF, seed >> 32]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode("utf-8"))
        else:
            words.append(int(tag))
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def as_vector(values, name: str = "vector") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def cosine_sim(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine similarity of a zero-norm vector is undefined")
    value = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, value))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise InvalidInputError("cosine similarity of a zero-norm vector is undefined")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def softmax(v) -> np.ndarray:
    """Softmax of a vector, or row-wise softmax of a matrix."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("softmax of an empty input")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("softmax input contains non-finite entries")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(arr, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidInputError("cannot normalize a zero-norm vector")
    return arr / norm
