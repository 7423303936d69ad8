"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from . import scenegen


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to a float32 ``(N, 32, 32, 3)`` array with finite values in [-1, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    shape = (scenegen.IMAGE_SIZE, scenegen.IMAGE_SIZE, 3)
    if X.ndim != 4 or X.shape[1:] != shape:
        raise ValueError(f"{name} must have shape (n, {', '.join(map(str, shape))}), got {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < -1.0 - 1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError(f"{name} values must lie in [-1, 1]")
    return X


def check_tokens(y, name: str = "y") -> np.ndarray:
    """Coerce prompts to an int64 ``(N, text_len)`` array of valid token ids.

    Accepts token arrays or a sequence of :class:`SceneSpec`.
    """
    if isinstance(y, scenegen.SceneSpec):
        y = [y]
    if len(y) and isinstance(y[0], scenegen.SceneSpec):
        y = [scenegen.prompt_of(s) for s in y]
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None]
    if y.ndim != 2 or y.shape[1] != scenegen.TEXT_LEN:
        raise ValueError(f"{name} must have shape (n, {scenegen.TEXT_LEN}), got {y.shape}")
    if y.dtype.kind not in "iu":
        raise ValueError(f"{name} must hold integer token ids")
    if y.min() < 0 or y.max() >= scenegen.VOCAB_SIZE:
        raise ValueError(f"{name} holds token ids outside [0, {scenegen.VOCAB_SIZE})")
    return y.astype(np.int64)


def check_seeds(seeds, n: int | None = None) -> list:
    seeds = [int(s) for s in np.atleast_1d(np.asarray(seeds))]
    if n is not None and len(seeds) != n:
        raise ValueError(f"expected {n} seeds, got {len(seeds)}")
    return seeds


def check_consistent_length(*arrays) -> None:
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")
