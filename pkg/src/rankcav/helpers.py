# helpers.py

import hashlib
from collections.abc import Iterable

import numpy as np

from rankcav.exceptions import ShapeError


def stream_key(key: int | str) -> int:
    """Map an int or a string label onto a non-negative SeedSequence entropy word."""
    match key:
        case bool():
            return int(key)
        case int() if key >= 0:
            return key
        case int():
            raise ShapeError("Stream keys must be non-negative", context={"key": key})
        case str():
            return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    raise TypeError(f"Unsupported stream key {key!r}")


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *keys).

    Streams derived from distinct key tuples do not overlap, so per-scene or
    per-job generation can run in any order and still reproduce bit-exactly.
    """
    return np.random.default_rng(
        np.random.SeedSequence([stream_key(seed), *map(stream_key, keys)])
    )


def largest_remainder(fractions: Iterable[float], total: int) -> np.ndarray:
    """Integer shares of `total` proportional to `fractions`, summing to `total` exactly.

    Ties in the fractional parts go to the lower index.
    """
    weights = np.asarray(list(fractions), dtype=np.float64)
    if total < 0 or weights.ndim != 1 or np.any(weights < 0) or weights.sum() <= 0:
        raise ShapeError(
            "largest_remainder needs non-negative weights with a positive sum",
            context={"fractions": weights.tolist(), "total": total},
        )
    exact = weights / weights.sum() * total
    shares = np.floor(exact).astype(np.int64)
    leftover = int(total - shares.sum())
    if leftover:
        order = np.argsort(-(exact - shares), kind="stable")
        shares[order[:leftover]] += 1
    return shares


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite float64 array (returns a float64 view or copy)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", context={"shape": arr.shape})
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} has non-finite entries", context={"shape": arr.shape})
    return arr


def as_vector(data, name: str = "vector") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D", context={"shape": arr.shape})
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} has non-finite entries", context={"shape": arr.shape})
    return arr


def array_digest(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over shapes and little-endian float64 bytes of the given arrays."""
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        digest.update(repr(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()
