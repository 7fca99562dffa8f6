"""Flat-vector arithmetic and deterministic stream-derived randomness.

Model parameters, momenta, and update directions are all plain 1-D float64
numpy arrays of a fixed length d. Randomness is organized as named streams:
a stream is a (seed, stream_id) pair, and derived streams are obtained by
mixing integer keys into the id with splitmix64, so the draw sequence of any
(client, round) stream is independent of execution order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, StructuralError

# Public alias: 1-D float64 array of fixed length d.
ParamVector = np.ndarray

_MASK64 = (1 << 64) - 1

_ELEMENTWISE_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def splitmix64(z: int) -> int:
    """One splitmix64 step; the core mixer for stream derivation."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """A named, replayable source of pseudo-randomness.

    Identical (seed, stream_id) pairs produce identical draw sequences on
    every run and under any thread schedule. Use ``derive`` to split off
    independent child streams (one per client per round, one for the
    server, ...) and ``generator`` to materialize the stream.
    """

    seed: int
    stream_id: int = 0

    def derive(self, *keys: int) -> "RngStream":
        """Child stream obtained by mixing integer keys into the id."""
        sid = self.stream_id
        for key in keys:
            sid = splitmix64(sid ^ splitmix64(key & _MASK64))
        return RngStream(self.seed, sid)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        root = splitmix64(splitmix64(self.seed & _MASK64) ^ self.stream_id)
        return np.random.Generator(np.random.PCG64(root))


def as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    """Accept either a stream (restarted) or a live generator (continued)."""
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def as_param_vector(values) -> ParamVector:
    """Coerce to a finite 1-D float64 array."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise StructuralError(f"expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("vector contains NaN or Inf")
    return x


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise StructuralError(f"length mismatch: {a.shape} vs {b.shape}")


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} produced NaN or Inf")
    return x


def elementwise(a: ParamVector, b: ParamVector, op: str) -> ParamVector:
    """Element-wise add/sub/mul/div/max of two equal-length vectors."""
    if op not in _ELEMENTWISE_OPS:
        raise ParameterError(f"unknown elementwise op {op!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_length(a, b)
    if op == "div" and np.any(b == 0.0):
        raise NumericError("elementwise div: zero entry in denominator")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _ELEMENTWISE_OPS[op](a, b)
    return _check_finite(out, f"elementwise {op}")


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """alpha * x + y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_length(x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        out = alpha * x + y
    return _check_finite(out, "axpy")


def l2_norm_sq(x: ParamVector) -> float:
    """Squared Euclidean norm."""
    return float(np.dot(x, x))


def sample_dirichlet(rng: RngStream | np.random.Generator, alpha: float, dim: int) -> np.ndarray:
    """Draw one probability vector from Dir(alpha * ones(dim)).

    Sampled as normalized Gamma(alpha) draws. For very small alpha some
    draws underflow to exactly zero; the vector is redrawn in the (measure
    zero in theory, ~never in practice) event that all of them do.
    """
    if alpha <= 0:
        raise ParameterError(f"dirichlet concentration must be positive, got {alpha}")
    if dim < 1:
        raise ParameterError(f"dirichlet dimension must be >= 1, got {dim}")
    if dim == 1:
        return np.ones(1)
    gen = as_generator(rng)
    for _ in range(16):
        draws = gen.gamma(alpha, 1.0, size=dim)
        total = draws.sum()
        if np.isfinite(total) and total > 0.0:
            return draws / total
    raise NumericError("dirichlet sampling failed: all gamma draws underflowed")
