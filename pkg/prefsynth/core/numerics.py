"""
PrefSynth - Numerical Primitives

Dense linear algebra, probability and optimization helpers shared by every
other module. Vectors are 1-D float64 numpy arrays and matrices 2-D float64
arrays; no model semantics live here.
"""
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from prefsynth.core.errors import DomainError

Vector = np.ndarray
Matrix = np.ndarray


# =============================================================================
# Validation
# =============================================================================

def as_vector(values: Sequence[float] | np.ndarray, name: str = "vector") -> Vector:
    """Coerce to a finite, non-empty float64 vector."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def as_matrix(values: Sequence[Sequence[float]] | np.ndarray, name: str = "matrix") -> Matrix:
    """Coerce to a finite float64 matrix with positive dimensions."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DomainError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def _same_dim(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DomainError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


# =============================================================================
# Randomness
# =============================================================================

def _label_key(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def spawn_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Derive an independent generator from a master seed and a label path.

    The same (seed, labels) always yields the same stream; different label
    paths yield statistically independent streams. There is no global state.
    """
    spawn_key = tuple(_label_key(label) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))


# =============================================================================
# Similarity and probability
# =============================================================================

def cosine_similarity(a: Vector, b: Vector) -> float:
    """Cosine of the angle between two vectors.

    Raises:
        DomainError: on dimension mismatch or a zero-norm input.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    _same_dim(a, b, "cosine_similarity")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine_similarity of a zero-norm vector is undefined")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def softmax_weights(scores: Vector) -> Vector:
    """Numerically stable softmax (max-subtraction)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DomainError("softmax_weights requires a non-empty score vector")
    if not np.all(np.isfinite(s)):
        raise DomainError("softmax_weights requires finite scores")
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax_rows(scores: Matrix) -> Matrix:
    """Row-wise stable softmax of a score matrix."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gaussian_log_density(x: Vector, mean: Vector, sigma: float) -> float:
    """Log density of an isotropic Gaussian N(mean, sigma^2 I) at x."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    x = as_vector(x, "x")
    mean = as_vector(mean, "mean")
    _same_dim(x, mean, "gaussian_log_density")
    d = x.size
    diff = x - mean
    return -0.5 * d * math.log(2.0 * math.pi * sigma * sigma) - float(diff @ diff) / (
        2.0 * sigma * sigma
    )


def squared_l2(a: Vector, b: Vector) -> float:
    """Squared Euclidean distance."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    _same_dim(a, b, "squared_l2")
    diff = a - b
    return float(diff @ diff)


# =============================================================================
# Attention
# =============================================================================

def attention_weights(queries: Matrix, keys: Matrix) -> Matrix:
    """softmax(Q K^T / sqrt(d_k)) per query row."""
    queries = as_matrix(queries, "queries")
    keys = as_matrix(keys, "keys")
    if queries.shape[1] != keys.shape[1]:
        raise DomainError(
            f"queries/keys width mismatch: {queries.shape[1]} vs {keys.shape[1]}"
        )
    return softmax_rows(queries @ keys.T / math.sqrt(keys.shape[1]))


def scaled_dot_attention(queries: Matrix, keys: Matrix, values: Matrix) -> Matrix:
    """Scaled dot-product attention; each output row is a convex combination
    of value rows."""
    values = as_matrix(values, "values")
    weights = attention_weights(queries, keys)
    if keys.shape[0] != values.shape[0]:
        raise DomainError(
            f"keys/values row mismatch: {keys.shape[0]} vs {values.shape[0]}"
        )
    return weights @ values


# =============================================================================
# Optimization
# =============================================================================

def sgd_step(params: Vector, grad: Vector, lr: float) -> Vector:
    """One plain SGD update: params - lr * grad."""
    if lr < 0:
        raise DomainError(f"learning rate must be non-negative, got {lr}")
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _same_dim(params, grad, "sgd_step")
    return params - lr * grad


def finite_difference_gradient(
    f: Callable[[Vector], float], p: Vector, h: float = 1e-5
) -> Vector:
    """Central-difference gradient of a scalar function.

    Raises:
        DomainError: if h <= 0 or f returns a non-finite value.
    """
    if h <= 0:
        raise DomainError(f"step h must be positive, got {h}")
    p = np.array(p, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p.flat[i]
        p.flat[i] = orig + h
        f_plus = f(p.copy())
        p.flat[i] = orig - h
        f_minus = f(p.copy())
        p.flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise DomainError(f"non-finite function value at coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


@dataclass
class GradientCheckReport:
    """Outcome of comparing an analytic gradient with finite differences."""

    max_relative_error: float
    parameter_count: int
    per_parameter_errors: list[float] = field(default_factory=list)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error <= tolerance


def check_gradient(
    f: Callable[[Vector], float],
    analytic: Vector,
    p: Vector,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> GradientCheckReport:
    """Relative error |a - n| / max(|a| + |n|, floor) per coordinate."""
    numeric = finite_difference_gradient(f, p, h)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = numeric.ravel()
    if analytic.shape != numeric.shape:
        raise DomainError("analytic gradient shape does not match parameters")
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    errors = (np.abs(analytic - numeric) / denom).tolist()
    return GradientCheckReport(
        max_relative_error=max(errors) if errors else 0.0,
        parameter_count=len(errors),
        per_parameter_errors=errors,
    )
