"""The two networks: h (embedding + linear head) and h* (with a parameter-free LayerNorm).

Sentences are handled as integer arrays of 0-based word columns, shape (n, L).
Scores are y_k = <U_hat_k, M>_F with M = W zeta(x) for h, and M = phi(W zeta(x))
column-wise for h*.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class DegenerateInputError(ValueError):
    """LayerNorm applied to a (near) constant vector with epsilon = 0."""


class WeightsFormatError(ValueError):
    pass


class Kind(str, Enum):
    PLAIN = "plain"
    LAYERNORM = "layernorm"


@dataclass(frozen=True)
class NetworkKind:
    variant: Kind = Kind.PLAIN
    layernorm_epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Kind(self.variant))
        if self.layernorm_epsilon < 0:
            raise ValueError("layernorm epsilon must be >= 0")

    @property
    def is_layernorm(self) -> bool:
        return self.variant is Kind.LAYERNORM


PLAIN = NetworkKind(Kind.PLAIN)
LAYERNORM = NetworkKind(Kind.LAYERNORM)


def as_kind(kind) -> NetworkKind:
    if isinstance(kind, NetworkKind):
        return kind
    return NetworkKind(Kind(kind))


@dataclass
class Weights:
    """W is (d, n_w); U is (K, L d), row k split into L blocks u_{k,l} of size d."""

    W: np.ndarray
    U: np.ndarray
    L: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        if self.U.shape[1] != self.L * self.d:
            raise ValueError(f"U has {self.U.shape[1]} columns, expected L*d = {self.L * self.d}")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n_w(self) -> int:
        return self.W.shape[1]

    @property
    def K(self) -> int:
        return self.U.shape[0]

    @property
    def u_blocks(self) -> np.ndarray:
        """View of shape (K, L, d); ``u_blocks[k, l]`` is u_{k,l}."""
        return self.U.reshape(self.K, self.L, self.d)

    def U_hat_k(self, k: int) -> np.ndarray:
        return self.U[k].reshape(self.L, self.d).T

    @property
    def U_hat(self) -> np.ndarray:
        """(d, K L) matrix [U_hat_1 ... U_hat_K]."""
        return self.U.reshape(self.K * self.L, self.d).T

    @staticmethod
    def U_from_hat(U_hat: np.ndarray, K: int) -> np.ndarray:
        d = U_hat.shape[0]
        return np.ascontiguousarray(U_hat.T).reshape(K, -1) if d else U_hat.reshape(K, 0)

    def copy(self) -> "Weights":
        return Weights(self.W.copy(), self.U.copy(), self.L)


def init_weights(d: int, n_w: int, K: int, L: int, rng: np.random.Generator) -> Weights:
    """Gaussian init: W entries with std 1/sqrt(d), U entries with std 1/sqrt(L d) (fan-in)."""
    W = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, n_w))
    U = rng.normal(0.0, 1.0 / np.sqrt(L * d), size=(K, L * d))
    return Weights(W, U, L)


# ---------------------------------------------------------------- LayerNorm


def _layer_norm_rows(V: np.ndarray, epsilon: float):
    """LayerNorm along the last axis; returns (phi, s) with s = sqrt(var + eps)."""
    centered = V - V.mean(axis=-1, keepdims=True)
    var = np.mean(centered**2, axis=-1, keepdims=True)
    if epsilon == 0 and np.any(var < 1e-24):
        raise DegenerateInputError("LayerNorm of a constant vector is undefined (epsilon = 0)")
    s = np.sqrt(var + epsilon)
    return centered / s, s


def layer_norm(v, epsilon: float = 0.0) -> np.ndarray:
    """(v - mean(v)) / sqrt(var(v) + epsilon), population variance."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] < 2:
        raise ValueError("LayerNorm needs d >= 2")
    return _layer_norm_rows(v, epsilon)[0]


def layer_norm_columns(M: np.ndarray, epsilon: float = 0.0) -> np.ndarray:
    """phi applied to each column of a (d, m) matrix."""
    return layer_norm(M.T, epsilon).T


def layer_norm_jacobian(v, epsilon: float = 0.0) -> np.ndarray:
    """(I - 11^T/d - phi phi^T/d) / sqrt(var + eps); symmetric."""
    v = np.asarray(v, dtype=float)
    d = v.size
    phi, s = _layer_norm_rows(v, epsilon)
    return (np.eye(d) - 1.0 / d - np.outer(phi, phi) / d) / s[0]


def _layer_norm_vjp(g: np.ndarray, phi: np.ndarray, s: np.ndarray) -> np.ndarray:
    # J symmetric, so J^T g = (g - mean(g) - phi * mean(g * phi)) / s row-wise
    return (g - g.mean(-1, keepdims=True) - phi * np.mean(g * phi, -1, keepdims=True)) / s


# ------------------------------------------------------------------ forward


def features(kind, weights: Weights, X: np.ndarray) -> np.ndarray:
    """Word features of a batch of sentences, shape (n, L, d)."""
    kind = as_kind(kind)
    E = weights.W.T[np.asarray(X)]
    if kind.is_layernorm:
        E = _layer_norm_rows(E, kind.layernorm_epsilon)[0]
    return E


def forward_batch(kind, weights: Weights, X: np.ndarray) -> np.ndarray:
    """Scores for a (n, L) batch of sentence indices, shape (n, K)."""
    F = features(kind, weights, X)
    return F.reshape(F.shape[0], -1) @ weights.U.T


def forward(kind, weights: Weights, x) -> np.ndarray:
    """Score vector of one sentence given as a 0-based index array of length L."""
    return forward_batch(kind, weights, np.asarray(x)[None, :])[0]


def log_softmax(Y: np.ndarray) -> np.ndarray:
    m = Y.max(axis=-1, keepdims=True)
    Z = Y - m
    return Z - np.log(np.exp(Z).sum(axis=-1, keepdims=True))


def cross_entropy(y, k: int) -> float:
    """-log softmax(y)_k with a 1-based class index."""
    y = np.asarray(y, dtype=float)
    if not 1 <= k <= y.size:
        raise ValueError(f"class {k} outside [1, {y.size}]")
    return float(-log_softmax(y)[k - 1])


def cross_entropy_batch(Y: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample losses for 0-based labels."""
    return -log_softmax(Y)[np.arange(len(labels)), labels]


def classify(y) -> int:
    """1-based argmax, ties to the lowest index."""
    return int(np.argmax(np.asarray(y))) + 1


def margin(kind, weights: Weights, x, k: int, j: int) -> float:
    """<U_hat_k - U_hat_j, features(x)>_F for x in class k (1-based k, j)."""
    M = features(kind, weights, np.asarray(x)[None, :])[0].T  # (d, L)
    return float(np.sum((weights.U_hat_k(k - 1) - weights.U_hat_k(j - 1)) * M))


# ----------------------------------------------------------------- backward


def loss_and_grad(kind, weights: Weights, X, labels, sample_weights=None, lambda_W=0.0, lambda_U=0.0):
    """Weighted loss plus ridge terms and its exact gradient.

    Objective: sum_i a_i * CE(forward(x_i), k_i) + lambda_W/2 |W|^2 + lambda_U/2 |U|^2
    with a_i = 1/n by default. Labels are 0-based. Returns (value, dW, dU).
    """
    kind = as_kind(kind)
    X = np.asarray(X)
    labels = np.asarray(labels)
    n, L = X.shape
    d = weights.d
    a = np.full(n, 1.0 / n) if sample_weights is None else np.asarray(sample_weights, dtype=float)

    E = weights.W.T[X]  # (n, L, d)
    if kind.is_layernorm:
        F, s = _layer_norm_rows(E, kind.layernorm_epsilon)
    else:
        F = E
    Fflat = F.reshape(n, L * d)
    Y = Fflat @ weights.U.T
    logp = log_softmax(Y)
    value = float(-(a * logp[np.arange(n), labels]).sum())

    G = np.exp(logp)
    G[np.arange(n), labels] -= 1.0
    G *= a[:, None]  # dValue/dY

    dU = G.T @ Fflat
    dF = (G @ weights.U).reshape(n, L, d)
    dE = _layer_norm_vjp(dF, F, s) if kind.is_layernorm else dF
    dW = np.zeros((weights.n_w, d))
    np.add.at(dW, X.reshape(-1), dE.reshape(-1, d))
    dW = dW.T

    if lambda_W:
        value += 0.5 * lambda_W * float(np.sum(weights.W**2))
        dW += lambda_W * weights.W
    if lambda_U:
        value += 0.5 * lambda_U * float(np.sum(weights.U**2))
        dU += lambda_U * weights.U
    return value, dW, dU


def backward(kind, weights: Weights, X, labels, lambda_W=0.0, lambda_U=0.0):
    """Gradient (dW, dU) of the mean minibatch loss plus ridge terms (0-based labels)."""
    kind = as_kind(kind)
    if len(X) == 0:
        raise ValueError("empty batch")
    _, dW, dU = loss_and_grad(kind, weights, X, labels, None, lambda_W, lambda_U)
    return dW, dU


# ------------------------------------------------------------ serialization

_MAGIC = b"CLWT"
_HEADER = struct.Struct("<4sIqqqqBd")  # magic, version, d, n_w, K, L, kind, epsilon


def save_weights(path, weights: Weights, kind=PLAIN) -> None:
    """Header (d, n_w, K, L, kind, epsilon) then row-major W and U as little-endian float64."""
    kind = as_kind(kind)
    header = _HEADER.pack(_MAGIC, 1, weights.d, weights.n_w, weights.K, weights.L,
                          1 if kind.is_layernorm else 0, kind.layernorm_epsilon)
    body = np.ascontiguousarray(weights.W, dtype="<f8").tobytes() + np.ascontiguousarray(weights.U, dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_weights(path):
    """Inverse of ``save_weights``; returns (weights, kind)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise WeightsFormatError("file too short for header")
    magic, version, d, n_w, K, L, k, eps = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1 or k not in (0, 1) or min(d, n_w, K, L) < 1:
        raise WeightsFormatError("not a weights file")
    n_W, n_U = d * n_w, K * L * d
    if len(raw) != _HEADER.size + 8 * (n_W + n_U):
        raise WeightsFormatError("payload size does not match header")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    if not np.all(np.isfinite(data)):
        raise WeightsFormatError("non-finite weights")
    W = data[:n_W].reshape(d, n_w)
    U = data[n_W:].reshape(K, L * d)
    kind = NetworkKind(Kind.LAYERNORM if k else Kind.PLAIN, eps)
    return Weights(W, U, L), kind
