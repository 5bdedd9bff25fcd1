"""Synthetic concepts/words data model.

A vocabulary of ``n_w = n_c * s_c`` words is partitioned into ``n_c`` concepts.
A class is a latent sequence of ``L`` concepts; sentences of that class are
drawn by picking, at each position, a word of the required concept with
within-concept frequencies ``mu``.

Indices are 1-based in the public value types (``Word``, ``LatentVariable``)
and 0-based in every array. ``word_index`` / ``word_from_index`` are the only
places that translate between the two.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb
from typing import NamedTuple, Sequence

import numpy as np


class DataModelError(ValueError):
    pass


class InvalidDistributionError(DataModelError):
    pass


class InvalidWordError(DataModelError):
    pass


class InfeasibleError(DataModelError):
    pass


# largest latent set we are willing to enumerate
MAX_ENUMERATION = 10**7


def word_distribution(kind="uniform", s_c: int = 1, values=None) -> np.ndarray:
    """Within-concept word frequencies.

    ``kind`` is ``"uniform"``, ``"zipf"`` (mu_b proportional to 1/b) or
    ``"custom"`` (``values`` normalised to sum to one). A list/tuple passed as
    ``kind`` is treated as custom values.
    """
    if not isinstance(kind, str):
        kind, values = "custom", kind
    if kind == "custom":
        mu = np.asarray(values, dtype=float)
        if mu.ndim != 1 or mu.size == 0:
            raise InvalidDistributionError("custom distribution must be a non-empty vector")
        if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
            raise InvalidDistributionError("custom word frequencies must be positive")
        return mu / mu.sum()
    if s_c < 1:
        raise InvalidDistributionError("s_c must be >= 1")
    if kind == "uniform":
        return np.full(s_c, 1.0 / s_c)
    if kind == "zipf":
        w = 1.0 / np.arange(1, s_c + 1)
        return w / w.sum()
    raise InvalidDistributionError(f"unknown distribution kind {kind!r}")


@dataclass(frozen=True)
class DataModelConfig:
    n_c: int
    s_c: int
    L: int
    K: int
    mu: np.ndarray = field(repr=False)
    lam: float = 0.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        object.__setattr__(self, "mu", mu)
        if self.n_c < 1 or self.s_c < 1 or self.L < 1 or self.K < 1:
            raise DataModelError("n_c, s_c, L and K must all be >= 1")
        if mu.shape != (self.s_c,):
            raise InvalidDistributionError(f"mu must have length s_c={self.s_c}")
        if np.any(mu <= 0) or abs(mu.sum() - 1.0) > 1e-12:
            raise InvalidDistributionError("mu must be positive and sum to 1")
        if self.lam < 0:
            raise DataModelError("lambda must be non-negative")

    @classmethod
    def make(cls, n_c, s_c, L, K, distribution="uniform", lam=0.0):
        return cls(n_c=n_c, s_c=s_c, L=L, K=K, mu=word_distribution(distribution, s_c), lam=lam)

    @property
    def n_w(self) -> int:
        return self.n_c * self.s_c

    @property
    def n_latent(self) -> int:
        """Size of the latent space, n_c ** L."""
        return self.n_c**self.L


class Word(NamedTuple):
    """Word (alpha, beta): the beta-th word of concept alpha, both 1-based."""

    alpha: int
    beta: int


Sentence = tuple  # tuple[Word, ...] of length L


class LatentVariable(tuple):
    """Sequence of L concepts (1-based)."""

    def __new__(cls, concepts):
        return super().__new__(cls, (int(a) for a in concepts))


def word_index(alpha: int, beta: int, s_c: int) -> int:
    """0-based column of word (alpha, beta) in W; the one-hot slot is this + 1."""
    return (alpha - 1) * s_c + (beta - 1)


def word_from_index(j: int, s_c: int) -> Word:
    return Word(j // s_c + 1, j % s_c + 1)


def _check_word(w, config: DataModelConfig):
    a, b = w
    if not (1 <= a <= config.n_c and 1 <= b <= config.s_c):
        raise InvalidWordError(f"word {tuple(w)} outside vocabulary n_c={config.n_c}, s_c={config.s_c}")


def sentence_indices(x, config: DataModelConfig) -> np.ndarray:
    """Sentence of (alpha, beta) pairs -> int array of 0-based word columns."""
    for w in x:
        _check_word(w, config)
    return np.array([word_index(a, b, config.s_c) for a, b in x], dtype=np.int64)


def indices_to_sentence(idx, s_c: int) -> Sentence:
    return tuple(word_from_index(int(j), s_c) for j in idx)


def encode_sentence(x, config: DataModelConfig) -> np.ndarray:
    """Dense one-hot matrix zeta(x) of shape (n_w, L)."""
    idx = sentence_indices(x, config)
    out = np.zeros((config.n_w, len(idx)))
    out[idx, np.arange(len(idx))] = 1.0
    return out


# ---------------------------------------------------------------- encodings


@dataclass(frozen=True)
class EncodingMatrices:
    P: np.ndarray
    Q: np.ndarray


def encoding_matrices(config: DataModelConfig) -> EncodingMatrices:
    """Partition matrix P (P zeta(a,b) = e_a) and frequency matrix Q (Q zeta(a,b) = mu_b e_a)."""
    eye = np.eye(config.n_c)
    P = np.kron(eye, np.ones((1, config.s_c)))
    Q = np.kron(eye, config.mu[None, :])
    return EncodingMatrices(P, Q)


# ------------------------------------------------------------------ latents


@dataclass(frozen=True)
class LatentSet:
    """K latent variables stored as a (K, L) array of 0-based concepts."""

    concepts: np.ndarray
    n_c: int
    distinct: bool = True

    def __post_init__(self):
        z = np.asarray(self.concepts, dtype=np.int64)
        if z.ndim != 2:
            raise DataModelError("latent array must be (K, L)")
        if z.size and (z.min() < 0 or z.max() >= self.n_c):
            raise DataModelError("latent concept out of range")
        z.setflags(write=False)
        object.__setattr__(self, "concepts", z)
        if self.distinct and len({tuple(r) for r in z}) != len(z):
            raise DataModelError("latents flagged distinct contain duplicates")

    @classmethod
    def from_latents(cls, latents: Sequence[Sequence[int]], n_c: int, distinct: bool = True):
        """Build from 1-based concept sequences."""
        return cls(np.asarray(latents, dtype=np.int64) - 1, n_c, distinct)

    @property
    def K(self) -> int:
        return self.concepts.shape[0]

    @property
    def L(self) -> int:
        return self.concepts.shape[1]

    @property
    def latents(self) -> list[LatentVariable]:
        return [LatentVariable(row + 1) for row in self.concepts]

    def Z_k(self, k: int) -> np.ndarray:
        """One-hot concepts of latent k (0-based), shape (n_c, L)."""
        out = np.zeros((self.n_c, self.L))
        out[self.concepts[k], np.arange(self.L)] = 1.0
        return out

    @property
    def Z(self) -> np.ndarray:
        """Concatenation [Z_1 ... Z_K], shape (n_c, K L)."""
        flat = self.concepts.reshape(-1)
        out = np.zeros((self.n_c, flat.size))
        out[flat, np.arange(flat.size)] = 1.0
        return out

    def distance_matrix(self) -> np.ndarray:
        z = self.concepts
        return (z[:, None, :] != z[None, :, :]).sum(-1)


def full_latent_set(n_c: int, L: int) -> LatentSet:
    """All n_c**L latents in lexicographic order."""
    if n_c**L > MAX_ENUMERATION:
        raise InfeasibleError(f"n_c**L = {n_c**L} exceeds enumeration budget {MAX_ENUMERATION}")
    z = np.array(list(itertools.product(range(n_c), repeat=L)), dtype=np.int64).reshape(-1, L)
    return LatentSet(z, n_c, distinct=True)


def sample_latents(config: DataModelConfig, rng: np.random.Generator, distinct: bool = True) -> LatentSet:
    """K latents drawn uniformly from C^L; duplicates are resampled when ``distinct``."""
    n_c, L, K = config.n_c, config.L, config.K
    if distinct and K > n_c**L:
        raise InfeasibleError(f"cannot draw K={K} distinct latents from {n_c}**{L}")
    z = rng.integers(0, n_c, size=(K, L))
    if distinct:
        seen = {}
        for k in range(K):
            key = z[k].tobytes()
            while key in seen:
                z[k] = rng.integers(0, n_c, size=L)
                key = z[k].tobytes()
            seen[key] = k
    return LatentSet(z, n_c, distinct=distinct)


# ---------------------------------------------------------------- sentences


def sample_sentence_indices(concepts: np.ndarray, config: DataModelConfig, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """n sentences of one latent (0-based concept array) as (n, L) word columns."""
    beta = rng.choice(config.s_c, size=(n, len(concepts)), p=config.mu)
    return concepts[None, :] * config.s_c + beta


def sample_sentence(z, config: DataModelConfig, rng: np.random.Generator) -> Sentence:
    concepts = np.asarray(z, dtype=np.int64) - 1
    if concepts.min() < 0 or concepts.max() >= config.n_c:
        raise InvalidWordError(f"latent {tuple(z)} has a concept outside [1, {config.n_c}]")
    return indices_to_sentence(sample_sentence_indices(concepts, config, rng)[0], config.s_c)


def sentence_probability(x, z, config: DataModelConfig) -> float:
    """D_z({x}): product of word frequencies when concepts match z, else 0."""
    if len(x) != len(z):
        return 0.0
    p = 1.0
    for (a, b), zl in zip(x, z):
        if a != zl:
            return 0.0
        p *= config.mu[b - 1]
    return p


def hamming_distance(z, zp) -> int:
    if len(z) != len(zp):
        raise DataModelError("latent variables must have equal length")
    return int(sum(a != b for a, b in zip(z, zp)))


# ------------------------------------------------------------ symmetry checks


def symmetry_target(K: int, n_c: int, L: int, r: int, same: bool) -> float:
    """Ideal neighbour count of the latent-symmetry identities."""
    scale = K / n_c**L
    if same:
        return scale * comb(L - 1, r) * (n_c - 1) ** r
    return scale * comb(L - 1, r - 1) * (n_c - 1) ** (r - 1)


@dataclass
class SymmetryReport:
    holds: bool
    worst_violation: float
    n_violations: int


def check_symmetry_assumption(latents: LatentSet, config: DataModelConfig | None = None) -> SymmetryReport:
    """Compare exact neighbour counts with the latent-symmetry identities.

    For every (k, r, l, alpha) with r in 1..L counts the latents at distance r
    from z_k having concept alpha at position l.
    """
    z = latents.concepts
    K, L = z.shape
    n_c = latents.n_c
    dist = latents.distance_matrix()
    onehot = np.eye(n_c)[z]  # (K, L, n_c)
    worst = 0.0
    n_bad = 0
    for r in range(1, L + 1):
        mask = (dist == r).astype(float)
        counts = np.einsum("kj,jla->kla", mask, onehot)  # (K, L, n_c)
        same = onehot.astype(bool)
        target = np.where(
            same,
            symmetry_target(K, n_c, L, r, True),
            symmetry_target(K, n_c, L, r, False),
        )
        dev = np.abs(counts - target)
        worst = max(worst, float(dev.max()))
        n_bad += int((dev > 1e-9).sum())
    return SymmetryReport(holds=n_bad == 0, worst_violation=worst, n_violations=n_bad)


@dataclass
class LemmaBReport:
    sphere_sizes: np.ndarray  # (L+1,) sizes |S_r| when equal across k, else -1
    equal_spheres: bool
    column_balance: bool
    gram_identity: bool
    mean_value: bool
    theta: np.ndarray  # theta_r for r = 1..L
    skipped_radii: list

    @property
    def holds(self) -> bool:
        return self.equal_spheres and self.column_balance and self.gram_identity and self.mean_value


def check_lemma_B_properties(latents: LatentSet, atol: float = 1e-9) -> LemmaBReport:
    """Check the three consequences of latent symmetry.

    (i) equal sphere sizes |S_r(k)|; (ii) sum_k Z_k = (K/n_c) 11^T and
    Z Z^T = (K L / n_c) I; (iii) Z_k - mean_{j in S_r(k)} Z_j = theta_r Z_k + A_r.
    """
    z = latents.concepts
    K, L = z.shape
    n_c = latents.n_c
    dist = latents.distance_matrix()
    sizes = np.stack([(dist == r).sum(1) for r in range(L + 1)], axis=1)  # (K, L+1)
    equal = bool(np.all(sizes == sizes[0]))
    sphere = sizes[0].copy() if equal else np.full(L + 1, -1)

    Zk = np.eye(n_c)[z].transpose(0, 2, 1)  # (K, n_c, L)
    balance = np.allclose(Zk.sum(0), K / n_c * np.ones((n_c, L)), atol=atol, rtol=0)
    Z = latents.Z
    gram = np.allclose(Z @ Z.T, K * L / n_c * np.eye(n_c), atol=atol, rtol=0)

    theta = np.array([n_c / (n_c - 1) * r / L for r in range(1, L + 1)]) if n_c > 1 else np.zeros(L)
    mean_ok = True
    skipped = []
    for r in range(1, L + 1):
        A_r = -(1.0 / (n_c - 1)) * (r / L) * np.ones((n_c, L)) if n_c > 1 else np.zeros((n_c, L))
        for k in range(K):
            nbrs = np.flatnonzero(dist[k] == r)
            if nbrs.size == 0:
                if r not in skipped:
                    skipped.append(r)
                continue
            lhs = Zk[k] - Zk[nbrs].mean(0)
            if not np.allclose(lhs, theta[r - 1] * Zk[k] + A_r, atol=atol, rtol=0):
                mean_ok = False
                break
        if not mean_ok:
            break
    return LemmaBReport(sphere, equal, balance, gram, mean_ok, theta, skipped)


def enumerate_support(concepts: np.ndarray, config: DataModelConfig):
    """All sentences of one latent with their probabilities.

    Returns ``(X, p)`` with X of shape (s_c**L, L) holding 0-based word
    columns, in lexicographic order of the rank tuples.
    """
    L = len(concepts)
    s_c = config.s_c
    ranks = np.array(list(itertools.product(range(s_c), repeat=L)), dtype=np.int64).reshape(-1, L)
    X = np.asarray(concepts)[None, :] * s_c + ranks
    p = np.prod(config.mu[ranks], axis=1)
    return X, p
