"""Closed-form collapse predictions and exact (enumerated) risks.

Collapse configurations are built from an equiangular frame F (d x n_c):
type I   W = c F P,            U_hat = c' F Z
type II  W = sqrt(d) F P,      U_hat = c F Z      (F mean-zero, so phi(W) = W)
type III w_(a,b) = r_b f_a,    U_hat = c F Z
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from math import comb
from typing import Sequence

import numpy as np

from .data_model import DataModelConfig, LatentSet, encoding_matrices, enumerate_support
from .network import (
    LAYERNORM,
    PLAIN,
    Weights,
    as_kind,
    layer_norm_columns,
    layer_norm_jacobian,
    log_softmax,
    loss_and_grad,
)


class TheoryError(ValueError):
    pass


class InfeasibleFrameError(TheoryError):
    pass


class NoGuaranteeError(TheoryError):
    """The uniqueness bound fails, so the type-III solver refuses to run."""


class EnumerationBudgetError(TheoryError):
    pass


ENUMERATION_BUDGET = 10**6


@dataclass(frozen=True)
class TheoryParams:
    n_c: int
    s_c: int
    L: int
    K: int
    d: int
    lam: float
    mu: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        if self.n_c < 2:
            raise TheoryError("need at least two concepts")
        if self.mu.shape != (self.s_c,) or np.any(self.mu <= 0):
            raise TheoryError("mu must be a positive vector of length s_c")
        if self.lam < 0:
            raise TheoryError("lambda must be non-negative")

    @classmethod
    def from_config(cls, config: DataModelConfig, d: int, lam: float | None = None):
        return cls(config.n_c, config.s_c, config.L, config.K, d,
                   config.lam if lam is None else lam, config.mu)

    @property
    def n_w(self) -> int:
        return self.n_c * self.s_c

    @property
    def eta(self) -> float:
        return self.n_c / (self.n_c - 1) / np.sqrt(self.n_w * self.K * self.L)

    @property
    def eta_star(self) -> float:
        return self.n_c / (self.n_c - 1) / np.sqrt(self.K * self.L / self.d)

    def data_config(self) -> DataModelConfig:
        return DataModelConfig(self.n_c, self.s_c, self.L, self.K, self.mu, self.lam)


@dataclass
class TheoryPrediction:
    kind: str
    tau: float
    eta: float
    c: float
    c_prime: float | None
    predicted_norm: float
    predicted_risk: float
    predicted_margin_per_distance: float
    radii: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------- scalar objectives


def _log_partition(params: TheoryParams, x: float) -> float:
    """log(1 - K/n_c^L + K/n_c^L (1 + (n_c-1) e^{-x})^L), the risk at margin scale x."""
    n, L, K = params.n_c, params.L, params.K
    p = K / n**L
    base = (1.0 + (n - 1) * np.exp(-x)) / n
    return float(np.log1p(-p + K * base**L))


def _dlog_partition(params: TheoryParams, x: float) -> float:
    """Derivative in x of ``_log_partition``."""
    n, L, K = params.n_c, params.L, params.K
    p = K / n**L
    a = np.exp(-x)
    base = (1.0 + (n - 1) * a) / n
    num = -K * L * base ** (L - 1) * (n - 1) * a / n
    return float(num / (1.0 - p + K * base**L))


def H(t: float, params: TheoryParams) -> float:
    return _log_partition(params, params.eta * t) + params.lam * t


def dH(t: float, params: TheoryParams) -> float:
    return params.eta * _dlog_partition(params, params.eta * t) + params.lam


def H_star(t: float, params: TheoryParams) -> float:
    return _log_partition(params, params.eta_star * t) + 0.5 * params.lam * t * t


def dH_star(t: float, params: TheoryParams) -> float:
    return params.eta_star * _dlog_partition(params, params.eta_star * t) + params.lam * t


def bisect_increasing(f, lo: float, hi: float, max_iter: int = 400) -> float:
    """Root of an increasing function with f(lo) <= 0 <= f(hi), bisected to machine precision."""
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return lo if abs(f(lo)) <= abs(f(hi)) else hi


def _argmin_convex(deriv) -> float:
    """Minimiser over t >= 0 of a strictly convex function given its derivative."""
    if deriv(0.0) >= 0:
        return 0.0
    hi = 1.0
    while deriv(hi) < 0:
        hi *= 2.0
        if hi > 1e300:
            raise TheoryError("derivative never turns positive; is lambda > 0?")
    return bisect_increasing(deriv, 0.0, hi)


def minimize_H(params: TheoryParams) -> TheoryPrediction:
    """Type-I scales for h: tau = argmin H, c = sqrt(tau/n_w), c' = sqrt(tau/(K L))."""
    if params.K > params.n_c**params.L:
        raise TheoryError("K exceeds n_c**L")
    if params.lam <= 0:
        raise TheoryError("minimize_H needs lambda > 0")
    tau = _argmin_convex(lambda t: dH(t, params))
    c = np.sqrt(tau / params.n_w)
    cp = np.sqrt(tau / (params.K * params.L))
    return TheoryPrediction(
        kind="I", tau=tau, eta=params.eta, c=float(c), c_prime=float(cp),
        predicted_norm=float(c), predicted_risk=H(tau, params),
        predicted_margin_per_distance=float(c * cp * params.n_c / (params.n_c - 1)),
    )


def minimize_Hstar(params: TheoryParams) -> TheoryPrediction:
    """Type-II head scale for h*: tau = argmin H*, c = tau / sqrt(K L)."""
    if params.K > params.n_c**params.L:
        raise TheoryError("K exceeds n_c**L")
    if params.lam <= 0:
        raise TheoryError("minimize_Hstar needs lambda > 0")
    tau = _argmin_convex(lambda t: dH_star(t, params))
    c = tau / np.sqrt(params.K * params.L)
    return TheoryPrediction(
        kind="II", tau=tau, eta=params.eta_star, c=float(c), c_prime=None,
        predicted_norm=float(c), predicted_risk=H_star(tau, params),
        predicted_margin_per_distance=float(c * np.sqrt(params.d) * params.n_c / (params.n_c - 1)),
    )


# ------------------------------------------------------ type-III (system)


def uniqueness_bound(params: TheoryParams) -> bool:
    """lambda^2 < L / n_c^(L+1) * sum mu^2 (strict)."""
    rhs = params.L / params.n_c ** (params.L + 1) * float(np.sum(params.mu**2))
    return params.lam**2 < rhs


@dataclass
class Type3Solution:
    c: float
    radii: np.ndarray
    residual_radii: float
    residual_norm: float

    @property
    def rho(self) -> np.ndarray:
        return self.radii / self.c


def type3_residuals(params: TheoryParams, c: float, radii) -> tuple[np.ndarray, float]:
    """Residuals of the per-rank equations and of the sum-of-squares equation."""
    n, L, lam = params.n_c, params.L, params.lam
    r = np.asarray(radii, dtype=float)
    eq1 = lam / L * (r / c) * (n - 1 + np.exp(n / (n - 1) * c * r)) - params.mu
    eq2 = float(np.sum((r / c) ** 2) - L * n ** (L - 1))
    return eq1, eq2


def solve_type3_system(params: TheoryParams) -> Type3Solution:
    """Unique positive (c, r_1..r_s) making a type-III configuration critical.

    With rho = r / c each rank equation reads g(c, rho) = L mu_b / (lambda n_c),
    g(c, x) = x (1 + gamma e^{(1+gamma) c^2 x}) / (1 + gamma), gamma = 1/(n_c-1);
    g is increasing in x with g >= x, so rho is bisected on [0, target]. The
    sum of rho^2 is continuous and decreasing in c; c is bracketed by doubling
    and bisected.
    """
    if not uniqueness_bound(params):
        raise NoGuaranteeError("lambda violates the uniqueness bound; no solution is guaranteed")
    n, L, lam = params.n_c, params.L, params.lam
    gamma = 1.0 / (n - 1)
    targets = L * params.mu / (lam * n)
    goal = L * n ** (L - 1)

    def g(c, x):
        with np.errstate(over="ignore"):  # overflow to inf still orders correctly
            return x * (1.0 + gamma * np.exp((1.0 + gamma) * c * c * x)) / (1.0 + gamma)

    def rho_of(c):
        return np.array([bisect_increasing(lambda x: g(c, x) - t, 0.0, t) for t in targets])

    def excess(c):  # decreasing in c
        return float(np.sum(rho_of(c) ** 2)) - goal

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
    c = bisect_increasing(lambda cc: -excess(cc), 0.0, hi)
    radii = c * rho_of(c)
    eq1, eq2 = type3_residuals(params, c, radii)
    return Type3Solution(float(c), radii, float(np.max(np.abs(eq1))), abs(eq2))


# -------------------------------------------------------------- frames


@dataclass(frozen=True)
class Frame:
    F: np.ndarray  # (d, n_c)
    mean_zero: bool

    @property
    def n_c(self) -> int:
        return self.F.shape[1]

    @property
    def d(self) -> int:
        return self.F.shape[0]


def simplex_gram(n_c: int) -> np.ndarray:
    return n_c / (n_c - 1) * np.eye(n_c) - np.ones((n_c, n_c)) / (n_c - 1)


def equiangular_frame(n_c: int, d: int, mean_zero: bool = False, rng: np.random.Generator | None = None) -> Frame:
    """n_c unit vectors in R^d summing to zero with pairwise inner products -1/(n_c-1).

    The centred scaled basis of R^{n_c} is mapped into R^d by an isometry whose
    range avoids the all-ones direction when ``mean_zero``. With ``rng`` the
    isometry is random; otherwise it is fixed.
    """
    if n_c < 2:
        raise InfeasibleFrameError("need n_c >= 2")
    if d < n_c or (mean_zero and d < n_c + 1):
        raise InfeasibleFrameError(f"d={d} too small for {'mean-zero ' if mean_zero else ''}frame with n_c={n_c}")
    base = np.sqrt(n_c / (n_c - 1)) * (np.eye(n_c) - 1.0 / n_c)
    if rng is None:
        if mean_zero:
            # orthonormal basis of the complement of 1_d, first n_c columns
            A = np.eye(d)[:, : n_c + 1].copy()
            A[:, 0] = 1.0
            Qm, _ = np.linalg.qr(A)
            iso = Qm[:, 1 : n_c + 1]
        else:
            iso = np.eye(d)[:, :n_c]
    else:
        G = rng.standard_normal((d, n_c))
        if mean_zero:
            G -= G.mean(axis=0, keepdims=True)
        iso, R = np.linalg.qr(G)
        iso = iso * np.sign(np.diag(R))
        if mean_zero:
            iso -= iso.mean(axis=0, keepdims=True)
            iso, _ = np.linalg.qr(iso)
    F = iso @ base
    if mean_zero:
        F -= F.mean(axis=0, keepdims=True)
    return Frame(F, mean_zero)


# ------------------------------------------------------ configurations


def build_collapse_config(kind: str, frame: Frame, latents: LatentSet, params: TheoryParams, *,
                          c: float = 0.0, c_prime: float | None = None, radii: Sequence[float] | None = None) -> Weights:
    """Materialise (W, U) in a type I / II / III collapse configuration.

    type I uses (c, c_prime); c_prime defaults to c sqrt(n_w / (K L)).
    type II uses head scale c and needs a mean-zero frame.
    type III uses head scale c and radii r_1..r_s.
    """
    kind = str(kind).upper()
    F = frame.F
    d = frame.d
    s_c, K, L = params.s_c, latents.K, latents.L
    P = encoding_matrices(params.data_config()).P
    FZ = F[:, latents.concepts.reshape(-1)]  # columns f_{z_{k,l}} in (k, l) order
    if kind == "I":
        if c_prime is None:
            c_prime = c * np.sqrt(params.n_w / (K * L))
        W = c * F @ P
        U_hat = c_prime * FZ
    elif kind == "II":
        if not frame.mean_zero:
            raise TheoryError("type II configurations need a mean-zero frame")
        W = np.sqrt(d) * F @ P
        U_hat = c * FZ
    elif kind == "III":
        if radii is None or len(radii) != s_c:
            raise TheoryError(f"type III needs {s_c} radii")
        W = (F @ P) * np.tile(np.asarray(radii, dtype=float), params.n_c)[None, :]
        U_hat = c * FZ
    else:
        raise TheoryError(f"unknown collapse kind {kind!r}")
    return Weights(W, Weights.U_from_hat(U_hat, K), L)


def closed_form_risk(kind: str, c: float, params: TheoryParams) -> float:
    """Regularised true risk at a type I (c' = c sqrt(n_w/(K L))) or type II configuration."""
    kind = str(kind).upper()
    if kind == "I":
        return H(params.n_w * c * c, params)
    if kind == "II":
        return H_star(np.sqrt(params.K * params.L) * c, params)
    raise TheoryError("closed-form risk is available for types I and II")


def predicted_margin(kind: str, r: int, *, c: float, c_prime: float | None = None, d: int | None = None, n_c: int | None = None) -> float:
    """Margin between a class-k sentence and class j at Hamming distance r."""
    kind = str(kind).upper()
    if kind == "I":
        return c * c_prime * n_c / (n_c - 1) * r
    if kind == "II":
        return c * np.sqrt(d) * n_c / (n_c - 1) * r
    raise TheoryError("predicted margins exist for types I and II")


# -------------------------------------------------------- exact risk


def _enumerate_all(latents: LatentSet, params: TheoryParams):
    """Every (sentence, class, probability) of the task, stacked."""
    if params.s_c**params.L > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(f"s_c**L = {params.s_c**params.L} exceeds {ENUMERATION_BUDGET}")
    cfg = params.data_config()
    Xs, ps = [], []
    for k in range(latents.K):
        X, p = enumerate_support(latents.concepts[k], cfg)
        Xs.append(X)
        ps.append(p)
    X = np.concatenate(Xs)
    p = np.concatenate(ps)
    labels = np.repeat(np.arange(latents.K), [len(q) for q in ps])
    return X, labels, p


def exact_risk(kind, weights: Weights, latents: LatentSet, params: TheoryParams, *, with_grad: bool = False):
    """True regularised risk by enumerating every support.

    Plain h penalises both matrices, h* only U. With ``with_grad`` returns
    (value, dW, dU).
    """
    kind = as_kind(kind)
    X, labels, p = _enumerate_all(latents, params)
    lw = 0.0 if kind.is_layernorm else params.lam
    value, dW, dU = loss_and_grad(kind, weights, X, labels, p / latents.K, lw, params.lam)
    return (value, dW, dU) if with_grad else value


def exact_risk_gradient(kind, weights: Weights, latents: LatentSet, params: TheoryParams):
    _, dW, dU = exact_risk(kind, weights, latents, params, with_grad=True)
    return dW, dU


def phi_coefficients(kind, weights: Weights, latents: LatentSet, params: TheoryParams) -> np.ndarray:
    """Phi_{(a,b),(k,l)} = 1/K sum_j sum_{x in X_j} 1{x_l=(a,b)} (1{j=k} - q_k(x)) D_j(x); shape (n_w, K, L)."""
    kind = as_kind(kind)
    X, labels, p = _enumerate_all(latents, params)
    W = layer_norm_columns(weights.W, kind.layernorm_epsilon) if kind.is_layernorm else weights.W
    M = W.T[X].reshape(len(X), -1)  # features, (N, L d)
    q = np.exp(log_softmax(M @ weights.U.T))  # (N, K)
    coef = -q
    coef[np.arange(len(X)), labels] += 1.0
    coef *= (p / latents.K)[:, None]
    Phi = np.zeros((weights.n_w, latents.K, latents.L))
    for ell in range(latents.L):
        np.add.at(Phi[:, :, ell], X[:, ell], coef)
    return Phi


def exact_risk_gradient_phi(kind, weights: Weights, latents: LatentSet, params: TheoryParams):
    """Second route to the exact gradient via the Phi coefficients.

    -dR0/du_{k,l} = sum_{a,b} Phi w_(a,b) and -dR0/dw_(a,b) = sum_{k,l} Phi u_{k,l};
    for h* the word gradient is pulled back through the LayerNorm Jacobian.
    """
    kind = as_kind(kind)
    Phi = phi_coefficients(kind, weights, latents, params)
    if kind.is_layernorm:
        Wf = layer_norm_columns(weights.W, kind.layernorm_epsilon)
    else:
        Wf = weights.W
    ub = weights.u_blocks  # (K, L, d)
    dU_blocks = -np.einsum("jkl,dj->kld", Phi, Wf)
    dWf = -np.einsum("jkl,kld->dj", Phi, ub)
    if kind.is_layernorm:
        dW = np.stack([layer_norm_jacobian(weights.W[:, j], kind.layernorm_epsilon) @ dWf[:, j]
                       for j in range(weights.n_w)], axis=1)
    else:
        dW = dWf + params.lam * weights.W
    dU = dU_blocks.reshape(latents.K, -1) + params.lam * weights.U
    return dW, dU


def risk_lower_bound(weights: Weights, latents: LatentSet, params: TheoryParams, plain_features: np.ndarray | None = None) -> float:
    """g(-<U_hat, W Q^T Z>_F) with g(x) = log(1 + sum_r |S_r| e^{theta_r x / K}).

    Lower bound on the unregularised plain risk for weights whose head blocks
    sum to zero; |S_r| is read from latent 0 (equal for symmetric latents).
    """
    W = weights.W if plain_features is None else plain_features
    Q = encoding_matrices(params.data_config()).Q
    x = -float(np.sum(weights.U_hat * (W @ Q.T @ latents.Z)))
    n, L, K = params.n_c, params.L, latents.K
    dist = latents.distance_matrix()[0]
    terms = [np.sum(dist == r) * np.exp(n / (n - 1) * r / L * x / K) for r in range(1, L + 1)]
    return float(np.log1p(np.sum(terms)))


def unregularized_exact_risk(kind, weights: Weights, latents: LatentSet, params: TheoryParams) -> float:
    kind = as_kind(kind)
    X, labels, p = _enumerate_all(latents, params)
    return loss_and_grad(kind, weights, X, labels, p / latents.K)[0]


def sphere_sizes(n_c: int, L: int, K: int) -> np.ndarray:
    """Ideal |S_r| = K/n_c^L C(L, r) (n_c-1)^r for r = 0..L."""
    return np.array([K / n_c**L * comb(L, r) * (n_c - 1) ** r for r in range(L + 1)])


__all__ = [
    "TheoryParams", "TheoryPrediction", "Frame", "Type3Solution",
    "H", "dH", "H_star", "dH_star", "minimize_H", "minimize_Hstar",
    "uniqueness_bound", "solve_type3_system", "type3_residuals",
    "equiangular_frame", "simplex_gram", "build_collapse_config", "closed_form_risk",
    "predicted_margin", "exact_risk", "exact_risk_gradient", "exact_risk_gradient_phi",
    "phi_coefficients", "risk_lower_bound", "unregularized_exact_risk", "sphere_sizes",
    "PLAIN", "LAYERNORM",
]
