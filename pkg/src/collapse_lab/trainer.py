"""Finite training sets, minibatch SGD on the regularised empirical risks, test accuracy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import DataModelConfig, LatentSet, indices_to_sentence, sample_sentence_indices
from .network import Weights, as_kind, forward_batch, init_weights, loss_and_grad

log = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_spl: int = 5
    batch_size: int = 100
    learning_rate: float = 0.1
    lam: float = 0.001
    max_epochs: int = 500
    plateau_tol: float = 1e-6
    seed: int = 0
    d: int = 100
    layernorm_epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.plateau_tol < 0:
            raise ValueError("plateau_tol must be >= 0")
        if self.n_spl < 1 or self.max_epochs < 0:
            raise ValueError("n_spl must be >= 1 and max_epochs >= 0")


@dataclass
class Dataset:
    """Sentences as (N, L) 0-based word columns with 0-based labels, grouped by class."""

    X: np.ndarray
    labels: np.ndarray
    n_spl: int
    s_c: int

    def __len__(self):
        return len(self.labels)

    @property
    def samples(self):
        """(Sentence, 1-based class) pairs."""
        return [(indices_to_sentence(x, self.s_c), int(k) + 1) for x, k in zip(self.X, self.labels)]

    def to_csv(self, path) -> None:
        """One row per sample: class k (1-based) then alpha_l, beta_l for every position."""
        L = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"{n}{l + 1}" for l in range(L) for n in ("alpha", "beta")])
            for x, k in zip(self.X, self.labels):
                row = [int(k) + 1]
                for j in x:
                    row += [int(j) // self.s_c + 1, int(j) % self.s_c + 1]
                w.writerow(row)


def make_dataset(latents: LatentSet, config: DataModelConfig, n_spl: int, rng: np.random.Generator) -> Dataset:
    """n_spl i.i.d. sentences per class, classes in order."""
    X = np.concatenate([sample_sentence_indices(z, config, rng, n_spl) for z in latents.concepts])
    labels = np.repeat(np.arange(latents.K), n_spl)
    return Dataset(X, labels, n_spl, config.s_c)


def regularizer(kind, weights: Weights, lam: float) -> float:
    kind = as_kind(kind)
    reg = float(np.vdot(weights.U, weights.U))
    if not kind.is_layernorm:
        reg += float(np.vdot(weights.W, weights.W))
    return 0.5 * lam * reg


def empirical_risk(kind, weights: Weights, dataset: Dataset, lam: float, chunk: int = 4096) -> float:
    """Mean cross-entropy over the set plus lambda/2 |U|^2 (and lambda/2 |W|^2 for plain h)."""
    total = 0.0
    for i in range(0, len(dataset), chunk):
        sl = slice(i, i + chunk)
        total += loss_and_grad(kind, weights, dataset.X[sl], dataset.labels[sl], np.ones(len(dataset.labels[sl])))[0]
    return total / len(dataset) + regularizer(kind, weights, lam)


@dataclass
class TrainResult:
    weights: Weights
    history: list = field(default_factory=list)  # epoch-mean training risk per epoch
    epochs: int = 0
    converged: bool = False


def sgd_train(kind, dataset: Dataset, train_config: TrainConfig, weights: Weights | None = None,
              n_w: int | None = None, K: int | None = None, callback=None) -> TrainResult:
    """Shuffled minibatch SGD with constant step on the regularised empirical risk.

    Each step takes the exact gradient of the minibatch loss plus the ridge
    terms (W is not penalised for h*). Stops after ``max_epochs`` or when the
    epoch-mean risk moves by less than ``plateau_tol``.
    """
    kind = as_kind(kind)
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        n_w = int(dataset.X.max()) + 1 if n_w is None else n_w
        K = int(dataset.labels.max()) + 1 if K is None else K
        weights = init_weights(cfg.d, n_w, K, dataset.X.shape[1], rng)
    else:
        weights = weights.copy()
    lam_W = 0.0 if kind.is_layernorm else cfg.lam
    lr = cfg.learning_rate
    N = len(dataset)
    initial = empirical_risk(kind, weights, dataset, cfg.lam)
    history: list[float] = []
    converged = False
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(N)
        acc = 0.0
        for i in range(0, N, cfg.batch_size):
            b = order[i : i + cfg.batch_size]
            loss, dW, dU = loss_and_grad(kind, weights, dataset.X[b], dataset.labels[b])
            acc += (loss + regularizer(kind, weights, cfg.lam)) * len(b)
            # gradient of lambda/2 |.|^2 is lambda * (.), applied in place
            if lam_W:
                weights.W *= 1.0 - lr * lam_W
            weights.W -= lr * dW
            weights.U *= 1.0 - lr * cfg.lam
            weights.U -= lr * dU
        risk = acc / N
        history.append(risk)
        if not np.isfinite(risk) or risk > 10 * initial:
            raise DivergedError(f"epoch {epoch}: risk {risk} exceeds 10x initial {initial}")
        if callback is not None:
            callback(epoch, risk, weights)
        if epoch % 50 == 0:
            log.info("epoch %d risk %.6f", epoch, risk)
        if len(history) > 1 and abs(history[-2] - history[-1]) < cfg.plateau_tol:
            converged = True
            break
    return TrainResult(weights, history, len(history), converged)


def evaluate_accuracy(kind, weights: Weights, latents: LatentSet, config: DataModelConfig,
                      n_test: int = 20, rng: np.random.Generator | int = 12345) -> float:
    """Accuracy on n_test fresh sentences per class."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    rng = np.random.default_rng(rng)
    test = make_dataset(latents, config, n_test, rng)
    correct = 0
    for i in range(0, len(test), 4096):
        Y = forward_batch(kind, weights, test.X[i : i + 4096])
        correct += int(np.sum(np.argmax(Y, axis=1) == test.labels[i : i + 4096]))
    return correct / len(test)


def write_history_csv(path, history, test_acc=None) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_risk", "test_acc"])
        for e, r in enumerate(history):
            acc = "" if (test_acc is None or e != len(history) - 1) else f"{test_acc:.17g}"
            w.writerow([e + 1, f"{r:.17g}", acc])
