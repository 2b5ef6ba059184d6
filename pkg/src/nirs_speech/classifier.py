"""Multiclass regularized LDA.

Each class k gets the covariance (1 - gamma) * pooled + gamma * class_k,
plus a small diagonal load so the matrix is invertible when N < d. Decision
rule: Gaussian log-likelihood with uniform priors,

    score_k(x) = -1/2 log|C_k| - 1/2 (x - mu_k)' C_k^-1 (x - mu_k) + log(1/K).

At gamma = 0 every C_k is the same matrix, so the rule is ordinary LDA.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from . import _io
from .epoching import LABELS, LabeledDataset

DEFAULT_LOADING = 1e-5
# smallest/largest eigenvalue ratio below which a matrix counts as singular
PD_RTOL = 1e-12


class ClassifierError(ValueError):
    pass


class NumericalError(ClassifierError):
    """A blended covariance is not positive definite after loading."""


@dataclass(frozen=True)
class ClassStats:
    classes: tuple[str, ...]
    means: np.ndarray  # (K, d)
    counts: tuple[int, ...]
    overall_mean: np.ndarray
    pooled: np.ndarray  # (d, d), divisor N - K
    class_covs: tuple[np.ndarray | None, ...]  # divisor N_k - 1; None when N_k < 2

    @property
    def N(self) -> int:
        return sum(self.counts)

    @property
    def K(self) -> int:
        return len(self.classes)

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ClassifierError(f"class {label!r} not present in training data") from None


def class_statistics(data: LabeledDataset) -> ClassStats:
    """Class means, pooled covariance (divisor N - K) and per-class covariances (N_k - 1)."""
    classes = data.classes
    N, K = data.N, len(classes)
    if N <= K:
        raise ClassifierError(f"pooled covariance needs N > K (N={N}, K={K})")
    means, counts, covs = [], [], []
    scatter = np.zeros((data.d, data.d))
    for lab in classes:
        Xk = data.X[data.indices(lab)]
        mu = Xk.mean(axis=0)
        dev = Xk - mu
        s = dev.T @ dev
        scatter += s
        means.append(mu)
        counts.append(len(Xk))
        covs.append(s / (len(Xk) - 1) if len(Xk) >= 2 else None)
    pooled = scatter / (N - K)
    return ClassStats(
        classes=classes,
        means=np.array(means),
        counts=tuple(counts),
        overall_mean=data.X.mean(axis=0),
        pooled=(pooled + pooled.T) / 2,
        class_covs=tuple(covs),
    )


def blend_covariance(stats: ClassStats, k: str | int, gamma: float) -> np.ndarray:
    """(1 - gamma) * pooled + gamma * class_k, symmetrised."""
    if not 0.0 <= gamma <= 1.0:
        raise ClassifierError(f"gamma must lie in [0, 1], got {gamma}")
    idx = stats.index(k) if isinstance(k, str) else int(k)
    if gamma == 0.0:
        m = stats.pooled.copy()
    else:
        ck = stats.class_covs[idx]
        if ck is None:
            raise ClassifierError(
                f"class {stats.classes[idx]!r} has {stats.counts[idx]} example(s); gamma > 0 needs at least 2"
            )
        m = (1.0 - gamma) * stats.pooled + gamma * ck
    return (m + m.T) / 2


@dataclass(frozen=True)
class RldaModel:
    gamma: float
    loading: float
    classes: tuple[str, ...]
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d) blended, before loading
    loads: np.ndarray  # (K,) absolute diagonal load added to each class
    cholesky: np.ndarray  # (K, d, d) lower factors of the loaded matrices
    logdets: np.ndarray  # (K,)
    log_prior: float

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def loaded_covariance(self, k: int) -> np.ndarray:
        return self.covariances[k] + self.loads[k] * np.eye(self.d)

    def inverse(self, k: int) -> np.ndarray:
        L = self.cholesky[k]
        Linv = solve_triangular(L, np.eye(self.d), lower=True)
        return Linv.T @ Linv


def _factor(classes, covariances, loading):
    d = covariances.shape[1]
    loads, chols, logdets = [], [], []
    for label, m in zip(classes, covariances):
        trace = float(np.trace(m))
        lam = loading * trace / d
        c = m + lam * np.eye(d)
        # m is PSD, so min eig(c) >= lam up to round-off; only a weak load needs the spectrum
        if not lam > 1e3 * PD_RTOL * trace:
            eig = np.linalg.eigvalsh(c)
            if not (eig[-1] > 0 and eig[0] > PD_RTOL * eig[-1]):
                raise NumericalError(
                    f"covariance for class {label!r} is not positive definite after loading "
                    f"(min eigenvalue {eig[0]:.3g}, max {eig[-1]:.3g}, load {lam:.3g})"
                )
        try:
            L = np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance for class {label!r} failed Cholesky after loading") from exc
        loads.append(lam)
        chols.append(L)
        logdets.append(2.0 * float(np.sum(np.log(np.diag(L)))))
    return np.array(loads), np.array(chols), np.array(logdets)


def _assemble(gamma, loading, classes, means, covariances) -> RldaModel:
    loads, chols, logdets = _factor(classes, covariances, loading)
    return RldaModel(
        gamma=float(gamma),
        loading=float(loading),
        classes=tuple(classes),
        means=np.asarray(means, dtype=float),
        covariances=covariances,
        loads=loads,
        cholesky=chols,
        logdets=logdets,
        log_prior=-math.log(len(classes)),
    )


def train_from_stats(stats: ClassStats, gamma: float, loading: float = DEFAULT_LOADING) -> RldaModel:
    if loading < 0:
        raise ClassifierError("loading must be non-negative")
    covs = np.array([blend_covariance(stats, k, gamma) for k in range(stats.K)])
    return _assemble(gamma, loading, stats.classes, stats.means, covs)


def train_rlda(data: LabeledDataset, gamma: float, loading: float = DEFAULT_LOADING) -> RldaModel:
    """Fit class statistics, blend with ``gamma`` and factor the loaded covariances."""
    return train_from_stats(class_statistics(data), gamma, loading)


def decision_scores(model: RldaModel, X: np.ndarray) -> np.ndarray:
    """Discriminant scores, shape (n, K), columns in ``model.classes`` order."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.d:
        raise ClassifierError(f"feature dimension {X.shape[1]} does not match model dimension {model.d}")
    scores = np.empty((X.shape[0], len(model.classes)))
    for k in range(len(model.classes)):
        z = solve_triangular(model.cholesky[k], (X - model.means[k]).T, lower=True)
        scores[:, k] = -0.5 * model.logdets[k] - 0.5 * np.sum(z * z, axis=0) + model.log_prior
    return scores


def predict_many(model: RldaModel, X: np.ndarray) -> list[str]:
    # argmax keeps the first maximum, i.e. the earlier class in yes < no < rest
    return [model.classes[k] for k in np.argmax(decision_scores(model, X), axis=1)]


def predict(model: RldaModel, x: np.ndarray) -> tuple[str, dict[str, float]]:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ClassifierError("predict takes a single feature vector")
    scores = decision_scores(model, x[None, :])[0]
    label = model.classes[int(np.argmax(scores))]
    return label, {lab: float(s) for lab, s in zip(model.classes, scores)}


def model_to_dict(model: RldaModel) -> dict:
    return {
        "format": "rlda-v1",
        "gamma": model.gamma,
        "loading": model.loading,
        "classes": list(model.classes),
        "means": model.means.tolist(),
        "covariances": [c.tolist() for c in model.covariances],
    }


def model_from_dict(payload: dict) -> RldaModel:
    if payload.get("format") != "rlda-v1":
        raise ClassifierError("unrecognised model format")
    classes = tuple(payload["classes"])
    if any(c not in LABELS for c in classes):
        raise ClassifierError(f"unknown classes in model: {classes}")
    covs = np.array(payload["covariances"], dtype=float)
    return _assemble(payload["gamma"], payload["loading"], classes, payload["means"], covs)


def save_model(path: str | Path, model: RldaModel) -> Path:
    return _io.write_json(path, model_to_dict(model))


def load_model(path: str | Path) -> RldaModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
