"""Gaussian process regression and Laplace-approximated binary classification.

Uses the standard Cholesky formulations (Rasmussen & Williams, 2006, ch. 2-3).
Classification finds the latent posterior mode by Newton iteration on the
logistic likelihood, with a step-halving line search so the unnormalized log
posterior never decreases. The "mean" handed to rejection rules and attack
gradients is always the latent (pre-link) mean; the logistic link only enters
through `class_probability`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.special import expit

from .data import Dataset
from .kernels import KernelSpec, kernel_gradient_x_batch, kernel_matrix, self_similarity

__all__ = [
    "REGRESSION",
    "CLASSIFICATION",
    "REJECT",
    "FactorizationError",
    "NumericalError",
    "RejectionPolicy",
    "Prediction",
    "TrainedGP",
    "DecisionGrid",
    "fit_regression",
    "fit_classification_laplace",
    "predict",
    "predict_batch",
    "latent_mean",
    "latent_mean_batch",
    "predict_with_rejection",
    "predict_with_zero_rejection",
    "latent_gradient",
    "decision_grid",
    "accuracy",
    "select_variance",
    "VARIANCE_GRID",
    "save_gp",
    "load_gp",
]

REGRESSION = "regression"
CLASSIFICATION = "classification"

# Label returned by rejection-aware predictors when no class is assigned.
REJECT = 0


class FactorizationError(RuntimeError):
    """Cholesky factorization failed; `pivot` is the failing leading minor."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix not positive definite: leading minor {pivot} failed")
        self.pivot = pivot


class NumericalError(RuntimeError):
    """A non-finite value appeared; `iteration` locates the failure."""

    def __init__(self, iteration: int, what: str = "non-finite value"):
        super().__init__(f"{what} at iteration {iteration}")
        self.iteration = iteration


def _cholesky_lower(matrix: np.ndarray) -> np.ndarray:
    chol, info = dpotrf(matrix, lower=1)
    if info != 0:
        raise FactorizationError(int(info))
    return chol


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RejectionPolicy:
    """Reject a sample iff its latent mean m satisfies -1+tau0 <= m <= 1-tau1."""

    tau0: float
    tau1: float

    def __post_init__(self):
        if not (0.0 < self.tau0 < 1.0 and 0.0 < self.tau1 < 1.0):
            raise ValueError("tau0 and tau1 must lie in (0, 1)")

    def rejects(self, mean: float) -> bool:
        return -1.0 + self.tau0 <= mean <= 1.0 - self.tau1


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float
    latent_mean: float
    class_probability: float | None = None


@dataclass(frozen=True, eq=False)
class TrainedGP:
    """Immutable fitted model.

    `alpha` are the representer weights: the latent mean at x is
    K(x, train)^T alpha. `chol` factorizes K + jitter*I for regression,
    or B = I + sqrt(W) K sqrt(W) for classification (with `sqrt_w` the
    square root of the logistic Hessian at the latent mode).
    """

    spec: KernelSpec
    train_features: np.ndarray
    train_labels: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    mode: str
    latent_mode: np.ndarray | None = None
    sqrt_w: np.ndarray | None = None

    def __post_init__(self):
        for name in ("train_features", "train_labels", "chol", "alpha", "latent_mode", "sqrt_w"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _readonly(np.ascontiguousarray(value, dtype=float)))
        if self.mode not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.latent_mode is not None) != (self.mode == CLASSIFICATION):
            raise ValueError("latent_mode is present iff mode is classification")

    @property
    def n(self) -> int:
        return self.train_features.shape[0]

    @property
    def d(self) -> int:
        return self.train_features.shape[1]


def _default_jitter(spec: KernelSpec, jitter: float | None) -> float:
    if jitter is None:
        jitter = 1e-6 * spec.variance
    if not jitter > 0:
        raise ValueError("jitter must be positive")
    return float(jitter)


def fit_regression(spec: KernelSpec, data: Dataset, jitter: float | None = None) -> TrainedGP:
    """Exact GP regression on labels in {-1, +1}: alpha solves (K + jitter*I) alpha = y."""
    jitter = _default_jitter(spec, jitter)
    K = kernel_matrix(spec, data.features, data.features)
    K[np.diag_indices_from(K)] += jitter
    chol = _cholesky_lower(K)
    alpha = cho_solve((chol, True), data.labels)
    return TrainedGP(
        spec=spec,
        train_features=data.features.copy(),
        train_labels=data.labels.copy(),
        chol=chol,
        alpha=alpha,
        jitter=jitter,
        mode=REGRESSION,
    )


def _log_likelihood(f: np.ndarray, labels: np.ndarray) -> float:
    # sum_i log sigmoid(y_i f_i), computed stably
    return float(-np.logaddexp(0.0, -labels * f).sum())


def fit_classification_laplace(
    spec: KernelSpec,
    data: Dataset,
    max_iter: int = 100,
    tol: float = 1e-8,
    jitter: float | None = None,
    objective_history: list | None = None,
) -> TrainedGP:
    """Binary GP classification via the Laplace approximation.

    Newton iteration on the logistic-likelihood latent posterior mode,
    stopping once the mode changes by less than `tol` in max-norm or after
    `max_iter` iterations. Each Newton step is halved (up to 20 times)
    until the unnormalized log posterior does not decrease.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 0:
        raise ValueError("max_iter must be nonnegative")
    labels = data.labels
    if np.all(labels == labels[0]):
        raise ValueError("classification needs both classes in the training data")
    jitter = _default_jitter(spec, jitter)

    K = kernel_matrix(spec, data.features, data.features)
    K[np.diag_indices_from(K)] += jitter
    n = data.n
    y01 = (labels + 1.0) / 2.0

    def objective(f, a):
        # log p(y|f) - 0.5 f^T K^-1 f, with a = K^-1 f carried alongside
        return _log_likelihood(f, labels) - 0.5 * float(a @ f)

    f = np.zeros(n)
    a = np.zeros(n)
    if objective_history is not None:
        objective_history.append(objective(f, a))
    for iteration in range(max_iter):
        pi = expit(f)
        w = pi * (1.0 - pi)
        sw = np.sqrt(w)
        B = np.eye(n) + sw[:, None] * K * sw[None, :]
        chol_b = _cholesky_lower(B)
        b = w * f + (y01 - pi)
        a_prop = b - sw * cho_solve((chol_b, True), sw * (K @ b))
        f_prop = K @ a_prop
        if not (np.all(np.isfinite(f_prop)) and np.all(np.isfinite(a_prop))):
            raise NumericalError(iteration, "non-finite Newton proposal")

        current = objective(f, a)
        step = 1.0
        accepted = None
        for _ in range(20):
            f_try = f + step * (f_prop - f)
            a_try = a + step * (a_prop - a)
            value = objective(f_try, a_try)
            if np.isfinite(value) and value >= current - 1e-12 * max(1.0, abs(current)):
                accepted = (f_try, a_try)
                break
            step /= 2.0
        if accepted is None:
            break
        change = float(np.max(np.abs(accepted[0] - f)))
        f, a = accepted
        if objective_history is not None:
            objective_history.append(objective(f, a))
        if change < tol:
            break

    pi = expit(f)
    sw = np.sqrt(pi * (1.0 - pi))
    B = np.eye(n) + sw[:, None] * K * sw[None, :]
    chol_b = _cholesky_lower(B)
    return TrainedGP(
        spec=spec,
        train_features=data.features.copy(),
        train_labels=data.labels.copy(),
        chol=chol_b,
        alpha=a,
        jitter=jitter,
        mode=CLASSIFICATION,
        latent_mode=f,
        sqrt_w=sw,
    )


def _query_matrix(gp: TrainedGP, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != gp.d:
        raise ValueError(f"query dimension {X.shape[1]} does not match model dimension {gp.d}")
    return X


def latent_mean_batch(gp: TrainedGP, X) -> np.ndarray:
    X = _query_matrix(gp, X)
    return kernel_matrix(gp.spec, X, gp.train_features) @ gp.alpha


def latent_mean(gp: TrainedGP, x) -> float:
    return float(latent_mean_batch(gp, np.asarray(x, dtype=float)[None, :])[0])


def predict_batch(gp: TrainedGP, X) -> tuple[np.ndarray, np.ndarray]:
    """Latent means and clamped predictive variances for each row of X."""
    X = _query_matrix(gp, X)
    k_star = kernel_matrix(gp.spec, X, gp.train_features)
    means = k_star @ gp.alpha
    prior = self_similarity(gp.spec, X)
    if gp.mode == REGRESSION:
        solved = cho_solve((gp.chol, True), k_star.T)
        reduction = np.einsum("ij,ji->i", k_star, solved)
    else:
        u = solve_triangular(gp.chol, gp.sqrt_w[:, None] * k_star.T, lower=True)
        reduction = (u**2).sum(axis=0)
    variances = np.maximum(prior - reduction, 0.0)
    return means, variances


def predict(gp: TrainedGP, x) -> Prediction:
    """Predictive mean and variance at a single point.

    The reported mean is the latent mean K_x^T alpha; for classification the
    logistic link additionally yields `class_probability`.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D query point")
    means, variances = predict_batch(gp, x[None, :])
    mean = float(means[0])
    prob = float(expit(mean)) if gp.mode == CLASSIFICATION else None
    return Prediction(mean=mean, variance=float(variances[0]), latent_mean=mean, class_probability=prob)


def predict_with_rejection(gp: TrainedGP, x, policy: RejectionPolicy) -> int:
    """+1/-1 by the sign of the latent mean, or REJECT (0) inside the band
    [-1+tau0, 1-tau1]."""
    m = latent_mean(gp, x)
    if policy.rejects(m):
        return REJECT
    return 1 if m > 0 else -1


def predict_with_zero_rejection(gp: TrainedGP, x, eps: float = 1e-3) -> int:
    """Reject when the latent mean is (numerically) zero, i.e. |m| < eps.

    A latent mean near zero signals a query far from all training data.
    An exactly zero mean is rejected for any eps, since it has no sign.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    m = latent_mean(gp, x)
    if abs(m) < eps or m == 0.0:
        return REJECT
    return 1 if m > 0 else -1


def latent_gradient(gp: TrainedGP, x) -> np.ndarray:
    """Gradient of the latent mean with respect to the query point."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != gp.d:
        raise ValueError(f"query dimension does not match model dimension {gp.d}")
    grads = kernel_gradient_x_batch(gp.spec, x, gp.train_features)
    return gp.alpha @ grads


@dataclass(frozen=True, eq=False)
class DecisionGrid:
    """Row-major prediction grid over a 2-D box, ready for CSV export."""

    points: np.ndarray
    labels: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    resolution: int

    def reject_count(self) -> int:
        return int((self.labels == REJECT).sum())

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("x0,x1,label,mean,variance\n")
            for p, lab, m, v in zip(self.points, self.labels, self.means, self.variances):
                handle.write(f"{p[0]!r},{p[1]!r},{int(lab)},{m!r},{v!r}\n")


def decision_grid(
    gp: TrainedGP,
    bounds,
    resolution: int,
    policy: RejectionPolicy | None = None,
) -> DecisionGrid:
    """Evaluate the model over a resolution x resolution grid of a 2-D box.

    `bounds` is ((x0_min, x0_max), (x1_min, x1_max)). Points are row-major
    with x1 varying fastest. Labels are +1/-1, or REJECT (0) under `policy`.
    """
    if gp.d != 2:
        raise ValueError("decision grids require 2-D models")
    if resolution < 1:
        raise ValueError("resolution must be at least 1")
    (lo0, hi0), (lo1, hi1) = bounds
    xs = np.linspace(lo0, hi0, resolution)
    ys = np.linspace(lo1, hi1, resolution)
    g0, g1 = np.meshgrid(xs, ys, indexing="ij")
    points = np.column_stack([g0.ravel(), g1.ravel()])
    means, variances = predict_batch(gp, points)
    if policy is None:
        labels = np.sign(means).astype(int)
    else:
        rejected = (-1.0 + policy.tau0 <= means) & (means <= 1.0 - policy.tau1)
        labels = np.where(rejected, REJECT, np.where(means > 0, 1, -1)).astype(int)
    return DecisionGrid(points=points, labels=labels, means=means, variances=variances, resolution=resolution)


def accuracy(
    gp: TrainedGP,
    data: Dataset,
    policy: RejectionPolicy | float | None = None,
) -> dict:
    """Accuracy over a dataset, optionally with a rejection rule.

    `policy` may be a RejectionPolicy, a float eps for zero-mean rejection,
    or None for forced classification. Rejected points count as errors
    (the Acc_r convention); `reject_rate` reports their fraction.
    """
    if data.n < 1:
        raise ValueError("dataset must be nonempty")
    means = latent_mean_batch(gp, data.features)
    if policy is None:
        rejected = np.zeros(data.n, dtype=bool)
    elif isinstance(policy, RejectionPolicy):
        rejected = (-1.0 + policy.tau0 <= means) & (means <= 1.0 - policy.tau1)
    else:
        eps = float(policy)
        if eps < 0:
            raise ValueError("zero-rejection eps must be nonnegative")
        rejected = (np.abs(means) < eps) | (means == 0.0)
    correct = ~rejected & (np.sign(means) == data.labels)
    return {"accuracy": float(correct.mean()), "reject_rate": float(rejected.mean())}


VARIANCE_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)


def select_variance(spec: KernelSpec, train: Dataset, validation: Dataset, grid=VARIANCE_GRID) -> float:
    """Pick the kernel variance from a small grid by validation accuracy.

    The lengthscale stays fixed (it is set before training, never
    optimized); this is the only hyperparameter search offered. Ties break
    toward the earlier grid entry.
    """
    best_acc = -1.0
    best_variance = None
    for variance in grid:
        gp = fit_classification_laplace(replace(spec, variance=float(variance)), train)
        acc = accuracy(gp, validation)["accuracy"]
        if acc > best_acc:
            best_acc, best_variance = acc, float(variance)
    return best_variance


def _to_json_dict(gp: TrainedGP) -> dict:
    return {
        "spec": gp.spec.to_json_dict(),
        "mode": gp.mode,
        "jitter": gp.jitter,
        "train_features": gp.train_features.tolist(),
        "train_labels": gp.train_labels.tolist(),
        "alpha": gp.alpha.tolist(),
        "latent_mode": None if gp.latent_mode is None else gp.latent_mode.tolist(),
    }


def save_gp(gp: TrainedGP, path):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(_to_json_dict(gp), handle, sort_keys=True, indent=1)
        handle.write("\n")


def load_gp(path) -> TrainedGP:
    """Reload a model saved by save_gp; factorizations are recomputed exactly."""
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    spec = KernelSpec.from_json_dict(payload["spec"])
    features = np.array(payload["train_features"], dtype=float)
    labels = np.array(payload["train_labels"], dtype=float)
    alpha = np.array(payload["alpha"], dtype=float)
    jitter = float(payload["jitter"])
    K = kernel_matrix(spec, features, features)
    K[np.diag_indices_from(K)] += jitter
    if payload["mode"] == REGRESSION:
        return TrainedGP(
            spec=spec,
            train_features=features,
            train_labels=labels,
            chol=_cholesky_lower(K),
            alpha=alpha,
            jitter=jitter,
            mode=REGRESSION,
        )
    f = np.array(payload["latent_mode"], dtype=float)
    pi = expit(f)
    sw = np.sqrt(pi * (1.0 - pi))
    B = np.eye(features.shape[0]) + sw[:, None] * K * sw[None, :]
    return TrainedGP(
        spec=spec,
        train_features=features,
        train_labels=labels,
        chol=_cholesky_lower(B),
        alpha=alpha,
        jitter=jitter,
        mode=CLASSIFICATION,
        latent_mode=f,
        sqrt_w=sw,
    )
