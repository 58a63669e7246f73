"""Model extraction and stealing attacks against a black-box GP oracle.

The attacker only sees (mean, variance) pairs through a ModelOracle, which
counts every query. Two analytic attacks solve the prediction equations
directly on noiseless victims: lengthscale recovery needs exactly two
queries when the training data is known, and training-data recovery is a
nonlinear least-squares problem over the candidate anchor coordinates.
The empirical attacks mirror the query-only setting: a 50-model lengthscale
sweep and output-distance kernel identification.

Note on the "known data" equation system: although the recovery target is a
single scalar, the observed mean is nonlinear in the lengthscale (the whole
training covariance depends on it), so the lengthscale attack runs a
bracketing bisection on log l rather than a linear solve. The two-query
budget is preserved: candidate refits are attacker-side and free.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import Dataset
from .gp import TrainedGP, fit_classification_laplace, fit_regression, latent_mean, latent_mean_batch, predict
from .kernels import RBF, KernelSpec

__all__ = [
    "ModelOracle",
    "ComplexityEstimate",
    "ExtractionReport",
    "BracketingError",
    "REGIMES",
    "DATA_KNOWN_SINGLE",
    "DATA_KNOWN_PER_DIM",
    "LENGTHSCALE_KNOWN_SINGLE",
    "LENGTHSCALE_KNOWN_PER_DIM",
    "NOTHING_KNOWN_SINGLE",
    "NOTHING_KNOWN_PER_DIM",
    "SWEEP_REGIMES",
    "query_complexity",
    "extract_lengthscale_analytic",
    "recover_training_data_analytic",
    "match_points",
    "estimate_lengthscale_sweep",
    "identify_kernel",
    "write_sweep_csv",
    "write_kernel_distances_csv",
]


class ModelOracle:
    """Black-box query interface: point -> (mean, variance), with a counter.

    The counter increments atomically by exactly one per query, so
    concurrent attackers can share one oracle and the accounting stays
    exact.
    """

    def __init__(self, query_fn: Callable[[np.ndarray], tuple[float, float]]):
        self._query_fn = query_fn
        self._count = 0
        self._lock = threading.Lock()

    @classmethod
    def from_gp(cls, gp: TrainedGP) -> "ModelOracle":
        def query_fn(x: np.ndarray) -> tuple[float, float]:
            p = predict(gp, x)
            return p.mean, p.variance

        return cls(query_fn)

    def query(self, x) -> tuple[float, float]:
        x = np.asarray(x, dtype=float)
        with self._lock:
            self._count += 1
        mean, variance = self._query_fn(x)
        return float(mean), float(variance)

    @property
    def query_count(self) -> int:
        return self._count


DATA_KNOWN_SINGLE = "data_known_single_l"
DATA_KNOWN_PER_DIM = "data_known_per_dim"
LENGTHSCALE_KNOWN_SINGLE = "lengthscale_known_single"
LENGTHSCALE_KNOWN_PER_DIM = "lengthscale_known_per_dim"
NOTHING_KNOWN_SINGLE = "nothing_known_single"
NOTHING_KNOWN_PER_DIM = "nothing_known_per_dim"
REGIMES = (
    DATA_KNOWN_SINGLE,
    DATA_KNOWN_PER_DIM,
    LENGTHSCALE_KNOWN_SINGLE,
    LENGTHSCALE_KNOWN_PER_DIM,
    NOTHING_KNOWN_SINGLE,
    NOTHING_KNOWN_PER_DIM,
)


@dataclass(frozen=True)
class ComplexityEstimate:
    """Minimal query count for an attack regime; a lower bound when the
    attacker knows nothing and the equation system turns nonlinear."""

    queries: int
    is_lower_bound_only: bool
    regime: str


@dataclass(frozen=True, eq=False)
class ExtractionReport:
    estimate: object
    residual: float
    queries_used: int
    converged: bool
    cost_history: tuple[float, ...] | None = None


class BracketingError(RuntimeError):
    """The lengthscale residual never changes sign on the search interval."""

    def __init__(self, residual_lo: float, residual_hi: float):
        super().__init__(
            f"no sign change in the search interval: residuals {residual_lo:.6g} and {residual_hi:.6g}"
        )
        self.residual_lo = residual_lo
        self.residual_hi = residual_hi


def query_complexity(regime: str, n: int, d: int) -> ComplexityEstimate:
    """Queries needed to solve the prediction equations, per attacker knowledge.

    Known data: 2 (single lengthscale) or d+1 (per-dimension). Known
    lengthscale(s): n+1 or n*d+1. Nothing known: the system is no longer
    linear and the counts (n*d+1, n*2d+1) are lower bounds only.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    if regime == DATA_KNOWN_SINGLE:
        return ComplexityEstimate(2, False, regime)
    if regime == DATA_KNOWN_PER_DIM:
        return ComplexityEstimate(d + 1, False, regime)
    if regime == LENGTHSCALE_KNOWN_SINGLE:
        return ComplexityEstimate(n + 1, False, regime)
    if regime == LENGTHSCALE_KNOWN_PER_DIM:
        return ComplexityEstimate(n * d + 1, False, regime)
    if regime == NOTHING_KNOWN_SINGLE:
        return ComplexityEstimate(n * d + 1, True, regime)
    return ComplexityEstimate(n * 2 * d + 1, True, regime)


def _data_box(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return data.features.min(axis=0), data.features.max(axis=0)


def _draw_probe(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    for _ in range(1000):
        probe = rng.uniform(lo, hi)
        if not np.any(np.all(avoid == probe, axis=1)):
            return probe
    raise RuntimeError("could not draw a probe off the training set")


def extract_lengthscale_analytic(
    oracle: ModelOracle,
    train_data: Dataset,
    jitter: float,
    search_interval: tuple[float, float],
    variance: float = 1.0,
    seed: int = 0,
    scan_points: int = 64,
    residual_tol: float = 1e-8,
) -> ExtractionReport:
    """Recover a noiseless RBF victim's lengthscale from two oracle queries.

    The residual r(l) compares the observed mean at a probe against a local
    refit on the known training data with candidate l; the true lengthscale
    is a common root of both probes' residuals. Roots are isolated by a
    log-spaced scan plus bisection on log l, run on each residual (one probe
    can have a tangent root that never changes sign; the other then supplies
    the bracket), and every candidate root must agree with both observations
    before it counts as converged.
    """
    lo, hi = float(search_interval[0]), float(search_interval[1])
    if not 0 < lo < hi:
        raise ValueError("search interval must satisfy 0 < lo < hi")
    rng = np.random.default_rng(seed)
    box_lo, box_hi = _data_box(train_data)
    start_count = oracle.query_count

    probe_1 = _draw_probe(rng, box_lo, box_hi, train_data.features)
    observed_1 = oracle.query(probe_1)[0]
    probe_2 = _draw_probe(rng, box_lo, box_hi, train_data.features)
    observed_2 = oracle.query(probe_2)[0]

    def refit_mean(length: float, probe: np.ndarray) -> float:
        spec = KernelSpec(RBF, lengthscale=length, variance=variance)
        return latent_mean(fit_regression(spec, train_data, jitter), probe)

    def residual_1(length: float) -> float:
        return observed_1 - refit_mean(length, probe_1)

    def residual_2(length: float) -> float:
        return observed_2 - refit_mean(length, probe_2)

    grid = np.geomspace(lo, hi, scan_points)
    candidates: list[float] = []
    endpoint_residuals = None
    for residual_fn in (residual_1, residual_2):
        values = np.array([residual_fn(l) for l in grid])
        if endpoint_residuals is None:
            endpoint_residuals = (float(values[0]), float(values[-1]))
        candidates.extend(float(grid[i]) for i in np.flatnonzero(values == 0.0))
        for i in np.flatnonzero(np.sign(values[:-1]) * np.sign(values[1:]) < 0):
            log_lo, log_hi = np.log(grid[i]), np.log(grid[i + 1])
            r_lo = values[i]
            while (log_hi - log_lo) > 1e-13:
                log_mid = 0.5 * (log_lo + log_hi)
                r_mid = residual_fn(float(np.exp(log_mid)))
                if r_mid == 0.0:
                    log_lo = log_hi = log_mid
                    break
                if np.sign(r_mid) == np.sign(r_lo):
                    log_lo, r_lo = log_mid, r_mid
                else:
                    log_hi = log_mid
            candidates.append(float(np.exp(0.5 * (log_lo + log_hi))))
    if not candidates:
        raise BracketingError(*endpoint_residuals)

    best: tuple[float, float, bool] | None = None
    for root in candidates:
        worst = max(abs(residual_1(root)), abs(residual_2(root)))
        ok = worst < residual_tol
        if best is None or worst < best[1]:
            best = (root, worst, ok)
        if ok:
            break
    estimate, residual, converged = best
    return ExtractionReport(
        estimate=estimate,
        residual=residual,
        queries_used=oracle.query_count - start_count,
        converged=converged,
    )


def recover_training_data_analytic(
    oracle: ModelOracle,
    spec: KernelSpec,
    n: int,
    d: int,
    labels,
    query_budget: int,
    jitter: float = 1e-8,
    probe_box: tuple = (-5.0, 5.0),
    seed: int = 0,
    max_iter: int = 150,
    restarts: int = 5,
    success_tol: float = 1e-9,
) -> ExtractionReport:
    """Recover the n x d training coordinates of a noiseless victim with
    known kernel spec (lengthscale included) and known labels.

    Poses sum_q (observed_mean(x_q) - refit_mean(X_hat, x_q))^2 over
    `query_budget` >= n*d+1 probes and minimizes it with a damped
    Gauss-Newton (Levenberg-Marquardt) loop using a finite-difference
    Jacobian, restarting from fresh seeded initializations if needed.
    `probe_box` is the attacker's prior on where the data lives, a (lo, hi)
    pair of scalars or per-dimension vectors. Recovered anchors are
    permutation-ambiguous within a label class; use `match_points` to align
    them with a reference.
    """
    minimum = n * d + 1
    if query_budget < minimum:
        raise ValueError(
            f"query_budget {query_budget} is below the n*d+1 = {minimum} complexity bound"
        )
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (n,) or not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("labels must be n values in {-1, +1}")
    rng = np.random.default_rng(seed)
    lo = np.broadcast_to(np.asarray(probe_box[0], dtype=float), (d,)).copy()
    hi = np.broadcast_to(np.asarray(probe_box[1], dtype=float), (d,)).copy()
    start_count = oracle.query_count

    probes = rng.uniform(lo, hi, size=(query_budget, d))
    targets = np.array([oracle.query(p)[0] for p in probes])

    def residual_vector(flat: np.ndarray) -> np.ndarray:
        candidate = Dataset(flat.reshape(n, d), labels)
        gp = fit_regression(spec, candidate, jitter)
        return latent_mean_batch(gp, probes) - targets

    def cost(r: np.ndarray) -> float:
        return float(r @ r)

    def matched_probe_init() -> np.ndarray:
        # seed each candidate anchor at the unclaimed probe responding most
        # strongly with that anchor's sign
        taken: set[int] = set()
        init = np.empty((n, d))
        for i in np.argsort(-np.abs(labels)):  # stable order over anchors
            scores = labels[i] * targets
            for q in np.argsort(-scores):
                if int(q) not in taken:
                    taken.add(int(q))
                    init[i] = probes[q]
                    break
        return init.ravel()

    n_params = n * d
    best_flat: np.ndarray | None = None
    best_cost = np.inf
    history: list[float] = []
    for restart in range(max(restarts, 1)):
        flat = matched_probe_init() if restart == 0 else rng.uniform(lo, hi, size=(n, d)).ravel()
        r = residual_vector(flat)
        c = cost(r)
        run_history = [c]
        lam = 1e-3
        for _ in range(max_iter):
            jac = np.empty((len(r), n_params))
            for p in range(n_params):
                h = 1e-6 * max(1.0, abs(flat[p]))
                bumped = flat.copy()
                bumped[p] += h
                jac[:, p] = (residual_vector(bumped) - r) / h
            jtj = jac.T @ jac
            jtr = jac.T @ r
            accepted = False
            for _ in range(25):
                damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
                try:
                    delta = np.linalg.solve(damped, -jtr)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                trial = flat + delta
                r_trial = residual_vector(trial)
                c_trial = cost(r_trial)
                if np.isfinite(c_trial) and c_trial < c:
                    flat, r, c = trial, r_trial, c_trial
                    run_history.append(c)
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    break
                lam *= 10.0
            if not accepted or c < success_tol**2 or float(np.max(np.abs(delta))) < 1e-12:
                break
        if c < best_cost:
            best_cost, best_flat, history = c, flat, run_history
        if best_cost < success_tol**2:
            break

    residual_norm = float(np.sqrt(best_cost))
    return ExtractionReport(
        estimate=best_flat.reshape(n, d),
        residual=residual_norm,
        queries_used=oracle.query_count - start_count,
        converged=residual_norm < success_tol,
        cost_history=tuple(history),
    )


def match_points(recovered, reference, labels) -> tuple[np.ndarray, np.ndarray]:
    """Align recovered points to a reference by minimum-cost assignment.

    Matching is restricted to points with equal labels, since candidates are
    only permutation-ambiguous within a label class. Returns the recovered
    points reordered to line up with `reference`, plus per-row Euclidean
    distances.
    """
    recovered = np.asarray(recovered, dtype=float)
    reference = np.asarray(reference, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if recovered.shape != reference.shape or labels.shape != (reference.shape[0],):
        raise ValueError("recovered, reference and labels must agree in shape")
    aligned = np.empty_like(reference)
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        block_rec = recovered[idx]
        block_ref = reference[idx]
        costs = np.linalg.norm(block_ref[:, None, :] - block_rec[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(costs)
        aligned[idx[rows]] = block_rec[cols]
    distances = np.linalg.norm(aligned - reference, axis=1)
    return aligned, distances


SWEEP_REGIMES = ("same", "mixed", "disjoint")
SWEEP_MODELS = 50


def _check_disjoint_rows(a: np.ndarray, b: np.ndarray) -> bool:
    a_rows = {row.tobytes() for row in np.ascontiguousarray(a)}
    return not any(row.tobytes() in a_rows for row in np.ascontiguousarray(b))


def estimate_lengthscale_sweep(
    oracle: ModelOracle,
    attacker_data: Dataset,
    regime: str,
    true_l_hint: float,
    holdout: Dataset,
    variance: float = 1.0,
) -> dict:
    """Train 50 attacker GPCs with lengthscales l_hint/2, l_hint/2 + l_hint/50, ...
    and record the mean absolute output distance to the oracle on a holdout.

    `regime` tags how attacker_data relates to the victim's training data
    (same / mixed / disjoint); the caller assembles the data accordingly.
    The argmin of the distance curve is the lengthscale estimate.
    """
    if regime not in SWEEP_REGIMES:
        raise ValueError(f"unknown sweep regime {regime!r}")
    if not true_l_hint > 0:
        raise ValueError("true_l_hint must be positive")
    if holdout.n < 1:
        raise ValueError("holdout must be nonempty")
    if not _check_disjoint_rows(attacker_data.features, holdout.features):
        raise ValueError("holdout must be disjoint from the attacker's training data")

    start_count = oracle.query_count
    targets = np.array([oracle.query(p)[0] for p in holdout.features])
    lengths = true_l_hint / 2.0 + np.arange(SWEEP_MODELS) * (true_l_hint / SWEEP_MODELS)
    curve = []
    for length in lengths:
        spec = KernelSpec(RBF, lengthscale=float(length), variance=variance)
        gp = fit_classification_laplace(spec, attacker_data)
        distance = float(np.mean(np.abs(latent_mean_batch(gp, holdout.features) - targets)))
        curve.append((float(length), distance))
    argmin = curve[int(np.argmin([c[1] for c in curve]))][0]
    return {
        "regime": regime,
        "curve": curve,
        "argmin": argmin,
        "queries_used": oracle.query_count - start_count,
    }


def identify_kernel(
    oracle: ModelOracle,
    candidates: Sequence[KernelSpec],
    train_data: Dataset,
    holdout: Dataset,
) -> list[tuple[KernelSpec, float]]:
    """Fit one GPC per candidate kernel on the (known) training data and rank
    candidates by mean absolute output distance on the holdout, ascending."""
    if len(candidates) == 0:
        raise ValueError("need at least one candidate kernel")
    if holdout.n < 1:
        raise ValueError("holdout must be nonempty")
    targets = np.array([oracle.query(p)[0] for p in holdout.features])
    ranked = []
    for spec in candidates:
        gp = fit_classification_laplace(spec, train_data)
        distance = float(np.mean(np.abs(latent_mean_batch(gp, holdout.features) - targets)))
        ranked.append((spec, distance))
    ranked.sort(key=lambda pair: pair[1])
    return ranked


def write_sweep_csv(path, sweep: dict):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("l_a,distance\n")
        for length, distance in sweep["curve"]:
            handle.write(f"{length!r},{distance!r}\n")


def write_kernel_distances_csv(path, ranking: Sequence[tuple[KernelSpec, float]]):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("kernel,distance\n")
        for spec, distance in ranking:
            handle.write(f"{spec.family},{distance!r}\n")
