"""Out-of-distribution monitoring over policy embeddings.

Location/scatter are estimated with a from-scratch FastMCD: many random
(d+1)-point starts, concentration steps (keep the h points with the smallest
Mahalanobis distances, refit, repeat while the covariance determinant
decreases), then full convergence of the best candidates. Distances to the
fitted Gaussian are computed through a Cholesky solve, never an explicit
inverse. A fitted monitor flags ticks whose distance exceeds a percentile of
the training set's own distances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import linalg as sla
from scipy.stats import chi2

from .errors import DimensionalityError, EmptyDatasetError, NumericError

__all__ = [
    "EmbeddingSet",
    "RobustGaussian",
    "DistanceTrace",
    "Monitor",
    "fit_mcd",
    "mahalanobis",
    "fit_monitor",
    "cross_distance_matrix",
    "CrossEntry",
    "flag_ood",
    "write_distance_csv",
]

_CONVERGENCE_TOL = 1e-12
_MAX_C_STEPS = 100


@dataclass(frozen=True)
class EmbeddingSet:
    """An (n, d) matrix of embeddings with a provenance label."""

    X: np.ndarray
    label: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise EmptyDatasetError(f"embedding set needs >= 2 rows, got {X.shape}")
        if not np.isfinite(X).all():
            raise NumericError(f"embedding set {self.label!r} has non-finite entries")
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class RobustGaussian:
    """Robust (mu, sigma) with the support the estimator settled on."""

    mu: np.ndarray
    sigma: np.ndarray
    ridge_lambda: float
    support: np.ndarray  # boolean mask over the fitted rows
    support_fraction: float

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        sigma = 0.5 * (sigma + sigma.T)  # enforce exact symmetry
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0 or not np.isfinite(logdet):
            raise NumericError(
                "covariance is singular; add ridge regularization or project")
        try:
            factor = sla.cho_factor(sigma, lower=True)
        except sla.LinAlgError as exc:
            raise NumericError(f"covariance not positive definite: {exc}") from exc
        object.__setattr__(self, "_chol", factor)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def squared_distances(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise DimensionalityError(
                f"query dimension {X.shape[1]} != distribution dimension {self.dim}")
        centered = X - self.mu
        solved = sla.cho_solve(self._chol, centered.T)
        return np.einsum("ij,ji->i", centered, solved)


@dataclass(frozen=True)
class DistanceTrace:
    """Per-tick Mahalanobis distances of one trial against one reference."""

    trial_id: str
    ticks: np.ndarray
    values: np.ndarray
    reference: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if (values < 0).any() or not np.isfinite(values).all():
            raise NumericError(f"trace {self.trial_id}: distances must be finite and >= 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ticks", np.asarray(self.ticks, dtype=np.int64))


def mahalanobis(x: np.ndarray, g: RobustGaussian):
    """Distance of one point (or a stack of points) to the distribution."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    d = np.sqrt(np.maximum(g.squared_distances(x), 0.0))
    return float(d[0]) if single else d


# -- FastMCD ------------------------------------------------------------------

def _batched_cov(points: np.ndarray) -> np.ndarray:
    # points: (m, s, d); sample covariance (ddof=1) per candidate
    s = points.shape[1]
    centered = points - points.mean(axis=1, keepdims=True)
    return np.einsum("msd,mse->mde", centered, centered) / (s - 1)


def _batched_logdet(sigma: np.ndarray) -> np.ndarray:
    sign, logdet = np.linalg.slogdet(sigma)
    out = np.where(sign > 0, logdet, -np.inf)
    return out


def _batched_sq_mahal(X: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    # X: (n, d); mu: (m, d); sigma: (m, d, d) -> (m, n)
    centered = X[None, :, :] - mu[:, None, :]
    try:
        solved = np.linalg.solve(sigma, centered.transpose(0, 2, 1))
    except np.linalg.LinAlgError:
        # rare: jitter only the offending candidates
        m, d, _ = sigma.shape
        solved = np.empty((m, d, X.shape[0]))
        for i in range(m):
            s = sigma[i]
            jitter = 1e-12 * (np.trace(s) / d + 1.0)
            while True:
                try:
                    solved[i] = np.linalg.solve(s, centered[i].T)
                    break
                except np.linalg.LinAlgError:
                    s = s + jitter * np.eye(d)
                    jitter *= 10.0
    return np.einsum("mdn,mnd->mn", solved, centered)


def _draw_initial_subsets(n: int, d: int, m: int, seed) -> list[np.ndarray]:
    # one child stream per candidate so results never depend on scheduling
    children = np.random.SeedSequence(seed).spawn(m)
    return [np.random.default_rng(c).choice(n, size=d + 1, replace=False)
            for c in children]


def _initial_estimates(X: np.ndarray, subsets, h: int, seed) -> tuple[np.ndarray, np.ndarray]:
    n, d = X.shape
    points = X[np.stack(subsets)]
    mu = points.mean(axis=1)
    sigma = _batched_cov(points)
    # expand any singular start with extra random points until it has full rank
    logdet = _batched_logdet(sigma)
    bad = np.where(~np.isfinite(logdet))[0]
    if bad.size:
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(len(subsets) + 1)[-1])
        for i in bad:
            size = d + 2
            while size <= h:
                idx = rng.choice(n, size=size, replace=False)
                cand = X[idx]
                cov = np.atleast_2d(np.cov(cand, rowvar=False, ddof=1))
                if np.isfinite(_batched_logdet(cov[None])[0]):
                    mu[i] = cand.mean(axis=0)
                    sigma[i] = cov
                    break
                size += 1
    return mu, sigma


def _c_step_until_stable(X, mu, sigma, h, max_iter):
    """Lockstep concentration steps for a batch of candidates.

    Returns (mu, sigma, logdet, support_indices) at each candidate's fixed
    point. The determinant never increases along C-steps, so a candidate is
    done as soon as the decrease stalls.
    """
    m = mu.shape[0]
    n, d = X.shape
    logdet = _batched_logdet(sigma)
    support = np.zeros((m, h), dtype=np.int64)
    active = np.isfinite(logdet)
    support[~active] = np.arange(h)  # placeholder for degenerate starts
    first = True
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.where(active)[0]
        d2 = _batched_sq_mahal(X, mu[idx], sigma[idx])
        sel = np.argpartition(d2, h - 1, axis=1)[:, :h]
        points = X[sel]
        new_mu = points.mean(axis=1)
        new_sigma = _batched_cov(points)
        new_logdet = _batched_logdet(new_sigma)
        mu[idx] = new_mu
        sigma[idx] = new_sigma
        support[idx] = np.sort(sel, axis=1)
        stalled = new_logdet >= logdet[idx] - _CONVERGENCE_TOL
        degenerate = ~np.isfinite(new_logdet)
        logdet[idx] = new_logdet
        done = stalled | degenerate
        if not first:
            active[idx[done]] = False
        first = False
    return mu, sigma, logdet, support


def fit_mcd(
    X,
    support_fraction: Optional[float] = None,
    n_initial_subsets: int = 500,
    seed: int = 0,
    ridge_lambda: Optional[float] = None,
) -> RobustGaussian:
    """Minimum Covariance Determinant estimate of location and scatter.

    With `support_fraction=1.0` this degenerates to the exact classical
    sample mean and sample covariance. Otherwise the h-subset of minimum
    determinant is searched with seeded FastMCD, the covariance is rescaled
    by the chi-squared median consistency factor and ridge-regularized.
    """
    if isinstance(X, EmbeddingSet):
        X = X.X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionalityError(f"expected (n, d) matrix, got shape {X.shape}")
    n, d = X.shape
    if not np.isfinite(X).all():
        raise NumericError("embeddings contain non-finite values")
    if n <= d:
        raise DimensionalityError(
            f"need more samples than dimensions (n={n}, d={d}); "
            "project the embeddings to fewer components first")

    if support_fraction is None:
        support_fraction = (n + d + 1) / (2.0 * n)
    if not 0.0 < support_fraction <= 1.0:
        raise NumericError(f"support_fraction must be in (0, 1], got {support_fraction}")
    h = int(np.ceil(support_fraction * n))
    h = min(h, n)
    if h < d + 1:
        raise DimensionalityError(
            f"support h={h} too small for dimension d={d} (need h >= d + 1)")

    if h == n:
        mu = X.mean(axis=0)
        sigma = np.cov(X, rowvar=False, ddof=1).reshape(d, d)
        lam = float(ridge_lambda) if ridge_lambda is not None else 0.0
        if lam > 0.0:
            sigma = sigma + lam * np.eye(d)
        return RobustGaussian(
            mu=mu, sigma=sigma, ridge_lambda=lam,
            support=np.ones(n, dtype=bool), support_fraction=1.0)

    subsets = _draw_initial_subsets(n, d, n_initial_subsets, seed)
    mu0, sigma0 = _initial_estimates(X, subsets, h, seed)

    if n <= 200:
        # tiny instance: converge every start, then take the best
        mu, sigma, logdet, support = _c_step_until_stable(
            X, mu0, sigma0, h, _MAX_C_STEPS)
    else:
        # FastMCD two-phase: a couple of C-steps everywhere, then converge
        # only the most promising candidates
        mu, sigma, logdet, support = _c_step_until_stable(X, mu0, sigma0, h, 2)
        keep = np.argsort(logdet)[: min(10, len(logdet))]
        mu, sigma, logdet, support = _c_step_until_stable(
            X, mu[keep].copy(), sigma[keep].copy(), h, _MAX_C_STEPS)

    best = int(np.argmin(logdet))
    support_mask = np.zeros(n, dtype=bool)
    support_mask[support[best]] = True
    mu_best = mu[best]
    sigma_raw = sigma[best]

    # chi-squared median rescaling makes robust distances comparable to
    # classical ones under Gaussian data
    d2_all = _batched_sq_mahal(X, mu_best[None], sigma_raw[None])[0]
    correction = np.median(d2_all) / chi2.ppf(0.5, df=d)
    sigma_cons = sigma_raw * correction

    lam = (float(ridge_lambda) if ridge_lambda is not None
           else 1e-6 * np.trace(sigma_cons) / d)
    sigma_final = sigma_cons + lam * np.eye(d)

    return RobustGaussian(
        mu=mu_best,
        sigma=sigma_final,
        ridge_lambda=lam,
        support=support_mask,
        support_fraction=h / n,
    )


def mcd_objective_logdet(g: RobustGaussian, X) -> float:
    """log-determinant of the sample covariance of the fitted support."""
    if isinstance(X, EmbeddingSet):
        X = X.X
    pts = np.asarray(X, dtype=np.float64)[g.support]
    cov = np.cov(pts, rowvar=False, ddof=1)
    sign, logdet = np.linalg.slogdet(np.atleast_2d(cov))
    return float(logdet) if sign > 0 else -np.inf


# -- monitors and analysis ------------------------------------------------------

@dataclass(frozen=True)
class Monitor:
    """Fitted reference distribution plus its flagging calibration.

    `calibration` holds the training embeddings' own distances; a query is
    flagged when its distance exceeds the configured percentile of that
    multiset. When the training set was projected (n <= d), the same
    projection is applied to queries.
    """

    gaussian: RobustGaussian
    calibration: np.ndarray
    percentile: float = 95.0
    projection: Optional[np.ndarray] = None   # (d_orig, k)
    projection_center: Optional[np.ndarray] = None

    @property
    def threshold(self) -> float:
        return float(np.percentile(self.calibration, self.percentile))

    def _project(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.projection is None:
            return X
        return (X - self.projection_center) @ self.projection

    def distance(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        d = mahalanobis(self._project(x), self.gaussian)
        return float(d[0]) if single else d

    def flag(self, x):
        d = self.distance(x)
        thr = self.threshold
        return d > thr

    def save(self, path) -> None:
        payload = {
            "mu": self.gaussian.mu,
            "sigma": self.gaussian.sigma,
            "ridge_lambda": np.array(self.gaussian.ridge_lambda),
            "support": self.gaussian.support,
            "support_fraction": np.array(self.gaussian.support_fraction),
            "calibration": self.calibration,
            "percentile": np.array(self.percentile),
        }
        if self.projection is not None:
            payload["projection"] = self.projection
            payload["projection_center"] = self.projection_center
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "Monitor":
        with np.load(path) as data:
            g = RobustGaussian(
                mu=data["mu"],
                sigma=data["sigma"],
                ridge_lambda=float(data["ridge_lambda"]),
                support=data["support"],
                support_fraction=float(data["support_fraction"]),
            )
            return cls(
                gaussian=g,
                calibration=data["calibration"],
                percentile=float(data["percentile"]),
                projection=data["projection"] if "projection" in data else None,
                projection_center=(data["projection_center"]
                                   if "projection_center" in data else None),
            )


def fit_monitor(
    X,
    support_fraction: Optional[float] = None,
    n_initial_subsets: int = 500,
    seed: int = 0,
    ridge_lambda: Optional[float] = None,
    percentile: float = 95.0,
    max_frames: Optional[int] = None,
    n_components: Optional[int] = None,
) -> Monitor:
    """Fits a Monitor, optionally over a principal-component projection.

    Projection is mandatory when n <= d (the estimator needs more samples
    than dimensions). Passing `n_components` forces it in any case: on
    trajectory-shaped embedding clouds a moderate projection keeps the
    self-distance calibration from being dominated by a handful of
    rare-phase frames, which sharpens the percentile flag.
    """
    if isinstance(X, EmbeddingSet):
        X = X.X
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if max_frames is not None and n > max_frames:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(n, size=max_frames, replace=False))]
        n = max_frames

    projection = None
    center = None
    work = X
    k = None
    if n_components is not None:
        k = min(int(n_components), d, n - 1)
    elif n <= d:
        k = min(d, max(1, n // 5))
    if k is not None and k < d:
        center = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - center, full_matrices=False)
        projection = vt[:k].T
        work = (X - center) @ projection

    g = fit_mcd(work, support_fraction=support_fraction,
                n_initial_subsets=n_initial_subsets, seed=seed,
                ridge_lambda=ridge_lambda)
    calibration = mahalanobis(work, g)
    return Monitor(
        gaussian=g,
        calibration=calibration,
        percentile=percentile,
        projection=projection,
        projection_center=center,
    )


@dataclass(frozen=True)
class CrossEntry:
    label: str
    monitor: Monitor
    distances: np.ndarray  # one distance per experiment frame


def cross_distance_matrix(
    models: Mapping[str, object],
    datasets: Mapping[str, object],
    experiments,
    encode,
    **monitor_kwargs,
) -> dict[str, CrossEntry]:
    """Per-model robust fit of its own dataset, distances of shared frames.

    For each label present in both mappings: Z = encode(model, dataset) is
    fitted; H = encode(model, experiments) is scored against the fit. The
    result maps each label to its fitted monitor and distance multiset.
    """
    if set(models) != set(datasets):
        raise EmptyDatasetError(
            f"model labels {sorted(models)} != dataset labels {sorted(datasets)}")
    out: dict[str, CrossEntry] = {}
    for label in datasets:
        Z = np.asarray(encode(models[label], datasets[label]), dtype=np.float64)
        monitor = fit_monitor(Z, **monitor_kwargs)
        H = np.asarray(encode(models[label], experiments), dtype=np.float64)
        out[label] = CrossEntry(
            label=label, monitor=monitor, distances=monitor.distance(H))
    return out


def flag_ood(trace, calibration, percentile: float = 95.0) -> np.ndarray:
    """True where a trace value exceeds the calibration percentile."""
    values = trace.values if isinstance(trace, DistanceTrace) else np.asarray(trace)
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.size == 0:
        raise EmptyDatasetError("empty calibration multiset")
    return values > np.percentile(calibration, percentile)


def write_distance_csv(path, rows: Iterable[tuple[str, int, float]]) -> None:
    """CSV with columns label, tick-or-index, d_m."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "tick_or_index", "d_m"])
        for label, idx, value in rows:
            writer.writerow([label, idx, repr(float(value))])
