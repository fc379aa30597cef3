"""Longitudinal and circuit-level analyses over trained probes.

Covers four separate questions.  When does a structure emerge over
training (logistic fits in log word space, relative scores, crossing
points, and the gap to human word budgets)?  Do two probes span the same
activation subspace (mean squared cosines of principal angles)?  Which
units carry a probe (row-norm outliers)?  And how much unit variance do
the probed subspaces explain (nested-CV ridge encoding with a variance
partition between feature blocks)?
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

CHILD_WORDS_PER_YEAR = 1e7


class AnalysisError(ValueError):
    pass


class DegenerateCurveError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# emergence curves


def _logistic(x, a, b, mu, sigma):
    # exp overflow saturates to the floor/ceiling, which is the right limit
    with np.errstate(over="ignore"):
        return a + (b - a) / (1.0 + np.exp(-(x - mu) / sigma))


@dataclass
class EmergenceCurve:
    """Score as a function of cumulative training words, with a logistic fit.

    ``points`` holds (cumulative_words, score) pairs; the fit lives in
    x = log10(words).  After fitting, b >= a always holds (the fitted sign
    ambiguity is normalized away), so sigma < 0 encodes a falling curve.
    """

    points: list[tuple[float, float]]
    a: float = float("nan")
    b: float = float("nan")
    mu: float = float("nan")
    sigma: float = float("nan")
    residual: float = float("nan")
    degenerate: bool = False

    def log_words(self) -> np.ndarray:
        return np.log10(np.array([w for w, _ in self.points], dtype=np.float64))

    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.points], dtype=np.float64)

    def score_at(self, x) -> np.ndarray:
        if self.degenerate:
            raise DegenerateCurveError("no usable fit for a degenerate curve")
        return _logistic(np.asarray(x, dtype=np.float64), self.a, self.b, self.mu, self.sigma)

    def to_dict(self) -> dict:
        return {
            "points": [[float(w), float(s)] for w, s in self.points],
            "a": self.a,
            "b": self.b,
            "mu": self.mu,
            "sigma": self.sigma,
            "residual": self.residual,
            "degenerate": self.degenerate,
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def fit_emergence(
    points: Sequence[tuple[float, float]],
    seed: int = 0,
    n_starts: int = 12,
    flat_tolerance: float = 1e-6,
) -> EmergenceCurve:
    """Fit a 4-parameter logistic in log10 words by multi-start simplex.

    Flat data (score range below ``flat_tolerance``) is flagged degenerate
    instead of fitted; so is any fit whose ceiling collapses onto its
    floor.  The returned parameters satisfy b >= a.  Deterministic: the
    same seed reproduces the same starts and therefore the same fit.
    """
    pts = [(float(w), float(s)) for w, s in points]
    if len(pts) < 4:
        raise AnalysisError("need at least 4 points to fit")
    if any(w <= 0 for w, _ in pts):
        raise AnalysisError("word counts must be positive")
    curve = EmergenceCurve(points=pts)
    x = curve.log_words()
    y = curve.scores()
    if float(y.max() - y.min()) < flat_tolerance:
        curve.degenerate = True
        return curve

    def objective(theta):
        a, b, mu, sigma = theta
        if abs(sigma) < 1e-6:
            return 1e6
        r = _logistic(x, a, b, mu, sigma) - y
        return float(np.mean(r * r))

    rng = np.random.default_rng(seed)
    lo, hi = float(y.min()), float(y.max())
    xmid = float(x.mean())
    span = max(float(x.max() - x.min()), 1.0)
    best = None
    for t in range(n_starts):
        if t == 0:
            start = np.array([lo, hi, xmid, span / 4.0])
        else:
            start = np.array(
                [
                    lo + 0.2 * (hi - lo) * rng.standard_normal(),
                    hi + 0.2 * (hi - lo) * rng.standard_normal(),
                    float(rng.uniform(x.min(), x.max())),
                    float(rng.uniform(0.05, span)),
                ]
            )
        res = minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"maxiter": 4000, "xatol": 1e-9, "fatol": 1e-12},
        )
        if best is None or res.fun < best.fun:
            best = res
    a, b, mu, sigma = (float(v) for v in best.x)
    if b < a:
        # same function with the endpoints swapped and the slope reversed
        a, b, sigma = b, a, -sigma
    curve.a, curve.b, curve.mu, curve.sigma = a, b, mu, sigma
    curve.residual = float(best.fun)
    if b - a < flat_tolerance:
        curve.degenerate = True
    return curve


def relative_scores(curve: EmergenceCurve, grid: Sequence[float]) -> np.ndarray:
    """Fitted scores rescaled so the grid minimum is 0 and the maximum 1."""
    if curve.degenerate:
        raise DegenerateCurveError("relative scores undefined for a flat fit")
    g = np.asarray(grid, dtype=np.float64)
    s = curve.score_at(g)
    smin, smax = float(s.min()), float(s.max())
    if smax - smin <= 0:
        raise DegenerateCurveError("fitted curve is constant over the grid")
    return (s - smin) / (smax - smin)


class EmergencePoint(NamedTuple):
    words: float
    extrapolated: bool


def emergence_point(curve: EmergenceCurve, level: float = 0.5) -> EmergencePoint:
    """Cumulative words at which the curve completes ``level`` of its rise.

    The target score is a + level * (b - a), anchored to the fitted floor
    and ceiling, so level 0.5 lands exactly on the midpoint mu.  The
    logistic crosses each interior level exactly once; a crossing outside
    the observed word range is still returned but flagged as an
    extrapolation.
    """
    if curve.degenerate:
        raise DegenerateCurveError("no emergence point for a flat fit")
    if not 0.0 < level < 1.0:
        raise AnalysisError("level must lie strictly between 0 and 1")
    # solve a + (b-a)/(1+exp(-(x-mu)/sigma)) = a + level*(b-a) for x
    x_star = curve.mu + curve.sigma * float(np.log(level / (1.0 - level)))
    x = curve.log_words()
    extrapolated = not (float(x.min()) <= x_star <= float(x.max()))
    return EmergencePoint(10.0**x_star, extrapolated)


def data_gap(model_words: float, human_words: float) -> float:
    """Orders of magnitude separating a model's word budget from a human's."""
    if model_words <= 0 or human_words <= 0:
        raise AnalysisError("word counts must be positive")
    return float(np.log10(model_words / human_words))


# ---------------------------------------------------------------------------
# subspace geometry


def _orthonormal_basis(B: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    u, s, _ = np.linalg.svd(B, full_matrices=False)
    if len(s) == 0 or s[0] <= 0:
        raise AnalysisError("zero-rank probe has no column space")
    rank = int(np.sum(s > rel_tol * s[0]))
    if rank == 0:
        raise AnalysisError("zero-rank probe has no column space")
    return u[:, :rank]


def subspace_alignment(B1: np.ndarray, B2: np.ndarray) -> float:
    """Mean squared cosine of the principal angles between column spaces.

    1 means one space contains the other; 0 means they are orthogonal.
    Normalized by the smaller rank so the value stays in [0, 1] for
    unequal dimensions.
    """
    if B1.shape[0] != B2.shape[0]:
        raise AnalysisError("probes live in different activation spaces")
    v1 = _orthonormal_basis(B1)
    v2 = _orthonormal_basis(B2)
    overlap = float(np.sum((v1.T @ v2) ** 2))
    return overlap / min(v1.shape[1], v2.shape[1])


def probe_unit_norms(
    B: np.ndarray, threshold: float = 2.0
) -> tuple[np.ndarray, np.ndarray]:
    """Row norms of the probe (one per model unit) and outlier flags.

    A unit is an outlier when its norm reaches ``threshold`` times the
    median norm.
    """
    B = np.asarray(B, dtype=np.float64)
    if not np.any(B):
        raise AnalysisError("all-zero probe has no meaningful norms")
    norms = np.sqrt(np.einsum("ij,ij->i", B, B))
    flags = norms >= threshold * np.median(norms)
    return norms, flags


def joint_outliers(flags1: np.ndarray, flags2: np.ndarray) -> np.ndarray:
    """Indices flagged as outliers by both probes."""
    if flags1.shape != flags2.shape:
        raise AnalysisError("outlier flags cover different unit counts")
    return np.nonzero(flags1 & flags2)[0]


def select_layers(scores: dict, frac: float = 0.8) -> list:
    """Layers whose score reaches ``frac`` of the best layer's score."""
    if not scores:
        return []
    best = max(scores.values())
    if best <= 0:
        return [min(k for k, v in scores.items() if v == best)]
    return sorted(k for k, v in scores.items() if v >= frac * best)


# ---------------------------------------------------------------------------
# encoding regressions


def _sequential_blocks(n: int, folds: int) -> list[np.ndarray]:
    bounds = np.linspace(0, n, folds + 1).astype(int)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(folds)]


def _ridge_fit(X, y, penalty):
    # centered ridge: penalize slopes only, intercept = train means
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    m = X.shape[1]
    beta = np.linalg.solve(Xc.T @ Xc + penalty * np.eye(m), Xc.T @ yc)
    return beta, xm, ym


def _inner_select(X, y, folds, penalties):
    blocks = _sequential_blocks(len(y), folds)
    sse = np.zeros(len(penalties))
    for b in blocks:
        mask = np.ones(len(y), dtype=bool)
        mask[b] = False
        if not mask.any() or len(b) == 0:
            continue
        for pi, lam in enumerate(penalties):
            beta, xm, ym = _ridge_fit(X[mask], y[mask], lam)
            resid = y[b] - ((X[b] - xm) @ beta + ym)
            sse[pi] += float(resid @ resid)
    # ties break toward the smaller penalty
    return float(penalties[int(np.argmin(sse))])


@dataclass
class RidgeCVResult:
    r2: float
    penalties: list[float]
    fold_sizes: list[int]
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {
            "r2": self.r2,
            "penalties": self.penalties,
            "fold_sizes": self.fold_sizes,
        }


def ridge_nested_cv(
    X: np.ndarray,
    y: np.ndarray,
    outer: int = 5,
    inner: int = 5,
    penalties: Sequence[float] | None = None,
) -> RidgeCVResult:
    """Nested cross-validated ridge with sequential contiguous fold blocks.

    The inner loop picks a penalty per outer fold from a log-spaced grid;
    the outer loop pools every held-out prediction into a single
    R^2 = 1 - SSE/SST against the global target mean.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != len(y):
        raise AnalysisError("design matrix rows must match target length")
    n = len(y)
    if n < outer * inner:
        raise AnalysisError(f"need at least {outer * inner} rows, have {n}")
    if float(np.var(y)) == 0.0:
        raise AnalysisError("target has zero variance")
    if penalties is None:
        penalties = np.logspace(-3, 3, 7)
    penalties = np.asarray(list(penalties), dtype=np.float64)

    preds = np.empty(n)
    chosen = []
    blocks = _sequential_blocks(n, outer)
    for b in blocks:
        mask = np.ones(n, dtype=bool)
        mask[b] = False
        lam = _inner_select(X[mask], y[mask], inner, penalties)
        beta, xm, ym = _ridge_fit(X[mask], y[mask], lam)
        preds[b] = (X[b] - xm) @ beta + ym
        chosen.append(lam)
    sse = float(np.sum((y - preds) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    return RidgeCVResult(
        r2=1.0 - sse / sst,
        penalties=chosen,
        fold_sizes=[len(b) for b in blocks],
        predictions=preds,
    )


@dataclass
class EncodingResult:
    """Variance accounting for one regression target (typically one unit)."""

    r2_total: float
    r2_semantic: float | None = None
    r2_syntax: float | None = None
    cross_term: float | None = None
    delta_r2: float | None = None
    penalties: list[float] = field(default_factory=list)
    fold_sizes: list[int] = field(default_factory=list)
    unit: str = ""

    def to_dict(self) -> dict:
        return {
            "unit": self.unit,
            "r2_total": self.r2_total,
            "r2_semantic": self.r2_semantic,
            "r2_syntax": self.r2_syntax,
            "cross_term": self.cross_term,
            "delta_r2": self.delta_r2,
            "penalties": self.penalties,
            "fold_sizes": self.fold_sizes,
        }


def variance_partition(
    X_sem: np.ndarray,
    X_syn: np.ndarray,
    y: np.ndarray,
    outer: int = 5,
    inner: int = 5,
    penalties: Sequence[float] | None = None,
    unit: str = "",
) -> EncodingResult:
    """Split a joint ridge fit's explained variance between feature blocks.

    One model is fitted on [X_sem | X_syn]; held-out predictions are
    decomposed by coefficient block and each block is credited with
    cov(y, yhat_block) / var(y) over the pooled held-out points.  The two
    credits sum to the total R^2 up to a cross term, which is reported
    rather than hidden.
    """
    X_sem = np.asarray(X_sem, dtype=np.float64)
    X_syn = np.asarray(X_syn, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X_sem.shape[0] != X_syn.shape[0] or X_sem.shape[0] != len(y):
        raise AnalysisError("feature blocks and target must share row counts")
    n = len(y)
    if n < outer * inner:
        raise AnalysisError(f"need at least {outer * inner} rows, have {n}")
    if float(np.var(y)) == 0.0:
        raise AnalysisError("target has zero variance")
    if penalties is None:
        penalties = np.logspace(-3, 3, 7)
    penalties = np.asarray(list(penalties), dtype=np.float64)

    m_sem = X_sem.shape[1]
    X = np.hstack([X_sem, X_syn])
    pred_sem = np.empty(n)
    pred_syn = np.empty(n)
    pred_all = np.empty(n)
    chosen = []
    blocks = _sequential_blocks(n, outer)
    for b in blocks:
        mask = np.ones(n, dtype=bool)
        mask[b] = False
        lam = _inner_select(X[mask], y[mask], inner, penalties)
        beta, xm, ym = _ridge_fit(X[mask], y[mask], lam)
        z = X[b] - xm
        pred_sem[b] = z[:, :m_sem] @ beta[:m_sem]
        pred_syn[b] = z[:, m_sem:] @ beta[m_sem:]
        pred_all[b] = pred_sem[b] + pred_syn[b] + ym
        chosen.append(lam)

    sse = float(np.sum((y - pred_all) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    var_y = sst / n

    def credit(block_pred):
        c = float(np.mean((y - y.mean()) * (block_pred - block_pred.mean())))
        return c / var_y

    r2_total = 1.0 - sse / sst
    r2_sem = credit(pred_sem)
    r2_syn = credit(pred_syn)
    return EncodingResult(
        r2_total=r2_total,
        r2_semantic=r2_sem,
        r2_syntax=r2_syn,
        cross_term=r2_total - (r2_sem + r2_syn),
        penalties=chosen,
        fold_sizes=[len(b) for b in blocks],
        unit=unit,
    )


def incremental_r2(
    X_univariate: np.ndarray,
    X_subspace: np.ndarray,
    y: np.ndarray,
    outer: int = 5,
    inner: int = 5,
    penalties: Sequence[float] | None = None,
) -> tuple[float, float, float]:
    """R^2 gain from adding subspace features to a univariate design.

    Returns (delta, r2_joint, r2_univariate), all under the same fold
    structure so the difference is not a fold artifact.
    """
    X_uni = np.asarray(X_univariate, dtype=np.float64)
    X_sub = np.asarray(X_subspace, dtype=np.float64)
    if X_uni.ndim == 1:
        X_uni = X_uni[:, None]
    joint = ridge_nested_cv(
        np.hstack([X_uni, X_sub]), y, outer=outer, inner=inner, penalties=penalties
    )
    alone = ridge_nested_cv(X_uni, y, outer=outer, inner=inner, penalties=penalties)
    return joint.r2 - alone.r2, joint.r2, alone.r2
