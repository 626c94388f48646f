"""Regression fitters used by both the imputation engine and the analysis model.

Everything here is a pure function of its arguments plus, for the draw
functions, an explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .errors import ConvergenceError, DataError, NumericalError, RankDeficientError

RANK_TOL = 1e-10
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 25
AUGMENTED_MAX_ITER = 100
DIVERGENCE_BOUND = 30.0
AUGMENT_WEIGHT = 0.02
MULTINOMIAL_GRAD_TOL = 1e-6
MULTINOMIAL_MAX_ITER = 50


@dataclass(frozen=True, eq=False)
class LinearFit:
    beta: np.ndarray
    sigma2_hat: float
    xtx_inv: np.ndarray
    nu: int
    n_used: int
    r_inv: np.ndarray  # upper-triangular square root: xtx_inv = r_inv @ r_inv.T

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.sigma2_hat * np.diag(self.xtx_inv))


@dataclass(frozen=True, eq=False)
class LogisticFit:
    beta: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    augmented: bool = False
    loglik: float = float("nan")


@dataclass(frozen=True, eq=False)
class MultinomialFit:
    """Coefficients for levels 1..K-1 against baseline level 0."""

    coef: np.ndarray  # (K-1, p)
    cov: np.ndarray  # ((K-1)*p, (K-1)*p), row-major over coef
    converged: bool
    iterations: int
    augmented: bool = False

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        return multinomial_probabilities(X, self.coef)


@dataclass(frozen=True, eq=False)
class ParameterDraw:
    beta_star: np.ndarray
    sigma_star: float = float("nan")


def _check_rank(R: np.ndarray, col_norms: np.ndarray, labels=None) -> None:
    diag = np.abs(np.diag(R))
    for j, (r, scale) in enumerate(zip(diag, col_norms)):
        if scale == 0.0 or r <= RANK_TOL * scale:
            raise RankDeficientError(j, labels[j] if labels is not None else None)


def _qr_solve(X: np.ndarray, y: np.ndarray, labels=None):
    Q, R = np.linalg.qr(X)
    _check_rank(R, np.linalg.norm(X, axis=0), labels)
    beta = solve_triangular(R, Q.T @ y)
    return beta, R


def fit_ols(X, y, weights=None, labels=None) -> LinearFit:
    """Least squares via Householder QR, never the normal equations.

    ``labels`` (optional column names) make rank-deficiency errors readable.
    With ``weights`` the fit is weighted least squares and ``sigma2_hat`` is
    the weighted residual variance.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, p) and y (n,)")
    n, p = X.shape
    if n <= p:
        raise NumericalError(f"need more rows than columns (n={n}, p={p})")
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        Xw, yw = X * sw[:, None], y * sw
    else:
        Xw, yw = X, y
    beta, R = _qr_solve(Xw, yw, labels)
    resid = yw - Xw @ beta
    nu = n - p
    sigma2 = float(resid @ resid) / nu
    r_inv = solve_triangular(R, np.eye(p))
    xtx_inv = r_inv @ r_inv.T
    return LinearFit(beta, sigma2, xtx_inv, nu, n, r_inv)


def draw_linear_params(fit: LinearFit, rng: np.random.Generator) -> ParameterDraw:
    """Posterior draw under the standard noninformative prior.

    sigma*^2 = sigma2_hat * nu / g with g ~ chi2(nu), then
    beta* ~ N(beta_hat, sigma*^2 (X'X)^-1).
    """
    g = rng.chisquare(fit.nu)
    sigma_star = float(np.sqrt(fit.sigma2_hat * fit.nu / g))
    z = rng.standard_normal(fit.beta.size)
    beta_star = fit.beta + sigma_star * (fit.r_inv @ z)
    return ParameterDraw(beta_star, sigma_star)


def _cov_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def draw_normal_params(beta: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> ParameterDraw:
    """Asymptotic-normal draw beta* ~ N(beta, cov)."""
    flat = np.ravel(beta)
    z = rng.standard_normal(flat.size)
    return ParameterDraw((flat + _cov_sqrt(cov) @ z).reshape(np.shape(beta)))


# -- logistic -----------------------------------------------------------------

def logistic_loglik(beta, X, y, offset=None, weights=None) -> float:
    eta = X @ beta + (0.0 if offset is None else offset)
    w = 1.0 if weights is None else weights
    return float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))


def logistic_score(beta, X, y, offset=None, weights=None) -> np.ndarray:
    eta = X @ beta + (0.0 if offset is None else offset)
    w = 1.0 if weights is None else weights
    return X.T @ (w * (y - expit(eta)))


def _augmentation_rows(X: np.ndarray, weights: np.ndarray, n_levels: int):
    """Pseudo-observations at mean +/- SD of every non-constant column.

    Returns (X_aug, level_of_row, weight_of_row) with total weight
    ``AUGMENT_WEIGHT`` per outcome level.
    """
    used = X[weights > 0]
    mean = used.mean(axis=0)
    sd = used.std(axis=0)
    varying = np.flatnonzero(sd > 0)
    points = []
    for j in varying:
        for sign in (-1.0, 1.0):
            pt = mean.copy()
            pt[j] += sign * sd[j]
            points.append(pt)
    if not points:
        points.append(mean)
    points = np.array(points)
    m = len(points)
    X_aug = np.tile(points, (n_levels, 1))
    levels = np.repeat(np.arange(n_levels), m)
    w_aug = np.full(n_levels * m, AUGMENT_WEIGHT / m)
    return X_aug, levels, w_aug


def _irls(X, y, offset, weights, max_iter, check_divergence):
    """Iteratively reweighted least squares with step halving.

    Returns (beta, converged, iterations, diverged).
    """
    n, p = X.shape
    mu = (weights * y + 0.5) / (weights + 1.0)
    eta = np.log(mu / (1 - mu))
    beta = None
    dev_old = np.inf
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        var = mu * (1 - mu)
        var = np.maximum(var, 1e-300)
        z = (eta - offset) + (y - mu) / var
        sw = np.sqrt(weights * var)
        try:
            beta_new, _ = _qr_solve(X * sw[:, None], z * sw)
        except RankDeficientError:
            if beta is None:
                raise
            return beta, False, it, True
        if not np.all(np.isfinite(beta_new)):
            return beta_new, False, it, True
        dev = -2 * logistic_loglik(beta_new, X, y, offset, weights)
        halvings = 0
        while beta is not None and dev > dev_old + 1e-12 * abs(dev_old) and halvings < 30:
            beta_new = (beta_new + beta) / 2
            dev = -2 * logistic_loglik(beta_new, X, y, offset, weights)
            halvings += 1
        if check_divergence and np.max(np.abs(beta_new)) > DIVERGENCE_BOUND:
            return beta_new, False, it, True
        if beta is not None and np.max(np.abs(beta_new - beta)) < IRLS_TOL:
            return beta_new, True, it, False
        beta, dev_old = beta_new, dev
        eta = X @ beta + offset
    return beta, False, max_iter, False


def _logistic_cov(beta, X, offset, weights):
    mu = expit(X @ beta + offset)
    info = (X * (weights * mu * (1 - mu))[:, None]).T @ X
    try:
        return np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular information matrix in logistic fit") from exc


def fit_logistic(X, y, offset=None, weights=None, augment: bool = True) -> LogisticFit:
    """Binary logistic regression by IRLS.

    ``offset`` enters the linear predictor with its coefficient fixed at 1.
    On divergence (|beta_j| > 30, non-finite values or no convergence within
    25 iterations) the model is refit on data augmented with lightly weighted
    pseudo-observations and ``augmented`` is set.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("y must have one entry per row of X")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("logistic outcome must be 0/1")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if not np.all(np.isfinite(offset)):
        raise DataError("offset must be finite")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise DataError("weights must be non-negative")

    degenerate = y.min() == y.max()
    if not degenerate:
        beta, converged, iters, diverged = _irls(X, y, offset, weights, IRLS_MAX_ITER, True)
        if converged and not diverged:
            return LogisticFit(beta, _logistic_cov(beta, X, offset, weights), True, iters,
                               False, logistic_loglik(beta, X, y, offset, weights))
    if not augment:
        raise ConvergenceError("logistic fit diverged (separation?) and augmentation is disabled")

    X_aug, lev, w_aug = _augmentation_rows(X, weights, 2)
    off_aug = np.full(lev.size, offset[weights > 0].mean())
    Xa = np.vstack([X, X_aug])
    ya = np.concatenate([y, lev.astype(float)])
    oa = np.concatenate([offset, off_aug])
    wa = np.concatenate([weights, w_aug])
    beta, converged, iters, diverged = _irls(Xa, ya, oa, wa, AUGMENTED_MAX_ITER, False)
    if not converged or not np.all(np.isfinite(beta)):
        raise ConvergenceError("logistic fit failed to converge even after augmentation")
    return LogisticFit(beta, _logistic_cov(beta, Xa, oa, wa), True, iters, True,
                       logistic_loglik(beta, Xa, ya, oa, wa))


# -- multinomial --------------------------------------------------------------

def multinomial_probabilities(X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Row-wise category probabilities, baseline category first."""
    eta = np.column_stack([np.zeros(X.shape[0]), X @ coef.T])
    eta -= eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=1, keepdims=True)


def _multinomial_parts(theta, X, Y, weights, K):
    p = X.shape[1]
    coef = theta.reshape(K - 1, p)
    P = multinomial_probabilities(X, coef)
    ll = float(np.sum(weights * np.log(np.maximum(np.sum(Y * P, axis=1), 1e-300))))
    R = (Y - P)[:, 1:] * weights[:, None]
    grad = (R.T @ X).ravel()
    H = np.empty(((K - 1) * p, (K - 1) * p))
    for a in range(1, K):
        for b in range(a, K):
            wab = weights * P[:, a] * ((a == b) - P[:, b])
            blk = (X * wab[:, None]).T @ X
            H[(a - 1) * p:a * p, (b - 1) * p:b * p] = blk
            H[(b - 1) * p:b * p, (a - 1) * p:a * p] = blk.T
    return ll, grad, H


def _multinomial_newton(X, Y, weights, K, max_iter, check_divergence):
    p = X.shape[1]
    theta = np.zeros((K - 1) * p)
    ll, grad, H = _multinomial_parts(theta, X, Y, weights, K)
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return theta, False, it, True
        t = 1.0
        while True:
            cand = theta + t * step
            ll_new, g_new, H_new = _multinomial_parts(cand, X, Y, weights, K)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-9:
                break
            t /= 2
        theta, ll, grad, H = cand, ll_new, g_new, H_new
        if not np.all(np.isfinite(theta)):
            return theta, False, it, True
        if check_divergence and np.max(np.abs(theta)) > DIVERGENCE_BOUND:
            return theta, False, it, True
        if np.max(np.abs(grad)) < MULTINOMIAL_GRAD_TOL:
            return theta, True, it, False
    return theta, False, max_iter, False


def fit_multinomial(X, y, n_levels: int, weights=None, augment: bool = True) -> MultinomialFit:
    """Multinomial logit by Newton's method; level 0 is the baseline.

    ``y`` holds integer level codes in ``0..n_levels-1``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    n, p = X.shape
    K = int(n_levels)
    if K < 2:
        raise DataError("multinomial model needs at least 2 levels")
    if np.any((y < 0) | (y >= K)):
        raise DataError("level codes out of range")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    Y = np.zeros((n, K))
    Y[np.arange(n), y] = 1.0

    all_present = np.all(Y[weights > 0].sum(axis=0) > 0)
    if all_present:
        theta, converged, iters, diverged = _multinomial_newton(
            X, Y, weights, K, MULTINOMIAL_MAX_ITER, True)
        if converged and not diverged:
            _, _, H = _multinomial_parts(theta, X, Y, weights, K)
            return MultinomialFit(theta.reshape(K - 1, p), np.linalg.inv(H), True, iters)
    if not augment:
        raise ConvergenceError("multinomial fit failed (empty level or separation) "
                               "and augmentation is disabled")
    X_aug, lev, w_aug = _augmentation_rows(X, weights, K)
    Y_aug = np.zeros((lev.size, K))
    Y_aug[np.arange(lev.size), lev] = 1.0
    Xa, Ya, wa = np.vstack([X, X_aug]), np.vstack([Y, Y_aug]), np.concatenate([weights, w_aug])
    if np.any(Ya[wa > 0].sum(axis=0) == 0):
        raise DataError("empty level after augmentation")
    theta, converged, iters, _ = _multinomial_newton(Xa, Ya, wa, K, AUGMENTED_MAX_ITER, False)
    if not converged:
        raise ConvergenceError("multinomial fit failed to converge even after augmentation")
    _, _, H = _multinomial_parts(theta, Xa, Ya, wa, K)
    return MultinomialFit(theta.reshape(K - 1, p), np.linalg.inv(H), True, iters, True)


# -- discrimination -----------------------------------------------------------

def auc(scores, labels) -> float:
    """Area under the ROC curve in Mann-Whitney form; ties count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n1 = int(np.count_nonzero(pos))
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise DataError("AUC needs both classes among the labels")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))
