"""Classical regression learners for treatment, censoring and outcome models.

Logistic regression (IRLS with optional offset, sample weights and fractional
responses in [0,1]), weighted least squares with deterministic rank handling,
a random regression forest, a small fully-connected network trained with Adam,
a saturated cell-mean regression for discrete designs, and discrete
cross-validated selection over the learner sets L1/L2/L3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, logit
from sklearn.ensemble import RandomForestRegressor

from .errors import EstimationError, InvalidParameterError
from .opt import Adam

LEARNER_SETS = {
    "L1": ("linear",),
    "L2": ("linear", "forest"),
    "L3": ("linear", "forest", "mlp"),
}

_ETA_CLIP = 35.0  # keeps IRLS finite under separation; expit(35) is 1 - 6e-16


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass
class LogisticModel:
    coef: np.ndarray
    intercept: bool
    converged: bool
    separated: bool

    def predict_proba(self, X, offset=None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        off = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
        if self.coef.size == 0:
            return expit(off)  # pure-offset model: exactly sigmoid(offset)
        A = np.column_stack([np.ones(n), X]) if self.intercept else X
        eta = np.clip(off + A @ self.coef, -_ETA_CLIP, _ETA_CLIP)
        return expit(eta)


def _solve_spd(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve G x = rhs, escalating a ridge jitter while G is singular."""
    scale = max(float(np.mean(np.diag(G))), 1e-30)
    jitter = 0.0
    for _ in range(10):
        try:
            sol = np.linalg.solve(G + jitter * np.eye(G.shape[0]), rhs)
            if np.isfinite(sol).all():
                return sol
        except np.linalg.LinAlgError:
            pass
        jitter = scale * 1e-10 if jitter == 0.0 else jitter * 100.0
    raise EstimationError("normal equations remained singular under jitter")


def fit_logistic(X, y, sample_weight=None, offset=None, intercept: bool = True) -> LogisticModel:
    """Weighted Bernoulli maximum likelihood via IRLS.

    Accepts fractional responses in [0,1] (quasi-binomial loss) and an optional
    fixed per-row offset. Singular steps are ridge-jittered; fits whose linear
    predictor runs past +-30 are flagged as separated.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InvalidParameterError("X must be 2-d with one row per response")
    if y.size and ((y < 0).any() or (y > 1).any()):
        raise InvalidParameterError("responses must lie in [0, 1]")
    n = y.shape[0]
    w0 = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w0.shape != (n,) or (w0 < 0).any():
        raise InvalidParameterError("sample weights must be non-negative, one per row")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    if off.shape != (n,):
        raise InvalidParameterError("offset must have one entry per row")

    A = np.column_stack([np.ones(n), X]) if intercept else X
    p = A.shape[1]
    if p == 0:
        return LogisticModel(coef=np.empty(0), intercept=intercept,
                             converged=True, separated=False)

    beta = np.zeros(p)
    converged = False
    for _ in range(100):
        eta = np.clip(off + A @ beta, -_ETA_CLIP, _ETA_CLIP)
        mu = expit(eta)
        var = np.maximum(mu * (1.0 - mu), 1e-12)
        w = w0 * var
        z = (eta - off) + (y - mu) / var
        G = A.T @ (w[:, None] * A)
        new = _solve_spd(G, A.T @ (w * z))
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < 1e-8:
            converged = True
            break
    raw_eta = off + A @ beta
    separated = bool(np.max(np.abs(raw_eta), initial=0.0) >= 30.0)
    return LogisticModel(coef=beta, intercept=intercept,
                         converged=converged, separated=separated)


@dataclass
class LinearModel:
    coef: np.ndarray  # aligned to [intercept?, X columns]; dropped columns are 0
    intercept: bool
    kept: np.ndarray  # boolean mask over the same layout

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        A = np.column_stack([np.ones(X.shape[0]), X]) if self.intercept else X
        return A @ self.coef


def fit_wls(X, y, weights=None, intercept: bool = True) -> LinearModel:
    """Weighted least squares via normal equations with greedy column pivoting.

    Columns are admitted in order and a column is dropped when its pivot after
    projection on the admitted ones falls below a relative tolerance, so of two
    duplicated columns the later one is dropped, deterministically.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InvalidParameterError("X must be 2-d with one row per response")
    n = y.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise InvalidParameterError("weights must have one entry per row")
    if (w < 0).any():
        raise InvalidParameterError("weights must be non-negative")
    if n == 0 or not (w > 0).any():
        raise InvalidParameterError("weights must not be all zero")

    A = np.column_stack([np.ones(n), X]) if intercept else X
    p = A.shape[1]
    G = A.T @ (w[:, None] * A)
    rhs = A.T @ (w * y)

    kept: list[int] = []
    L = np.zeros((p, p))
    for j in range(p):
        m = len(kept)
        if m:
            v = solve_triangular(L[:m, :m], G[kept, j], lower=True)
            pivot = G[j, j] - v @ v
        else:
            v = np.empty(0)
            pivot = G[j, j]
        if pivot > 1e-10 * max(G[j, j], 1e-30):
            L[m, :m] = v
            L[m, m] = math.sqrt(pivot)
            kept.append(j)
    if not kept:
        raise EstimationError("design matrix has no usable columns")
    m = len(kept)
    half = solve_triangular(L[:m, :m], rhs[kept], lower=True)
    sol = solve_triangular(L[:m, :m].T, half, lower=False)
    coef = np.zeros(p)
    coef[kept] = sol
    mask = np.zeros(p, dtype=bool)
    mask[kept] = True
    return LinearModel(coef=coef, intercept=intercept, kept=mask)


@dataclass
class ForestModel:
    forest: RandomForestRegressor
    oob_prediction: np.ndarray | None = None

    def predict(self, X) -> np.ndarray:
        return self.forest.predict(np.asarray(X, dtype=np.float64))


def fit_forest(X, y, n_trees: int = 100, min_leaf: int = 5, mtry: int | None = None,
               bootstrap: bool = True, seed: int = 0, oob: bool = False) -> ForestModel:
    """Random regression forest (CART trees on bootstrap resamples, mean-aggregated)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvalidParameterError("X must be 2-d with at least one column")
    if X.shape[0] < min_leaf:
        raise InvalidParameterError("need at least min_leaf rows")
    if mtry is None:
        mtry = -(-X.shape[1] // 3)  # ceil(p/3)
    rf = RandomForestRegressor(
        n_estimators=n_trees, min_samples_leaf=min_leaf, max_features=int(mtry),
        bootstrap=bootstrap, oob_score=bool(oob and bootstrap),
        random_state=int(seed) % (2 ** 32), n_jobs=1)
    rf.fit(X, y)
    oob_pred = rf.oob_prediction_ if (oob and bootstrap) else None
    return ForestModel(forest=rf, oob_prediction=oob_pred)


@dataclass
class MlpModel:
    params: list  # [W1, b1, ..., WL, bL]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Z = (X - self.x_mean) / self.x_scale
        out, _ = _mlp_forward(self.params, Z, masks=None)
        return self.y_mean + self.y_scale * out


def _init_mlp_params(d_in: int, arch: tuple, rng: np.random.Generator) -> list:
    sizes = [d_in, *arch, 1]
    params: list[np.ndarray] = []
    for layer in range(len(sizes) - 1):
        fan_in, fan_out = sizes[layer], sizes[layer + 1]
        last = layer == len(sizes) - 2
        std = math.sqrt((1.0 if last else 2.0) / fan_in)
        params.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _mlp_forward(params: list, Z: np.ndarray, masks):
    """Forward pass; returns (predictions, per-layer activations for backprop)."""
    acts = [Z]
    h = Z
    n_layers = len(params) // 2
    for layer in range(n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        pre = h @ W + b
        if layer < n_layers - 1:
            h = np.maximum(pre, 0.0)
            if masks is not None:
                h = h * masks[layer]
        else:
            h = pre
        acts.append(h)
    return h[:, 0], acts


def _mlp_loss_and_grads(params: list, Z: np.ndarray, y: np.ndarray, masks=None):
    """Mean-squared-error loss and analytic gradients for every parameter array."""
    out, acts = _mlp_forward(params, Z, masks)
    resid = out - y
    n = y.shape[0]
    loss = float(np.mean(resid ** 2))
    grads = [np.zeros_like(p) for p in params]
    delta = (2.0 / n) * resid[:, None]
    n_layers = len(params) // 2
    for layer in range(n_layers - 1, -1, -1):
        h_in = acts[layer]
        grads[2 * layer] = h_in.T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            W = params[2 * layer]
            delta = delta @ W.T
            if masks is not None:
                delta = delta * masks[layer - 1]
            delta = delta * (acts[layer] > 0.0)
    return loss, grads


def fit_mlp(X, y, arch: tuple = (128,), epochs: int = 500, lr: float = 0.01,
            dropout: float = 0.0, seed: int = 0) -> MlpModel:
    """Fully connected ReLU network, squared-error loss, full-batch Adam.

    Inputs are z-scored and the response standardized internally; inverted
    dropout (rate = drop probability) is applied to hidden activations during
    training only. Deterministic given the seed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise InvalidParameterError("X must be 2-d with one row per response")
    if any(int(width) <= 0 for width in arch):
        raise InvalidParameterError("layer sizes must be positive")
    if not 0.0 <= dropout < 1.0:
        raise InvalidParameterError("dropout rate must lie in [0, 1)")

    x_mean = X.mean(axis=0)
    x_scale = np.maximum(X.std(axis=0), 1e-8)
    y_mean = float(y.mean())
    y_scale = max(float(y.std()), 1e-8)
    Z = (X - x_mean) / x_scale
    t = (y - y_mean) / y_scale

    rng = np.random.default_rng(seed)
    params = _init_mlp_params(X.shape[1], tuple(int(a) for a in arch), rng)
    opt = Adam(params, lr=lr)
    keep = 1.0 - dropout
    for epoch in range(epochs):
        masks = None
        if dropout > 0.0:
            masks = [(rng.random((Z.shape[0], int(width))) >= dropout) / keep
                     for width in arch]
        loss, grads = _mlp_loss_and_grads(params, Z, t, masks)
        if not math.isfinite(loss):
            raise EstimationError(f"non-finite training loss at epoch {epoch}")
        opt.step(grads)
    return MlpModel(params=params, x_mean=x_mean, x_scale=x_scale,
                    y_mean=y_mean, y_scale=y_scale)


@dataclass
class SaturatedModel:
    """Cell means over distinct covariate rows; unseen cells get the global mean."""

    table: dict
    default: float

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.array([self.table.get(tuple(row), self.default) for row in X])


def fit_saturated(X, y) -> SaturatedModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise InvalidParameterError("cannot fit on an empty design")
    sums: dict[tuple, list] = {}
    for row, val in zip(X, y):
        cell = sums.setdefault(tuple(row), [0.0, 0])
        cell[0] += float(val)
        cell[1] += 1
    table = {key: s / c for key, (s, c) in sums.items()}
    return SaturatedModel(table=table, default=float(y.mean()))


@dataclass
class AverageModel:
    """Equal-weight ensemble over fitted candidates."""

    models: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        return np.mean([m.predict(X) for m in self.models], axis=0)


def _fit_candidate(name: str, X, y, seed: int):
    if name == "linear":
        return fit_wls(X, y)
    if name == "forest":
        return fit_forest(X, y, seed=seed)
    if name == "mlp":
        return fit_mlp(X, y, arch=(128,), epochs=500, lr=0.01, dropout=0.0, seed=seed)
    raise InvalidParameterError(f"unknown learner {name!r}")


def select_learner(set_id: str, X, y, folds: int = 5, seed: int = 0,
                   ensemble: str = "select"):
    """Discrete cross-validated selection over a learner set.

    Fits each candidate with k-fold CV, refits the lowest-MSE candidate on all
    rows; ties break by set order. A singleton set skips CV so L1 is exactly
    the plain linear fit. ensemble="average" instead returns the equal-weight
    mean of all candidates refit on all rows.
    """
    if set_id not in LEARNER_SETS:
        raise InvalidParameterError(f"unknown learner set {set_id!r}")
    if ensemble not in ("select", "average"):
        raise InvalidParameterError(f"unknown ensemble rule {ensemble!r}")
    names = LEARNER_SETS[set_id]
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]

    if ensemble == "average":
        return AverageModel([_fit_candidate(name, X, y, _child_seed(seed, ci, folds))
                             for ci, name in enumerate(names)])
    if len(names) == 1:
        return _fit_candidate(names[0], X, y, _child_seed(seed, 0, folds))

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 977]))
    perm = rng.permutation(n)
    parts = np.array_split(perm, min(folds, n))
    cv_mse = []
    for ci, name in enumerate(names):
        total_sq = 0.0
        for f, test_rows in enumerate(parts):
            train_rows = np.setdiff1d(perm, test_rows, assume_unique=True)
            model = _fit_candidate(name, X[train_rows], y[train_rows],
                                   _child_seed(seed, ci, f))
            pred = model.predict(X[test_rows])
            total_sq += float(np.sum((pred - y[test_rows]) ** 2))
        cv_mse.append(total_sq / n)
    winner = int(np.argmin(cv_mse))  # argmin takes the first minimum: set order
    return _fit_candidate(names[winner], X, y, _child_seed(seed, winner, folds))
