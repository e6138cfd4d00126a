"""Exact Gaussian-process regression on learned (deep-kernel) features.

A fully connected ReLU extractor (hidden widths 1000/500/50 by default) maps
min-max scaled inputs to features that are again min-max scaled to [0,1] per
column; an RBF kernel with a scalar lengthscale, output scale, noise variance
and constant mean operates on those features.  Scaling the inputs to [0,1]
rather than z-scoring keeps binary indicators and continuous measurements on
the same footing, so a one-unit flip of an indicator is a unit step instead
of a multiple-standard-deviation jump through the random ReLU stack. Training maximizes the exact log
marginal likelihood by Adam over the extractor weights and the log
hyperparameters jointly, with analytic gradients throughout.

Two conventions matter for reproducibility and gradient checks:

- The feature min-max statistics are refreshed between optimizer steps but are
  held constant inside every likelihood/gradient evaluation, so analytic
  gradients and finite differences of `log_marginal_likelihood` agree.
- Cholesky factorization is attempted without any jitter first; only on
  failure is a diagonal jitter of 1e-6 * outputscale added, escalating
  tenfold at most three times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from .errors import EstimationError, InvalidParameterError
from .opt import Adam

_LOG2PI = math.log(2.0 * math.pi)


@dataclass
class DklModel:
    """Extractor weights, kernel hyperparameters and (after fit) training caches."""

    extractor_params: list  # [W1, b1, W2, b2, W3, b3]
    x_min: np.ndarray
    x_range: np.ndarray
    out_min: np.ndarray
    out_range: np.ndarray
    log_lengthscale: np.ndarray  # 0-d arrays so the optimizer updates in place
    log_outputscale: np.ndarray
    log_noise: np.ndarray
    mean_const: np.ndarray
    # training caches, populated by finalize()
    Z_train: np.ndarray | None = None
    chol: np.ndarray | None = None
    alpha: np.ndarray | None = None
    jitter: float = 0.0
    fit_lml: list = field(default_factory=list)

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def outputscale(self) -> float:
        return float(np.exp(self.log_outputscale))

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    def predict(self, X) -> np.ndarray:
        return predict(self, X)[0]


def init_dkl(X, y, arch: tuple = (1000, 500, 50), seed: int = 0) -> DklModel:
    """Untrained model: He-initialized extractor, moment-based hyperparameters."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise InvalidParameterError("X must be 2-d with one row per response")
    if len(arch) == 0 or any(int(w) <= 0 for w in arch):
        raise InvalidParameterError("extractor widths must be positive")
    rng = np.random.default_rng(seed)
    sizes = [X.shape[1], *[int(w) for w in arch]]
    params: list[np.ndarray] = []
    for i in range(len(sizes) - 1):
        params.append(rng.normal(0.0, math.sqrt(2.0 / sizes[i]), size=(sizes[i], sizes[i + 1])))
        params.append(np.zeros(sizes[i + 1]))
    var_y = max(float(np.var(y)), 1e-12)
    lo, hi = X.min(axis=0), X.max(axis=0)
    model = DklModel(
        extractor_params=params,
        x_min=lo,
        x_range=np.maximum(hi - lo, 1e-8),
        out_min=np.zeros(sizes[-1]),
        out_range=np.ones(sizes[-1]),
        log_lengthscale=np.array(0.0),
        log_outputscale=np.array(math.log(var_y)),
        log_noise=np.array(math.log(0.1 * var_y)),
        mean_const=np.array(float(np.mean(y))),
    )
    _refresh_feature_scaler(model, X)
    return model


def _hidden_forward(model: DklModel, X: np.ndarray):
    """ReLU stack on [0,1]-scaled inputs; returns activations for backprop."""
    h = (np.asarray(X, dtype=np.float64) - model.x_min) / model.x_range
    acts = [h]
    pres = []
    n_layers = len(model.extractor_params) // 2
    for layer in range(n_layers):
        W, b = model.extractor_params[2 * layer], model.extractor_params[2 * layer + 1]
        pre = h @ W + b
        h = np.maximum(pre, 0.0)
        pres.append(pre)
        acts.append(h)
    return h, acts, pres


def _refresh_feature_scaler(model: DklModel, X) -> None:
    h, _, _ = _hidden_forward(model, X)
    model.out_min = h.min(axis=0)
    model.out_range = np.maximum(h.max(axis=0) - h.min(axis=0), 1e-12)


def extract(model: DklModel, X) -> np.ndarray:
    """Features seen by the kernel: ReLU stack output min-max scaled per column."""
    h, _, _ = _hidden_forward(model, X)
    return (h - model.out_min) / model.out_range


def kernel_matrix(model: DklModel, X1, X2=None) -> np.ndarray:
    """RBF kernel on extracted features; no noise and no jitter terms."""
    Z1 = extract(model, X1)
    Z2 = Z1 if X2 is None else extract(model, X2)
    D = cdist(Z1, Z2, "sqeuclidean")
    ls2 = math.exp(2.0 * float(model.log_lengthscale))
    return math.exp(float(model.log_outputscale)) * np.exp(-0.5 * D / ls2)


def _chol_with_jitter(Ksig: np.ndarray, outputscale: float):
    jitter = 0.0
    for _ in range(4):  # bare attempt, then 1e-6/1e-5/1e-4 of the outputscale
        try:
            L = np.linalg.cholesky(Ksig if jitter == 0.0
                                   else Ksig + jitter * np.eye(Ksig.shape[0]))
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-6 * outputscale if jitter == 0.0 else jitter * 10.0
    raise EstimationError("kernel matrix is not positive definite even with jitter")


def _lml_core(model: DklModel, X, y, want_grads: bool):
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    h3, acts, pres = _hidden_forward(model, X)
    Z = (h3 - model.out_min) / model.out_range
    D = cdist(Z, Z, "sqeuclidean")
    ls = math.exp(float(model.log_lengthscale))
    outputscale = math.exp(float(model.log_outputscale))
    noise = math.exp(float(model.log_noise))
    Kf = outputscale * np.exp(-0.5 * D / ls ** 2)
    L, jitter = _chol_with_jitter(Kf + noise * np.eye(n), outputscale)
    resid = y - float(model.mean_const)
    alpha = cho_solve((L, True), resid)
    lml = float(-0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG2PI)
    if not want_grads:
        return lml, None

    Kinv = cho_solve((L, True), np.eye(n))
    G = 0.5 * (np.outer(alpha, alpha) - Kinv)
    # jitter is proportional to the outputscale, so it moves with log_outputscale
    g_log_os = float(np.sum(G * Kf) + jitter * np.trace(G))
    g_log_ls = float(np.sum(G * Kf * D) / ls ** 2)
    g_log_noise = float(noise * np.trace(G))
    g_mean = float(np.sum(alpha))

    M = G * Kf
    dZ = (2.0 / ls ** 2) * (M @ Z - M.sum(axis=1)[:, None] * Z)
    delta = dZ / model.out_range  # min-max statistics held constant
    grads: list[np.ndarray] = [np.zeros_like(p) for p in model.extractor_params]
    n_layers = len(model.extractor_params) // 2
    for layer in range(n_layers - 1, -1, -1):
        delta = delta * (pres[layer] > 0.0)
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ model.extractor_params[2 * layer].T
    scalar_grads = {
        "log_lengthscale": g_log_ls,
        "log_outputscale": g_log_os,
        "log_noise": g_log_noise,
        "mean_const": g_mean,
    }
    return lml, (grads, scalar_grads)


def log_marginal_likelihood(model: DklModel, X, y) -> float:
    """Exact GP log marginal likelihood at the model's current parameters.

    Uses the stored feature min-max statistics (they are not refit here), so
    this is a deterministic function of the parameters alone.
    """
    lml, _ = _lml_core(model, X, y, want_grads=False)
    return lml


def lml_gradients(model: DklModel, X, y):
    """(lml, extractor gradient list, scalar gradient dict) at current parameters."""
    lml, payload = _lml_core(model, X, y, want_grads=True)
    return lml, payload[0], payload[1]


def finalize(model: DklModel, X, y) -> DklModel:
    """Refresh feature scaling and cache the Cholesky/weights for prediction."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _refresh_feature_scaler(model, X)
    Z = extract(model, X)
    D = cdist(Z, Z, "sqeuclidean")
    ls = model.lengthscale
    Kf = model.outputscale * np.exp(-0.5 * D / ls ** 2)
    L, jitter = _chol_with_jitter(Kf + model.noise * np.eye(Z.shape[0]), model.outputscale)
    model.Z_train = Z
    model.chol = L
    model.alpha = cho_solve((L, True), y - float(model.mean_const))
    model.jitter = jitter
    return model


def fit_dkl(X, y, arch: tuple = (1000, 500, 50), iters: int = 5, lr: float = 0.01,
            seed: int = 0) -> DklModel:
    """Train extractor and hyperparameters by Adam on the exact marginal likelihood."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    model = init_dkl(X, y, arch=arch, seed=seed)
    hypers = [model.log_lengthscale, model.log_outputscale, model.log_noise, model.mean_const]
    opt = Adam(model.extractor_params + hypers, lr=lr)
    for _ in range(iters):
        _refresh_feature_scaler(model, X)
        lml, ext_grads, sg = lml_gradients(model, X, y)
        if not math.isfinite(lml):
            raise EstimationError("non-finite marginal likelihood during training")
        model.fit_lml.append(lml)
        steps = [-g for g in ext_grads] + [
            -np.asarray(sg["log_lengthscale"]), -np.asarray(sg["log_outputscale"]),
            -np.asarray(sg["log_noise"]), -np.asarray(sg["mean_const"])]
        opt.step(steps)
    return finalize(model, X, y)


def predict(model: DklModel, X, clamp: bool = True):
    """Posterior mean and variance of the latent function at new inputs."""
    if model.Z_train is None:
        raise EstimationError("model has no training cache; call fit_dkl or finalize")
    Zq = extract(model, X)
    D = cdist(Zq, model.Z_train, "sqeuclidean")
    ls = model.lengthscale
    Ks = model.outputscale * np.exp(-0.5 * D / ls ** 2)
    mean = float(model.mean_const) + Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = model.outputscale - np.sum(v ** 2, axis=0)
    if clamp:
        var = np.maximum(var, 0.0)
    return mean, var
