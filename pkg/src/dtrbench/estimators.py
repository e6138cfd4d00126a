"""Counterfactual mean estimators for dynamic treatment regimes.

All estimators target E[Y_{K+1} under regime d with censoring removed] on a
simulated panel.  Shared conventions:

* "horizon" K means the last treatment decision; the outcome is Y_{K+1}.
* Iterated-regression methods fit each step on every subject uncensored at
  m+1 and predict on every subject uncensored at m.  The g-formula and LTMLE
  predict with the treatment history replaced by the regime's decision path;
  the two-step estimator keeps observed treatments and swaps only the
  current step's column (its weight covariate carries the rest).
* Per-step probabilities feeding any weight are truncated before
  multiplication; normalized weight vectors sum to one exactly where consumed.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from . import dkl as gp
from .errors import EstimationError, InvalidParameterError
from .panel import Panel, at_risk, history_features
from .regress import fit_logistic, fit_mlp, fit_saturated, fit_wls, select_learner
from .sem import (CANONICAL_REGIMES, RegimeSpec, regime_decision,
                  regime_followers, regime_path)
from .weights import (DEFAULT_TRUNCATION, cumulative_weights, eval_regime_g,
                      fit_propensities, normalize_weights)

METHODS = ("iptw", "msm", "seq_g", "ltmle", "ts")

OUTCOME_LEARNERS = ("L1", "L2", "L3", "linear", "nn", "dkl", "saturated")

DEFAULT_LEARNER = {"seq_g": "L1", "ltmle": "L2", "ts": "dkl"}

# Narrow network used by the two-step estimator's neural variant: small
# epoch budget and heavy dropout keep it deliberately noisy.
NN_ARCH = (128, 64, 32)
NN_EPOCHS = 5
NN_LR = 0.01
NN_DROPOUT = 0.9

# Support of the simulated outcome: nominal range [-5, 5] plus the
# out-of-range uniform replacement tails, so scaling uses [-10, 10].
LTMLE_BOUNDS = (-10.0, 10.0)
Q_TRUNCATION = (0.0005, 0.9995)


@dataclass(frozen=True)
class EstimatorConfig:
    """Bundle of estimator settings; fields not used by a method are ignored."""

    method: str
    outcome_learner: str = None
    truncation: tuple = DEFAULT_TRUNCATION
    outcome_bounds: tuple = None
    q_truncation: tuple = Q_TRUNCATION
    unit_weights: bool = False
    weight_mode: str = "feature"
    force_epsilon_zero: bool = False
    hajek: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParameterError(f"unknown method {self.method!r}")
        if self.outcome_learner is not None and self.outcome_learner not in OUTCOME_LEARNERS:
            raise InvalidParameterError(f"unknown learner {self.outcome_learner!r}")
        if self.weight_mode not in ("feature", "loss"):
            raise InvalidParameterError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass
class Estimate:
    """A single counterfactual mean estimate with provenance."""

    method: str
    learner: str
    regime: str
    horizon: int
    value: float
    truth: float = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def abs_error(self):
        if self.truth is None:
            return None
        return abs(self.value - self.truth)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "learner": self.learner,
            "regime": self.regime,
            "K": self.horizon,
            "value": self.value,
            "truth": self.truth,
            "abs_error": self.abs_error,
            "diagnostics": self.diagnostics,
        }


def _step_seed(seed: int, m: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(m)]).generate_state(1)[0])


def _check_horizon(panel: Panel, horizon: int) -> None:
    if not 0 <= horizon <= panel.K:
        raise InvalidParameterError(f"horizon={horizon} outside 0..{panel.K}")


class _DklOutcome:
    """Adapter giving a fitted deep-kernel GP the plain .predict interface."""

    def __init__(self, model):
        self.model = model
        self.last_var_mean = None

    def predict(self, X):
        mean, var = gp.predict(self.model, X)
        self.last_var_mean = float(np.mean(var))
        return mean


def _fit_outcome(learner: str, X, y, seed: int, sample_weight=None):
    """Fit one outcome regression; sample_weight only for the linear family."""
    if sample_weight is not None and learner not in ("linear", "L1"):
        raise InvalidParameterError(
            "weight_mode='loss' is only supported with the linear learner")
    if learner in ("L1", "L2", "L3"):
        if sample_weight is not None:
            return fit_wls(X, y, weights=sample_weight)
        return select_learner(learner, X, y, seed=seed)
    if learner == "linear":
        return fit_wls(X, y, weights=sample_weight)
    if learner == "nn":
        return fit_mlp(X, y, arch=NN_ARCH, epochs=NN_EPOCHS, lr=NN_LR,
                       dropout=NN_DROPOUT, seed=seed)
    if learner == "dkl":
        return _DklOutcome(gp.fit_dkl(X, y, seed=seed))
    if learner == "saturated":
        return fit_saturated(X, y)
    raise InvalidParameterError(f"unknown learner {learner!r}")


def _design_with_path(panel: Panel, k: int, idx: np.ndarray, path: np.ndarray) -> np.ndarray:
    """Covariate matrix through time k with treatment columns set to path."""
    dm = history_features(panel, k, include_current_l=True,
                          include_current_y=False, idx=idx)
    X = dm.X
    for j in range(path.shape[1]):
        X[:, dm.columns.index(f"T_{j}")] = path[:, j]
    return X


def _sequential_engine(panel: Panel, regime: RegimeSpec, horizon: int,
                       learner: str, seed: int, outcome_bounds, q_truncation,
                       hook=None, info: dict = None):
    """Backward iterated regression; hook(m, pred_idx, q_pred, q_prev) may
    adjust each step's predictions (targeted updates)."""
    K = horizon
    q = np.full(panel.n, np.nan)
    last = at_risk(panel, K + 1)
    yv = panel.y[last, K + 1].copy()
    if outcome_bounds is not None:
        a, b = outcome_bounds
        yv = np.clip((yv - a) / (b - a), q_truncation[0], q_truncation[1])
    q[last] = yv

    for m in range(K, -1, -1):
        fit_idx = at_risk(panel, m + 1)
        Xf = history_features(panel, m + 1, include_current_l=True,
                              include_current_y=False, idx=fit_idx).X
        model = _fit_outcome(learner, Xf, q[fit_idx], _step_seed(seed, m))
        pred_idx = at_risk(panel, m)
        path = regime_path(panel, regime, m, pred_idx)
        Xp = _design_with_path(panel, m + 1, pred_idx, path)
        q_pred = np.asarray(model.predict(Xp), dtype=float)
        if outcome_bounds is not None:
            q_pred = np.clip(q_pred, q_truncation[0], q_truncation[1])
        if hook is not None:
            q_pred = hook(m, pred_idx, q_pred, q)
        if info is not None and isinstance(model, _DklOutcome):
            info.setdefault("dkl_pred_var", {})[m] = model.last_var_mean
        q_new = np.full(panel.n, np.nan)
        q_new[pred_idx] = q_pred
        q = q_new

    est = float(np.mean(q[at_risk(panel, 0)]))
    if outcome_bounds is not None:
        a, b = outcome_bounds
        est = a + est * (b - a)
    return est


def estimate_seq_g(panel: Panel, regime: RegimeSpec, horizon: int,
                   learner: str = "L1", seed: int = 0, outcome_bounds=None,
                   q_truncation=Q_TRUNCATION, truth: float = None) -> Estimate:
    """Iterated conditional-expectation (g-formula) estimate of E[Y_{K+1}^d]."""
    _check_horizon(panel, horizon)
    info = {}
    value = _sequential_engine(panel, regime, horizon, learner, seed,
                               outcome_bounds, q_truncation, info=info)
    return Estimate(method="seq_g", learner=learner, regime=regime.kind,
                    horizon=horizon, value=value, truth=truth, diagnostics=info)


def estimate_ltmle(panel: Panel, regime: RegimeSpec, horizon: int,
                   learner: str = "L2", seed: int = 0,
                   outcome_bounds=LTMLE_BOUNDS, q_truncation=Q_TRUNCATION,
                   g_truncation=DEFAULT_TRUNCATION, propensities=None,
                   force_epsilon_zero: bool = False, truth: float = None) -> Estimate:
    """Longitudinal targeted maximum-likelihood estimate of E[Y_{K+1}^d].

    Outcomes are mapped to [0,1] through outcome_bounds and clipped to
    q_truncation.  Each backward step fluctuates the plug-in fit along the
    inverse cumulative regime probability (clever covariate 1/g_m) using the
    uncensored regime followers, then updates every at-risk subject.  With
    force_epsilon_zero the fluctuation (and any propensity work) is skipped,
    reducing exactly to the bounded sequential g-formula.
    """
    _check_horizon(panel, horizon)
    if outcome_bounds is None:
        raise InvalidParameterError("ltmle requires outcome bounds for scaling")
    info = {"epsilon": {}, "followers": {}, "degenerate_steps": []}

    if force_epsilon_zero:
        value = _sequential_engine(panel, regime, horizon, learner, seed,
                                   outcome_bounds, q_truncation, info=info)
        info["epsilon"] = {m: 0.0 for m in range(horizon + 1)}
        return Estimate(method="ltmle", learner=learner, regime=regime.kind,
                        horizon=horizon, value=value, truth=truth, diagnostics=info)

    props = propensities
    if props is None:
        props = fit_propensities(panel, m_max=horizon, regime=regime,
                                 restrict="regime_followers")

    def hook(m, pred_idx, q_pred, q_prev):
        # Clever covariate I(C_{m+1}=0, T-bar_m = d-bar_m) / g_m: zero off the
        # follower set, so the targeting update moves follower rows only.
        followers = np.flatnonzero(regime_followers(panel, regime, m))
        if followers.size == 0:
            raise EstimationError(f"no uncensored regime followers at m={m}")
        info["followers"][m] = int(followers.size)
        g_f = eval_regime_g(panel, regime, props, m, idx=followers,
                            truncation=g_truncation)
        h = 1.0 / g_f
        pos = np.searchsorted(pred_idx, followers)
        eps_model = fit_logistic(h[:, None], q_prev[followers],
                                 offset=logit(q_pred[pos]), intercept=False)
        eps = float(eps_model.coef[0])
        if not np.isfinite(eps) or eps_model.separated:
            info["degenerate_steps"].append(m)
            eps = 0.0
        info["epsilon"][m] = eps
        q_new = q_pred.copy()
        q_new[pos] = expit(logit(q_pred[pos]) + eps * h)
        return q_new

    value = _sequential_engine(panel, regime, horizon, learner, seed,
                               outcome_bounds, q_truncation, hook=hook, info=info)
    return Estimate(method="ltmle", learner=learner, regime=regime.kind,
                    horizon=horizon, value=value, truth=truth, diagnostics=info)


def estimate_ts(panel: Panel, regime: RegimeSpec, horizon: int,
                outcome_learner: str = "dkl", seed: int = 0,
                truncation=DEFAULT_TRUNCATION, unit_weights: bool = False,
                weight_mode: str = "feature", propensities=None,
                truth: float = None) -> Estimate:
    """Two-step estimate: iterated outcome regressions taking the cumulative
    inverse-probability weight as an extra covariate.

    Fitting at step m uses the observed-arm weight W_m normalized over the
    fit population.  Prediction keeps the observed treatments through m-1 and
    swaps only the step-m column to the regime decision d_m, with the
    decision-modified weight Wmd_m normalized over the at-risk population —
    the same one-factor swap the weights themselves use, so the query rows
    stay on the support of the fit.  unit_weights drops the weight column and
    runs the plain iterated recursion (full decision-path substitution),
    which coincides with the sequential g-formula for every learner.
    """
    _check_horizon(panel, horizon)
    if weight_mode not in ("feature", "loss"):
        raise InvalidParameterError(f"unknown weight_mode {weight_mode!r}")
    info = {}

    if unit_weights:
        value = _sequential_engine(panel, regime, horizon, outcome_learner,
                                   seed, None, Q_TRUNCATION, info=info)
        return Estimate(method="ts", learner=outcome_learner, regime=regime.kind,
                        horizon=horizon, value=value, truth=truth,
                        diagnostics=info)

    props = propensities
    if props is None:
        props = fit_propensities(panel, m_max=horizon, restrict="all_uncensored")
    wtab = cumulative_weights(panel, props, regime, m_max=horizon,
                              truncation=truncation)

    K = horizon
    q = np.full(panel.n, np.nan)
    last = at_risk(panel, K + 1)
    q[last] = panel.y[last, K + 1]

    for m in range(K, -1, -1):
        fit_idx = at_risk(panel, m + 1)
        pred_idx = at_risk(panel, m)
        w_fit = normalize_weights(wtab.w[fit_idx, m])
        w_pred = normalize_weights(wtab.w_md[pred_idx, m])

        Xf = history_features(panel, m + 1, include_current_l=True,
                              include_current_y=False, idx=fit_idx).X
        step_seed = _step_seed(seed, m)
        if weight_mode == "feature":
            model = _fit_outcome(outcome_learner, np.hstack([Xf, w_fit[:, None]]),
                                 q[fit_idx], step_seed)
        else:
            model = _fit_outcome(outcome_learner, Xf, q[fit_idx], step_seed,
                                 sample_weight=w_fit)

        t_prev = panel.t[pred_idx, m - 1] if m > 0 else np.zeros(pred_idx.size)
        d_m = regime_decision(regime, panel.l1[pred_idx, m],
                              panel.l2[pred_idx, m], panel.l3[pred_idx, m],
                              t_prev)
        path = panel.t[pred_idx, :m + 1].copy()
        path[:, m] = d_m
        Xp = _design_with_path(panel, m + 1, pred_idx, path)
        if weight_mode == "feature":
            q_pred = model.predict(np.hstack([Xp, w_pred[:, None]]))
        else:
            q_pred = model.predict(Xp)
        if isinstance(model, _DklOutcome):
            info.setdefault("dkl_pred_var", {})[m] = model.last_var_mean
        q_new = np.full(panel.n, np.nan)
        q_new[pred_idx] = np.asarray(q_pred, dtype=float)
        q = q_new

    value = float(np.mean(q[at_risk(panel, 0)]))
    return Estimate(method="ts", learner=outcome_learner, regime=regime.kind,
                    horizon=horizon, value=value, truth=truth, diagnostics=info)


def estimate_iptw(panel: Panel, regime: RegimeSpec, horizon: int,
                  propensities=None, truncation=DEFAULT_TRUNCATION,
                  hajek: bool = True, truth: float = None) -> Estimate:
    """Inverse-probability-weighted mean of Y_{K+1} over uncensored regime
    followers; Hajek (normalized) form by default, Horvitz-Thompson otherwise."""
    _check_horizon(panel, horizon)
    K = horizon
    props = propensities
    if props is None:
        props = fit_propensities(panel, m_max=K, regime=regime,
                                 restrict="regime_followers")
    followers = np.flatnonzero(regime_followers(panel, regime, K))
    if followers.size == 0:
        raise EstimationError(f"no uncensored regime followers at k={K}")
    g = eval_regime_g(panel, regime, props, K, idx=followers, truncation=truncation)
    w = 1.0 / g
    y = panel.y[followers, K + 1]
    if hajek:
        value = float(normalize_weights(w) @ y)
    else:
        value = float(np.sum(w * y) / panel.n)
    info = {"n_followers": int(followers.size),
            "max_weight": float(w.max()),
            "ess": float(w.sum() ** 2 / np.sum(w ** 2))}
    return Estimate(method="iptw", learner=None, regime=regime.kind,
                    horizon=horizon, value=value, truth=truth, diagnostics=info)


def estimate_msm(panel: Panel, horizon: int, regimes=CANONICAL_REGIMES,
                 truncation=None, propensity_map: dict = None,
                 truths: dict = None) -> dict:
    """Marginal structural model pooled over regimes.

    Regresses Y_{K+1} on the cumulative treatment count by weighted least
    squares over the pooled follower sets (a subject may enter once per
    regime it follows), with normalized inverse regime probabilities as
    weights.  The weights are raw products (no per-step truncation by
    default), so a handful of improbable histories can dominate the fit —
    this baseline is deliberately fragile.  Each regime's estimate evaluates
    the fitted line at that regime's cumulative treatment (mean observed
    count among its followers).  Returns {regime kind: Estimate}; regimes
    whose nuisance fits or follower sets are empty are skipped and noted in
    every returned diagnostics.
    """
    _check_horizon(panel, horizon)
    K = horizon
    rows_w, rows_y, rows_cum = [], [], []
    cum_by_kind, n_by_kind, skipped = {}, {}, {}

    for reg in regimes:
        try:
            props = None
            if propensity_map is not None:
                props = propensity_map.get(reg.kind)
            if props is None:
                props = fit_propensities(panel, m_max=K, regime=reg,
                                         restrict="regime_followers")
            followers = np.flatnonzero(regime_followers(panel, reg, K))
            if followers.size == 0:
                raise EstimationError(f"no uncensored regime followers at k={K}")
            g = eval_regime_g(panel, reg, props, K, idx=followers,
                              truncation=truncation)
        except EstimationError as exc:
            skipped[reg.kind] = str(exc)
            continue
        cum = np.sum(panel.t[followers, :K + 1], axis=1)
        rows_w.append(1.0 / g)
        rows_y.append(panel.y[followers, K + 1])
        rows_cum.append(cum)
        cum_by_kind[reg.kind] = float(cum.mean())
        n_by_kind[reg.kind] = int(followers.size)

    if not rows_w:
        raise EstimationError("msm: no regime contributed any followers")
    w = np.concatenate(rows_w)
    y = np.concatenate(rows_y)
    cum = np.concatenate(rows_cum)
    if np.unique(cum).size < 2:
        raise EstimationError("msm: pooled cumulative treatment is constant "
                              "(rank-deficient design)")
    model = fit_wls(cum[:, None], y, weights=normalize_weights(w))
    theta0, theta1 = float(model.coef[0]), float(model.coef[1])

    out = {}
    for reg in regimes:
        if reg.kind in skipped:
            continue
        if reg.kind == "always_treat":
            target = float(K + 1)
        elif reg.kind == "never_treat":
            target = 0.0
        else:
            target = cum_by_kind[reg.kind]
        info = {"theta": (theta0, theta1), "cum": target,
                "n_followers": n_by_kind[reg.kind],
                "pooled_rows": int(w.size)}
        if skipped:
            info["skipped"] = dict(skipped)
        truth = None if truths is None else truths.get(reg.kind)
        out[reg.kind] = Estimate(method="msm", learner=None, regime=reg.kind,
                                 horizon=K, value=theta0 + theta1 * target,
                                 truth=truth, diagnostics=info)
    return out


def run_estimator(config: EstimatorConfig, panel: Panel, regime: RegimeSpec,
                  horizon: int, propensities=None, truth: float = None) -> Estimate:
    """Dispatch one estimator cell from a config bundle."""
    method = config.method
    learner = config.outcome_learner or DEFAULT_LEARNER.get(method)
    t0 = time.perf_counter()
    if method == "seq_g":
        est = estimate_seq_g(panel, regime, horizon, learner=learner,
                             seed=config.seed, outcome_bounds=config.outcome_bounds,
                             q_truncation=config.q_truncation, truth=truth)
    elif method == "ltmle":
        bounds = config.outcome_bounds if config.outcome_bounds is not None else LTMLE_BOUNDS
        est = estimate_ltmle(panel, regime, horizon, learner=learner,
                             seed=config.seed, outcome_bounds=bounds,
                             q_truncation=config.q_truncation,
                             g_truncation=config.truncation,
                             propensities=propensities,
                             force_epsilon_zero=config.force_epsilon_zero,
                             truth=truth)
    elif method == "ts":
        est = estimate_ts(panel, regime, horizon, outcome_learner=learner,
                          seed=config.seed, truncation=config.truncation,
                          unit_weights=config.unit_weights,
                          weight_mode=config.weight_mode,
                          propensities=propensities, truth=truth)
    elif method == "iptw":
        est = estimate_iptw(panel, regime, horizon, propensities=propensities,
                            truncation=config.truncation, hajek=config.hajek,
                            truth=truth)
    elif method == "msm":
        # msm keeps its raw-weight default; config.truncation governs the
        # per-step clipped methods only.
        table = estimate_msm(panel, horizon, propensity_map=propensities,
                             truths=None if truth is None else {regime.kind: truth})
        if regime.kind not in table:
            raise EstimationError(f"msm could not estimate regime {regime.kind}")
        est = table[regime.kind]
    else:
        raise InvalidParameterError(f"unknown method {method!r}")
    est.diagnostics["runtime_s"] = round(time.perf_counter() - t0, 4)
    return est
