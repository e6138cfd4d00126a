"""Inverse-probability weights for longitudinal treatment and censoring.

Two weighting products are maintained per subject and time point m:

* ``W_m`` follows the observed treatment arm at every step and the observed
  censoring factors through m+1.
* ``Wmd_m`` replaces the factor at step m only: the treatment factor is
  evaluated at the regime's decision d_m, and the last censoring factor has
  T_m set to d_m in its covariates.  Earlier steps keep the observed history,
  so Wmd_m == W_m exactly whenever the observed T_m equals d_m.

Per-step probabilities are truncated into [lo, hi] before multiplication;
cumulative products are never truncated directly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, InvalidParameterError
from .panel import Panel, at_risk, history_features
from .regress import fit_logistic
from .sem import RegimeSpec, regime_decision, regime_path, true_retention_prob, true_treatment_prob

DEFAULT_TRUNCATION = (0.1, 0.9)

RESTRICT_MODES = ("all_uncensored", "regime_followers")


def truncate_probability(p, lo: float = 0.1, hi: float = 0.9):
    """Clip probabilities into [lo, hi]."""
    if not 0.0 <= lo < hi <= 1.0:
        raise InvalidParameterError(f"invalid truncation bounds ({lo}, {hi})")
    return np.clip(p, lo, hi)


def _truncate(p, truncation):
    if truncation is None:
        return np.asarray(p, dtype=float)
    return truncate_probability(p, truncation[0], truncation[1])


def consistency_mask(panel: Panel, regime: RegimeSpec, m: int) -> np.ndarray:
    """Boolean mask: uncensored at m and observed T_j = d_j for all j <= m.

    Decisions are evaluated on the observed history (observed prior treatment
    feeds the absorbing clause), matching the conditioning sets of the
    regime-specific nuisance fits.
    """
    idx = at_risk(panel, m)
    ok = np.ones(idx.size, dtype=bool)
    for j in range(m + 1):
        t_prev = panel.t[idx, j - 1] if j > 0 else np.zeros(idx.size)
        d_j = regime_decision(regime, panel.l1[idx, j], panel.l2[idx, j],
                              panel.l3[idx, j], t_prev)
        ok &= panel.t[idx, j] == d_j
    mask = np.zeros(panel.n, dtype=bool)
    mask[idx[ok]] = True
    return mask


def _design(panel: Panel, k: int, include_current_y: bool, idx: np.ndarray,
            t_path) -> np.ndarray:
    dm = history_features(panel, k, include_current_l=True,
                          include_current_y=include_current_y, idx=idx)
    X = dm.X
    if t_path is not None:
        t_path = np.asarray(t_path, dtype=float)
        if t_path.shape != (idx.size, k):
            raise InvalidParameterError(
                f"t_path shape {t_path.shape} does not match ({idx.size}, {k})")
        for j in range(t_path.shape[1]):
            X[:, dm.columns.index(f"T_{j}")] = t_path[:, j]
    return X


@dataclass(frozen=True)
class PropensitySet:
    """Fitted treatment and censoring hazards, indexed by time point.

    ``treatment[m]`` models P(T_m = 1 | V, L-bar_m, Y-bar_m, T-bar_{m-1}) and
    ``censoring[m]`` models P(C_{m+1} = 0 | V, L-bar_{m+1}, Y-bar_m, T-bar_m),
    both among subjects uncensored at m (optionally restricted to regime
    followers through the conditioning treatments).
    """

    treatment: tuple
    censoring: tuple
    restrict: str = "all_uncensored"

    @property
    def m_max(self) -> int:
        return len(self.treatment) - 1

    def treatment_prob(self, panel: Panel, m: int, idx: np.ndarray,
                       t_path=None) -> np.ndarray:
        """P(T_m = 1 | history) for rows idx; t_path (len(idx), m) overrides
        the observed treatment columns T_0..T_{m-1}."""
        X = _design(panel, m, include_current_y=True, idx=idx, t_path=t_path)
        return self.treatment[m].predict_proba(X)

    def retention_prob(self, panel: Panel, m: int, idx: np.ndarray,
                       t_path=None) -> np.ndarray:
        """P(C_{m+1} = 0 | history) for rows idx; t_path (len(idx), m+1)
        overrides the observed treatment columns T_0..T_m."""
        X = _design(panel, m + 1, include_current_y=False, idx=idx, t_path=t_path)
        return self.censoring[m].predict_proba(X)


class OraclePropensities:
    """Generating-process hazards with the PropensitySet prediction interface.

    Useful for isolating weighting and estimation error from nuisance-model
    misspecification.
    """

    restrict = "oracle"

    def treatment_prob(self, panel: Panel, m: int, idx: np.ndarray,
                       t_path=None) -> np.ndarray:
        if m > 0:
            t_prev = t_path[:, m - 1] if t_path is not None else panel.t[idx, m - 1]
        else:
            t_prev = np.zeros(idx.size)
        return true_treatment_prob(panel.l1[idx, m], panel.l2[idx, m],
                                   panel.l3[idx, m], t_prev, m)

    def retention_prob(self, panel: Panel, m: int, idx: np.ndarray,
                       t_path=None) -> np.ndarray:
        t_m = t_path[:, m] if t_path is not None else panel.t[idx, m]
        return true_retention_prob(panel.l1[idx, m + 1], panel.l2[idx, m + 1],
                                   panel.l3[idx, m + 1], t_m)


def fit_propensities(panel: Panel, m_max: int = None, regime: RegimeSpec = None,
                     restrict: str = "all_uncensored") -> PropensitySet:
    """Fit per-step logistic treatment and censoring models.

    restrict="all_uncensored" fits each step on every subject uncensored at
    that step; restrict="regime_followers" additionally requires the observed
    treatments to match the regime through the conditioning horizon (m-1 for
    the treatment model at m, m for the censoring model at m).
    """
    if restrict not in RESTRICT_MODES:
        raise InvalidParameterError(f"unknown restrict mode {restrict!r}")
    if restrict == "regime_followers" and regime is None:
        raise InvalidParameterError("restrict='regime_followers' requires a regime")
    if m_max is None:
        m_max = panel.K
    if not 0 <= m_max <= panel.K:
        raise InvalidParameterError(f"m_max={m_max} outside 0..{panel.K}")

    treatment = []
    censoring = []
    for m in range(m_max + 1):
        idx = at_risk(panel, m)
        if restrict == "regime_followers" and m > 0:
            keep = consistency_mask(panel, regime, m - 1)[idx]
            idx_t = idx[keep]
        else:
            idx_t = idx
        if idx_t.size == 0:
            raise EstimationError(f"empty fitting stratum for treatment model at m={m}")
        Xt = history_features(panel, m, include_current_l=True,
                              include_current_y=True, idx=idx_t).X
        treatment.append(fit_logistic(Xt, panel.t[idx_t, m]))

        if restrict == "regime_followers":
            keep = consistency_mask(panel, regime, m)[idx]
            idx_c = idx[keep]
        else:
            idx_c = idx
        if idx_c.size == 0:
            raise EstimationError(f"empty fitting stratum for censoring model at m={m}")
        Xc = history_features(panel, m + 1, include_current_l=True,
                              include_current_y=False, idx=idx_c).X
        censoring.append(fit_logistic(Xc, 1.0 - panel.c[idx_c, m + 1]))

    return PropensitySet(treatment=tuple(treatment), censoring=tuple(censoring),
                         restrict=restrict)


def eval_regime_g(panel: Panel, regime: RegimeSpec, propensities, k: int,
                  idx: np.ndarray = None, truncation=DEFAULT_TRUNCATION) -> np.ndarray:
    """Cumulative probability of following the regime and staying uncensored
    through time k+1, evaluated along the regime's treatment path.

    Each treatment factor is the model probability of the prescribed arm d_m
    given the prescribed history d_0..d_{m-1}; each censoring factor is the
    retention probability given d_0..d_m.  Factors are truncated before the
    product; truncation=None disables it.
    """
    if idx is None:
        idx = at_risk(panel, k)
    path = regime_path(panel, regime, k, idx)
    g = np.ones(idx.size)
    for m in range(k + 1):
        p1 = propensities.treatment_prob(panel, m, idx, t_path=path[:, :m])
        arm = np.where(path[:, m] == 1.0, p1, 1.0 - p1)
        g *= _truncate(arm, truncation)
        pr = propensities.retention_prob(panel, m, idx, t_path=path[:, :m + 1])
        g *= _truncate(pr, truncation)
    return g


@dataclass
class WeightTable:
    """Per-subject cumulative weights, one column per time point.

    Entries are NaN for subjects censored at the column's time point.  ``w``
    follows the observed arm; ``w_md`` modifies only the final step's factors
    to the regime decision.  ``normalized`` records whether columns have been
    rescaled to sum to one (raw tables are not).
    """

    ids: np.ndarray
    wt: np.ndarray
    wt_md: np.ndarray
    wc: np.ndarray
    wc_md: np.ndarray
    w: np.ndarray
    w_md: np.ndarray
    normalized: bool = False
    truncation: tuple = DEFAULT_TRUNCATION

    @property
    def m_max(self) -> int:
        return self.w.shape[1] - 1

    def write_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("id,m,W,Wmd\n")
            for i in range(self.ids.size):
                for m in range(self.w.shape[1]):
                    if np.isnan(self.w[i, m]):
                        continue
                    fh.write(f"{int(self.ids[i])},{m},"
                             f"{repr(float(self.w[i, m]))},"
                             f"{repr(float(self.w_md[i, m]))}\n")


def cumulative_weights(panel: Panel, propensities, regime: RegimeSpec,
                       m_max: int = None, truncation=DEFAULT_TRUNCATION) -> WeightTable:
    """Build the observed-arm and last-step-modified weight products.

    For each m the treatment factor multiplies 1/P(arm at m | observed
    history) into the running treatment product, and the censoring factor
    multiplies 1/P(C_{m+1}=0 | observed history).  The modified variants reuse
    the observed products through m-1 and swap only the step-m factors to the
    regime decision d_m (decision evaluated on the observed history), so
    w_md == w exactly on rows where the observed T_m equals d_m.
    """
    if m_max is None:
        m_max = panel.K
    if not 0 <= m_max <= panel.K:
        raise InvalidParameterError(f"m_max={m_max} outside 0..{panel.K}")

    shape = (panel.n, m_max + 1)
    wt = np.full(shape, np.nan)
    wt_md = np.full(shape, np.nan)
    wc = np.full(shape, np.nan)
    wc_md = np.full(shape, np.nan)

    for m in range(m_max + 1):
        idx = at_risk(panel, m)
        prev_t = wt[idx, m - 1] if m > 0 else np.ones(idx.size)
        prev_c = wc[idx, m - 1] if m > 0 else np.ones(idx.size)

        p1 = propensities.treatment_prob(panel, m, idx)
        t_obs = panel.t[idx, m]
        arm_obs = np.where(t_obs == 1.0, p1, 1.0 - p1)
        wt[idx, m] = prev_t / _truncate(arm_obs, truncation)

        t_prev = panel.t[idx, m - 1] if m > 0 else np.zeros(idx.size)
        d_m = regime_decision(regime, panel.l1[idx, m], panel.l2[idx, m],
                              panel.l3[idx, m], t_prev)
        arm_d = np.where(d_m == 1.0, p1, 1.0 - p1)
        wt_md[idx, m] = prev_t / _truncate(arm_d, truncation)

        pr_obs = propensities.retention_prob(panel, m, idx)
        wc[idx, m] = prev_c / _truncate(pr_obs, truncation)

        path_md = panel.t[idx, :m + 1].copy()
        path_md[:, m] = d_m
        pr_md = propensities.retention_prob(panel, m, idx, t_path=path_md)
        wc_md[idx, m] = prev_c / _truncate(pr_md, truncation)

    return WeightTable(ids=panel.ids.copy(), wt=wt, wt_md=wt_md, wc=wc,
                       wc_md=wc_md, w=wt * wc, w_md=wt_md * wc_md,
                       normalized=False, truncation=truncation)


def normalize_weights(w: np.ndarray) -> np.ndarray:
    """Rescale nonnegative weights to sum to one."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise EstimationError("cannot normalize an empty weight vector")
    if not np.all(np.isfinite(w)):
        raise EstimationError("weights contain non-finite values")
    total = w.sum()
    if total <= 0.0:
        raise EstimationError("weights sum to zero")
    return w / total
