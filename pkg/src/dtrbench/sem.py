"""Structural simulation of an HIV-like longitudinal treatment process.

Generates panels of CD4 count (L1), CD4% (L2), weight-for-age z-score (L3),
an HAZ outcome (Y), an absorbing binary treatment (T) and monotone censoring
(C), all driven by a fixed system of structural equations: truncated-normal
covariate updates, logistic treatment-initiation and censoring hazards, and a
floor of 0.05 on the per-step censoring probability. The same machinery run
with censoring switched off and treatment set by a regime yields interventional
ground-truth counterfactual means.

Within a time step k the variables are generated in the order
L_k -> C_k -> Y_k -> T_k; everyone starts untreated (T at time -1 is 0) and
uncensored (C_0 = 0). Out-of-range truncated-normal draws are replaced by a
uniform draw from a per-variable replacement interval rather than re-drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataIntegrityError, InvalidParameterError
from .panel import Panel

# (a, b, a1, a2, b1, b2): truncation bounds and the uniform replacement
# intervals used below a and above b respectively.
TRUNCATION_REPLACEMENTS: dict[str, tuple] = {
    "L1": (0.0, 10000.0, 0.0, 50.0, 5000.0, 10000.0),
    "L2": (0.06, 0.8, 0.03, 0.09, 0.7, 0.8),
    "L3": (-5.0, 5.0, -10.0, 3.0, 3.0, 10.0),
    "Y": (-5.0, 5.0, -10.0, 3.0, 3.0, 10.0),
}

REGIME_KINDS = ("always_treat", "threshold_750", "threshold_350", "never_treat")

_CHUNK = 32768
_OBS_SALT = 0  # observational and interventional runs use disjoint streams
_INT_SALT = 1


@dataclass(frozen=True)
class SimSpec:
    """Size, horizon (time points 0..K+1) and seeding of one simulation."""

    n_subjects: int
    horizon: int
    seed: int
    truncation_replacements: dict = field(
        default_factory=lambda: dict(TRUNCATION_REPLACEMENTS))

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise InvalidParameterError("n_subjects must be positive")
        if self.horizon < 0:
            raise InvalidParameterError("horizon K must be >= 0")
        if self.seed < 0:
            raise InvalidParameterError("seed must be a non-negative integer")
        for key in ("L1", "L2", "L3", "Y"):
            if key not in self.truncation_replacements:
                raise InvalidParameterError(f"missing truncation bounds for {key}")
            a, b, a1, a2, b1, b2 = self.truncation_replacements[key]
            if not (a < b and a1 <= a2 and b1 <= b2):
                raise InvalidParameterError(f"inconsistent truncation bounds for {key}")


@dataclass(frozen=True)
class RegimeSpec:
    """Treatment rule d_k(history) with the censoring intervention fixed at 0.

    Threshold rules treat as soon as any clause fires — CD4 count below
    `cd4_threshold`, CD4% below `cd4pct_threshold`, WAZ below `waz_threshold`
    — and are absorbing through the prior-treatment clause. Boundary values
    (exactly at a threshold) do not fire.
    """

    kind: str
    cd4_threshold: float | None = None
    cd4pct_threshold: float | None = None
    waz_threshold: float | None = None

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise InvalidParameterError(f"unknown regime kind {self.kind!r}")


def make_regime(kind: str) -> RegimeSpec:
    if kind == "threshold_750":
        return RegimeSpec(kind, cd4_threshold=750.0, cd4pct_threshold=0.25, waz_threshold=-2.0)
    if kind == "threshold_350":
        return RegimeSpec(kind, cd4_threshold=350.0, cd4pct_threshold=0.15, waz_threshold=-2.0)
    return RegimeSpec(kind)


CANONICAL_REGIMES = tuple(make_regime(kind) for kind in REGIME_KINDS)


@dataclass(frozen=True)
class GroundTruth:
    """Monte Carlo counterfactual mean of Y at time point horizon+1."""

    regime: RegimeSpec
    horizon: int
    value: float
    mc_samples: int
    mc_standard_error: float


def draw_truncated_normal(mu: float, sigma: float, bounds: tuple,
                          replacement: tuple, rng: np.random.Generator) -> float:
    """Normal draw with out-of-range values replaced by uniform draws.

    A draw below bounds[0] is replaced by U(replacement[0], replacement[1]);
    one above bounds[1] by U(replacement[2], replacement[3]).
    """
    a, b = bounds
    a1, a2, b1, b2 = replacement
    if sigma < 0:
        raise InvalidParameterError("sigma must be >= 0")
    if not (a < b and a1 <= a2 and b1 <= b2):
        raise InvalidParameterError("inconsistent truncation bounds")
    x = rng.normal(mu, sigma)
    if x < a:
        return float(rng.uniform(a1, a2))
    if x > b:
        return float(rng.uniform(b1, b2))
    return float(x)


def _tnorm(rng: np.random.Generator, mu, sigma, repl: tuple) -> np.ndarray:
    """Vectorized truncated-normal-with-replacement draw.

    Always consumes one normal and one uniform variate per element so the
    stream position never depends on which draws were out of range.
    """
    a, b, a1, a2, b1, b2 = repl
    x = rng.normal(mu, sigma)
    u = rng.random(x.shape)
    x = np.where(x < a, a1 + u * (a2 - a1), x)
    x = np.where(x > b, b1 + u * (b2 - b1), x)
    return x


def _treatment_logit(l1, l2, l3, k: int):
    return -2.4 + 0.015 * (750.0 - l1) + 5.0 * (0.2 - l2) - 0.8 * l3 + 0.8 * k


def _censoring_prob(l1, l2, l3, t_prev):
    p = expit(-6.0 + 0.01 * (750.0 - l1) + 1.0 * (0.2 - l2) - 0.65 * l3 - t_prev)
    return np.maximum(p, 0.05)  # per-step censoring hazard is floored


def true_treatment_prob(l1, l2, l3, t_prev, k: int) -> np.ndarray:
    """P(T_k = 1 | history) under the generating process (absorbing)."""
    return np.where(np.asarray(t_prev) == 1.0, 1.0, expit(_treatment_logit(l1, l2, l3, k)))


def true_retention_prob(l1, l2, l3, t_prev) -> np.ndarray:
    """P(C_k = 0 | history) under the generating process."""
    return 1.0 - _censoring_prob(l1, l2, l3, t_prev)


def regime_decision(regime: RegimeSpec, l1, l2, l3, t_prev):
    """Treatment decision d_k for one regime; vectorizes over array inputs.

    Raises DataIntegrityError when any required covariate is missing.
    """
    l1, l2, l3, t_prev = (np.asarray(x, dtype=np.float64) for x in (l1, l2, l3, t_prev))
    for name, arr in (("L1", l1), ("L2", l2), ("L3", l3), ("T_prev", t_prev)):
        if np.isnan(arr).any():
            raise DataIntegrityError(f"regime decision on missing {name}")
    if regime.kind == "always_treat":
        return np.ones(np.broadcast(l1, l2, l3, t_prev).shape)
    if regime.kind == "never_treat":
        return np.zeros(np.broadcast(l1, l2, l3, t_prev).shape)
    fire = ((l1 < regime.cd4_threshold)
            | (l2 < regime.cd4pct_threshold)
            | (l3 < regime.waz_threshold)
            | (t_prev == 1.0))
    return fire.astype(np.float64)


def _block_rng(seed: int, block: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, block, salt]))


def _simulate_block(rng: np.random.Generator, m: int, K: int, repl: dict,
                    regime: RegimeSpec | None):
    """Generate m trajectories; with a regime, censoring and treatment are intervened.

    Returns raw (unmasked) arrays; censored subjects keep evolving internally
    and are masked by the caller.
    """
    n_times = K + 2
    l1 = np.empty((m, n_times)); l2 = np.empty((m, n_times))
    l3 = np.empty((m, n_times)); y = np.empty((m, n_times))
    t = np.full((m, n_times), np.nan)
    c = np.zeros((m, n_times), dtype=np.int8)

    observational = regime is None
    v1 = (rng.random(m) < 4392.0 / 5826.0).astype(np.float64)
    p_v2 = np.where(v1 == 1.0, 2222.0 / 4392.0, 758.0 / 1434.0)
    v2 = (rng.random(m) < p_v2).astype(np.float64)
    v3 = rng.uniform(1.0, 5.0, m)

    l1[:, 0] = _tnorm(rng, np.where(v1 == 1.0, 650.0, 720.0),
                      np.where(v1 == 1.0, 350.0, 400.0), repl["L1"])
    l1_base = (l1[:, 0] - 671.7468) / (10.0 * 352.2788) + 1.0
    l2[:, 0] = _tnorm(rng, 0.16 + 0.05 * (l1[:, 0] - 650.0) / 650.0, 0.07, repl["L2"])
    l2_base = (l2[:, 0] - 0.1648594) / (10.0 * 0.06980332) + 1.0
    mu3 = (np.where(v1 == 1.0, -1.65, -2.05) + 0.1 * v3
           + 0.05 * (l1[:, 0] - 650.0) / 650.0 + 0.05 * (l2[:, 0] - 16.0) / 16.0)
    l3[:, 0] = _tnorm(rng, mu3, 1.0, repl["L3"])
    # C_0 ~ B(p=0): everyone enters uncensored, no variate consumed.
    y[:, 0] = _tnorm(rng, -2.6 + 0.1 * (v3 > 2.0) + 0.3 * (v1 == 0.0)
                     + (l3[:, 0] + 1.45), 1.1, repl["Y"])
    if observational:
        p_t = expit(_treatment_logit(l1[:, 0], l2[:, 0], l3[:, 0], 0))
        t[:, 0] = (rng.random(m) < p_t).astype(np.float64)
    else:
        t[:, 0] = regime_decision(regime, l1[:, 0], l2[:, 0], l3[:, 0], np.zeros(m))

    sqrt_l1_base = np.sqrt(l1_base)
    sqrt_l2_base = np.sqrt(l2_base)
    y_shift = l3[:, 0] + 1.5135

    for k in range(1, K + 2):
        l1p, l2p, l3p, yp = l1[:, k - 1], l2[:, k - 1], l3[:, k - 1], y[:, k - 1]
        tp = t[:, k - 1]
        tpp = t[:, k - 2] if k >= 2 else np.zeros(m)

        if k <= 4:
            mu1 = 13.0 * np.log(k * (1034.0 - 662.0) / 8.0) + l1p + 2.0 * l2p + 2.0 * l3p + 2.5 * tp
        elif k <= 8:
            mu1 = 4.0 * np.log(k * (1034.0 - 662.0) / 8.0) + l1p + 2.0 * l2p + 2.0 * l3p + 2.5 * tp
        else:
            mu1 = l1p + 2.0 * l2p + 2.0 * l3p + 2.0 * l3p + 2.5 * tp
        l1[:, k] = _tnorm(rng, mu1, 50.0, repl["L1"])
        dl1 = l1[:, k] - l1p

        l2[:, k] = _tnorm(rng, l2p + 0.0003 * dl1 + 0.0005 * l3p
                          + 0.0005 * tp * l1_base, 0.02, repl["L2"])
        dl2 = l2[:, k] - l2p

        l3[:, k] = _tnorm(rng, l3p + 0.0017 * dl1 + 0.2 * dl2
                          + 0.005 * np.square(tp) * l2_base, 0.5, repl["L3"])
        dl3 = l3[:, k] - l3p

        if observational:
            hazard = _censoring_prob(l1[:, k], l2[:, k], l3[:, k], tp)
            newly = (rng.random(m) < hazard).astype(np.int8)
            c[:, k] = np.maximum(c[:, k - 1], newly)

        mu_y = (yp + 0.00005 * dl1 - 0.000001 * np.square(dl1 * sqrt_l1_base)
                + 0.01 * dl2 - 0.0001 * np.square(dl2 * sqrt_l2_base)
                + 0.07 * (dl3 * y_shift) - 0.001 * np.square(dl3 * y_shift)
                + 0.005 * tp + 0.075 * tpp + 0.05 * tp * tpp)
        y[:, k] = _tnorm(rng, mu_y, 2.5, repl["Y"])

        if k <= K:
            if observational:
                p_t = expit(_treatment_logit(l1[:, k], l2[:, k], l3[:, k], k))
                t[:, k] = np.where(tp == 1.0, 1.0, (rng.random(m) < p_t).astype(np.float64))
            else:
                t[:, k] = regime_decision(regime, l1[:, k], l2[:, k], l3[:, k], tp)

    v = np.column_stack([v1, v2, v3])
    return v, l1, l2, l3, c, y, t


def simulate_panel(spec: SimSpec) -> Panel:
    """Observational panel of spec.n_subjects trajectories over 0..K+1."""
    n, K = spec.n_subjects, spec.horizon
    n_times = K + 2
    v = np.empty((n, 3))
    l1 = np.empty((n, n_times)); l2 = np.empty((n, n_times))
    l3 = np.empty((n, n_times)); y = np.empty((n, n_times))
    t = np.empty((n, n_times)); c = np.empty((n, n_times), dtype=np.int8)

    for block, start in enumerate(range(0, n, _CHUNK)):
        stop = min(start + _CHUNK, n)
        rng = _block_rng(spec.seed, block, _OBS_SALT)
        bv, bl1, bl2, bl3, bc, by, bt = _simulate_block(
            rng, stop - start, K, spec.truncation_replacements, regime=None)
        v[start:stop] = bv
        l1[start:stop] = bl1; l2[start:stop] = bl2; l3[start:stop] = bl3
        c[start:stop] = bc; y[start:stop] = by; t[start:stop] = bt

    # Mask everything after the first censored time; covariates at that time stay.
    hit = c == 1
    fc = np.where(hit.any(axis=1), hit.argmax(axis=1), n_times)[:, None]
    grid = np.arange(n_times)[None, :]
    for arr in (l1, l2, l3):
        arr[grid > fc] = np.nan
    y[grid >= fc] = np.nan
    t[grid >= fc] = np.nan
    t[:, -1] = np.nan
    c[grid > fc] = 1  # monotone by construction; make it explicit

    return Panel(ids=np.arange(n, dtype=np.int64), v=v,
                 l1=l1, l2=l2, l3=l3, c=c, y=y, t=t)


def counterfactual_truth_curve(spec: SimSpec, regime: RegimeSpec,
                               mc_samples: int) -> list[GroundTruth]:
    """Interventional means E[Y_k^(regime, no censoring)] for k = 1..K+1.

    Simulates mc_samples trajectories with censoring forced off and treatment
    assigned by the regime; all other structural equations are untouched.
    The GroundTruth at index j covers time point j+1 (horizon j).
    """
    if mc_samples < 1:
        raise InvalidParameterError("mc_samples must be positive")
    K = spec.horizon
    total = np.zeros(K + 2)
    total_sq = np.zeros(K + 2)
    done = 0
    block = 0
    while done < mc_samples:
        m = min(_CHUNK, mc_samples - done)
        rng = _block_rng(spec.seed, block, _INT_SALT)
        _, _, _, _, _, by, _ = _simulate_block(
            rng, m, K, spec.truncation_replacements, regime=regime)
        total += by.sum(axis=0)
        total_sq += np.square(by).sum(axis=0)
        done += m
        block += 1
    mean = total / mc_samples
    if mc_samples > 1:
        var = (total_sq - mc_samples * np.square(mean)) / (mc_samples - 1)
        se = np.sqrt(np.maximum(var, 0.0) / mc_samples)
    else:
        se = np.full(K + 2, np.inf)
    return [GroundTruth(regime=regime, horizon=k - 1, value=float(mean[k]),
                        mc_samples=mc_samples, mc_standard_error=float(se[k]))
            for k in range(1, K + 2)]


def counterfactual_truth(spec: SimSpec, regime: RegimeSpec, mc_samples: int) -> GroundTruth:
    """Counterfactual mean of Y at time point K+1 under the regime."""
    return counterfactual_truth_curve(spec, regime, mc_samples)[-1]


def follows_regime(trajectory, regime: RegimeSpec, k: int) -> bool:
    """True iff the subject is uncensored at k+1 and took d_j at every j <= k."""
    if trajectory.c[k + 1] != 0:
        return False
    for j in range(k + 1):
        t_prev = trajectory.t[j - 1] if j > 0 else 0.0
        d = regime_decision(regime, trajectory.l1[j], trajectory.l2[j],
                            trajectory.l3[j], t_prev)
        if trajectory.t[j] != float(d):
            return False
    return True


def regime_followers(panel: Panel, regime: RegimeSpec, k: int) -> np.ndarray:
    """Boolean mask over subjects: uncensored at k+1 and consistent with the regime through k."""
    if not 0 <= k + 1 <= panel.K + 1:
        raise DataIntegrityError(f"horizon {k} outside the panel")
    mask = panel.c[:, k + 1] == 0
    idx = np.flatnonzero(mask)
    agree = np.ones(idx.size, dtype=bool)
    for j in range(k + 1):
        t_prev = panel.t[idx, j - 1] if j > 0 else np.zeros(idx.size)
        d = regime_decision(regime, panel.l1[idx, j], panel.l2[idx, j],
                            panel.l3[idx, j], t_prev)
        agree &= panel.t[idx, j] == d
    out = np.zeros(panel.n, dtype=bool)
    out[idx[agree]] = True
    return out


def regime_path(panel: Panel, regime: RegimeSpec, k: int, idx: np.ndarray) -> np.ndarray:
    """Prescribed decisions d_0..d_k along each subject's observed covariates.

    The prior-treatment clause uses the prescribed (not observed) previous
    decision, so the path is the regime's own trajectory given the subject's
    covariate history. Rows must have covariates observed through time k.
    """
    idx = np.asarray(idx, dtype=np.int64)
    d = np.zeros((idx.size, k + 1))
    d_prev = np.zeros(idx.size)
    for j in range(k + 1):
        d_prev = regime_decision(regime, panel.l1[idx, j], panel.l2[idx, j],
                                 panel.l3[idx, j], d_prev)
        d[:, j] = d_prev
    return d
