"""Hand-enumerable two-period generator for estimator oracle tests.

Every probability is a dyadic rational and the panel is built by exact
enumeration (each configuration repeated `n * p` times), so empirical cell
frequencies equal the generator probabilities with no sampling error and
estimator output can be compared against closed-form sums at float precision.

The covariate chain is exogenous to treatment (L_1 depends on L_0 only):
the iterated estimators condition on covariates measured after each
treatment, so their plug-in factorization matches the closed-form sum
exactly only when treatment does not feed back into L.  Outcomes Y_1 and
Y_2 do depend on treatment, which keeps the regimes' values distinct.

Binary codings: L uses the CD4-like column with LOW=500 (below every
regime threshold) and HIGH=900 (above); the other covariate columns are
constant and never fire a threshold rule.
"""

import itertools

import numpy as np

from dtrbench.panel import Panel

LOW, HIGH = 500.0, 900.0
N_TOY = 4096  # LCM of every configuration probability's denominator


def p_l0_low() -> float:
    return 1 / 2


def p_t0(l0: float, all_treated: bool = False) -> float:
    if all_treated:
        return 1.0
    return 1 / 2 if l0 == LOW else 1 / 4


def p_l1_low(l0: float) -> float:
    # No t0 argument on purpose: the covariate chain must stay exogenous.
    return 3 / 4 if l0 == LOW else 1 / 4


def p_y1(l0: float, t0: float, l1: float) -> float:
    k = 1 + (int(l0 == LOW) + int(t0 == 1.0) + int(l1 == LOW)) % 3
    return k / 4


def p_t1(l1: float, t0: float, all_treated: bool = False) -> float:
    if all_treated or t0 == 1.0:  # treatment is absorbing in the data too
        return 1.0
    return 3 / 4 if l1 == LOW else 1 / 4


def p_y2(l0: float, l1: float, y1: float, t0: float, t1: float) -> float:
    s = int(l0 == LOW) + 2 * int(t0 == 1.0) + 3 * int(t1 == 1.0) \
        + int(l1 == LOW) * int(y1 == 1.0)
    return (1 + s % 7) / 8


def config_probability(l0, t0, l1, y1, t1, y2, all_treated=False) -> float:
    p = p_l0_low() if l0 == LOW else 1 - p_l0_low()
    p *= p_t0(l0, all_treated) if t0 == 1.0 else 1 - p_t0(l0, all_treated)
    p *= p_l1_low(l0) if l1 == LOW else 1 - p_l1_low(l0)
    p *= p_y1(l0, t0, l1) if y1 == 1.0 else 1 - p_y1(l0, t0, l1)
    p *= p_t1(l1, t0, all_treated) if t1 == 1.0 else 1 - p_t1(l1, t0, all_treated)
    p *= p_y2(l0, l1, y1, t0, t1) if y2 == 1.0 else 1 - p_y2(l0, l1, y1, t0, t1)
    return p


def build_toy_panel(all_treated: bool = False) -> Panel:
    """Uncensored two-period panel realizing the generator exactly."""
    rows = []
    for cfg in itertools.product((LOW, HIGH), (0.0, 1.0), (LOW, HIGH),
                                 (0.0, 1.0), (0.0, 1.0), (0.0, 1.0)):
        p = config_probability(*cfg, all_treated=all_treated)
        count = p * N_TOY
        assert abs(count - round(count)) < 1e-9, "non-integer configuration count"
        rows.extend([cfg] * int(round(count)))
    assert len(rows) == N_TOY
    arr = np.array(rows)  # columns: l0, t0, l1, y1, t1, y2
    n = arr.shape[0]
    nan = np.full(n, np.nan)
    return Panel(
        ids=np.arange(n),
        v=np.zeros((n, 3)),
        l1=np.column_stack([arr[:, 0], arr[:, 2], np.full(n, 700.0)]),
        l2=np.full((n, 3), 0.5),
        l3=np.zeros((n, 3)),
        c=np.zeros((n, 3), dtype=np.int8),
        y=np.column_stack([np.zeros(n), arr[:, 3], arr[:, 5]]),
        t=np.column_stack([arr[:, 1], arr[:, 4], nan]),
    )


def _decision(kind: str, l: float, t_prev: float) -> float:
    if kind == "always_treat":
        return 1.0
    if kind == "never_treat":
        return 0.0
    # Both threshold regimes reduce to "treat when CD4 is LOW" here and
    # treatment is absorbing once started.
    return 1.0 if (l == LOW or t_prev == 1.0) else 0.0


def enumerate_counterfactual_mean(kind: str, all_treated: bool = False) -> float:
    """Closed-form counterfactual mean of Y_2 under the regime.

    Direct sum of E[Y_2 | history, treatment path fixed by the regime]
    over the covariate/outcome chain: sum over l0, l1, y1 of
    P(l0) P(l1|l0) P(y1|l0,d0,l1) p_y2(..., d0, d1).
    """
    psi = 0.0
    for l0 in (LOW, HIGH):
        d0 = _decision(kind, l0, 0.0)
        pl0 = p_l0_low() if l0 == LOW else 1 - p_l0_low()
        for l1 in (LOW, HIGH):
            d1 = _decision(kind, l1, d0)
            pl1 = p_l1_low(l0) if l1 == LOW else 1 - p_l1_low(l0)
            for y1 in (0.0, 1.0):
                py1 = p_y1(l0, d0, l1) if y1 == 1.0 else 1 - p_y1(l0, d0, l1)
                psi += pl0 * pl1 * py1 * p_y2(l0, l1, y1, d0, d1)
    return psi
