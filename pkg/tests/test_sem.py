"""Tests for the data-generating process and counterfactual ground truth."""
import numpy as np
import pytest
from scipy.special import expit

from dtrbench.errors import DataIntegrityError, InvalidParameterError
from dtrbench.sem import (
    CANONICAL_REGIMES,
    REGIME_KINDS,
    SimSpec,
    TRUNCATION_REPLACEMENTS,
    counterfactual_truth,
    counterfactual_truth_curve,
    draw_truncated_normal,
    follows_regime,
    make_regime,
    regime_decision,
    regime_followers,
    regime_path,
    simulate_panel,
)
from dtrbench.panel import at_risk


# ------------------------------------------------------- truncated normals


class _StubRng:
    """Fixed normal draw; uniform draws return the interval midpoint."""

    def __init__(self, normal_value):
        self.normal_value = normal_value
        self.uniform_calls = []

    def normal(self, mu, sigma):
        return self.normal_value

    def uniform(self, a, b):
        self.uniform_calls.append((a, b))
        return (a + b) / 2.0


def test_truncated_normal_in_range_passes_through():
    rng = _StubRng(normal_value=1.25)
    x = draw_truncated_normal(0.0, 1.0, (-5.0, 5.0), (-10.0, 3.0, 3.0, 10.0), rng)
    assert x == 1.25
    assert rng.uniform_calls == []


def test_truncated_normal_below_uses_lower_replacement():
    rng = _StubRng(normal_value=-7.0)
    x = draw_truncated_normal(0.0, 1.0, (-5.0, 5.0), (-10.0, 3.0, 3.0, 10.0), rng)
    assert x == (-10.0 + 3.0) / 2.0
    assert rng.uniform_calls == [(-10.0, 3.0)]


def test_truncated_normal_above_uses_upper_replacement():
    rng = _StubRng(normal_value=6.5)
    x = draw_truncated_normal(0.0, 1.0, (-5.0, 5.0), (-10.0, 3.0, 3.0, 10.0), rng)
    assert x == (3.0 + 10.0) / 2.0
    assert rng.uniform_calls == [(3.0, 10.0)]


def test_truncated_normal_zero_sigma_is_deterministic():
    rng = np.random.default_rng(0)
    assert draw_truncated_normal(2.0, 0.0, (0.0, 5.0), (0.0, 1.0, 4.0, 5.0), rng) == 2.0


def test_truncated_normal_rejects_bad_parameters():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidParameterError):
        draw_truncated_normal(0.0, -1.0, (0.0, 1.0), (0.0, 0.0, 1.0, 1.0), rng)
    with pytest.raises(InvalidParameterError):
        draw_truncated_normal(0.0, 1.0, (1.0, 0.0), (0.0, 0.0, 1.0, 1.0), rng)
    with pytest.raises(InvalidParameterError):
        draw_truncated_normal(0.0, 1.0, (0.0, 1.0), (1.0, 0.0, 1.0, 1.0), rng)


def test_truncated_normal_matches_reference_stream():
    # Re-typed reference with the same variate-consumption order: one normal,
    # then one uniform only when the draw lands outside the bounds.
    bounds, repl = (-5.0, 5.0), (-10.0, 3.0, 3.0, 10.0)
    rng_a = np.random.default_rng(314)
    rng_b = np.random.default_rng(314)
    for _ in range(2000):
        got = draw_truncated_normal(0.0, 4.0, bounds, repl, rng_a)
        x = rng_b.normal(0.0, 4.0)
        if x < bounds[0]:
            x = rng_b.uniform(repl[0], repl[1])
        elif x > bounds[1]:
            x = rng_b.uniform(repl[2], repl[3])
        assert got == x


def test_truncated_normal_support():
    bounds, repl = (-5.0, 5.0), (-10.0, 3.0, 3.0, 10.0)
    rng = np.random.default_rng(7)
    draws = np.array([draw_truncated_normal(0.0, 6.0, bounds, repl, rng)
                      for _ in range(4000)])
    assert draws.min() >= -10.0 and draws.max() <= 10.0
    assert (np.abs(draws) > 5.0).any()  # replacements do fire at sigma=6


# ------------------------------------------------------------ panel shape


def test_simulated_panel_invariants():
    panel = simulate_panel(SimSpec(n_subjects=2000, horizon=3, seed=42))
    assert panel.n == 2000 and panel.K == 3
    # Everyone enters uncensored; censoring is monotone.
    assert (panel.c[:, 0] == 0).all()
    assert (np.diff(panel.c, axis=1) >= 0).all()
    # Treatment is absorbing among observed entries.
    for k in range(panel.K):
        on = panel.t[:, k] == 1.0
        nxt = panel.t[:, k + 1]
        assert np.all(np.isnan(nxt[on]) | (nxt[on] == 1.0))
    # Value ranges follow the truncation-replacement supports.
    assert np.nanmin(panel.l1) >= 0.0 and np.nanmax(panel.l1) <= 10000.0
    assert np.nanmin(panel.l2) >= 0.03 and np.nanmax(panel.l2) <= 0.8
    for arr in (panel.l3, panel.y):
        assert np.nanmin(arr) >= -10.0 and np.nanmax(arr) <= 10.0
    # Statics: binary indicators plus a uniform on [1, 5].
    assert set(np.unique(panel.v[:, 0])) <= {0.0, 1.0}
    assert set(np.unique(panel.v[:, 1])) <= {0.0, 1.0}
    assert panel.v[:, 2].min() >= 1.0 and panel.v[:, 2].max() <= 5.0


def test_simulation_is_deterministic_and_seed_sensitive():
    spec = SimSpec(n_subjects=300, horizon=2, seed=9)
    a = simulate_panel(spec)
    b = simulate_panel(spec)
    assert a.equals(b)
    c = simulate_panel(SimSpec(n_subjects=300, horizon=2, seed=10))
    assert not np.array_equal(a.y, c.y, equal_nan=True)


def test_attrition_is_present_but_not_total():
    panel = simulate_panel(SimSpec(n_subjects=2000, horizon=11, seed=5))
    counts = [at_risk(panel, k).size for k in range(panel.K + 2)]
    assert counts[0] == 2000
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert 0 < counts[-1] < 2000


def test_forced_replacement_pins_values():
    # Bounds chosen so every draw lands above them; degenerate replacement
    # intervals then pin each variable to a constant.
    repl = {
        "L1": (-2e9, -1e9, 5.0, 5.0, 777.0, 777.0),
        "L2": (-2e9, -1e9, 0.0, 0.0, 0.5, 0.5),
        "L3": (-2e9, -1e9, 0.0, 0.0, 1.5, 1.5),
        "Y": (-2e9, -1e9, 0.0, 0.0, 3.25, 3.25),
    }
    spec = SimSpec(n_subjects=50, horizon=1, seed=0, truncation_replacements=repl)
    panel = simulate_panel(spec)
    obs = ~np.isnan(panel.y)
    assert np.all(panel.y[obs] == 3.25)
    assert np.all(panel.l1[~np.isnan(panel.l1)] == 777.0)
    truth = counterfactual_truth(spec, make_regime("never_treat"), mc_samples=500)
    assert truth.value == 3.25 and truth.mc_standard_error == 0.0


def test_spec_validation():
    with pytest.raises(InvalidParameterError):
        SimSpec(n_subjects=0, horizon=1, seed=0)
    with pytest.raises(InvalidParameterError):
        SimSpec(n_subjects=1, horizon=-1, seed=0)
    with pytest.raises(InvalidParameterError):
        SimSpec(n_subjects=1, horizon=1, seed=-3)
    bad = dict(TRUNCATION_REPLACEMENTS)
    bad["L2"] = (0.8, 0.06, 0.03, 0.09, 0.7, 0.8)
    with pytest.raises(InvalidParameterError):
        SimSpec(n_subjects=1, horizon=1, seed=0, truncation_replacements=bad)
    del bad["L2"]
    with pytest.raises(InvalidParameterError):
        SimSpec(n_subjects=1, horizon=1, seed=0, truncation_replacements=bad)


# -------------------------------------------------------- regime decisions


def test_regime_decision_constant_rules():
    always, never = make_regime("always_treat"), make_regime("never_treat")
    l1 = np.array([100.0, 900.0])
    assert regime_decision(always, l1, 0.3, 0.0, 0.0).tolist() == [1.0, 1.0]
    assert regime_decision(never, l1, 0.3, 0.0, 0.0).tolist() == [0.0, 0.0]


def test_threshold_decision_clauses_and_boundaries():
    reg = make_regime("threshold_750")
    safe = dict(l2=0.30, l3=0.0, t_prev=0.0)

    def d(l1, l2=safe["l2"], l3=safe["l3"], t_prev=safe["t_prev"]):
        return float(regime_decision(reg, l1, l2, l3, t_prev))

    assert d(749.999) == 1.0
    assert d(750.0) == 0.0    # boundary values do not fire
    assert d(900.0) == 0.0
    assert d(900.0, l2=0.2499) == 1.0
    assert d(900.0, l2=0.25) == 0.0
    assert d(900.0, l3=-2.001) == 1.0
    assert d(900.0, l3=-2.0) == 0.0
    assert d(900.0, t_prev=1.0) == 1.0  # absorbing through the prior decision

    reg350 = make_regime("threshold_350")
    assert float(regime_decision(reg350, 349.0, 0.3, 0.0, 0.0)) == 1.0
    assert float(regime_decision(reg350, 351.0, 0.3, 0.0, 0.0)) == 0.0
    assert float(regime_decision(reg350, 700.0, 0.1499, 0.0, 0.0)) == 1.0


def test_regime_decision_rejects_missing_values():
    reg = make_regime("threshold_750")
    with pytest.raises(DataIntegrityError):
        regime_decision(reg, np.nan, 0.3, 0.0, 0.0)
    with pytest.raises(DataIntegrityError):
        regime_decision(reg, 800.0, 0.3, 0.0, np.array([0.0, np.nan]))


def test_make_regime_thresholds_and_unknown_kind():
    reg = make_regime("threshold_350")
    assert (reg.cd4_threshold, reg.cd4pct_threshold, reg.waz_threshold) == (350.0, 0.15, -2.0)
    with pytest.raises(InvalidParameterError):
        make_regime("sometimes_treat")
    assert tuple(r.kind for r in CANONICAL_REGIMES) == REGIME_KINDS


def test_followers_agree_with_trajectory_check():
    panel = simulate_panel(SimSpec(n_subjects=400, horizon=3, seed=21))
    for kind in REGIME_KINDS:
        reg = make_regime(kind)
        for k in (0, 2):
            mask = regime_followers(panel, reg, k)
            slow = np.array([follows_regime(panel.trajectory(i), reg, k)
                             for i in range(panel.n)])
            np.testing.assert_array_equal(mask, slow)


def test_followers_shrink_with_horizon_and_split_by_regime():
    panel = simulate_panel(SimSpec(n_subjects=3000, horizon=5, seed=3))
    for kind in REGIME_KINDS:
        reg = make_regime(kind)
        prev = regime_followers(panel, reg, 0)
        for k in range(1, panel.K + 1):
            cur = regime_followers(panel, reg, k)
            assert not np.any(cur & ~prev)
            prev = cur
    # At any k every uncensored subject follows at most one threshold regime
    # branch pairing with always/never only when decisions happen to align.
    m750 = regime_followers(panel, make_regime("threshold_750"), 3)
    m350 = regime_followers(panel, make_regime("threshold_350"), 3)
    assert m750.sum() > 0 and m350.sum() > 0


def test_regime_path_uses_prescribed_history():
    panel = simulate_panel(SimSpec(n_subjects=500, horizon=3, seed=13))
    idx = at_risk(panel, 2)
    always = regime_path(panel, make_regime("always_treat"), 2, idx)
    never = regime_path(panel, make_regime("never_treat"), 2, idx)
    assert np.all(always == 1.0) and np.all(never == 0.0)

    reg = make_regime("threshold_750")
    path = regime_path(panel, reg, 2, idx)
    # Absorbing: once the prescribed decision is 1 it stays 1.
    assert np.all(np.diff(path, axis=1) >= 0)
    # Forward recomputation with the regime's own previous decision.
    d_prev = np.zeros(idx.size)
    for j in range(3):
        d = regime_decision(reg, panel.l1[idx, j], panel.l2[idx, j],
                            panel.l3[idx, j], d_prev)
        np.testing.assert_array_equal(path[:, j], d)
        d_prev = d
    # The prescribed path can differ from the observed one.
    assert np.any(path != panel.t[idx, :3])


# ----------------------------------------------------------- ground truth


def test_truth_curve_indexing_and_prefix_property():
    spec3 = SimSpec(n_subjects=1, horizon=3, seed=77)
    spec2 = SimSpec(n_subjects=1, horizon=2, seed=77)
    reg = make_regime("threshold_750")
    curve3 = counterfactual_truth_curve(spec3, reg, mc_samples=20000)
    curve2 = counterfactual_truth_curve(spec2, reg, mc_samples=20000)
    assert [g.horizon for g in curve3] == [0, 1, 2, 3]
    # Interventional draws consume no treatment or censoring variates, so a
    # longer horizon extends the stream without disturbing the prefix.
    for j in range(3):
        assert curve3[j].value == curve2[j].value
        assert curve3[j].mc_standard_error == curve2[j].mc_standard_error
    assert counterfactual_truth(spec2, reg, 20000).value == curve2[-1].value


def test_truth_is_deterministic():
    spec = SimSpec(n_subjects=1, horizon=1, seed=123)
    reg = make_regime("always_treat")
    a = counterfactual_truth(spec, reg, mc_samples=50000)
    b = counterfactual_truth(spec, reg, mc_samples=50000)
    assert a.value == b.value and a.mc_standard_error == b.mc_standard_error
    assert a.mc_samples == 50000 and a.mc_standard_error > 0


def test_truth_rejects_bad_mc_samples():
    spec = SimSpec(n_subjects=1, horizon=1, seed=0)
    with pytest.raises(InvalidParameterError):
        counterfactual_truth(spec, make_regime("never_treat"), mc_samples=0)


def test_treatment_effect_is_nonzero():
    spec = SimSpec(n_subjects=1, horizon=2, seed=4)
    a = counterfactual_truth(spec, make_regime("always_treat"), mc_samples=100000)
    n = counterfactual_truth(spec, make_regime("never_treat"), mc_samples=100000)
    gap = abs(a.value - n.value)
    assert gap > 5.0 * np.hypot(a.mc_standard_error, n.mc_standard_error)


def _reference_mean_never_treat(n: int, seed: int) -> tuple[float, float]:
    """Independently coded one-step (K=0) never-treat counterfactual mean.

    Re-types the generating equations directly with its own generator and its
    own replacement sampler; shares nothing with the library but the equations.
    """
    rng = np.random.default_rng(seed)

    def tnorm(mu, sigma, key):
        a, b, a1, a2, b1, b2 = TRUNCATION_REPLACEMENTS[key]
        x = rng.normal(mu, sigma)
        lo = rng.uniform(a1, a2, size=np.shape(x))
        hi = rng.uniform(b1, b2, size=np.shape(x))
        return np.where(x < a, lo, np.where(x > b, hi, x))

    v1 = (rng.random(n) < 4392.0 / 5826.0).astype(float)
    v3 = rng.uniform(1.0, 5.0, n)
    l1_0 = tnorm(np.where(v1 == 1.0, 650.0, 720.0),
                 np.where(v1 == 1.0, 350.0, 400.0), "L1")
    l1_base = (l1_0 - 671.7468) / (10.0 * 352.2788) + 1.0
    l2_0 = tnorm(0.16 + 0.05 * (l1_0 - 650.0) / 650.0, 0.07, "L2")
    l2_base = (l2_0 - 0.1648594) / (10.0 * 0.06980332) + 1.0
    mu3 = (np.where(v1 == 1.0, -1.65, -2.05) + 0.1 * v3
           + 0.05 * (l1_0 - 650.0) / 650.0 + 0.05 * (l2_0 - 16.0) / 16.0)
    l3_0 = tnorm(mu3, 1.0, "L3")
    y_0 = tnorm(-2.6 + 0.1 * (v3 > 2.0) + 0.3 * (v1 == 0.0) + (l3_0 + 1.45),
                1.1, "Y")

    # k = 1 transition under T_0 = 0, no censoring.
    mu1 = 13.0 * np.log(1.0 * (1034.0 - 662.0) / 8.0) + l1_0 + 2.0 * l2_0 + 2.0 * l3_0
    l1_1 = tnorm(mu1, 50.0, "L1")
    dl1 = l1_1 - l1_0
    l2_1 = tnorm(l2_0 + 0.0003 * dl1 + 0.0005 * l3_0, 0.02, "L2")
    dl2 = l2_1 - l2_0
    l3_1 = tnorm(l3_0 + 0.0017 * dl1 + 0.2 * dl2, 0.5, "L3")
    dl3 = l3_1 - l3_0
    y_shift = l3_0 + 1.5135
    mu_y = (y_0 + 0.00005 * dl1 - 0.000001 * np.square(dl1 * np.sqrt(l1_base))
            + 0.01 * dl2 - 0.0001 * np.square(dl2 * np.sqrt(l2_base))
            + 0.07 * (dl3 * y_shift) - 0.001 * np.square(dl3 * y_shift))
    y_1 = tnorm(mu_y, 2.5, "Y")
    return float(np.mean(y_1)), float(np.std(y_1, ddof=1) / np.sqrt(n))


def test_truth_matches_independent_reference():
    spec = SimSpec(n_subjects=1, horizon=0, seed=55)
    truth = counterfactual_truth(spec, make_regime("never_treat"), mc_samples=200000)
    ref_mean, ref_se = _reference_mean_never_treat(200000, seed=1234)
    tol = 3.0 * np.hypot(truth.mc_standard_error, ref_se)
    assert abs(truth.value - ref_mean) < tol


def test_observational_treatment_matches_logit_at_baseline():
    # Empirical initiation frequency at time 0 against the stated hazard,
    # within 4 SDs on a stratified cell.
    panel = simulate_panel(SimSpec(n_subjects=40000, horizon=0, seed=8))
    logit = (-2.4 + 0.015 * (750.0 - panel.l1[:, 0])
             + 5.0 * (0.2 - panel.l2[:, 0]) - 0.8 * panel.l3[:, 0])
    p = expit(logit)
    diff = panel.t[:, 0] - p
    se = np.sqrt(np.sum(p * (1 - p))) / panel.n
    assert abs(diff.mean()) < 4.0 * se
