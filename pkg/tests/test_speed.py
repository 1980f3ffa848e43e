import math
from decimal import Decimal, localcontext

import numpy as np
import pytest

from herdlab import (
    DegenerateRuleError,
    DomainError,
    HerdingParams,
    HorizonNotReachedError,
    MisbehaviorSpec,
    OpinionDistribution,
    SpeedCurve,
    WeightRule,
    empirical_exceedance,
    min_ratings_average,
    min_ratings_majority,
    phi,
    phi_inverse,
    phi_misbehavior,
    speed_curve,
    tail_bound,
    varphi,
)

AMAZON_LIKE = OpinionDistribution(np.array([0.01, 0.02, 0.07, 0.4, 0.5]))


def make_params(gamma=0.0, eta=0.0, c=0.0):
    return HerdingParams(AMAZON_LIKE, gamma, eta, WeightRule.power_law(c))


def direct_varphi(c, gamma, eta, j_max):
    """varphi_0..varphi_{j_max} and w̃_1..w̃_{j_max+1} as 50-digit decimals."""
    c, gamma_tilde = Decimal(str(c)), (1 - Decimal(str(eta))) * Decimal(str(gamma))
    total, w_tilde = Decimal(0), [None]
    for j in range(1, j_max + 2):
        w = Decimal(j) ** c
        total += w
        w_tilde.append(w / total)
    varphi = [Decimal(1)]
    for l in range(1, j_max + 1):
        varphi.append(varphi[-1] * (1 - w_tilde[l + 1] * (1 - gamma_tilde)))
    return varphi, w_tilde


def direct_phi(c, gamma, eta, i, last=0, epsilon=None):
    """phi_i, or its value after injections ending at ``last``, summed term by term."""
    if i <= last:
        return 0.0
    with localcontext() as ctx:
        ctx.prec = 50
        varphi, w_tilde = direct_varphi(c, gamma, eta, i - 1)
        terms = (w_tilde[j] ** 2 / varphi[j - 1] ** 2 for j in range(last + 1, i + 1))
        total = sum(terms)
        value = 2 / (varphi[i - 1] ** 2 * total)
        if last > 0:
            r = varphi[i - 1] / (Decimal(str(epsilon)) * varphi[last - 1])
            value *= (1 - r) ** 2 if r <= 1 else 0
        return float(value)


def test_no_herding_unweighted_is_chernoff():
    curve = speed_curve(make_params(), 10_000)
    assert curve.horizon == 10_000
    assert np.allclose(curve.phi, 2 * np.arange(1, 10_001), rtol=1e-10)
    assert np.isclose(phi(make_params(), 1), 2.0)


@pytest.mark.parametrize(("j", "expected"), [(0, 1.0), (1, 0.5), (4, 0.2)])
def test_varphi_unweighted(j, expected):
    assert np.isclose(varphi(make_params(), j), expected)


def test_varphi_with_herding():
    # factor l is 1 - (1 - gamma) / (l + 1) under the unweighted rule
    params = make_params(gamma=0.5)
    expected = np.prod([1 - 0.5 / (l + 1) for l in range(1, 11)])
    assert np.isclose(varphi(params, 10), expected)

    with pytest.raises(ValueError, match="j >= 0"):
        varphi(params, -1)


def test_recency_weighting_without_herding():
    # with gamma = 0, phi_i = 2 W_i^2 / sum_j w_j^2 where W_i = sum_j w_j
    i = 1000
    w = np.arange(1, i + 1, dtype=float)
    expected = 2 * w.sum() ** 2 / np.sum(w**2)
    assert np.isclose(phi(make_params(c=1.0), i), expected, rtol=1e-8)
    assert phi(make_params(c=1.0), i) < phi(make_params(c=0.0), i)


@pytest.mark.parametrize("c", [0.0, 1.0, 3.0])
def test_phi_decreases_with_herding(c):
    values = [phi(make_params(gamma=g, c=c), 1000) for g in (0.0, 0.2, 0.5, 0.8)]
    assert np.all(np.diff(values) < 0)


@pytest.mark.parametrize("c", [0.0, 1.0])
def test_phi_increases_with_prior_correction(c):
    values = [phi(make_params(gamma=0.8, eta=e, c=c), 1000) for e in (0.0, 0.3, 0.6)]
    assert np.all(np.diff(values) > 0)


def test_phi_grows_with_i():
    for gamma in ("0.4", "0.8*(1-1/i)"):
        curve = speed_curve(make_params(gamma=gamma, c=1.0), 5000)
        assert np.all(np.diff(np.asarray(curve.phi)) > 0)


def test_tail_bound():
    params = make_params()
    assert tail_bound(params, 1, 0.1) == 1.0
    assert np.isclose(tail_bound(params, 1000, 0.1), 2 * math.exp(-20.0))
    with pytest.raises(DomainError):
        tail_bound(params, 10, 0.0)
    with pytest.raises(DomainError):
        tail_bound(params, 10, 1.5)


@pytest.mark.parametrize(("x", "expected"), [(20.0, 10), (2.0, 1), (2.5, 2), (0.1, 1)])
def test_phi_inverse(x, expected):
    assert phi_inverse(make_params(), x) == expected


def test_phi_inverse_errors():
    with pytest.raises(HorizonNotReachedError) as exc:
        phi_inverse(make_params(), 1e9, horizon=100)
    assert exc.value.horizon == 100
    with pytest.raises(DomainError):
        phi_inverse(make_params(), -1.0)
    with pytest.raises(ValueError, match="epsilon"):
        phi_inverse(make_params(), 10.0, misbehavior=MisbehaviorSpec(5, (1,)))


def test_min_ratings_average():
    assert min_ratings_average(make_params(), 0.5, 0.1) == 2073
    with pytest.raises(DomainError):
        min_ratings_average(make_params(), 0.5, 1.0)


def test_min_ratings_majority():
    assert min_ratings_majority(make_params(), AMAZON_LIKE, 0.1) == 207233

    tied = OpinionDistribution(np.array([0.0, 0.0, 0.2, 0.4, 0.4]))
    with pytest.raises(DegenerateRuleError):
        min_ratings_majority(make_params(), tied, 0.1)


def test_misbehavior_degrades_speed():
    params = make_params(gamma=0.4, c=1.0)
    spec = MisbehaviorSpec.parse("50,5,51-100")
    n = 5000
    honest = np.asarray(speed_curve(params, n).phi)
    degraded = np.asarray(speed_curve(params, n, spec, 0.1).phi)

    assert np.all(degraded[:100] == 0)
    assert np.all(degraded <= honest)
    assert degraded[-1] > 0
    assert np.isclose(phi_misbehavior(params, n, spec, 0.1), degraded[-1])


def test_misbehavior_without_injections_matches_phi():
    params = make_params(gamma="0.8*(1-1/i)", eta=0.2, c=2.0)
    for i in (1, 10, 1000):
        assert np.isclose(
            phi_misbehavior(params, i, MisbehaviorSpec.none(), 0.05),
            phi(params, i),
            rtol=1e-12,
            atol=0,
        )


def test_phi_matches_direct_sum():
    assert np.isclose(
        phi(make_params(0.4, 0.1, c=0.5), 100),
        direct_phi(0.5, 0.4, 0.1, 100),
        rtol=1e-10,
    )


def test_single_injection_at_first_rating():
    # varphi_j = 1 / (j + 1), so r = (1/50) / 0.5 and the sum has 49 unit terms
    params = make_params()
    value = phi_misbehavior(params, 50, MisbehaviorSpec(5, (1,)), 0.5)
    assert np.isclose(value, direct_phi(0.0, 0.0, 0.0, 50, last=1, epsilon=0.5))
    assert np.isclose(value, 0.96**2 * 5000 / 49)
    assert value <= phi(params, 50)


def test_misbehavior_dominance_on_random_grid():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        c = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
        gamma = round(float(rng.uniform(0, 0.9)), 3)
        eta = round(float(rng.uniform(0, 1)), 3)
        i = int(rng.integers(1, 300))
        epsilon = round(float(rng.uniform(0.01, 1.0)), 3)
        k = int(rng.integers(0, 6))
        positions = sorted(rng.choice(np.arange(1, 400), size=k, replace=False))
        spec = MisbehaviorSpec(5, tuple(int(p) for p in positions))

        params = make_params(gamma, eta, c)
        honest = phi(params, i)
        degraded = phi_misbehavior(params, i, spec, epsilon)
        assert degraded <= honest * (1 + 1e-12)
        if k == 0:
            assert np.isclose(degraded, honest, rtol=1e-12, atol=0)

        expected = direct_phi(c, gamma, eta, i, spec.last_index, epsilon)
        assert np.isclose(degraded, expected, rtol=1e-9, atol=1e-9 * honest)


@pytest.mark.parametrize(("c", "gamma"), [(1.0, 0.2), (0.5, 0.4), (2.0, 0.8)])
def test_log_varphi_matches_direct_product(c, gamma):
    params = make_params(gamma, c=c)
    log_varphi = np.asarray(speed_curve(params, 51).log_varphi)
    with localcontext() as ctx:
        ctx.prec = 50
        expected = np.array([float(v) for v in direct_varphi(c, gamma, 0.0, 50)[0]])
    assert np.allclose(np.exp(log_varphi), expected, rtol=1e-10, atol=0)
    assert np.isclose(varphi(params, 10), expected[10], rtol=1e-10)


def test_misbehavior_slows_phi_inverse():
    params = make_params(gamma=0.4)
    spec = MisbehaviorSpec.parse("10,5,1-10")
    honest = phi_inverse(params, 500.0)
    degraded = phi_inverse(params, 500.0, misbehavior=spec, epsilon=0.1)
    assert degraded > honest


def test_speed_curve_csv(tmp_path):
    curve = speed_curve(make_params(gamma=0.3, c=0.5), 200)
    path = tmp_path / "phi.csv"
    curve.to_csv(path)
    loaded = SpeedCurve.from_csv(path)
    assert np.array_equal(loaded.phi, curve.phi)
    assert np.array_equal(loaded.log_varphi, curve.log_varphi)

    frame = curve.to_frame()
    assert list(frame.columns) == ["i", "phi", "log_varphi"]
    assert frame["log_varphi"].iloc[0] == 0.0

    with pytest.raises(ValueError, match="epsilon"):
        speed_curve(make_params(), 10, MisbehaviorSpec(5, (1,)))


@pytest.mark.slow
@pytest.mark.parametrize("c", [0.0, 1.0])
@pytest.mark.parametrize("gamma", [0.0, 0.4])
@pytest.mark.parametrize("eta", [0.0, 0.2])
def test_tail_bound_holds_empirically(c, gamma, eta):
    params = make_params(gamma, eta, c)
    table = empirical_exceedance(params, [100, 1000], [0.1, 0.2], 10_000, seed=9)
    assert len(table) == 2 * 2 * 5
    assert np.all(table["frequency"] <= table["tail_bound"] + 3 * table["std_error"])


@pytest.mark.parametrize("c", [0.0, 0.2, 0.5, 1.0, 2.0, 5.0])
def test_phi_monotone_in_gamma_and_eta(c):
    gammas = np.round(np.arange(0.0, 0.95, 0.1), 10)
    etas = np.round(np.arange(0.0, 1.05, 0.1), 10)
    idx = np.array([10, 100, 1000]) - 1
    table = np.array(
        [
            [np.asarray(speed_curve(make_params(g, e, c), 1000).phi)[idx] for e in etas]
            for g in gammas
        ]
    )
    tol = 1e-12 * table
    assert np.all(np.diff(table, axis=0) <= tol[1:])
    assert np.all(np.diff(table, axis=1) >= -tol[:, 1:])


def test_recency_sweep_shape():
    c_grid = [0.0, 0.2, 0.5, 1.0, 5.0]
    no_herding = [phi(make_params(0.0, c=c), 1000) for c in c_grid]
    assert np.all(np.diff(no_herding) < 0)

    for gamma in (0.2, 0.4):
        values = [phi(make_params(gamma, c=c), 1000) for c in c_grid]
        rising = np.diff(values) > 0
        assert rising[0]
        assert not rising[-1]
        # one peak: once it starts falling it never rises again
        assert not np.any(rising[np.argmin(rising) :])


def test_phi_inverse_stops_at_custom_rule_length():
    params = HerdingParams(AMAZON_LIKE, 0.0, 0.0, WeightRule.custom(np.ones(20)))
    assert phi_inverse(params, 20.0) == 10

    with pytest.raises(HorizonNotReachedError) as exc:
        phi_inverse(params, 1000.0)
    assert exc.value.horizon == 20
    with pytest.raises(HorizonNotReachedError):
        min_ratings_average(params, 0.5, 0.1)
