import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcfit import likelihood as L
from gcfit import model as m
from gcfit.tree import Node, ObservedTree
from oracles import log_q_single_leaf, p_closed, p_ode, single_leaf, two_type_tree, yule_tree

CONFIGS = [(1.8, 1.0, 1.0), (1.2, 1.5, 0.3), (2.0, 0.4, 0.1)]
# p_x(t) for the NM configuration from a DOP853 solve of dp/dt (rtol 1e-13)
NM_P = {
    5.0: [0.779235231129, 0.766519128636, 0.752968376648, 0.739220699807,
          0.732931696917, 0.718643485682, 0.706020254533, 0.700485965671],
    10.0: [0.687401736888, 0.67217538584, 0.656314759748, 0.640766103515,
           0.633792314882, 0.618248321183, 0.604886273175, 0.599303296697],
    15.0: [0.652403659552, 0.636615866816, 0.620308182545, 0.604525854398,
           0.597498412158, 0.58193664866, 0.568692458685, 0.563251199704],
}
# log q of one sampled lineage, closed form, at t = 0.5, 3, 15
SINGLE_LEAF = {
    (1.8, 1.0, 1.0): [-1.0901558346840488, -3.918433955879765, -13.62185360551839],
    (1.2, 1.5, 0.3): [-1.663103297730887, -3.1794333461597084, -7.268731753773027],
    (2.0, 0.4, 0.1): [-1.7876536605192759, -3.055721952102318, -22.143702010162894],
}


def test_p_at_zero(nm_truth, space):
    sol = L.solve_px(nm_truth, space, 15.0)
    assert np.all(sol.p(0.0, np.arange(8)) == 0.9)
    assert sol.p(0.0, 3) == 0.9


def test_no_death_full_sampling_never_lost():
    params, space = m.single_type(1.3, 1e-300, 1.0)
    sol = L.solve_px(params, space, 15.0)
    assert np.max(np.abs(sol.p(np.linspace(0, 15, 101), 0))) < 1e-12


def test_closed_form_reference_value():
    params, space = m.single_type(1.8, 1.0, 1.0)
    sol = L.solve_px(params, space, 1.0)
    assert sol.p(1.0, 0) == pytest.approx(0.40770181728437527, abs=1e-8)
    assert p_closed(1.8, 1.0, 1.0, 1.0) == pytest.approx(0.4077, abs=1e-4)


@pytest.mark.parametrize("lam,mu,rho", CONFIGS)
def test_solve_px_matches_closed_form(lam, mu, rho):
    params, space = m.single_type(lam, mu, rho)
    sol = L.solve_px(params, space, 15.0, rho)
    ts = np.linspace(0, 15, 1501)
    exact = np.array([p_closed(lam, mu, rho, t) for t in ts])
    assert np.max(np.abs(sol.p(ts, 0) - exact)) < 1e-6
    assert np.max(np.abs(L.bd_p(lam, mu, rho, ts) - exact)) < 1e-12


def test_nm_p_frozen(nm_truth, space):
    sol = L.solve_px(nm_truth, space, 15.0)
    for t, ref in NM_P.items():
        assert np.max(np.abs(sol.p(t, np.arange(8)) - ref)) < 1e-7


@settings(max_examples=25, deadline=None)
@given(
    st.floats(0.2, 3), st.floats(0.2, 3), st.floats(-2, 2), st.floats(0.05, 2),
    st.floats(0.05, 3), st.floats(0.1, 30), st.floats(0.01, 1.0),
)
def test_solve_px_matches_scipy_oracle(p1, p2, p3, p4, mu, delta, rho):
    space = m.load_type_space()
    params = m.Params(m.SigmoidParams(p1, p2, p3, p4), mu, delta, m.load_gamma(), rho=rho)
    sol = L.solve_px(params, space, 15.0)
    ref = p_ode(params.birth_rates(space), mu, params.gamma, rho, 15.0)
    ts = np.linspace(0, 15, 61)
    ours = np.array([sol.p(ts, x) for x in range(8)]).T
    assert np.max(np.abs(ours - ref(ts).T)) < 1e-6
    assert np.all((ours >= 0) & (ours <= 1))


def test_integral_of_p_matches_quadrature(nm_truth, space):
    from scipy.integrate import quad

    sol = L.solve_px(nm_truth, space, 15.0)
    for x in (0, 4, 7):
        ref = quad(lambda s: sol.p(s, x), 0, 12.0, epsabs=1e-12, limit=200)[0]
        assert sol.integral_p(12.0, x) == pytest.approx(ref, abs=1e-8)


def test_query_outside_solution_raises(nm_truth, space):
    sol = L.solve_px(nm_truth, space, 5.0)
    with pytest.raises(L.LikelihoodError):
        sol.p(6.0, 0)


@pytest.mark.parametrize("lam,mu,rho", CONFIGS)
@pytest.mark.parametrize("mode", ["loglinear", "direct", "approx"])
def test_single_leaf_closed_form(lam, mu, rho, mode):
    params, space = m.single_type(lam, mu, rho)
    for t, ref in zip((0.5, 3.0, 15.0), SINGLE_LEAF[(lam, mu, rho)]):
        res = L.log_density(single_leaf(t), params, space, mode)
        assert res.log_q_root == pytest.approx(ref, abs=1e-6)
        assert log_q_single_leaf(lam, mu, rho, t) == pytest.approx(ref, abs=1e-12)


def test_yule_tree_closed_form():
    lam, mu, rho = 1.4, 0.6, 0.3
    params, space = m.single_type(lam, mu, rho)
    tr, ts = 4.0, 1.5
    # G(t) = q(t)/rho for a lone lineage; G(0) = 1
    log_g = lambda t: log_q_single_leaf(lam, mu, rho, t) - math.log(rho)
    ref = math.log(lam) + 2 * (math.log(rho) + log_g(ts)) + log_g(tr) - log_g(ts)
    for mode in ("loglinear", "direct", "approx"):
        assert L.log_density(yule_tree(tr, ts), params, space, mode).log_q_root == pytest.approx(
            ref, abs=1e-6
        )


def test_leaf_contributes_log_rho():
    # with mu = 0 and a single type, q along a lone branch does not depend
    # on rho beyond the leaf factor when rho = 1 vs. the closed form
    lam = 1.1
    for rho in (0.2, 0.7):
        params, space = m.single_type(lam, 1e-300, rho)
        t = 1e-9
        lq = L.log_density(single_leaf(t), params, space).log_q_root
        assert lq == pytest.approx(math.log(rho), abs=1e-8)


def test_zero_rate_type_change_gives_minus_inf(nm_truth, space):
    tree = ObservedTree(
        [
            Node(0, None, 2.0, "root", 0),
            Node(1, 0, 1.0, "type_change", 7),  # 0 -> 7 has zero rate
            Node(2, 1, 0.0, "sampled_leaf", 7),
        ]
    )
    for mode in ("loglinear", "direct", "approx"):
        res = L.log_density(tree, nm_truth, space, mode)
        assert res.log_q_root == -math.inf
        assert res.diagnostics and "zero rate" in res.diagnostics[0]
        assert res.log_conditional == -math.inf


def test_direct_matches_loglinear_on_simulated(nm_truth, space, nm_trees):
    small = sorted(nm_trees, key=len)[:4] + [two_type_tree()]
    for t in small:
        a = L.log_density(t, nm_truth, space, "loglinear").log_q_root
        b = L.log_density(t, nm_truth, space, "direct").log_q_root
        assert abs(a - b) < 1e-6


def test_conditional_relations(nm_truth, space, nm_trees):
    for t in nm_trees:
        res = L.log_density(t, nm_truth, space)
        assert res.log_conditional >= res.log_q_root
        assert L.log_density_conditional(t, nm_truth, space) == pytest.approx(res.log_conditional)
    params, sp = m.single_type(1.5, 1e-300, 1.0)
    t = yule_tree(3.0, 1.0)
    res = L.log_density(t, params, sp)
    assert res.log_conditional == pytest.approx(res.log_q_root, abs=1e-12)


def test_survival_underflow_reported():
    params, sp = m.single_type(0.1, 50.0, 0.01)
    t = single_leaf(20.0)  # true survival is about exp(-998)
    with pytest.raises(L.SurvivalUnderflowError):
        L.log_density_set([t], params, sp, "loglinear")
    # the closed form stays in log space and resolves it
    ref = math.log(0.01) - 49.9 * 20 - math.log1p(0.01 * 0.1 * math.expm1(-49.9 * 20) / -49.9)
    assert L.log_density(t, params, sp, "approx").log_survival == pytest.approx(ref, rel=1e-12)


def test_strongly_subcritical_survival_resolved():
    params, sp = m.single_type(0.1, 50.0, 0.01)
    sol = L.solve_px(params, sp, 10.0)
    ts = np.array([1.0, 5.0, 10.0])
    ours = np.log(sol.survival(ts, 0))
    assert np.allclose(ours, L.bd_log_survival(0.1, 50.0, 0.01, ts), rtol=1e-6)


def test_set_factorisation(nm_truth, space, nm_trees):
    one = nm_trees[0]
    single = L.log_density_set([one], nm_truth, space)
    assert single == pytest.approx(L.log_density_conditional(one, nm_truth, space), abs=1e-12)
    assert L.log_density_set([one, one], nm_truth, space) == pytest.approx(2 * single, rel=1e-14)
    total = L.log_density_set(nm_trees, nm_truth, space)
    per = L.per_tree_log_densities(nm_trees, nm_truth, space)
    assert total == pytest.approx(per.sum(), rel=1e-14)
    ct = L.compile_trees(nm_trees, len(space))
    assert L.log_density_set(ct, nm_truth, space) == pytest.approx(total, rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 12))
def test_set_additive_over_concatenation(nm_truth, space, nm_trees, k):
    a, b = nm_trees[:k], nm_trees[k:]
    whole = L.log_density_set(nm_trees, nm_truth, space)
    parts = L.log_density_set(a, nm_truth, space) + L.log_density_set(b, nm_truth, space)
    assert whole == pytest.approx(parts, rel=1e-12)


def _swap_children(tree):
    """Same tree with node ids reassigned so that siblings come in reverse order."""
    order = list(reversed([n.id for n in tree.nodes]))
    new = {old: i for i, old in enumerate(order)}
    return ObservedTree(
        [
            Node(new[n.id], None if n.parent is None else new[n.parent], n.time, n.event, n.state)
            for n in sorted(tree.nodes, key=lambda n: new[n.id])
        ]
    )


def test_sibling_order_invariance(nm_truth, space, nm_trees):
    for t in nm_trees[:5] + [two_type_tree()]:
        s = _swap_children(t)
        assert L.log_density(s, nm_truth, space).log_q_root == pytest.approx(
            L.log_density(t, nm_truth, space).log_q_root, abs=1e-10
        )


def test_rho_groups(nm_truth, space, nm_trees):
    params = nm_truth.with_values(rho=(0.1, 0.3))
    t0 = nm_trees[0]
    t1 = ObservedTree(t0.nodes, rho_index=1)
    v = L.per_tree_log_densities([t0, t1], params, space)
    assert v[0] == pytest.approx(L.log_density_set([t0], nm_truth, space))
    assert v[1] == pytest.approx(L.log_density_set([t0], nm_truth.with_values(rho=(0.3,)), space))
    with pytest.raises(L.LikelihoodError):
        L.log_density_set([t1], nm_truth, space)


def test_approx_exact_when_no_type_changes(space, nm_trees):
    params = m.Params(m.SigmoidParams(1.3, 1, -1.1, 0.5), 0.5, 1.0, np.zeros((8, 8)), rho=0.1)
    # trees without type changes: a single state everywhere
    trees = [yule_tree(5.0, 2.0, state=s) for s in range(8)] + [single_leaf(9.0, 3)]
    for t in trees:
        exact = L.log_density(t, params, space).log_conditional
        approx = L.log_density_approx(t, params, space)
        assert approx == pytest.approx(exact, abs=1e-6)


def test_approx_single_type():
    params, sp = m.single_type(1.7, 0.9, 0.4)
    t = yule_tree(6.0, 2.5)
    assert L.log_density_approx(t, params, sp) == pytest.approx(
        L.log_density_conditional(t, params, sp), abs=1e-6
    )


def test_approx_gap_grows_with_delta(nm_truth, space, nm_trees):
    tree = max(nm_trees, key=len)
    gaps = []
    for delta in (0.1, 1.0, 20.0):
        p = nm_truth.with_values(delta=delta)
        exact = L.log_density(tree, p, space).log_conditional
        gaps.append(abs(L.log_density_approx(tree, p, space) - exact))
    assert gaps[0] > 0
    assert gaps[0] < gaps[1] < gaps[2]


def test_solve_cache_reuse(nm_truth, space, nm_trees):
    L.clear_cache()
    L.log_density_set(nm_trees, nm_truth, space)
    before = len(L._cache._d)
    L.log_density_set(nm_trees[:3], nm_truth, space)
    assert len(L._cache._d) == before
