import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cad.infotheory import (ContextFamily, DiscreteJoint, PreconditionError, brute_interaction_information,
                            conditional_mi_direct, conditional_mi_entropy_form, conditional_mutual_information,
                            entropy, info_report, mutual_information_pair, mutual_information_triple,
                            pairing_joint, random_family, random_joint, run_identity_suite,
                            verify_chain_decomposition, verify_subset_reduction, verify_theorem1_decomposition,
                            xor_joint)


def brute_mi(p2d):
    """sum p(a,b) log p(a,b) / (p(a) p(b)) with explicit loops."""
    pa, pb = p2d.sum(1), p2d.sum(0)
    total = 0.0
    for i, j in itertools.product(range(p2d.shape[0]), range(p2d.shape[1])):
        if p2d[i, j] > 0:
            total += p2d[i, j] * math.log(p2d[i, j] / (pa[i] * pb[j]))
    return total


@st.composite
def joints(draw, n_vars=3):
    sizes = tuple(draw(st.integers(1, 4)) for _ in range(n_vars))
    weights = draw(st.lists(st.floats(0.0, 1.0), min_size=math.prod(sizes), max_size=math.prod(sizes)))
    w = np.asarray(weights) + 1e-3
    return DiscreteJoint(sizes, w / w.sum())


def test_table_validation():
    with pytest.raises(ValueError, match="sum to"):
        DiscreteJoint((2, 2), [0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ValueError, match="non-negative"):
        DiscreteJoint((2, 2), [1.5, -0.5, 0.0, 0.0])
    with pytest.raises(ValueError, match="entries"):
        DiscreteJoint((2, 2), [1.0])
    with pytest.raises(ValueError, match="2 or 3"):
        DiscreteJoint((4,), [0.25] * 4)


def test_marginal_keeps_requested_order(rng):
    j = random_joint(rng, (2, 3, 4))
    m = j.marginal([2, 0])
    assert m.shape == (4, 2)
    np.testing.assert_allclose(m, j.probs.sum(axis=1).T)


def test_entropy_worked_values():
    uniform = DiscreteJoint((4, 2), np.full(8, 1 / 8))
    assert entropy(uniform, [0], base=2) == pytest.approx(2.0, abs=1e-12)
    assert entropy(uniform, [0, 1], base=2) == pytest.approx(3.0, abs=1e-12)
    point = DiscreteJoint((2, 2), [1.0, 0.0, 0.0, 0.0])
    assert entropy(point, [0, 1]) == 0.0


def test_mi_of_copy_is_entropy():
    copy = DiscreteJoint((3, 3), np.diag([0.2, 0.3, 0.5]))
    assert mutual_information_pair(copy, 0, 1) == pytest.approx(entropy(copy, [0]), abs=1e-12)


def test_mi_needs_distinct_vars(rng):
    with pytest.raises(ValueError):
        mutual_information_pair(random_joint(rng, (2, 2)), 0, 0)


@settings(max_examples=60, deadline=None)
@given(joints(n_vars=2))
def test_pair_mi_matches_loop_oracle(j):
    assert mutual_information_pair(j, 0, 1) == pytest.approx(brute_mi(j.probs), abs=1e-12)
    assert mutual_information_pair(j, 0, 1) >= -1e-12


@settings(max_examples=60, deadline=None)
@given(joints())
def test_triple_expansion_matches_cellwise_oracle(j):
    assert abs(mutual_information_triple(j) - brute_interaction_information(j)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(joints())
def test_chain_rule(j):
    assert verify_chain_decomposition(j).residual <= 1e-9


@settings(max_examples=60, deadline=None)
@given(joints())
def test_conditional_mi_matches_entropy_identity(j):
    # I(a;b|c) = H(a,c) + H(b,c) - H(a,b,c) - H(c)
    H = lambda *v: entropy(j, v)  # noqa: E731
    expected = H(0, 2) + H(1, 2) - H(0, 1, 2) - H(2)
    assert conditional_mutual_information(j, 0, 1, given=2) == pytest.approx(expected, abs=1e-12)


def test_xor_is_minus_one_bit():
    assert mutual_information_triple(xor_joint(), base=2) == -1.0


def test_independent_triple_has_zero_interaction():
    p = np.einsum("i,j,k->ijk", [0.3, 0.7], [0.5, 0.25, 0.25], [0.1, 0.9])
    assert abs(mutual_information_triple(DiscreteJoint(p.shape, p))) < 1e-12


def test_subset_reduction_on_pairing(rng):
    p12 = rng.dirichlet(np.ones(6)).reshape(2, 3)
    res = verify_subset_reduction(pairing_joint(p12 / p12.sum()))
    assert set(res) == {"H(x1,x2,y)=H(y)", "H(x1,y)=H(y)", "H(x2,y)=H(y)", "I(x1,x2,y)=H(x1)+H(x2)-H(x1,x2)"}
    assert max(res.values()) <= 1e-9


def test_subset_reduction_rejects_non_pairing():
    # y = x1 alone cannot recover x2
    cube = np.zeros((2, 2, 2))
    for a, b in itertools.product(range(2), range(2)):
        cube[a, b, a] = 0.25
    with pytest.raises(PreconditionError, match="outcome"):
        verify_subset_reduction(DiscreteJoint((2, 2, 2), cube))


def test_theorem1_decomposition(rng):
    for _ in range(20):
        fam = random_family(rng, 3, 3, 2)
        h_v, cross = conditional_mi_entropy_form(fam)
        assert conditional_mi_direct(fam) == pytest.approx(h_v - cross, abs=1e-12)
        assert verify_theorem1_decomposition(fam) <= 1e-9


def test_context_family_validation():
    t = np.full((2, 2), 0.25)
    with pytest.raises(PreconditionError, match="prior"):
        ContextFamily(np.array([0.5, 0.6]), (t, t))
    with pytest.raises(PreconditionError, match="context 1"):
        ContextFamily(np.array([0.5, 0.5]), (t, t * 2))
    with pytest.raises(PreconditionError, match="one table"):
        ContextFamily(np.array([1.0]), (t, t))


def test_info_report_fields(rng):
    j = random_joint(rng, (2, 3, 2))
    rep = info_report(j)
    assert len(rep.entropies) == 7
    assert set(rep.mutual_informations) == {(0, 1), (0, 2), (1, 2), (0, 1, 2)}
    assert rep.entropies[(1,)] == entropy(j, [1])
    assert rep.identity_residuals["chain_rule"] <= 1e-9


def test_identity_suite_default():
    res = run_identity_suite(seed=0, trials=20)
    xor = res.pop("xor_interaction_bits")
    assert xor == -1.0
    assert max(res.values()) <= 1e-9
