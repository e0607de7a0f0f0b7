import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brass.errors import (
    AbsoluteContinuityError,
    AxisMismatchError,
    DegenerateDistributionError,
    UndefinedSpecializationError,
)
from brass.tables import (
    InfoValue,
    ProbTable,
    conditional_mutual_information,
    entropy,
    expected_agent_kl,
    kl_divergence,
    marginalize_condition,
    normalize,
    specialization,
)


def table(vals, axes, cond=()):
    return ProbTable(np.asarray(vals, dtype=float), axes, cond)


# ---------------------------------------------------------------- construction


def test_slice_sums_validated():
    t = table([[0.5, 0.5], [0.2, 0.8]], ("w", "a"), ("w",))
    assert t.card("a") == 2
    with pytest.raises(DegenerateDistributionError):
        table([[0.5, 0.6], [0.2, 0.8]], ("w", "a"), ("w",))


def test_values_read_only():
    t = table([0.5, 0.5], ("a",))
    with pytest.raises(ValueError):
        t.values[0] = 1.0


def test_values_as_permutes_by_name():
    t = table([[0.1, 0.2], [0.3, 0.4]], ("w", "a"))
    np.testing.assert_array_equal(t.values_as(("a", "w")), t.values.T)
    with pytest.raises(AxisMismatchError):
        t.values_as(("a", "b"))


# ------------------------------------------------------------------- normalize


def test_normalize_basic():
    t = normalize(np.array([2.0, 2.0]), axes=("a",))
    np.testing.assert_allclose(t.values, [0.5, 0.5])


def test_normalize_keeps_point_mass():
    t = normalize(np.array([1.0, 0.0, 0.0]), axes=("a",))
    np.testing.assert_array_equal(t.values, [1.0, 0.0, 0.0])


def test_normalize_conditional_rows():
    raw = np.array([[3.0, 1.0], [1.0, 1.0]])
    t = normalize(raw, axes=("w", "a"), conditioned_on=("w",))
    np.testing.assert_allclose(t.values, [[0.75, 0.25], [0.5, 0.5]])


def test_normalize_rejects_empty_slice():
    raw = np.array([[1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(DegenerateDistributionError):
        normalize(raw, axes=("w", "a"), conditioned_on=("w",))


# ---------------------------------------------------- marginalize_condition


def test_marginalize_uniform_joint():
    t = table(np.full((2, 2), 0.25), ("w", "a"))
    m = marginalize_condition(t, keep=("a",))
    np.testing.assert_allclose(m.values, [0.5, 0.5])


def test_condition_deterministic_channel():
    # joint with a = w almost surely
    joint = np.zeros((3, 3))
    np.fill_diagonal(joint, 1.0 / 3.0)
    c = marginalize_condition(table(joint, ("w", "a")), keep=("a",), given=("w",))
    np.testing.assert_allclose(c.values, np.eye(3))
    assert c.conditioned == ("w",)


def test_condition_matches_bruteforce_on_random_joint():
    rng = np.random.default_rng(41)
    vals = rng.random((4, 3, 2))
    vals /= vals.sum()
    joint = table(vals, ("w", "x", "a"))
    got = marginalize_condition(joint, keep=("a",), given=("x",))
    expect = np.zeros((3, 2))
    for x in range(3):
        px = sum(vals[w, x, a] for w in range(4) for a in range(2))
        for a in range(2):
            pxa = sum(vals[w, x, a] for w in range(4))
            expect[x, a] = pxa / px
    np.testing.assert_allclose(got.values, expect, atol=1e-14)
    assert got.degenerate is None


def test_condition_flags_zero_mass_slice():
    vals = np.zeros((2, 2))
    vals[0] = [0.3, 0.7]
    got = marginalize_condition(table(vals, ("w", "a")), keep=("a",), given=("w",))
    np.testing.assert_allclose(got.values[1], [0.5, 0.5])
    assert got.degenerate is not None and got.degenerate[1] and not got.degenerate[0]


# ----------------------------------------------------------------- divergences


def test_kl_zero_for_identical():
    p = table([0.3, 0.7], ("a",))
    assert kl_divergence(p, p).nats == 0.0


def test_kl_known_values():
    p = table([1.0, 0.0], ("a",))
    q = table([0.5, 0.5], ("a",))
    assert math.isclose(kl_divergence(p, q).nats, math.log(2.0), rel_tol=1e-12)
    assert math.isclose(kl_divergence(p, q).bits, 1.0, rel_tol=1e-12)
    p2 = table([0.9, 0.1], ("a",))
    expect = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert math.isclose(kl_divergence(p2, q).nats, expect, rel_tol=1e-12)


def test_kl_requires_absolute_continuity():
    p = table([0.5, 0.5], ("a",))
    q = table([1.0, 0.0], ("a",))
    with pytest.raises(AbsoluteContinuityError):
        kl_divergence(p, q)


def test_kl_aligns_axes_by_name():
    p = table([[0.1, 0.2], [0.3, 0.4]], ("w", "a"))
    q = table(p.values.T, ("a", "w"))
    assert kl_divergence(p, q).nats == pytest.approx(0.0, abs=1e-15)


# ------------------------------------------------- conditional mutual information


def test_cmi_zero_for_independent():
    pw = np.array([0.25, 0.75])
    pa = np.array([0.4, 0.6])
    joint = table(np.outer(pw, pa), ("w", "a"))
    assert conditional_mutual_information(joint, "a", "w").nats < 1e-12


def test_mi_of_copy_channel():
    joint = table(np.eye(4) / 4.0, ("w", "a"))
    got = conditional_mutual_information(joint, "a", "w")
    assert math.isclose(got.nats, math.log(4.0), rel_tol=1e-12)
    assert math.isclose(got.bits, 2.0, rel_tol=1e-12)


def test_cmi_matches_bruteforce_triple_sum():
    rng = np.random.default_rng(7)
    vals = rng.random((3, 3, 2))
    vals /= vals.sum()
    joint = table(vals, ("w", "x", "z"))
    got = conditional_mutual_information(joint, "x", "w", given="z")
    pz = vals.sum(axis=(0, 1))
    pwz = vals.sum(axis=1)
    pxz = vals.sum(axis=0)
    expect = 0.0
    for w in range(3):
        for x in range(3):
            for z in range(2):
                p = vals[w, x, z]
                if p > 0:
                    expect += p * math.log(p * pz[z] / (pwz[w, z] * pxz[x, z]))
    assert math.isclose(got.nats, expect, rel_tol=1e-12)


def test_cmi_of_markov_chain_is_zero():
    # w -> x -> z, so I(w; z | x) = 0
    rng = np.random.default_rng(3)
    pw = rng.random(3)
    pw /= pw.sum()
    pxw = rng.random((3, 4))
    pxw /= pxw.sum(axis=1, keepdims=True)
    pzx = rng.random((4, 2))
    pzx /= pzx.sum(axis=1, keepdims=True)
    vals = pw[:, None, None] * pxw[:, :, None] * pzx[None, :, :]
    joint = table(vals, ("w", "x", "z"))
    assert conditional_mutual_information(joint, "z", "w", given="x").nats < 1e-12


# -------------------------------------------------------------- specialization


def test_specialization_limits():
    assert specialization(table(np.full(8, 0.125), ("a",))) == 0.0
    point = np.zeros(8)
    point[3] = 1.0
    assert specialization(table(point, ("a",))) == 1.0


def test_specialization_half_support():
    s = specialization(table([0.5, 0.5, 0.0, 0.0], ("a",)))
    assert math.isclose(s, 0.5, rel_tol=1e-12)


def test_specialization_rejects_single_element():
    with pytest.raises(UndefinedSpecializationError):
        specialization(table([1.0], ("a",)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12))
def test_specialization_in_unit_interval_and_permutation_invariant(weights):
    vals = np.array(weights) / sum(weights)
    s = specialization(table(vals, ("a",)))
    assert 0.0 <= s <= 1.0
    rng = np.random.default_rng(0)
    s2 = specialization(table(rng.permutation(vals), ("a",)))
    assert math.isclose(s, s2, abs_tol=1e-12)


# ----------------------------------------------------------- expected_agent_kl


def test_expected_agent_kl_zero_when_posterior_is_prior():
    prior = table([0.25, 0.75], ("a",))
    post = table(np.tile(prior.values, (3, 1)), ("w", "a"), ("w",))
    w = table(np.full(3, 1.0 / 3.0), ("w",))
    assert expected_agent_kl(post, prior, w).nats == 0.0


def test_expected_agent_kl_deterministic_vs_uniform():
    post = table(np.eye(4), ("w", "a"), ("w",))
    prior = table(np.full(4, 0.25), ("a",))
    w = table(np.full(4, 0.25), ("w",))
    got = expected_agent_kl(post, prior, w)
    assert math.isclose(got.bits, 2.0, rel_tol=1e-12)


def test_expected_agent_kl_matches_per_slice_oracle():
    rng = np.random.default_rng(11)
    post_vals = rng.random((3, 4))
    post_vals /= post_vals.sum(axis=1, keepdims=True)
    prior_vals = rng.random(4)
    prior_vals /= prior_vals.sum()
    w_vals = rng.random(3)
    w_vals /= w_vals.sum()
    got = expected_agent_kl(
        table(post_vals, ("w", "a"), ("w",)),
        table(prior_vals, ("a",)),
        table(w_vals, ("w",)),
    )
    expect = 0.0
    for i in range(3):
        expect += w_vals[i] * sum(
            post_vals[i, a] * math.log(post_vals[i, a] / prior_vals[a])
            for a in range(4)
        )
    assert math.isclose(got.nats, expect, rel_tol=1e-12)


def test_expected_agent_kl_skips_zero_weight_slices():
    post = table([[1.0, 0.0], [0.0, 1.0]], ("w", "a"), ("w",))
    prior = table([0.0, 1.0], ("a",))
    w = table([0.0, 1.0], ("w",))
    # the offending slice has zero weight, so no error and zero divergence
    assert expected_agent_kl(post, prior, w).nats == pytest.approx(0.0)


def test_expected_agent_kl_flags_support_violation():
    post = table([[1.0, 0.0], [0.5, 0.5]], ("w", "a"), ("w",))
    prior = table([0.0, 1.0], ("a",))
    w = table([0.5, 0.5], ("w",))
    with pytest.raises(AbsoluteContinuityError):
        expected_agent_kl(post, prior, w)


# -------------------------------------------------------------------- InfoValue


def test_infovalue_units():
    v = InfoValue(math.log(2.0))
    assert math.isclose(v.bits, 1.0, rel_tol=1e-12)
    assert math.isclose(float(InfoValue.from_bits(3.0)), 3.0 * math.log(2.0))


def test_entropy_uniform():
    t = table(np.full(4, 0.25), ("a",))
    assert math.isclose(entropy(t).bits, 2.0, rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(
        lambda ws: sum(ws) > 1e-6
    )
)
def test_kl_nonnegative_property(weights):
    p = np.array(weights) / sum(weights)
    q = np.full(len(weights), 1.0 / len(weights))
    got = kl_divergence(table(p, ("a",)), table(q, ("a",)))
    assert got.nats >= 0.0
