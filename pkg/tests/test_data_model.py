import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.data_model import (
    DataModelConfig,
    DataModelError,
    InfeasibleError,
    InvalidDistributionError,
    InvalidWordError,
    LatentSet,
    check_lemma_B_properties,
    check_symmetry_assumption,
    encode_sentence,
    encoding_matrices,
    enumerate_support,
    full_latent_set,
    hamming_distance,
    sample_latents,
    sample_sentence,
    sentence_probability,
    word_distribution,
    word_from_index,
    word_index,
)


def cfg(n_c=3, s_c=4, L=2, K=4, dist="uniform"):
    return DataModelConfig.make(n_c, s_c, L, K, dist)


# ---------------------------------------------------------- distributions

def test_uniform_distribution():
    np.testing.assert_allclose(word_distribution("uniform", 4), [0.25] * 4)


def test_zipf_two_words():
    np.testing.assert_allclose(word_distribution("zipf", 2), [2 / 3, 1 / 3], rtol=1e-15)


def test_zipf_400_matches_harmonic_sum():
    mu = word_distribution("zipf", 400)
    H400 = sum(1.0 / i for i in range(1, 401))
    assert mu[0] == pytest.approx(1 / H400, rel=1e-14)
    assert mu.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(np.diff(mu) < 0)


def test_custom_distribution_normalised():
    np.testing.assert_allclose(word_distribution([2, 1, 1]), [0.5, 0.25, 0.25])


@pytest.mark.parametrize("bad", [[1, 0], [1, -1], [], [np.nan, 1]])
def test_custom_distribution_rejects_bad_weights(bad):
    with pytest.raises(InvalidDistributionError):
        word_distribution("custom", values=bad)


def test_unknown_distribution():
    with pytest.raises(InvalidDistributionError):
        word_distribution("pareto", 3)


def test_config_checks_mu_length():
    with pytest.raises(InvalidDistributionError):
        DataModelConfig(2, 3, 1, 1, np.array([0.5, 0.5]))


# --------------------------------------------------------------- encoding

def test_encode_first_word():
    M = encode_sentence([(1, 1)], cfg(L=1))
    assert M.shape == (12, 1)
    assert M[0, 0] == 1 and M.sum() == 1


def test_encode_word_2_3_is_slot_7():
    M = encode_sentence([(2, 3)], cfg(L=1))
    # slot 7 in 1-based numbering
    assert np.flatnonzero(M[:, 0]).tolist() == [6]


def test_encode_two_positions():
    M = encode_sentence([(1, 1), (3, 4)], cfg())
    assert np.flatnonzero(M[:, 0]).tolist() == [0]
    assert np.flatnonzero(M[:, 1]).tolist() == [11]


@pytest.mark.parametrize("w", [(0, 1), (4, 1), (1, 5), (1, 0)])
def test_encode_rejects_out_of_range(w):
    with pytest.raises(InvalidWordError):
        encode_sentence([w], cfg(L=1))


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_word_index_roundtrip(n_c, s_c, data):
    a = data.draw(st.integers(1, n_c))
    b = data.draw(st.integers(1, s_c))
    j = word_index(a, b, s_c)
    assert 0 <= j < n_c * s_c
    assert word_from_index(j, s_c) == (a, b)


def test_encoding_matrices_act_on_words():
    c = cfg(dist="zipf")
    enc = encoding_matrices(c)
    for a, b in itertools.product(range(1, 4), range(1, 5)):
        zeta = encode_sentence([(a, b)], DataModelConfig(3, 4, 1, 1, c.mu))[:, 0]
        e = np.eye(3)[a - 1]
        np.testing.assert_array_equal(enc.P @ zeta, e)
        np.testing.assert_allclose(enc.Q @ zeta, c.mu[b - 1] * e)


# ---------------------------------------------------------------- latents

def test_full_latent_set_2_2():
    assert full_latent_set(2, 2).latents == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_full_latent_set_3_1():
    assert full_latent_set(3, 1).latents == [(1,), (2,), (3,)]


def test_full_latent_set_2_3_distinct():
    ls = full_latent_set(2, 3)
    D = ls.distance_matrix()
    assert ls.K == 8
    assert np.all(D[~np.eye(8, dtype=bool)] >= 1)


def test_sample_latents_full_scale_distinct():
    ls = sample_latents(DataModelConfig.make(3, 400, 15, 1000), np.random.default_rng(7))
    assert ls.K == 1000
    assert len({tuple(z) for z in ls.concepts}) == 1000


def test_sample_latents_deterministic():
    c = DataModelConfig.make(3, 2, 6, 50)
    a = sample_latents(c, np.random.default_rng(3))
    b = sample_latents(c, np.random.default_rng(3))
    np.testing.assert_array_equal(a.concepts, b.concepts)


def test_sample_latents_full_space_is_permutation():
    c = DataModelConfig.make(2, 1, 3, 8)
    ls = sample_latents(c, np.random.default_rng(0))
    assert sorted(map(tuple, ls.concepts.tolist())) == sorted(itertools.product(range(2), repeat=3))


def test_sample_latents_infeasible():
    with pytest.raises(InfeasibleError):
        sample_latents(DataModelConfig.make(2, 1, 2, 5), np.random.default_rng(0))


def test_latent_set_rejects_duplicates():
    with pytest.raises(DataModelError):
        LatentSet.from_latents([(1, 2), (1, 2)], 2)
    assert LatentSet.from_latents([(1, 2), (1, 2)], 2, distinct=False).K == 2


# -------------------------------------------------------------- sentences

def test_sample_sentence_frequencies_approach_product_law():
    c = DataModelConfig.make(2, 3, 2, 1)
    rng = np.random.default_rng(1)
    n = 30000
    counts = {}
    for _ in range(n):
        x = sample_sentence((1, 2), c, rng)
        counts[x] = counts.get(x, 0) + 1
    assert len(counts) == 9
    for x, m in counts.items():
        assert [w.alpha for w in x] == [1, 2]
        assert m / n == pytest.approx(1 / 9, abs=0.01)


def test_sampled_sentence_probability_is_product():
    c = DataModelConfig.make(3, 5, 4, 1, "zipf")
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = sample_sentence((3, 1, 2, 2), c, rng)
        assert sentence_probability(x, (3, 1, 2, 2), c) == pytest.approx(np.prod([c.mu[w.beta - 1] for w in x]))


def test_single_word_concepts_are_deterministic():
    c = DataModelConfig.make(3, 1, 3, 1)
    x = sample_sentence((2, 3, 1), c, np.random.default_rng(0))
    assert x == ((2, 1), (3, 1), (1, 1))


def test_sentence_probability_examples():
    c = DataModelConfig.make(2, 2, 2, 1, "zipf")
    assert sentence_probability(((1, 1), (2, 2)), (1, 2), c) == pytest.approx(2 / 9)
    assert sentence_probability(((1, 1), (1, 2)), (1, 2), c) == 0.0
    u = DataModelConfig.make(2, 3, 2, 1)
    assert sentence_probability(((2, 3), (2, 1)), (2, 2), u) == pytest.approx(1 / 9)


def test_enumerate_support_sums_to_one():
    c = DataModelConfig.make(3, 3, 3, 1, "zipf")
    X, p = enumerate_support(np.array([2, 0, 1]), c)
    assert X.shape == (27, 3)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    assert set(X[:, 0] // 3) == {2}


def test_hamming_examples():
    assert hamming_distance((1, 2, 3), (1, 2, 3)) == 0
    assert hamming_distance((1, 1, 1), (1, 2, 3)) == 2


@given(st.lists(st.integers(1, 4), min_size=1, max_size=8), st.data())
def test_hamming_symmetric(z, data):
    zp = data.draw(st.lists(st.integers(1, 4), min_size=len(z), max_size=len(z)))
    assert hamming_distance(z, zp) == hamming_distance(zp, z)
    assert 0 <= hamming_distance(z, zp) <= len(z)


# ---------------------------------------------------------------- symmetry

def _brute_force_symmetry(z, n_c):
    """Reference count by explicit loops over all (k, r, l, alpha)."""
    K, L = z.shape
    for k in range(K):
        for r in range(1, L + 1):
            for l in range(L):
                for a in range(n_c):
                    cnt = sum(1 for j in range(K) if (z[k] != z[j]).sum() == r and z[j, l] == a)
                    if a == z[k, l]:
                        target = K / n_c**L * comb(L - 1, r) * (n_c - 1) ** r
                    else:
                        target = K / n_c**L * comb(L - 1, r - 1) * (n_c - 1) ** (r - 1)
                    if cnt != target:
                        return False
    return True


@pytest.mark.parametrize("n_c,L", [(2, 2), (3, 3), (2, 4), (4, 2)])
def test_symmetry_holds_on_full_sets(n_c, L):
    ls = full_latent_set(n_c, L)
    rep = check_symmetry_assumption(ls)
    assert rep.holds and rep.worst_violation == 0
    assert _brute_force_symmetry(ls.concepts, n_c)


def test_symmetry_fails_for_two_latents():
    ls = sample_latents(DataModelConfig.make(2, 1, 3, 2), np.random.default_rng(0))
    rep = check_symmetry_assumption(ls)
    assert not rep.holds and rep.n_violations > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 3), st.integers(1, 3), st.data())
def test_symmetry_agrees_with_brute_force(n_c, L, data):
    full = full_latent_set(n_c, L).concepts
    rows = data.draw(st.lists(st.integers(0, len(full) - 1), min_size=1, max_size=len(full), unique=True))
    ls = LatentSet(full[sorted(rows)], n_c)
    assert check_symmetry_assumption(ls).holds == _brute_force_symmetry(ls.concepts, n_c)


def test_spheres_sphere_sizes_2_2():
    rep = check_lemma_B_properties(full_latent_set(2, 2))
    assert rep.sphere_sizes.tolist() == [1, 2, 1]
    assert rep.holds


def test_spheres_gram_3_2():
    ls = full_latent_set(3, 2)
    np.testing.assert_allclose(ls.Z @ ls.Z.T, 6 * np.eye(3))
    assert check_lemma_B_properties(ls).gram_identity


def test_spheres_theta_value():
    ls = full_latent_set(3, 2)
    rep = check_lemma_B_properties(ls)
    np.testing.assert_allclose(rep.theta, [0.75, 1.5])
    # theta_1 at n_c=3, L=15 is (3/2)(1/15)
    assert 3 / 2 * 1 / 15 == pytest.approx(0.1)


def test_spheres_fails_on_subset():
    full = full_latent_set(3, 2)
    rep = check_lemma_B_properties(LatentSet(full.concepts[:5], 3))
    assert not rep.holds
