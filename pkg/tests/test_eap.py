import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from eventfly.eap import (
    BlendMask,
    DensityMap,
    RegionMask,
    SimilarityMap,
    aggregate_target_density,
    binary_mask,
    density_map,
    empirical_entropy,
    high_activation_region,
    normalize_density,
    quantile,
    similarity_map,
)
from eventfly.errors import ConfigError, DomainError, EmptyInputError, EventFlyWarning, ShapeError
from eventfly.events import VoxelGrid


def _sorted_quantile(values, q):
    v = sorted(float(x) for x in np.ravel(values))
    pos = q * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def _naive_density(v):
    t, h, w = v.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = sum(abs(float(v[k, y, x])) for k in range(t))
    return out


def _naive_entropy(p, region):
    vals = []
    c, h, w = p.shape
    for y in range(h):
        for x in range(w):
            if region[y, x]:
                vals.append(-sum(float(p[k, y, x]) * math.log(p[k, y, x]) for k in range(c) if p[k, y, x] > 0))
    return sum(vals) / len(vals)


def _random_probs(rng, c, h, w, sharp=1.0):
    z = rng.normal(size=(c, h, w)) * sharp
    e = np.exp(z - z.max(0))
    return e / e.sum(0)


# -- density --------------------------------------------------------------------------


def test_density_examples(rng):
    assert not density_map(VoxelGrid(np.zeros((3, 2, 2)))).values.any()
    v = np.zeros((2, 2, 2), np.float32)
    v[0, 1, 1], v[1, 1, 1] = 1, -1
    assert density_map(VoxelGrid(v)).values[1, 1] == 2.0
    r = rng.normal(size=(5, 6, 7)).astype(np.float32)
    np.testing.assert_allclose(density_map(VoxelGrid(r)).values, _naive_density(r), rtol=1e-12)


def test_aggregate_density(rng):
    g = VoxelGrid(rng.normal(size=(4, 3, 5)))
    np.testing.assert_array_equal(aggregate_target_density([g]).values, density_map(g).values)
    three = VoxelGrid(3 * g.data)
    np.testing.assert_allclose(aggregate_target_density([g, three]).values, 2 * density_map(g).values, rtol=1e-6)
    with pytest.raises(EmptyInputError):
        aggregate_target_density([])
    with pytest.raises(ShapeError):
        aggregate_target_density([g, VoxelGrid(np.zeros((4, 2, 5)))])


def test_density_map_rejects_negative_values():
    with pytest.raises(DomainError):
        DensityMap(np.array([[-1.0]]))


# -- normalisation ------------------------------------------------------------------------


def test_normalize_examples():
    z = DensityMap(np.zeros((2, 2)))
    assert not normalize_density(z).values.any()
    d = DensityMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert normalize_density(d, "max").values.max() == 1.0
    q = normalize_density(d, "quantile-0.5").values
    np.testing.assert_allclose(q, np.clip(d.values / 2.5, 0, 1))
    with pytest.raises(ConfigError):
        normalize_density(d, "median")
    with pytest.raises(ConfigError):
        normalize_density(d, "quantile-2")


def test_quantile_matches_sorted_oracle(rng):
    for _ in range(50):
        v = rng.random(int(rng.integers(1, 40)))
        q = float(rng.random())
        assert quantile(v, q) == pytest.approx(_sorted_quantile(v, q), abs=1e-12)


# -- similarity and mask --------------------------------------------------------------------


def test_similarity_examples():
    a = DensityMap(np.array([[0.5, 1.0, 0.0]]))
    s = similarity_map(a, a)
    assert s.values[0, 0] == 1.0 and s.values[0, 1] == 1.0
    assert not s.defined[0, 2]
    s = similarity_map(DensityMap(np.array([[1.0]])), DensityMap(np.array([[0.0]])))
    assert s.values[0, 0] == 0.0 and s.defined[0, 0]


def test_similarity_errors():
    with pytest.raises(ShapeError):
        similarity_map(DensityMap(np.zeros((2, 2))), DensityMap(np.zeros((2, 3))))
    with pytest.raises(DomainError):
        similarity_map(DensityMap(np.full((1, 1), 1.5)), DensityMap(np.zeros((1, 1))))


def test_mask_examples():
    sim = SimilarityMap(np.array([[0.4, 0.39, 0.0]]), np.array([[True, True, False]]))
    np.testing.assert_array_equal(binary_mask(sim, 0.4).bits, [[True, False, True]])
    with pytest.raises(ConfigError):
        binary_mask(sim, 1.0 + 1e-9)
    with pytest.raises(ConfigError):
        binary_mask(sim, -0.1)


def test_mask_types():
    m = BlendMask(np.array([[1, 0]]))
    assert (~m).bits.tolist() == [[False, True]]
    assert m == BlendMask(np.array([[True, False]]))


unit_maps = hnp.arrays(np.float64, (4, 5), elements=st.floats(0, 1))


@settings(max_examples=80, deadline=None)
@given(a=unit_maps, b=unit_maps, t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_similarity_symmetry_and_mask_monotonicity(a, b, t1, t2):
    s_ab = similarity_map(DensityMap(a), DensityMap(b))
    s_ba = similarity_map(DensityMap(b), DensityMap(a))
    np.testing.assert_array_equal(s_ab.values, s_ba.values)
    np.testing.assert_array_equal(s_ab.defined, s_ba.defined)
    assert np.all((s_ab.values >= 0) & (s_ab.values <= 1))
    lo, hi = min(t1, t2), max(t1, t2)
    m_lo, m_hi = binary_mask(s_ab, lo).bits, binary_mask(s_ab, hi).bits
    assert np.all(m_lo >= m_hi)
    assert np.all(binary_mask(s_ab, 0.0).bits)


# -- region -----------------------------------------------------------------------------------


def test_region_examples():
    d = DensityMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(high_activation_region(d, 0.5).bits, [[False, False], [True, True]])
    assert high_activation_region(DensityMap(np.full((3, 3), 0.7)), 0.9).bits.all()
    assert len(high_activation_region(DensityMap(np.zeros((3, 3))), 0.5)) == 0
    for q in (0.0, 1.0):
        with pytest.raises(ConfigError):
            high_activation_region(d, q)


@settings(max_examples=60, deadline=None)
@given(d=hnp.arrays(np.float64, (5, 6), elements=st.floats(0, 10)), q1=st.floats(0.01, 0.99), q2=st.floats(0.01, 0.99))
def test_region_oracle_and_monotone(d, q1, q2):
    dm = DensityMap(d)
    lo, hi = min(q1, q2), max(q1, q2)
    r_lo, r_hi = high_activation_region(dm, lo).bits, high_activation_region(dm, hi).bits
    assert np.all(r_lo >= r_hi)
    pos = d[d > 0]
    if pos.size:
        thr = _sorted_quantile(pos, lo)
        np.testing.assert_array_equal(r_lo, (d >= thr) & (d > 0))
    else:
        assert not r_lo.any()


# -- entropy ----------------------------------------------------------------------------------


def test_entropy_examples(rng):
    region = RegionMask(np.ones((3, 4), bool))
    one_hot = np.zeros((11, 3, 4))
    one_hot[2] = 1
    assert empirical_entropy(one_hot, region) == 0.0
    uniform = np.full((11, 3, 4), 1 / 11)
    assert abs(empirical_entropy(uniform, region) - math.log(11)) < 1e-9
    p = _random_probs(rng, 5, 6, 7)
    r = RegionMask(rng.random((6, 7)) < 0.5)
    assert empirical_entropy(p, r) == pytest.approx(_naive_entropy(p, r.bits), rel=1e-12)


def test_entropy_errors_and_empty_region():
    p = np.full((2, 2, 2), 0.5)
    with pytest.warns(EventFlyWarning):
        assert empirical_entropy(p, RegionMask(np.zeros((2, 2), bool))) == 0.0
    with pytest.raises(DomainError):
        empirical_entropy(np.full((2, 2, 2), 0.7), RegionMask(np.ones((2, 2), bool)))
    with pytest.raises(ShapeError):
        empirical_entropy(p, RegionMask(np.ones((3, 2), bool)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.integers(2, 12), sharp=st.floats(0.1, 20))
def test_entropy_bounds_and_class_permutation(seed, c, sharp):
    rng = np.random.default_rng(seed)
    p = _random_probs(rng, c, 3, 3, sharp)
    r = RegionMask(np.ones((3, 3), bool))
    h = empirical_entropy(p, r)
    assert 0.0 <= h <= math.log(c) + 1e-12
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert empirical_entropy(p[rng.permutation(c)], r) == pytest.approx(h, rel=1e-12, abs=1e-15)
