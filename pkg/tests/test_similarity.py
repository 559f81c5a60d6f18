import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomatch.parallel import get_workers, set_workers
from anatomatch.similarity import (
    EmptyRegionError,
    SearchRegion,
    coarse_to_fine_match,
    downsample,
    nn_match,
    nn_search,
    region_indices,
    similarity_map,
)
from anatomatch.volume import BoundsError, EmbeddingVolume, VolumeMismatchError, VoxelPoint

from conftest import quantized_volume, random_volume, unit_rows
from oracles import brute_argmax


class TestSimilarityMap:
    def test_peaks_at_source(self, rng):
        vol = random_volume(rng, (5, 6, 7))
        p = (2, 3, 4)
        m = similarity_map(vol.data[p], vol)
        assert np.unravel_index(m.argmax(), m.shape) == p
        assert m[p] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_scores_zero(self):
        q = np.zeros((3, 3, 3, 4))
        q[..., 1] = 1.0
        m = similarity_map(np.eye(4)[0], EmbeddingVolume(q, normalized=True))
        assert np.all(m == 0)

    def test_matches_elementwise_dot(self, rng):
        vol = random_volume(rng, (6, 6, 6))
        v = unit_rows(rng, (8,))
        m = similarity_map(v, vol)
        ref = np.einsum("zyxc,c->zyx", vol.data.astype(np.float64), v.astype(np.float32).astype(np.float64))
        np.testing.assert_allclose(m, ref, atol=1e-12)

    def test_region_shape(self, rng):
        vol = random_volume(rng, (6, 6, 6))
        m = similarity_map(vol.data[0, 0, 0], vol, SearchRegion((-2, 1, 1), (2, 3, 9)))
        assert m.shape == (3, 3, 5)

    def test_channel_mismatch(self, rng):
        with pytest.raises(VolumeMismatchError):
            similarity_map(np.ones(3), random_volume(rng, (2, 2, 2), 4))

    def test_empty_region(self, rng):
        with pytest.raises(EmptyRegionError):
            similarity_map(np.ones(8), random_volume(rng, (2, 2, 2)), SearchRegion((5, 5, 5), (6, 6, 6)))

    def test_scores_bounded(self, rng):
        vol = random_volume(rng, (8, 8, 8))
        m = similarity_map(vol.data[1, 1, 1], vol)
        assert m.max() <= 1 + 1e-5 and m.min() >= -1 - 1e-5


class TestNNMatch:
    def test_self_match(self, rng):
        vol = random_volume(rng, (6, 7, 8))
        for t in [(0, 0, 0), (3, 4, 5), (5, 6, 7)]:
            p, s = nn_match(vol, t, vol)
            assert p == t and s == pytest.approx(1.0, abs=1e-6)

    def test_translation(self, rng):
        a = random_volume(rng, (8, 8, 12))
        b = EmbeddingVolume(np.roll(a.data, 3, axis=2), normalized=True)
        p, _ = nn_match(a, (4, 4, 5), b)
        assert p == (4, 4, 8)

    def test_tie_lowest_linear_index(self, rng):
        data = unit_rows(rng, (4, 4, 4, 6))
        data[3, 1, 2] = data[0, 0, 0]
        data[1, 2, 3] = data[0, 0, 0]
        a = EmbeddingVolume(data, normalized=True)
        b = EmbeddingVolume(np.roll(data, 0, axis=0), normalized=True)
        p, _ = nn_match(a, (3, 1, 2), b)
        assert p == (0, 0, 0)

    def test_bounds(self, rng):
        vol = random_volume(rng, (3, 3, 3))
        with pytest.raises(BoundsError):
            nn_match(vol, (3, 0, 0), vol)

    def test_region_restricts(self, rng):
        vol = random_volume(rng, (6, 6, 6))
        p, _ = nn_match(vol, (0, 0, 0), vol, SearchRegion((3, 3, 3), (5, 5, 5)))
        assert all(3 <= c <= 5 for c in p)
        i, _ = brute_argmax(vol.data[0, 0, 0], vol.data, region_indices(vol.dims, SearchRegion((3, 3, 3), (5, 5, 5))))
        assert vol.point(i) == p

    def test_positive_rescaling_invariant(self, rng):
        a, b = random_volume(rng, (5, 5, 5)), random_volume(rng, (5, 5, 5))
        v = a.data[2, 2, 2]
        i1, _ = nn_search(v, b)
        i2, _ = nn_search(v * 7.5, b)
        assert i1[0] == i2[0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_brute_force_property(self, seed, quantized):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(1, 9, 3))
        a = quantized_volume(rng, dims) if quantized else random_volume(rng, dims, 4)
        b = quantized_volume(rng, dims) if quantized else random_volume(rng, dims, 4)
        t = tuple(int(rng.integers(0, d)) for d in dims)
        p, s = nn_match(a, t, b)
        i, ref = brute_argmax(a.data[t], b.data)
        assert b.linear_index(p) == i and s == ref

    def test_thread_count_invariant(self, rng, monkeypatch):
        import anatomatch.similarity as sim

        monkeypatch.setattr(sim, "_CHUNK", 64)
        a, b = quantized_volume(rng, (10, 10, 10)), quantized_volume(rng, (10, 10, 10))
        old = get_workers()
        try:
            set_workers(1)
            one = nn_search(a.flat()[:50], b)
            set_workers(4)
            four = nn_search(a.flat()[:50], b)
        finally:
            set_workers(old)
        np.testing.assert_array_equal(one[0], four[0])
        np.testing.assert_array_equal(one[1], four[1])


class TestCoarseToFine:
    def test_exhaustive_limit(self, rng):
        a, b = random_volume(rng, (8, 8, 8)), random_volume(rng, (8, 8, 8))
        ac, bc = downsample(a, 2), downsample(b, 2)
        t = (3, 5, 2)
        got = coarse_to_fine_match(ac, a, t, bc, b, top_k=64, window=17)
        assert got == nn_match(a, t, b)

    def test_unique_coarse_peak(self):
        sample = _smooth(16)
        g = np.stack(np.meshgrid(*(np.arange(16),) * 3, indexing="ij"), -1).reshape(-1, 3)
        a = EmbeddingVolume(sample(g).reshape(16, 16, 16, -1), normalized=True)
        b = EmbeddingVolume(sample(g + (2, -1, 3)).reshape(16, 16, 16, -1), normalized=True)
        t = (8, 7, 6)
        got = coarse_to_fine_match(downsample(a, 2), a, t, downsample(b, 2), b, top_k=1, window=9)
        assert got[0] == nn_match(a, t, b)[0] == (6, 8, 3)

    def test_result_inside_searched_boxes(self, rng):
        a, b = random_volume(rng, (12, 12, 12)), random_volume(rng, (12, 12, 12))
        ac, bc = downsample(a, 3), downsample(b, 3)
        p, _ = coarse_to_fine_match(ac, a, (5, 5, 5), bc, b, top_k=1, window=5)
        peak = np.unravel_index(similarity_map(ac.data[1, 1, 1], bc).argmax(), bc.dims)
        center = np.array(peak) * 3 + 1
        assert np.all(np.abs(np.array(p) - center) <= 2)

    def test_inconsistent_factor(self, rng):
        a, b = random_volume(rng, (8, 8, 8)), random_volume(rng, (8, 8, 8))
        with pytest.raises(ValueError):
            coarse_to_fine_match(downsample(a, 2), a, (1, 1, 1), downsample(b, 4), b)

    def test_downsample_normalized(self, rng):
        d = downsample(random_volume(rng, (5, 5, 5)), 2)
        assert d.dims == (3, 3, 3) and d.normalized and d.spacing == (4.0, 4.0, 4.0)


def _smooth(c=16, seed=3):
    from conftest import smooth_field

    return smooth_field((16, 16, 16), c, seed)
