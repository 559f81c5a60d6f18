import numpy as np
import pytest

from anatomatch.phantom import (
    BACKGROUND_MEAN,
    BACKGROUND_STD,
    AugmentConfig,
    AugmentParams,
    CorrespondenceSet,
    OverlapTooSmall,
    Phantom,
    PhantomConfig,
    RegionError,
    Sphere,
    TruthMap,
    augment,
    class_profiles,
    corrupt,
    corrupt_pair,
    generate_phantom,
    rotation_matrix,
    sample_correspondences,
    sample_params,
    smooth_noise,
)
from anatomatch.volume import LabelVolume

SMALL = PhantomConfig(dims=(40, 40, 40), n_structures=(6, 8))


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(SMALL, seed=3)


def bhattacharyya(a, b, bins=40):
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    pa, _ = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.sqrt(pa / pa.sum() * pb / pb.sum()).sum())


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_phantom(SMALL, 11), generate_phantom(SMALL, 11)
        assert a.intensity.tobytes() == b.intensity.tobytes()
        assert a.labels.data.tobytes() == b.labels.data.tobytes() and a.structures == b.structures

    def test_seed_matters(self):
        assert not np.array_equal(generate_phantom(SMALL, 1).intensity, generate_phantom(SMALL, 2).intensity)

    def test_empty(self):
        ph = generate_phantom(PhantomConfig(dims=(16, 16, 16), n_structures=(0, 0)), seed=0)
        assert ph.structures == [] and not ph.labels.data.any()
        assert abs(ph.intensity.mean() - BACKGROUND_MEAN) < 1e-3

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_look_alike_classes_overlap(self, seed):
        ph = generate_phantom(SMALL, seed)
        lab = ph.labels.data
        assert bhattacharyya(ph.intensity[lab == 1], ph.intensity[lab == 2]) > 0.5

    def test_distinct_classes_separate(self, phantom):
        lab = phantom.labels.data
        assert bhattacharyya(phantom.intensity[lab == 1], phantom.intensity[lab == 5]) < 0.1

    def test_profiles(self):
        prof = class_profiles(6)
        assert len(prof) == 6 and prof[1].mean == prof[2].mean and prof[2].texture > prof[1].texture

    def test_label_centroids(self, phantom):
        for s in phantom.structures:
            vox = np.argwhere(phantom.instances == s.id + 1)
            assert s.radius_mm > 0 and len(vox)
            assert np.all(phantom.labels.data[tuple(vox.T)] == s.cls)
            assert np.linalg.norm(vox.mean(axis=0) - np.array(s.center_mm) / 2.0) < 1.0

    def test_centers_inside(self, phantom):
        ext = np.array(phantom.dims) * 2.0
        for s in phantom.structures:
            assert np.all(np.array(s.center_mm) > 0) and np.all(np.array(s.center_mm) < ext)

    @pytest.mark.parametrize("bad", [dict(dims=(0, 4, 4)), dict(n_structures=(3, 1)), dict(radius_mm=(0.0, 1.0)), dict(spacing=0.0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            PhantomConfig(**bad).validate()

    def test_packing_failure(self):
        from anatomatch.phantom import PackingError

        with pytest.raises(PackingError):
            generate_phantom(PhantomConfig(dims=(12, 12, 12), n_structures=(20, 20), max_retries=5), 0)


class TestAugment:
    def test_identity(self, phantom):
        pair = augment(phantom, AugmentParams(noise_sigma=0.01, noise_seed=4))
        pts = np.random.default_rng(0).uniform(0, 78, (20, 3))
        np.testing.assert_allclose(pair.truth.apply(pts), pts, atol=1e-12)
        assert pair.overlap.all()
        diff = pair.view_b.astype(np.float64) - pair.view_a
        assert 0 < np.abs(diff).max() and abs(diff.std() - 0.01 * np.sqrt(2)) < 2e-3

    def test_translation(self, phantom):
        pair = augment(phantom, AugmentParams(translation_mm=(0.0, 0.0, 6.0)))
        pts = np.random.default_rng(1).uniform(0, 78, (20, 3))
        np.testing.assert_allclose(pair.truth.apply(pts), pts + [0, 0, 6], atol=1e-12)
        np.testing.assert_array_equal(pair.view_b[:, :, 3:], pair.view_a[:, :, :-3])

    def test_matrix_oracle(self, phantom):
        params = AugmentParams(rotation_deg=(9.0, -12.0, 5.0), scale=(0.85, 1.15, 1.05), translation_mm=(3.0, -4.0, 2.5))
        truth = augment(phantom, params).truth
        az, ay, ax = np.deg2rad(params.rotation_deg)
        rz = np.array([[1, 0, 0], [0, np.cos(az), -np.sin(az)], [0, np.sin(az), np.cos(az)]])
        ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
        rx = np.array([[np.cos(ax), -np.sin(ax), 0], [np.sin(ax), np.cos(ax), 0], [0, 0, 1]])
        A = rz @ ry @ rx @ np.diag(params.scale)
        c = np.full(3, 39.0)
        pts = np.random.default_rng(2).uniform(0, 78, (100, 3))
        want = np.array([A @ (p - c) + c + params.translation_mm for p in pts])
        assert np.abs(truth.apply(pts) - want).max() < 1e-9
        assert np.abs(truth.inverse(want) - pts).max() < 1e-9

    def test_rotation_is_orthonormal(self):
        r = rotation_matrix((13.0, -7.0, 4.0))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)

    def test_dirac_marker(self):
        dims = (24, 24, 24)
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = rng.integers(8, 16, 3)
            vol = np.zeros(dims, np.float32)
            vol[tuple(p)] = 1.0
            ph = Phantom(vol, LabelVolume(np.zeros(dims, np.uint16), 2), np.zeros(dims, np.int32), [], (2.0,) * 3, 0)
            params = AugmentParams(
                rotation_deg=tuple(rng.uniform(-15, 15, 3)), scale=tuple(rng.uniform(0.8, 1.2, 3)), translation_mm=tuple(rng.uniform(-4, 4, 3))
            )
            pair = augment(ph, params)
            peak = np.unravel_index(np.argmax(pair.view_b), dims)
            assert np.abs(np.array(peak) - pair.truth_voxel(p)).max() <= 1.0

    def test_params_in_range(self):
        cfg = AugmentConfig()
        for seed in range(20):
            p = sample_params((40, 40, 40), 2.0, cfg, seed)
            assert np.all(np.abs(p.rotation_deg) <= 15) and np.all((0.8 <= np.array(p.scale)) & (np.array(p.scale) <= 1.2))
            assert np.all(np.abs(p.translation_mm) <= 0.5 * 80)

    def test_overlap_lands_inside(self, phantom):
        pair = augment(phantom, seed=9)
        vox = np.argwhere(pair.overlap)
        img = pair.truth_voxel(vox)
        assert np.all(img >= 0) and np.all(img <= np.array(pair.dims) - 1)

    def test_augment_deterministic(self, phantom):
        a, b = augment(phantom, seed=4), augment(phantom, seed=4)
        assert a.view_b.tobytes() == b.view_b.tobytes() and a.metadata() == b.metadata()

    @pytest.mark.parametrize("bad", [dict(max_rotation_deg=20.0), dict(scale_range=(0.7, 1.0)), dict(overlap=0.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            AugmentConfig(**bad).validate()


class TestCorrupt:
    def test_erase(self, phantom):
        pair = augment(phantom, AugmentParams())
        s = phantom.structures[0]
        region = Sphere(tuple(np.array(s.center_mm) / 2.0), s.radius_mm / 2.0)
        out = corrupt_pair(pair, "erase-structure", region, seed=1)
        mask = region.mask(pair.dims)
        assert out.labels_b is pair.labels_b and out.truth == pair.truth
        fill = BACKGROUND_MEAN + BACKGROUND_STD * smooth_noise(np.random.default_rng(1), pair.dims, 2.0)
        np.testing.assert_array_equal(out.view_b[mask], fill[mask].astype(np.float32))
        np.testing.assert_array_equal(out.view_b[~mask], pair.view_b[~mask])

    def test_intensity_shift_gain(self, phantom):
        region = Sphere((20.0, 20.0, 20.0), 6.0)
        mask = region.mask(phantom.dims)
        out = corrupt(phantom.intensity, "intensity-shift", region, gain=1.5)
        assert abs(out[mask].mean() / phantom.intensity[mask].mean() - 1.5) < 0.015

    @pytest.mark.parametrize("mode", ["erase-structure", "intensity-shift", "local-deform"])
    def test_empty_region_identity(self, phantom, mode):
        out = corrupt(phantom.intensity, mode, Sphere((5.0, 5.0, 5.0), 0.0))
        assert out.tobytes() == phantom.intensity.tobytes()

    def test_out_of_bounds(self, phantom):
        with pytest.raises(RegionError):
            corrupt(phantom.intensity, "erase-structure", Sphere((50.0, 1.0, 1.0), 2.0))

    def test_deterministic(self, phantom):
        r = Sphere((20.0, 18.0, 22.0), 5.0)
        a = corrupt(phantom.intensity, "erase-structure", r, seed=7)
        assert a.tobytes() == corrupt(phantom.intensity, "erase-structure", r, seed=7).tobytes()

    def test_local_deform_updates_truth(self, phantom):
        pair = augment(phantom, AugmentParams())
        region = Sphere((20.0, 20.0, 20.0), 6.0)
        out = corrupt_pair(pair, "local-deform", region, seed=2)
        assert len(out.truth.deforms) == 1
        c_mm = np.array([[40.0, 40.0, 40.0]])
        moved = out.truth.apply(c_mm)
        assert np.linalg.norm(moved - c_mm) > 0.5
        # content at the moved centre in the new view is the old centre content
        np.testing.assert_allclose(out.truth.inverse(moved), c_mm, atol=1e-6)
        round_trip = TruthMap.from_dict(out.truth.to_dict())
        np.testing.assert_allclose(round_trip.apply(c_mm), moved)


class TestCorrespondences:
    def test_identity_pair(self, phantom):
        cs = sample_correspondences(augment(phantom, AugmentParams()), 10, seed=0)
        assert all(c.template == c.truth_query for c in cs.pairs)

    def test_translation_pair(self, phantom):
        cs = sample_correspondences(augment(phantom, AugmentParams(translation_mm=(4.0, -2.0, 6.0))), 10, seed=0)
        for c in cs.pairs:
            np.testing.assert_allclose(np.subtract(c.truth_query, c.template), [4, -2, 6], atol=1e-12)

    def test_bounds(self, phantom):
        pair = augment(phantom, seed=1)
        ext = (np.array(pair.dims) - 1) * 2.0
        pts = sample_correspondences(pair, 1000, seed=3).pairs
        for c in pts:
            assert np.all(np.array(c.template) >= 0) and np.all(np.array(c.template) <= ext)
            assert np.all(np.array(c.truth_query) >= 0) and np.all(np.array(c.truth_query) <= ext)

    def test_radius_and_tag(self, phantom):
        for c in sample_correspondences(augment(phantom, AugmentParams()), 20, seed=1).pairs:
            sid = int(c.tag.split(":")[0].removeprefix("structure"))
            assert c.radius_mm == phantom.structures[sid].radius_mm

    def test_json_round_trip(self, phantom):
        cs = sample_correspondences(augment(phantom, seed=2), 5, seed=1)
        back = CorrespondenceSet.from_dict(cs.to_dict())
        assert back.pairs == cs.pairs and back.transform == cs.transform

    def test_too_small(self):
        ph = generate_phantom(PhantomConfig(dims=(16, 16, 16), n_structures=(0, 0)), 0)
        with pytest.raises(OverlapTooSmall):
            sample_correspondences(augment(ph, AugmentParams()), 1)
