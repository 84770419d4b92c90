import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from radpos.errors import BundleFormatError, DegenerateInputError, SizeMismatchError
from radpos.phantom import PhantomConfig, generate_cohort
from radpos.volume import (
    IMAGE_CHANNELS,
    VolumeBundle,
    center_crop,
    load_bundle,
    normalize_intensity,
    preprocess,
    resample_trilinear,
    save_bundle,
)


def _bundle(shape=(4, 4, 4), **channels):
    return VolumeBundle(shape, (1.0, 1.0, 1.0), channels)


class TestBundleFormat:
    def test_zero_bundle_round_trips_bytes(self, tmp_path):
        b = _bundle(T2w=np.zeros((4, 4, 4)))
        save_bundle(b, tmp_path / "a")
        loaded = load_bundle(tmp_path / "a")
        save_bundle(loaded, tmp_path / "b")
        for name in ("meta.json", "T2w.raw"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "T2w.raw").read_bytes() == bytes(4 * 64)

    def test_storage_order_is_k_slowest(self, tmp_path):
        arr = np.arange(24, dtype=np.float32).reshape((2, 3, 4), order="F")
        save_bundle(VolumeBundle((2, 3, 4), (1, 1, 1), {"T2w": arr}), tmp_path)
        raw = np.frombuffer((tmp_path / "T2w.raw").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, np.arange(24))
        # voxel (i=1, j=2, k=3) sits at offset 1 + 2*2 + 3*2*3
        assert raw[1 + 2 * 2 + 3 * 6] == arr[1, 2, 3]

    def test_meta_layout(self, tmp_path):
        save_bundle(VolumeBundle((2, 3, 4), (0.5, 0.5, 3.0), {"T2w": np.zeros((2, 3, 4)),
                                                              "gland_mask": np.ones((2, 3, 4))}), tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta == {"shape": [2, 3, 4], "spacing_mm": [0.5, 0.5, 3.0], "channels": ["T2w", "gland_mask"]}

    def test_short_raw_file_is_size_mismatch(self, tmp_path):
        (tmp_path / "meta.json").write_text(json.dumps(
            {"shape": [64, 64, 64], "spacing_mm": [1, 1, 1], "channels": ["T2w"]}))
        (tmp_path / "T2w.raw").write_bytes(np.zeros(64 ** 3 - 1, dtype="<f4").tobytes())
        with pytest.raises(SizeMismatchError):
            load_bundle(tmp_path)

    @pytest.mark.parametrize("meta, field", [
        ({"spacing_mm": [1, 1, 1], "channels": []}, "shape"),
        ({"shape": [2, 2], "spacing_mm": [1, 1, 1], "channels": []}, "shape"),
        ({"shape": [2, 2, 2], "spacing_mm": [1, 0, 1], "channels": []}, "spacing_mm"),
        ({"shape": [2, 2, 2], "spacing_mm": [1, 1, 1], "channels": "T2w"}, "channels"),
        ({"shape": [2, 2, 2], "spacing_mm": [1, 1, 1], "channels": ["bogus"]}, "channels"),
    ])
    def test_bad_sidecar_names_field(self, tmp_path, meta, field):
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        (tmp_path / "bogus.raw").write_bytes(bytes(32))
        with pytest.raises(BundleFormatError) as err:
            load_bundle(tmp_path)
        assert err.value.field == field

    def test_corrupt_sidecar(self, tmp_path):
        (tmp_path / "meta.json").write_text("{not json")
        with pytest.raises(BundleFormatError) as err:
            load_bundle(tmp_path)
        assert err.value.field == "meta.json"

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(BundleFormatError):
            load_bundle(tmp_path)

    @settings(max_examples=40, deadline=None)
    @given(
        shape=st.tuples(*[st.integers(1, 5)] * 3),
        spacing=st.tuples(*[st.floats(0.1, 5.0)] * 3),
        names=st.lists(st.sampled_from(IMAGE_CHANNELS), min_size=1, max_size=3, unique=True),
        data=st.data(),
    )
    def test_round_trip_property(self, tmp_path_factory, shape, spacing, names, data):
        channels = {
            n: data.draw(hnp.arrays(np.float32, shape, elements=st.floats(-1e6, 1e6, width=32)))
            for n in names
        }
        b = VolumeBundle(shape, spacing, channels)
        d = tmp_path_factory.mktemp("rt")
        save_bundle(b, d / "a")
        save_bundle(load_bundle(d / "a"), d / "b")
        for f in ["meta.json"] + [f"{n}.raw" for n in names]:
            assert (d / "a" / f).read_bytes() == (d / "b" / f).read_bytes()


class TestInvariants:
    def test_wrong_size_channel(self):
        with pytest.raises(SizeMismatchError):
            _bundle(T2w=np.zeros(63))

    def test_label_channel_must_be_integral(self):
        with pytest.raises(BundleFormatError):
            _bundle(gland_mask=np.full((4, 4, 4), 0.5))
        with pytest.raises(BundleFormatError):
            _bundle(roi_mask=-np.ones((4, 4, 4)))

    def test_probabilities_must_sum_to_one(self):
        third = np.full((4, 4, 4), 1 / 3)
        _bundle(prob_pos=third, prob_neg=third, prob_bg=third)
        with pytest.raises(BundleFormatError):
            _bundle(prob_pos=third, prob_neg=third, prob_bg=third + 0.01)

    def test_bundles_are_read_only(self):
        b = _bundle(T2w=np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            b["T2w"][0, 0, 0] = 1.0


class TestCenterCrop:
    def test_full_mask_identity(self, rng):
        img = rng.standard_normal((6, 7, 8))
        b = VolumeBundle((6, 7, 8), (1, 1, 1), {"T2w": img, "gland_mask": np.ones((6, 7, 8))})
        out = center_crop(b, margin=0.0)
        assert out.shape == b.shape
        np.testing.assert_array_equal(out["T2w"], b["T2w"])

    def test_bounding_box_shape(self):
        mask = np.zeros((10, 10, 10))
        mask[2:6, 2:6, 2:6] = 1
        out = center_crop(_bundle((10, 10, 10), gland_mask=mask), margin=0.0)
        assert out.shape == (4, 4, 4)

    def test_values_unchanged(self, rng):
        img = rng.standard_normal((10, 10, 10))
        mask = np.zeros((10, 10, 10))
        mask[3:7, 1:9, 4:5] = 1
        out = center_crop(_bundle((10, 10, 10), T2w=img, gland_mask=mask), margin=0.25)
        # extents 4, 8, 1 -> pads ceil(1.0)=1, ceil(2.0)=2, ceil(0.25)=1
        np.testing.assert_array_equal(out["T2w"], img[2:8, 0:10, 3:6].astype(np.float32))

    def test_empty_mask(self):
        with pytest.raises(DegenerateInputError):
            center_crop(_bundle(gland_mask=np.zeros((4, 4, 4))))

    def test_phantom_gland_matches_analytic_bounds(self):
        cfg = PhantomConfig(seed=3, n_patients=3)
        cohort = generate_cohort(cfg)
        for rec in cohort.records:
            t = cohort.truth[rec.patient_id]
            b = cohort.bundles[rec.patient_id]
            out = center_crop(b, margin=0.1)
            # nearest-lattice offsets of the centre along the other two axes
            dist = [abs(c - round(c)) * s / r for c, s, r in zip(t.gland_center, cfg.spacing_mm, t.gland_radii_mm)]
            expected_shape = []
            for a in range(3):
                others = sum(dist[b_] ** 2 for b_ in range(3) if b_ != a)
                half = t.gland_radii_mm[a] / cfg.spacing_mm[a] * math.sqrt(1 - others)
                lo, hi = math.ceil(t.gland_center[a] - half), math.floor(t.gland_center[a] + half)
                pad = math.ceil(0.1 * (hi - lo + 1))
                expected_shape.append(min(hi + pad, cfg.shape[a] - 1) - max(lo - pad, 0) + 1)
            assert out.shape == tuple(expected_shape)


class TestResample:
    def test_constant(self):
        b = _bundle((5, 6, 7), T2w=np.full((5, 6, 7), 2.5))
        out = resample_trilinear(b, (9, 3, 11))
        np.testing.assert_allclose(out["T2w"], 2.5, atol=1e-6)

    def test_linear_ramp_upsampled(self):
        ramp = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 4, 4))
        out = resample_trilinear(_bundle((8, 4, 4), T2w=ramp), (16, 4, 4))
        x = np.clip((np.arange(16) + 0.5) * 0.5 - 0.5, 0, 7)
        np.testing.assert_allclose(out["T2w"][:, 1, 2], x, atol=1e-5)

    def test_mask_stays_binary(self, rng):
        mask = (rng.random((7, 7, 7)) > 0.6).astype(float)
        out = resample_trilinear(_bundle((7, 7, 7), roi_mask=mask), (13, 5, 9))
        assert set(np.unique(out["roi_mask"])) <= {0.0, 1.0}

    def test_own_shape_is_identity(self, rng):
        img = rng.standard_normal((5, 6, 7))
        out = resample_trilinear(_bundle((5, 6, 7), T2w=img), (5, 6, 7))
        np.testing.assert_allclose(out["T2w"], img.astype(np.float32), atol=1e-6)

    def test_spacing_preserves_extent(self):
        b = VolumeBundle((10, 20, 5), (1.0, 0.5, 3.0), {"T2w": np.zeros((10, 20, 5))})
        out = resample_trilinear(b, (20, 10, 15))
        assert out.spacing == pytest.approx((0.5, 1.0, 1.0))

    def test_probabilities_renormalised(self, rng):
        p = rng.dirichlet([1, 1, 1], size=(6, 6, 6))
        b = _bundle((6, 6, 6), prob_pos=p[..., 0], prob_neg=p[..., 1], prob_bg=p[..., 2])
        out = resample_trilinear(b, (11, 4, 9))
        total = out["prob_pos"].astype(float) + out["prob_neg"] + out["prob_bg"]
        np.testing.assert_allclose(total, 1.0, atol=1e-5)

    def test_rejects_tiny_target(self):
        with pytest.raises(ValueError):
            resample_trilinear(_bundle(T2w=np.zeros((4, 4, 4))), (1, 4, 4))


class TestNormalize:
    def test_fixed_point(self, rng):
        x = rng.standard_normal((8, 8, 8))
        x = (x - x.mean()) / x.std()
        out = normalize_intensity(_bundle((8, 8, 8), T2w=x), "T2w")
        np.testing.assert_allclose(out["T2w"], x, atol=1e-4)

    def test_constant_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            normalize_intensity(_bundle(T2w=np.ones((4, 4, 4))), "T2w")

    def test_statistics_over_gland(self):
        x = np.arange(64, dtype=float).reshape(4, 4, 4)
        gland = np.zeros((4, 4, 4))
        gland[1:3, 1:3, :] = 1
        out = normalize_intensity(_bundle(T2w=x, gland_mask=gland), "T2w")
        inside = out["T2w"][gland > 0].astype(float)
        n = inside.size
        mean = sum(inside) / n
        sd = math.sqrt(sum((v - mean) ** 2 for v in inside) / n)
        assert abs(mean) < 1e-4 and abs(sd - 1) < 1e-4
        # same affine map outside the region
        vals = x[gland > 0]
        np.testing.assert_allclose(out["T2w"], (x - vals.mean()) / vals.std(), atol=1e-5)


class TestPreprocess:
    def test_identity_phantom(self, rng):
        x = rng.standard_normal((8, 8, 8))
        x = (x - x.mean()) / x.std()
        b = _bundle((8, 8, 8), T2w=x, gland_mask=np.ones((8, 8, 8)))
        out = preprocess(b, target_shape=(8, 8, 8))
        np.testing.assert_allclose(out["T2w"], b["T2w"], atol=1e-4)

    def test_default_shape(self):
        cohort = generate_cohort(PhantomConfig(seed=11, n_patients=2))
        for b in cohort.bundles.values():
            assert preprocess(b).shape == (64, 64, 64)

    def test_statistics_survive_resampling_of_smooth_field(self):
        n = 30
        i, j, k = np.meshgrid(*[np.arange(n, dtype=float)] * 3, indexing="ij")
        gland = ((i - 14.5) ** 2 / 100 + (j - 14.5) ** 2 / 144 + (k - 14.5) ** 2 / 81) <= 1
        field = 3.0 + np.sin(i / 4.0) + 0.5 * np.cos(j / 3.0) * np.sin(k / 5.0)
        out = preprocess(_bundle((n, n, n), T2w=field, gland_mask=gland))
        assert out.shape == (64, 64, 64)
        v = out["T2w"][out["gland_mask"] > 0].astype(float)
        mean = sum(v) / v.size
        sd = math.sqrt(sum((x - mean) ** 2 for x in v) / v.size)
        assert abs(mean) < 0.05 and abs(sd - 1) < 0.05

    def test_white_noise_loses_variance_when_upsampled(self):
        # normalisation precedes resampling, so interpolation smooths i.i.d. noise
        cohort = generate_cohort(PhantomConfig(seed=11, n_patients=1))
        out = preprocess(next(iter(cohort.bundles.values())))
        v = out["T2w"][out["gland_mask"] > 0].astype(float)
        assert abs(v.mean()) < 0.1 and 0.4 < v.std() < 0.8
