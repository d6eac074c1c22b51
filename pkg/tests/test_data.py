import numpy as np
import pytest

from wstal.data import (
    Dataset,
    LoadError,
    SyntheticSpec,
    VideoRecord,
    generate_synthetic,
    load_dataset,
    planted_transitions,
    read_feature_file,
    write_dataset,
    write_feature_file,
)
from wstal.saliency import diff_values, selected_pairs


def small_spec(**overrides):
    defaults = dict(
        num_classes=2,
        feature_dim=8,
        videos_per_class=3,
        test_videos_per_class=1,
        snippets_range=(20, 24),
        segments_range=(1, 2),
        boundary_contrast=2.0,
        noise_sigma=0.25,
        seed=11,
    )
    defaults.update(overrides)
    return SyntheticSpec(**defaults)


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((5, 7)).astype(np.float32)
        path = tmp_path / "a.feat"
        write_feature_file(path, feats)
        assert np.array_equal(read_feature_file(path), feats)

    def test_header_is_16_bytes(self, tmp_path):
        path = tmp_path / "a.feat"
        write_feature_file(path, np.zeros((3, 2), dtype=np.float32))
        raw = path.read_bytes()
        assert len(raw) == 16 + 3 * 2 * 4
        assert raw[:4] == b"ISSF"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "a.feat"
        write_feature_file(path, np.zeros((3, 2), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(LoadError, match="magic"):
            read_feature_file(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "a.feat"
        write_feature_file(path, np.zeros((3, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(LoadError, match="bytes"):
            read_feature_file(path)


class TestDatasetRoundTrip:
    def test_round_trip_identity(self, tmp_path):
        ds = generate_synthetic(small_spec())
        manifest = write_dataset(ds, tmp_path / "ds")
        loaded = load_dataset(manifest)
        assert loaded.class_names == ds.class_names
        assert len(loaded.records) == len(ds.records)
        for orig, back in zip(ds.records, loaded.records):
            assert back.video_id == orig.video_id
            assert back.split == orig.split
            assert np.array_equal(back.features, orig.features)
            assert np.array_equal(back.label, orig.label)
            assert back.fps_per_snippet == orig.fps_per_snippet
            assert len(back.gt_segments) == len(orig.gt_segments)
            for (c1, s1, e1), (c2, s2, e2) in zip(orig.gt_segments, back.gt_segments):
                assert c1 == c2
                assert s1 == pytest.approx(s2, abs=1e-6)
                assert e1 == pytest.approx(e2, abs=1e-6)

    def test_empty_dataset(self, tmp_path):
        ds = Dataset(class_names=["a", "b"], feature_dim=4, records=[])
        manifest = write_dataset(ds, tmp_path / "empty")
        loaded = load_dataset(manifest)
        assert loaded.records == []
        assert loaded.class_names == ["a", "b"]

    def test_rewrite_is_byte_identical(self, tmp_path):
        ds = generate_synthetic(small_spec())
        m1 = write_dataset(ds, tmp_path / "d1")
        m2 = write_dataset(ds, tmp_path / "d2")
        assert m1.read_bytes() == m2.read_bytes()
        for rec in ds.records:
            f1 = (tmp_path / "d1" / "features" / f"{rec.video_id}.feat").read_bytes()
            f2 = (tmp_path / "d2" / "features" / f"{rec.video_id}.feat").read_bytes()
            assert f1 == f2

    def test_dimension_mismatch_names_file(self, tmp_path):
        write_feature_file(tmp_path / "features" / "v0.feat", np.zeros((4, 7), dtype=np.float32))
        (tmp_path / "manifest.txt").write_text(
            "version 1\nfeature_dim 8\nclasses a,b\nvideos:\n"
            "v0 train 4 1.0 a features/v0.feat\n"
        )
        with pytest.raises(LoadError, match="v0.feat"):
            load_dataset(tmp_path / "manifest.txt")

    def test_unknown_class_name(self, tmp_path):
        write_feature_file(tmp_path / "features" / "v0.feat", np.zeros((4, 8), dtype=np.float32))
        (tmp_path / "manifest.txt").write_text(
            "version 1\nfeature_dim 8\nclasses a,b\nvideos:\n"
            "v0 train 4 1.0 zz features/v0.feat\n"
        )
        with pytest.raises(LoadError, match="zz"):
            load_dataset(tmp_path / "manifest.txt")

    def test_missing_feature_file(self, tmp_path):
        (tmp_path / "manifest.txt").write_text(
            "version 1\nfeature_dim 8\nclasses a\nvideos:\n"
            "v0 train 4 1.0 a features/v0.feat\n"
        )
        with pytest.raises(LoadError, match="v0.feat"):
            load_dataset(tmp_path / "manifest.txt")

    def test_two_file_concatenation(self, tmp_path):
        rgb = np.ones((4, 3), dtype=np.float32)
        flow = 2 * np.ones((4, 5), dtype=np.float32)
        write_feature_file(tmp_path / "rgb.feat", rgb)
        write_feature_file(tmp_path / "flow.feat", flow)
        (tmp_path / "manifest.txt").write_text(
            "version 1\nfeature_dim 8\nclasses a\nvideos:\n"
            "v0 train 4 1.0 a rgb.feat+flow.feat\n"
        )
        ds = load_dataset(tmp_path / "manifest.txt")
        assert ds.records[0].features.shape == (4, 8)
        assert np.array_equal(ds.records[0].features[:, :3], rgb)
        assert np.array_equal(ds.records[0].features[:, 3:], flow)


class TestSyntheticGenerator:
    def test_seed_determinism(self):
        a = generate_synthetic(small_spec())
        b = generate_synthetic(small_spec())
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.features, rb.features)
            assert ra.gt_segments == rb.gt_segments

    def test_zero_noise_structure(self):
        ds = generate_synthetic(small_spec(noise_sigma=0.0, seed=3))
        for rec in ds.records:
            tau = diff_values(rec.features, "l1").tau
            transitions = planted_transitions(rec)
            assert len(transitions) > 0
            inside = np.setdiff1d(np.arange(tau.shape[0]), transitions)
            assert np.all(tau[inside] == 0.0)
            assert np.all(tau[transitions] > 0.0)
            picked = selected_pairs(diff_values(rec.features, "l1"), k=len(transitions))
            assert set(picked.tolist()) == set(transitions.tolist())

    def test_labels_are_union_of_planted_classes(self):
        ds = generate_synthetic(small_spec(seed=9))
        for rec in ds.records:
            planted = sorted({c for c, _, _ in rec.gt_segments})
            assert sorted(rec.label_classes().tolist()) == planted

    def test_high_snr_recovers_boundaries(self):
        # 100 videos at contrast/noise = 10: planted transitions must be
        # the top-tau pairs in at least 95% of videos.
        spec = small_spec(
            num_classes=2,
            videos_per_class=50,
            test_videos_per_class=0,
            boundary_contrast=2.5,
            noise_sigma=0.25,
            seed=21,
        )
        ds = generate_synthetic(spec)
        assert len(ds.records) == 100
        hits = 0
        for rec in ds.records:
            transitions = set(planted_transitions(rec).tolist())
            picked = selected_pairs(diff_values(rec.features, "l1"), k=len(transitions))
            hits += set(picked.tolist()) == transitions
        assert hits / len(ds.records) >= 0.95

    def test_boundary_tau_exceeds_within_tau_at_snr5(self):
        spec = small_spec(boundary_contrast=1.25, noise_sigma=0.25, videos_per_class=20, seed=4)
        ds = generate_synthetic(spec)
        boundary, within = [], []
        for rec in ds.records:
            tau = diff_values(rec.features, "l1").tau
            transitions = planted_transitions(rec)
            inside = np.setdiff1d(np.arange(tau.shape[0]), transitions)
            boundary.extend(tau[transitions])
            within.extend(tau[inside])
        assert np.mean(boundary) > np.mean(within)

    def test_infeasible_spec_rejected(self):
        with pytest.raises(ValueError, match="fit"):
            generate_synthetic(small_spec(snippets_range=(6, 8), segments_range=(2, 3)))

    def test_training_video_needs_label(self):
        with pytest.raises(ValueError, match="label"):
            VideoRecord(
                video_id="v",
                split="train",
                features=np.zeros((4, 2), dtype=np.float32),
                label=np.zeros(3),
            )
