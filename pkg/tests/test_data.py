import numpy as np
import pytest

from fedssl.data import (CellShape, GroupRecord, LABEL_CASE, LABEL_CONTROL,
                         LABEL_UNLABELED, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VALID,
                         Sample, SiteFractions, SplitShape, SyntheticConfig,
                         by_split, class_weights, full_two_site_config,
                         generate_synthetic_sites, group_split, labeled_only,
                         load_image, read_manifest, save_image,
                         tiny_two_site_config, write_manifest)
from fedssl.data import _plan_site_explicit
from fedssl.errors import ConfigurationError, DataIOError, ValidationError


def manifest_of_women(n_women, images_per=2):
    samples = []
    for w in range(n_women):
        for i in range(images_per):
            samples.append(Sample(f"s{w}_{i}", "A", f"g{w}", 1, "unlabeled",
                                  "unassigned", f"p{w}_{i}.png"))
    return samples


class TestGroupSplit:
    def test_disjoint_groups(self):
        out = group_split(manifest_of_women(20), (0.7, 0.15, 0.15), seed=3)
        groups = {}
        for s in out:
            groups.setdefault(s.split, set()).add(s.group_id)
        assert groups[SPLIT_TRAIN] & groups[SPLIT_VALID] == set()
        assert groups[SPLIT_TRAIN] & groups[SPLIT_TEST] == set()
        assert groups[SPLIT_VALID] & groups[SPLIT_TEST] == set()

    def test_degenerate_ratios_rejected(self):
        with pytest.raises(ValidationError):
            group_split(manifest_of_women(10), (1.0, 0.0, 0.0), seed=0)

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            group_split(manifest_of_women(10), (0.5, 0.3, 0.3), seed=0)

    def test_floor_then_remainder_rule(self):
        # floor(0.7*10)=7 to train, floor(0.15*10)=1 to valid, remainder 2 to test
        out = group_split(manifest_of_women(10), (0.7, 0.15, 0.15), seed=1)
        women = {}
        for s in out:
            women[s.group_id] = s.split
        counts = {split: sum(1 for v in women.values() if v == split)
                  for split in (SPLIT_TRAIN, SPLIT_VALID, SPLIT_TEST)}
        assert counts == {SPLIT_TRAIN: 7, SPLIT_VALID: 1, SPLIT_TEST: 2}

    def test_images_inherit_woman_split(self):
        out = group_split(manifest_of_women(12, images_per=3), (0.5, 0.25, 0.25),
                          seed=5)
        per_group = {}
        for s in out:
            per_group.setdefault(s.group_id, set()).add(s.split)
        assert all(len(v) == 1 for v in per_group.values())

    def test_too_few_women(self):
        with pytest.raises(ConfigurationError):
            group_split(manifest_of_women(2), (0.5, 0.25, 0.25), seed=0)

    def test_no_leakage_over_many_seeds(self):
        manifest = manifest_of_women(17)
        for seed in range(50):
            out = group_split(manifest, (0.6, 0.2, 0.2), seed=seed)
            seen = {}
            for s in out:
                assert seen.setdefault(s.group_id, s.split) == s.split


class TestPlannedShape:
    def test_full_shape_matches_published_counts(self):
        cfg = full_two_site_config()
        for spec, train_labeled, train_total, valid_total, test_labeled in (
                (cfg.site_a, 543, 2029, 520, 148),
                (cfg.site_b, 729, 3145, 791, 198)):
            women = _plan_site_explicit(spec, seed=0, site_idx=0)
            rows = []
            for w in women:
                rows.extend((w.split, w.labeled_mask[i]) for i in range(w.n_images))
            total = {s: sum(1 for sp, _ in rows if sp == s)
                     for s in (SPLIT_TRAIN, SPLIT_VALID, SPLIT_TEST)}
            lab = {s: sum(1 for sp, m in rows if sp == s and m)
                   for s in (SPLIT_TRAIN, SPLIT_VALID, SPLIT_TEST)}
            assert total[SPLIT_TRAIN] == train_total
            assert lab[SPLIT_TRAIN] == train_labeled
            assert total[SPLIT_VALID] == valid_total
            assert lab[SPLIT_TEST] == test_labeled

    def test_pooled_train_total(self):
        cfg = full_two_site_config()
        a = _plan_site_explicit(cfg.site_a, 0, 0)
        b = _plan_site_explicit(cfg.site_b, 0, 1)
        pooled = sum(w.n_images for w in a if w.split == SPLIT_TRAIN) \
            + sum(w.n_images for w in b if w.split == SPLIT_TRAIN)
        assert pooled == 2029 + 3145 == 5174

    def test_case_counts_per_cell(self):
        cfg = full_two_site_config()
        women = _plan_site_explicit(cfg.site_a, 0, 0)
        train_case = [w for w in women
                      if w.split == SPLIT_TRAIN and w.label == LABEL_CASE]
        assert len(train_case) == 91
        assert sum(sum(w.labeled_mask) for w in train_case) == 182

    def test_severity_respects_threshold(self):
        cfg = full_two_site_config()
        for w in _plan_site_explicit(cfg.site_a, seed=9, site_idx=0):
            if w.label == LABEL_CASE:
                assert w.severity > cfg.site_a.threshold
            elif w.label == LABEL_CONTROL:
                assert w.severity <= cfg.site_a.threshold

    def test_cell_shape_validation(self):
        with pytest.raises(ValidationError):
            CellShape(women=5, labeled_images=11)
        with pytest.raises(ValidationError):
            SplitShape(CellShape(5, 10), CellShape(5, 10), total_images=19)


class TestGeneration:
    def test_tiny_dataset_counts_and_determinism(self, tmp_path):
        cfg = tiny_two_site_config()
        a1, b1, groups1 = generate_synthetic_sites(cfg, tmp_path / "d1", seed=7)
        a2, b2, groups2 = generate_synthetic_sites(cfg, tmp_path / "d2", seed=7)
        assert a1 == a2 and b1 == b2 and groups1 == groups2
        img = sorted((tmp_path / "d1" / "images" / "a").iterdir())[0]
        twin = tmp_path / "d2" / "images" / "a" / img.name
        assert img.read_bytes() == twin.read_bytes()
        assert len(by_split(a1, SPLIT_TRAIN)) == 40
        assert len(labeled_only(by_split(a1, SPLIT_TRAIN))) == 20

    def test_different_seed_differs(self, tmp_path):
        cfg = tiny_two_site_config()
        a1, _, _ = generate_synthetic_sites(cfg, tmp_path / "d1", seed=7)
        a3, _, _ = generate_synthetic_sites(cfg, tmp_path / "d3", seed=8)
        p1 = tmp_path / "d1" / a1[0].path
        p3 = tmp_path / "d3" / a3[0].path
        assert p1.read_bytes() != p3.read_bytes()

    def test_label_heterogeneity_band(self, tiny_dataset):
        _, cfg, _, _, groups = tiny_dataset
        th_a, th_b = cfg.site_a.threshold, cfg.site_b.threshold
        assert th_a != th_b
        lo, hi = min(th_a, th_b), max(th_a, th_b)
        softer = "B" if th_b < th_a else "A"
        band = [g for g in groups
                if g.site == softer and g.label == LABEL_CASE
                and lo < g.severity <= hi]
        assert band, "no woman labeled case at one site and control at the other"

    def test_fraction_mode_unassigned(self, tmp_path):
        cfg = SyntheticConfig(
            site_a=SiteFractions(women=10, threshold=0.5),
            site_b=SiteFractions(women=8, threshold=0.5),
            image_size=16)
        a, b, groups = generate_synthetic_sites(cfg, tmp_path, seed=3)
        assert len(a) == 20 and len(b) == 16
        assert all(s.split == "unassigned" for s in a + b)
        labels = {s.label for s in a}
        assert labels == {LABEL_CASE, LABEL_CONTROL, LABEL_UNLABELED}

    def test_labeled_fraction_zero(self, tmp_path):
        cfg = SyntheticConfig(
            site_a=SiteFractions(women=6, labeled_fraction=0.0),
            site_b=SiteFractions(women=6, labeled_fraction=0.0),
            image_size=16)
        a, b, _ = generate_synthetic_sites(cfg, tmp_path, seed=4)
        assert all(s.label == LABEL_UNLABELED for s in a + b)


class TestImageIO:
    def test_round_trip_on_grid_values(self, tmp_path):
        g = np.random.Generator(np.random.PCG64(0))
        tensor = g.integers(0, 256, size=(3, 9, 9)).astype(np.float64) / 255.0
        path = tmp_path / "img.png"
        save_image(tensor, path)
        assert np.array_equal(load_image(path), tensor)

    def test_black_png_is_zero(self, tmp_path):
        path = tmp_path / "black.png"
        save_image(np.zeros((3, 4, 4)), path)
        assert np.array_equal(load_image(path), np.zeros((3, 4, 4)))

    def test_full_value_is_one(self, tmp_path):
        path = tmp_path / "white.png"
        save_image(np.ones((3, 2, 2)), path)
        assert np.array_equal(load_image(path), np.ones((3, 2, 2)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError, match="nope.png"):
            load_image(tmp_path / "nope.png")

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not a png")
        with pytest.raises(DataIOError):
            load_image(path)


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        samples = manifest_of_women(4)
        path = tmp_path / "manifest.csv"
        write_manifest(samples, path)
        assert read_manifest(path) == samples
        header = path.read_text().splitlines()[0]
        assert header == "sample_id,site,group_id,visit,label,split,path"

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,site\n1,A\n")
        with pytest.raises(DataIOError, match="header"):
            read_manifest(path)


class TestClassWeights:
    def test_balanced(self):
        assert class_weights([0, 1, 0, 1]) == {0: 1.0, 1: 1.0}

    def test_published_train_cell(self):
        labels = [1] * 182 + [0] * 361
        w = class_weights(labels)
        assert w[1] == pytest.approx(543 / 364, abs=1e-12)
        assert w[0] == pytest.approx(543 / 722, abs=1e-12)
        assert round(w[1], 4) == 1.4918 and round(w[0], 4) == 0.7521

    def test_one_to_three(self):
        w = class_weights([1, 0, 0, 0])
        assert w[1] == 2.0
        assert w[0] == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_string_labels(self):
        w = class_weights([LABEL_CASE, LABEL_CONTROL])
        assert w == {0: 1.0, 1: 1.0}

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            class_weights([1, 1, 1])

    def test_sample_weighted_mean_is_one(self):
        g = np.random.Generator(np.random.PCG64(5))
        for _ in range(20):
            labels = (g.uniform(size=g.integers(5, 60)) < 0.3).astype(int)
            if labels.min() == labels.max():
                continue
            w = class_weights(labels.tolist())
            mean = np.mean([w[int(y)] for y in labels])
            assert abs(mean - 1.0) < 1e-12
