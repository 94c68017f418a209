import os
import struct

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from analysis.metrics import pearson_abs
from conftest import tiny_dataset_config
from synth.dataset import (
    HEADER_SIZE, load_dataset_split, load_split, make_dataset, split_path, write_previews,
)
from synth.scene import (
    DatasetConfig, InfoComponent, PatternKind, SceneSpec, build_scene, class_region,
    pixel_box, render_pair,
)
from utils.errors import ConfigError, DatasetFormatError

WHOLE = (0.0, 0.0, 1.0, 1.0)


def component(mean=0.0, std=1.0, intensity=1.0, pattern=PatternKind.TEXTURE, region=WHOLE, shared=False):
    return InfoComponent(intensity, mean, std, pattern, region, shared)


def record_size(config: DatasetConfig) -> int:
    return 2 * config.channels * config.height * config.width * 4 + 4


class TestRenderPair:
    def test_texture_pixels_follow_component_law(self):
        spec = SceneSpec(
            label=0, homogeneous=[component(mean=0.5, std=2.0, shared=True)],
            unique=[[], []], noise_std=0.0, channels=4, height=50, width=50,
        )
        visible, _, _ = render_pair(spec, np.random.default_rng(0))
        result = stats.kstest(visible.reshape(-1), "norm", args=(0.5, 2.0))
        assert visible.size == 10_000
        assert result.pvalue > 0.01

    def test_blob_cells_follow_component_law(self):
        spec = SceneSpec(
            label=0, homogeneous=[],
            unique=[[component(mean=-0.3, std=0.8, intensity=1.5, pattern=PatternKind.BLOB)], []],
            noise_std=0.0, channels=4, height=400, width=400,
        )
        visible, infrared, _ = render_pair(spec, np.random.default_rng(1))
        # Blob values repeat over 8x8 cells; keep one pixel per cell
        cells = visible[:, ::8, ::8].reshape(-1)
        result = stats.kstest(cells, "norm", args=(1.5 * -0.3, 1.5 * 0.8))
        assert cells.size == 10_000
        assert result.pvalue > 0.01
        assert not infrared.any()

    def test_homogeneous_only_modalities_match(self):
        config = tiny_dataset_config(profile="homogeneous", height=16, width=16)
        visible, infrared, label = render_pair(build_scene(config, 1, np.random.default_rng(4)), np.random.default_rng(5))
        np.testing.assert_array_equal(visible, infrared)
        assert label == 1

    def test_homogeneous_only_means_agree(self):
        config = tiny_dataset_config(profile="homogeneous", height=16, width=16)
        vis, ir = [], []
        for i in range(50):
            rng = np.random.default_rng(i)
            v, r, _ = render_pair(build_scene(config, i % 2, rng), rng)
            vis.append(v)
            ir.append(r)
        vis, ir = np.concatenate(vis).reshape(-1), np.concatenate(ir).reshape(-1)
        assert abs(vis.mean() - ir.mean()) <= 3 * vis.std() / np.sqrt(vis.size)

    def test_disjoint_unique_regions_are_uncorrelated(self):
        spec = SceneSpec(
            label=0, homogeneous=[],
            unique=[[component(region=(0.0, 0.0, 0.5, 1.0))], [component(region=(0.5, 0.0, 1.0, 1.0))]],
            noise_std=0.0, channels=4, height=50, width=50,
        )
        visible, infrared, _ = render_pair(spec, np.random.default_rng(2))
        assert pearson_abs(visible, infrared) <= 0.1

    def test_gains_scale_the_shared_field(self):
        spec = SceneSpec(
            label=0, homogeneous=[component(mean=1.0, std=0.5, shared=True)],
            unique=[[], []], noise_std=0.0, gains=(1.0, 2.5), channels=2, height=8, width=8,
        )
        visible, infrared, _ = render_pair(spec, np.random.default_rng(3))
        np.testing.assert_allclose(infrared, 2.5 * visible, rtol=1e-15)


class TestBuildScene:
    def test_fusion_constraint_residual(self):
        config = tiny_dataset_config(fusion_mean=0.25, unique_components=3)
        for seed in range(20):
            spec = build_scene(config, seed % 2, np.random.default_rng(seed))
            assert spec.constraint_residual() <= 1e-12
            assert all(len(per) == 3 for per in spec.unique)

    def test_class_sets_homogeneous_region(self):
        config = tiny_dataset_config(num_classes=4)
        spec = build_scene(config, 3, np.random.default_rng(0))
        assert spec.homogeneous[0].region == class_region(3, 4) == (0.5, 0.5, 1.0, 1.0)
        assert spec.homogeneous[0].shared

    def test_profile_pattern_mix(self):
        config = tiny_dataset_config(profile="high_freq")
        spec = build_scene(config, 0, np.random.default_rng(0))
        assert all(c.pattern == PatternKind.TEXTURE for per in spec.unique for c in per)

    def test_invalid_component_rejected(self):
        with pytest.raises(ConfigError, match="std"):
            SceneSpec(label=0, homogeneous=[component(std=0.0)], unique=[[], []], noise_std=0.0)

    def test_zero_area_region_rejected(self):
        with pytest.raises(ConfigError, match="zero area"):
            pixel_box((0.1, 0.1, 0.11, 0.5), 8, 8)

    def test_raw_correlation_falls_with_unique_intensity(self):
        levels = [0.0, 0.5, 1.0, 2.0, 4.0]
        means = []
        for intensity in levels:
            values = []
            for seed in range(5):
                config = tiny_dataset_config(height=16, width=16, num_classes=4, unique_intensity=intensity, seed=seed)
                for i in range(20):
                    rng = np.random.default_rng([seed, 0, i])
                    visible, infrared, _ = render_pair(build_scene(config, i % 4, rng), rng)
                    values.extend(pearson_abs(visible[c], infrared[c]) for c in range(config.channels))
            means.append(np.mean(values))
        assert all(a > b for a, b in zip(means, means[1:])), means


class TestDatasetConfig:
    def test_unknown_fields_and_bad_profile_listed_together(self):
        with pytest.raises(ConfigError) as excinfo:
            DatasetConfig.from_dict({"colour": 1, "profile": "foggy"}, source="x.json")
        problems = " ".join(excinfo.value.problems)
        assert "colour" in problems
        assert "foggy" in problems
        assert excinfo.value.source == "x.json"

    def test_profile_overrides(self):
        config = DatasetConfig(profile="default", noise_std=0.0)
        assert config.resolved() == (0.5, 2, 0.0)


class TestMakeDataset:
    def test_deterministic_bytes(self, tmp_path):
        config = tiny_dataset_config()
        make_dataset(config, str(tmp_path / "a"), quiet=True)
        make_dataset(config, str(tmp_path / "b"), quiet=True)
        for split in config.samples:
            a = split_path(str(tmp_path / "a"), split).read_bytes()
            b = split_path(str(tmp_path / "b"), split).read_bytes()
            assert a == b

    def test_regenerate_one_split(self, dataset_dir):
        config = tiny_dataset_config()
        path = split_path(str(dataset_dir), "val")
        original = path.read_bytes()
        os.remove(path)
        make_dataset(config, str(dataset_dir), splits=["val"], quiet=True)
        assert path.read_bytes() == original

    def test_refuses_existing_files(self, dataset_dir):
        with pytest.raises(FileExistsError, match="overwrite"):
            make_dataset(tiny_dataset_config(), str(dataset_dir), quiet=True)
        make_dataset(tiny_dataset_config(), str(dataset_dir), overwrite=True, quiet=True)

    def test_unknown_split(self, tmp_path):
        with pytest.raises(ConfigError):
            make_dataset(tiny_dataset_config(), str(tmp_path), splits=["test"], quiet=True)

    def test_balanced_classes(self, dataset_dir):
        config = tiny_dataset_config()
        for split, count in config.samples.items():
            data = load_dataset_split(str(dataset_dir), split)
            counts = np.bincount(data.labels, minlength=config.num_classes)
            assert len(data) == count
            assert np.all(np.abs(counts - count / config.num_classes) <= 1)

    def test_loaded_arrays(self, dataset_dir):
        data = load_split(str(split_path(str(dataset_dir), "train")))
        assert data.visible.shape == (16, 2, 8, 8)
        assert data.visible.dtype == np.float64
        assert data.num_classes == 2
        batch = data.batch([0, 3])
        assert len(batch) == 2
        assert [len(b) for b in data.batches(5)] == [5, 5, 5, 1]

    def test_previews(self, dataset_dir, tmp_path):
        data = load_dataset_split(str(dataset_dir), "val")
        paths = write_previews(data, str(tmp_path / "preview"), 3)
        assert len(paths) == 3
        with Image.open(paths[0]) as image:
            assert image.size == (16, 8)


class TestLoadSplitErrors:
    def corrupt(self, dataset_dir, tmp_path, edit):
        raw = bytearray(split_path(str(dataset_dir), "train").read_bytes())
        raw = edit(raw)
        path = tmp_path / "broken.fora"
        path.write_bytes(bytes(raw))
        return str(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="gen-data"):
            load_split(str(tmp_path / "nope.fora"))

    def test_bad_magic(self, dataset_dir, tmp_path):
        path = self.corrupt(dataset_dir, tmp_path, lambda raw: b"XORA1" + raw[5:])
        with pytest.raises(DatasetFormatError) as excinfo:
            load_split(path)
        assert excinfo.value.offset == 0

    def test_bad_channel_count(self, dataset_dir, tmp_path):
        def edit(raw):
            raw[13:17] = struct.pack("<i", 0)
            return raw
        with pytest.raises(DatasetFormatError) as excinfo:
            load_split(self.corrupt(dataset_dir, tmp_path, edit))
        assert excinfo.value.offset == 13

    def test_truncated_record(self, dataset_dir, tmp_path):
        config = tiny_dataset_config()
        with pytest.raises(DatasetFormatError) as excinfo:
            load_split(self.corrupt(dataset_dir, tmp_path, lambda raw: raw[:-3]))
        assert excinfo.value.offset == HEADER_SIZE + 15 * record_size(config)
        assert "byte offset" in str(excinfo.value)

    def test_trailing_bytes(self, dataset_dir, tmp_path):
        config = tiny_dataset_config()
        with pytest.raises(DatasetFormatError) as excinfo:
            load_split(self.corrupt(dataset_dir, tmp_path, lambda raw: raw + b"\x00\x00"))
        assert excinfo.value.offset == HEADER_SIZE + 16 * record_size(config)

    def test_label_out_of_range(self, dataset_dir, tmp_path):
        config = tiny_dataset_config()
        label_offset = HEADER_SIZE + record_size(config) - 4

        def edit(raw):
            raw[label_offset:label_offset + 4] = struct.pack("<i", 99)
            return raw
        with pytest.raises(DatasetFormatError) as excinfo:
            load_split(self.corrupt(dataset_dir, tmp_path, edit))
        assert excinfo.value.offset == label_offset
