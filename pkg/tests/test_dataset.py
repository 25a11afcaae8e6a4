"""Dataset builder and CSID file format."""

import numpy as np
import pytest

from cpmamba.channel import ChannelConfig, DatasetSpec, build_dataset, read_csid, split_size, write_csid
from cpmamba.errors import ConfigError, DataError

TINY = DatasetSpec(train_samples=12, val_samples=6, test_samples_per_speed=3, test_speed_count=5)


@pytest.fixture(scope="module")
def cfg():
    return ChannelConfig()


class TestBuild:
    def test_split_sizes(self):
        desk = DatasetSpec.desk()
        assert split_size(desk, "train") == 2048
        assert split_size(desk, "val") == 256
        assert split_size(desk, "test") == 2560
        with pytest.raises(ConfigError):
            split_size(desk, "holdout")

    def test_test_speed_grid(self):
        grid = DatasetSpec.desk().test_speed_grid
        np.testing.assert_allclose(grid, np.arange(10.0, 101.0, 10.0))

    def test_deterministic_per_seed(self, cfg):
        a = build_dataset(cfg, TINY, "train", seed=9)
        b = build_dataset(cfg, TINY, "train", seed=9)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.speeds_kmh, b.speeds_kmh)
        c = build_dataset(cfg, TINY, "train", seed=10)
        assert not np.array_equal(a.frames, c.frames)

    def test_worker_count_does_not_change_output(self, cfg):
        a = build_dataset(cfg, TINY, "val", seed=3, workers=1)
        b = build_dataset(cfg, TINY, "val", seed=3, workers=4)
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_splits_are_distinct(self, cfg):
        a = build_dataset(cfg, TINY, "train", seed=3)
        b = build_dataset(cfg, TINY, "val", seed=3)
        assert not np.array_equal(a.frames[:6], b.frames)

    def test_test_split_speeds(self, cfg):
        ds = build_dataset(cfg, TINY, "test", seed=1)
        assert ds.n_samples == 15
        np.testing.assert_allclose(np.unique(ds.speeds_kmh), TINY.test_speed_grid)
        # every grid speed appears exactly per_speed times
        for s in TINY.test_speed_grid:
            assert (ds.speeds_kmh == s).sum() == 3

    def test_train_speeds_in_range(self, cfg):
        ds = build_dataset(cfg, TINY, "train", seed=1)
        assert ((ds.speeds_kmh >= 10.0) & (ds.speeds_kmh <= 100.0)).all()

    def test_shapes_and_finiteness(self, cfg):
        ds = build_dataset(cfg, TINY, "val", seed=0)
        assert ds.frames.shape == (6, 20, cfg.n_t, cfg.k_total)
        assert np.isfinite(ds.frames.view(float)).all()


class TestCsidFile:
    def test_roundtrip_exact(self, cfg, tmp_path):
        ds = build_dataset(cfg, TINY, "val", seed=5)
        p = tmp_path / "val.csid"
        write_csid(p, ds)
        back = read_csid(p)
        np.testing.assert_array_equal(back.frames, ds.frames)
        np.testing.assert_array_equal(back.speeds_kmh, ds.speeds_kmh)
        assert back.f_c == ds.f_c and back.sample_interval == ds.sample_interval

    def test_identical_seed_gives_identical_bytes(self, cfg, tmp_path):
        pa, pb = tmp_path / "a.csid", tmp_path / "b.csid"
        write_csid(pa, build_dataset(cfg, TINY, "train", seed=7))
        write_csid(pb, build_dataset(cfg, TINY, "train", seed=7))
        assert pa.read_bytes() == pb.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.csid"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="not a CSID"):
            read_csid(p)

    def test_truncation_rejected(self, cfg, tmp_path):
        ds = build_dataset(cfg, TINY, "val", seed=5)
        p = tmp_path / "cut.csid"
        write_csid(p, ds)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(DataError, match="truncated"):
            read_csid(p)

    def test_missing_file_has_path_context(self, tmp_path):
        with pytest.raises(DataError, match="nowhere.csid"):
            read_csid(tmp_path / "nowhere.csid")
