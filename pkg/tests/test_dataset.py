import json

import numpy as np
import pytest

from proxlab.dataset import (
    DemoDataset,
    generate_demonstrations,
    load_dataset,
    persist_dataset,
)
from proxlab.mpc import NoiseConfig


@pytest.fixture(scope="module")
def small_dataset():
    return generate_demonstrations(n_traj=2, length=40, global_seed=7)


class TestGeneration:
    def test_shapes(self, small_dataset):
        assert small_dataset.n_traj == 2
        assert small_dataset.n_steps == 40
        for demo in small_dataset.demos:
            assert demo.true_states.shape == (41, 13)
            assert demo.observed_states.shape == (41, 13)
            assert demo.controls.shape == (40, 6)

    def test_determinism(self, small_dataset):
        again = generate_demonstrations(n_traj=2, length=40, global_seed=7)
        for a, b in zip(small_dataset.demos, again.demos):
            np.testing.assert_array_equal(a.true_states, b.true_states)
            np.testing.assert_array_equal(a.observed_states, b.observed_states)
            np.testing.assert_array_equal(a.controls, b.controls)

    def test_controls_within_bounds(self, small_dataset):
        for demo in small_dataset.demos:
            assert np.all(np.abs(demo.controls[:, 0:3]) <= 0.2)
            assert np.all(np.abs(demo.controls[:, 3:6]) <= 8.0)

    def test_observed_differs_from_true(self, small_dataset):
        demo = small_dataset.demos[0]
        assert not np.array_equal(demo.observed_states, demo.true_states)

    def test_bad_n_traj(self):
        with pytest.raises(ValueError):
            generate_demonstrations(n_traj=0, length=10)


class TestPersistence:
    def test_round_trip_identity(self, small_dataset, tmp_path):
        persist_dataset(small_dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.n_traj == small_dataset.n_traj
        assert loaded.global_seed == small_dataset.global_seed
        for a, b in zip(small_dataset.demos, loaded.demos):
            np.testing.assert_array_equal(a.true_states, b.true_states)
            np.testing.assert_array_equal(a.observed_states, b.observed_states)
            np.testing.assert_array_equal(a.controls, b.controls)

    def test_persist_twice_identical_bytes(self, small_dataset, tmp_path):
        d1 = persist_dataset(small_dataset, tmp_path / "a")
        d2 = persist_dataset(small_dataset, tmp_path / "b")
        for f1 in sorted(d1.iterdir()):
            assert f1.read_bytes() == (d2 / f1.name).read_bytes()

    def test_corruption_detected(self, small_dataset, tmp_path):
        d = persist_dataset(small_dataset, tmp_path / "ds")
        path = d / "traj_0001.csv"
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="checksum mismatch"):
            load_dataset(d)

    def test_missing_file(self, small_dataset, tmp_path):
        d = persist_dataset(small_dataset, tmp_path / "ds")
        (d / "traj_0000.csv").unlink()
        with pytest.raises(FileNotFoundError, match="traj_0000"):
            load_dataset(d)

    def test_manifest_file_count(self, small_dataset, tmp_path):
        d = persist_dataset(small_dataset, tmp_path / "ds")
        manifest = json.loads((d / "manifest.json").read_text())
        assert len(manifest["files"]) == small_dataset.n_traj
        assert manifest["n_steps"] == 40

    def test_noise_config_round_trip(self, small_dataset, tmp_path):
        d = persist_dataset(small_dataset, tmp_path / "ds")
        loaded = load_dataset(d)
        assert loaded.noise == NoiseConfig()
        np.testing.assert_array_equal(loaded.target.r_hat, small_dataset.target.r_hat)
