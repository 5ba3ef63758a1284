import numpy as np
import pytest

from proxlab.autodiff import Tensor
from proxlab.baselines import (
    BcConfig,
    BcModel,
    BcPolicy,
    PidConfig,
    PidController,
    _SecondOrderFilter,
    bc_train,
)
from proxlab.dynamics import (
    OrbitConfig,
    RelativeState,
    SpacecraftParams,
    quat_error_angle,
    rk4_step,
    sample_initial_state,
)
from proxlab.mpc import TargetState
from proxlab.policy import fit_normalization

from test_policy import synthetic_dataset

CFG = OrbitConfig()
PARAMS = SpacecraftParams()
TARGET = TargetState()


class TestPid:
    def test_zero_at_target(self):
        ctl = PidController(TARGET, CFG.dt)
        # run at the target long enough for filters to settle
        u = None
        for _ in range(200):
            u = ctl.step(TARGET.as_state())
        assert np.max(np.abs(u.as_vector())) < 1e-9

    def test_saturation_on_huge_error(self):
        ctl = PidController(TARGET, CFG.dt)
        far = RelativeState(TARGET.r_hat + [1e4, -1e4, 1e4], np.zeros(3),
                            TARGET.q_hat, np.zeros(3))
        u = ctl.step(far)
        np.testing.assert_allclose(np.abs(u.f), 0.2, atol=1e-15)

    def test_output_always_within_limits(self):
        rng = np.random.default_rng(0)
        ctl = PidController(TARGET, CFG.dt)
        s = sample_initial_state(rng)
        for _ in range(300):
            u = ctl.step(s)
            assert np.all(np.abs(u.f) <= 0.2)
            assert np.all(np.abs(u.tau) <= 8.0)
            s = rk4_step(s, u, CFG, PARAMS)

    def test_filter_impulse_decays(self):
        filt = _SecondOrderFilter(2.0, 0.9, 1, CFG.dt)
        filt.step(np.array([100.0]))
        mags = [abs(filt.step(np.zeros(1))[0]) for _ in range(2000)]
        assert max(mags[:100]) > 0  # responded to the impulse
        assert max(mags[-100:]) < 1e-6 * max(mags)  # and decayed

    def test_filter_bounded_input_bounded_output(self):
        rng = np.random.default_rng(1)
        filt = _SecondOrderFilter(2.0, 0.9, 3, CFG.dt)
        peak = 0.0
        for _ in range(5000):
            out = filt.step(rng.uniform(-1, 1, size=3))
            peak = max(peak, np.max(np.abs(out)))
        assert peak < 10.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PidConfig(filter_cutoff=0.0)
        with pytest.raises(ValueError):
            PidConfig(derivative_blend=1.5)

    @pytest.mark.slow
    def test_terminal_error_two_meter_scale(self):
        errs = []
        atts = []
        for seed in (3, 10, 15, 20, 26):
            rng = np.random.default_rng(seed)
            s = sample_initial_state(rng)
            ctl = PidController(TARGET, CFG.dt)
            for _ in range(2500):
                s = rk4_step(s, ctl.step(s), CFG, PARAMS)
            errs.append(np.linalg.norm(s.r - TARGET.r_hat))
            atts.append(np.degrees(quat_error_angle(s.q, TARGET.q_hat)))
        mean = float(np.mean(errs))
        assert 0.5 < mean < 5.0  # 2 m scale, loose
        assert max(atts) < 1.0  # attitude loop converges


@pytest.fixture(scope="module")
def dataset():
    return synthetic_dataset(n_traj=2, length=30, seed=50)


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = BcConfig(hidden=(16, 16, 16, 16), epochs=5, batch_size=8,
                   batches_per_epoch=4, lr=1e-3)
    return bc_train(dataset, cfg, seed=1)


class TestBc:
    def test_five_weight_layers(self):
        with pytest.raises(ValueError, match="5 weight layers"):
            BcConfig(hidden=(16, 16, 16))
        model = BcModel(BcConfig(hidden=(8, 8, 8, 8)), np.random.default_rng(0))
        weight_names = [n for n in model.params.names() if n.endswith(".weight")]
        assert len(weight_names) == 5

    def test_predict_contract(self, trained, dataset):
        state = dataset.demos[0].observed_states[0]
        out = trained.predict(state)
        assert out.shape == (13,)
        assert abs(np.linalg.norm(out[6:10]) - 1.0) < 1e-12
        np.testing.assert_array_equal(out, trained.predict(state))

    def test_training_improves_over_untrained(self, dataset):
        stats = fit_normalization(dataset)
        cfg = BcConfig(hidden=(32, 32, 32, 32), epochs=60, batch_size=16,
                       batches_per_epoch=4, lr=3e-3)
        trained = bc_train(dataset, cfg, seed=2)
        untrained = BcPolicy(BcModel(cfg, np.random.default_rng(99)), stats)

        def mse(policy):
            total = 0.0
            count = 0
            for demo in dataset.demos:
                for t in range(0, demo.length, 5):
                    pred = policy.predict(demo.observed_states[t])
                    err = pred - demo.observed_states[t + 1]
                    total += float(err @ err)
                    count += 1
            return total / count

        assert mse(trained) * 10.0 < mse(untrained)

    def test_same_seed_identical(self, dataset, tmp_path):
        cfg = BcConfig(hidden=(8, 8, 8, 8), epochs=2, batch_size=4, batches_per_epoch=2)
        a = bc_train(dataset, cfg, seed=7).save(tmp_path / "a.ckpt").read_bytes()
        b = bc_train(dataset, cfg, seed=7).save(tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_save_load_round_trip(self, trained, dataset, tmp_path):
        state = dataset.demos[1].observed_states[5]
        before = trained.predict(state)
        path = trained.save(tmp_path / "bc.ckpt")
        loaded = BcPolicy.load(path)
        np.testing.assert_array_equal(loaded.predict(state), before)

    def test_shares_norm_stats_with_sequence_policy(self, dataset):
        from proxlab.policy import ModelConfig, train
        stats_bc = bc_train(
            dataset,
            BcConfig(hidden=(8, 8, 8, 8), epochs=1, batch_size=4, batches_per_epoch=1),
            seed=3,
        ).stats
        cfg = ModelConfig(d=8, z_dim=4, heads=2, enc_layers=1, dec_layers=1, n=4,
                          ff_mult=2, epochs=1, batch_size=4, batches_per_epoch=1)
        stats_il = train(dataset, cfg, seed=3).stats
        assert stats_bc.mean.tobytes() == stats_il.mean.tobytes()
        assert stats_bc.std.tobytes() == stats_il.std.tobytes()

    def test_wrong_checkpoint_kind_rejected(self, dataset, tmp_path):
        from proxlab.policy import ModelConfig, train
        cfg = ModelConfig(d=8, z_dim=4, heads=2, enc_layers=1, dec_layers=1, n=4,
                          ff_mult=2, epochs=1, batch_size=4, batches_per_epoch=1)
        path = train(dataset, cfg, seed=3).save(tmp_path / "seq.ckpt")
        with pytest.raises(ValueError, match="kind"):
            BcPolicy.load(path)
