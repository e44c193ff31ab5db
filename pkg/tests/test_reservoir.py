import numpy as np
import pytest

from neurocam import reservoir as rv
from neurocam.core import RngStream, TimeSeries, nrmse, spectral_radius


def small_params(**kw):
    base = dict(n=50, a=0.5, rho=0.8, input_scale=0.5, connectivity=0.2,
                ridge_lambda=1e-8, washout=20)
    base.update(kw)
    return rv.ReservoirParams(**base)


class TestInit:
    def test_spectral_radius_hits_target(self):
        r = rv.init_reservoir(rv.ReservoirParams(n=100, rho=0.9),
                              RngStream(1))
        assert spectral_radius(r.W_self) == pytest.approx(0.9, abs=1e-6)

    def test_one_by_one(self):
        r = rv.init_reservoir(rv.ReservoirParams(n=1, connectivity=1.0,
                                                 rho=0.5), RngStream(2))
        assert abs(r.W_self[0, 0]) == pytest.approx(0.5)

    def test_deterministic(self):
        a = rv.init_reservoir(small_params(), RngStream(3))
        b = rv.init_reservoir(small_params(), RngStream(3))
        assert np.array_equal(a.W_self, b.W_self)
        assert np.array_equal(a.W_in, b.W_in)

    def test_validation(self):
        with pytest.raises(ValueError):
            rv.ReservoirParams(n=0).validate()
        with pytest.raises(ValueError):
            rv.ReservoirParams(a=0.0).validate()


class TestStep:
    def test_origin_fixed_point(self):
        r = rv.init_reservoir(small_params(), RngStream(4))
        rv.step(r, 0.0)
        assert np.array_equal(r.x, np.zeros(50))

    def test_closed_form_scalar(self):
        r = rv.init_reservoir(rv.ReservoirParams(n=1, a=1.0, rho=0.0,
                                                 connectivity=1.0,
                                                 input_scale=1.0),
                              RngStream(5))
        r.W_self[:] = 0.0
        r.W_in[:] = 1.0
        x = rv.step(r, 0.5)
        assert x[0] == pytest.approx(np.tanh(0.5))

    def test_leak_zero_would_freeze(self):
        # a=0 is outside the valid range; the limit behavior is checked
        # with a tiny leak instead
        r = rv.init_reservoir(small_params(a=1e-12), RngStream(6))
        r.x = np.full(50, 0.3)
        before = r.x.copy()
        rv.step(r, 1.0)
        assert np.max(np.abs(r.x - before)) < 1e-11

    def test_bounded_components(self):
        r = rv.init_reservoir(small_params(), RngStream(7))
        r.x = RngStream(8).uniform(-1, 1, 50)
        for _ in range(20):
            prev = np.max(np.abs(r.x))
            rv.step(r, RngStream(9).uniform(-1, 1))
            assert np.max(np.abs(r.x)) <= max(prev, 1.0) + 1e-12

    def test_echo_state_decay(self):
        r = rv.init_reservoir(small_params(rho=0.8), RngStream(10))
        r.x = RngStream(11).normal(size=50)
        r.x /= np.linalg.norm(r.x)
        for _ in range(1000):
            rv.step(r, 0.0)
        assert np.linalg.norm(r.x) < 1e-6

    def test_rejects_nonfinite(self):
        r = rv.init_reservoir(small_params(), RngStream(12))
        with pytest.raises(ValueError):
            rv.step(r, np.nan)


class TestReadout:
    def test_zero_weights(self):
        r = rv.init_reservoir(small_params(), RngStream(13))
        assert rv.readout(r) == np.array([0.0])

    def test_selector_row(self):
        r = rv.init_reservoir(small_params(), RngStream(14))
        rv.step(r, 0.7)
        r.W_out = np.zeros((1, 50))
        r.W_out[0, 3] = 1.0
        assert rv.readout(r)[0] == r.x[3]


class TestHarvestAndTrain:
    def test_washout_equals_length_errors(self):
        r = rv.init_reservoir(small_params(washout=10), RngStream(15))
        with pytest.raises(ValueError):
            rv.harvest_states(r, np.zeros(10), np.zeros(10))

    def test_zero_input_zero_states(self):
        r = rv.init_reservoir(small_params(), RngStream(16))
        states, targets = rv.harvest_states(r, np.zeros(40), np.zeros(40))
        assert states.shape == (20, 50)
        assert not np.any(states)

    def test_replay_reproduces_states(self):
        r = rv.init_reservoir(small_params(), RngStream(17))
        u = RngStream(18).uniform(-0.5, 0.5, 60)
        d = RngStream(19).uniform(-0.5, 0.5, 60)
        states, _ = rv.harvest_states(rv.copy_reservoir(r), u, d)
        replay = rv.copy_reservoir(r)
        y_fb = np.zeros(1)
        rows = []
        for t in range(60):
            rv.step(replay, u[t], y_fb)
            if t >= 20:
                rows.append(replay.x.copy())
            y_fb = np.atleast_1d(d[t])
        assert np.array_equal(states, np.array(rows))

    def test_training_touches_only_w_out(self):
        r = rv.init_reservoir(small_params(), RngStream(20))
        u = RngStream(21).uniform(-0.5, 0.5, 100)
        states, targets = rv.harvest_states(r, u, u)
        before = (r.W_self.tobytes(), r.W_in.tobytes(), r.W_fb.tobytes())
        trained = rv.train_readout(r, states, targets)
        after = (trained.W_self.tobytes(), trained.W_in.tobytes(),
                 trained.W_fb.tobytes())
        assert before == after
        assert np.any(trained.W_out)

    def test_selector_recovery(self):
        r = rv.init_reservoir(small_params(ridge_lambda=0.0), RngStream(22))
        u = RngStream(23).uniform(-0.5, 0.5, 200)
        states, _ = rv.harvest_states(r, u, u)
        trained = rv.train_readout(r, states, states[:, [7]])
        expected = np.zeros((1, 50))
        expected[0, 7] = 1.0
        assert np.max(np.abs(trained.W_out - expected)) <= 1e-9


class TestEqualize:
    def test_untrained_refused(self):
        r = rv.init_reservoir(small_params(), RngStream(24))
        with pytest.raises(ValueError):
            rv.equalize(r, np.zeros(10))

    def test_identity_channel(self):
        # nearly memoryless reservoir: a binary input is decodable to
        # machine precision through the tanh
        r = rv.init_reservoir(small_params(n=100, a=1.0, rho=0.1,
                                           input_scale=0.3,
                                           ridge_lambda=1e-12, washout=50),
                              RngStream(25))
        d = np.where(RngStream(26).uniform(size=1200) < 0.5, -0.5, 0.5)
        states, targets = rv.harvest_states(r, d[:1000], d[:1000])
        trained = rv.train_readout(r, states, targets)
        out = rv.equalize(trained, d[1000:])
        assert nrmse(out.samples, d[1000:]) <= 1e-6

    def test_deterministic_nrmse(self):
        def run():
            r = rv.init_reservoir(small_params(n=80, washout=50),
                                  RngStream(27))
            d = np.where(RngStream(28).uniform(size=900) < 0.5, -0.5, 0.5)
            states, targets = rv.harvest_states(r, d[:700], d[:700])
            trained = rv.train_readout(r, states, targets)
            return nrmse(rv.equalize(trained, d[700:]).samples, d[700:])
        assert run() == run()


class TestRunBatch:
    def test_matches_sequential_steps(self):
        r = rv.init_reservoir(small_params(n=30, washout=5), RngStream(29))
        u = RngStream(30).uniform(-0.5, 0.5, 80)
        states, targets = rv.harvest_states(rv.copy_reservoir(r), u, u)
        trained = rv.train_readout(rv.copy_reservoir(r), states, targets)

        U = RngStream(31).uniform(-0.5, 0.5, (40, 3))
        batch = rv.run_batch(trained, U)
        for p in range(3):
            solo = rv.copy_reservoir(trained)
            solo.x = np.zeros(30)
            outs = []
            for t in range(40):
                rv.step(solo, U[t, p])
                outs.append(rv.readout(solo)[0])
            assert np.max(np.abs(batch[:, p] - outs)) <= 1e-12


class TestSerialization:
    def test_json_round_trip(self):
        r = rv.init_reservoir(small_params(), RngStream(32))
        r.W_out = RngStream(33).uniform(-1, 1, (1, 50))
        s = rv.Reservoir.from_json(r.to_json())
        assert np.array_equal(s.W_self, r.W_self)
        assert np.array_equal(s.W_out, r.W_out)
        assert s.params == r.params
