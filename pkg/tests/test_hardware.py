import numpy as np
import pytest

from neurocam import hardware as hw
from neurocam.core import RngStream, matvec


class TestMagnetPhysics:
    def test_constructed_unit_ratio(self):
        # choose volume so U == kT at 300 K (without mu0 for directness)
        kT = hw.K_BOLTZMANN * 300.0
        Ms, Hk = 8e5, 8e3
        vol = 2.0 * kT / (Ms * Hk)
        p = hw.MagnetParams(Ms=Ms, Hk=Hk, volume=vol)
        U, ratio = hw.barrier_energy(p, include_mu0=False)
        assert ratio == pytest.approx(1.0, rel=1e-12)

    def test_volume_linearity(self):
        p1 = hw.MagnetParams(Ms=8e5, Hk=8e3, volume=1e-24)
        p2 = hw.MagnetParams(Ms=8e5, Hk=8e3, volume=2e-24)
        U1, _ = hw.barrier_energy(p1)
        U2, _ = hw.barrier_energy(p2)
        assert U2 == pytest.approx(2.0 * U1, rel=1e-12)

    def test_hand_arithmetic(self):
        p = hw.MagnetParams(Ms=8e5, Hk=8e3, volume=1e-24)
        U, _ = hw.barrier_energy(p)
        assert U == pytest.approx(hw.MU_0 * 8e5 * 8e3 * 1e-24 / 2.0,
                                  rel=1e-12)

    def test_retention_at_zero(self):
        assert hw.retention_time(0.0, 1e-9) == 1e-9

    def test_retention_e_tau0(self):
        assert hw.retention_time(1.0, 0.5e-9) == np.e * 0.5e-9

    def test_retention_log_identity(self):
        for u in np.linspace(0.0, 100.0, 21):
            tau = hw.retention_time(u, 1e-9)
            assert abs(np.log(tau / 1e-9) - u) <= 1e-12

    def test_retention_saturation(self):
        with pytest.raises(hw.SaturationError):
            hw.retention_time(701.0, 1e-9)


class TestMtjNeuron:
    def test_saturated_input_always_plus_one(self):
        n = hw.MtjNeuron(kappa=50.0, rng=RngStream(1))
        out = n.sample(1.0, size=1000)
        assert np.all(out == 1.0)

    def test_zero_input_symmetric(self):
        n = hw.MtjNeuron(kappa=1.0, rng=RngStream(2))
        out = n.sample(0.0, size=100000)
        assert abs(out.mean()) <= 0.016

    def test_exact_expectation(self):
        n = hw.MtjNeuron(kappa=2.0, rng=RngStream(3))
        out = n.sample(0.5, size=100000)
        expect = np.tanh(1.0)
        sigma = np.sqrt((1.0 - expect ** 2) / 100000)
        assert abs(out.mean() - expect) <= 3.0 * sigma

    def test_transfer_curve_odd(self):
        n = hw.MtjNeuron(kappa=1.0, rng=RngStream(4))
        grid = np.linspace(-2, 2, 21)
        means, _ = hw.mtj_transfer_curve(n, grid, 4000)
        err = np.abs(means + means[::-1])
        assert np.max(err) <= 2 * 3 * np.sqrt(1.0 / 4000) * 2

    def test_kappa_zero_flat(self):
        n = hw.MtjNeuron(kappa=0.0, rng=RngStream(5))
        means, _ = hw.mtj_transfer_curve(n, np.linspace(-2, 2, 9), 5000)
        assert np.max(np.abs(means)) <= 0.05


class TestGeneralNeuron:
    def test_zero_state_pure_noise(self):
        g = hw.GeneralNeuron(R=1e3, C=1e-6, Qc=1.0, beta=0.2,
                             rng=RngStream(6))
        outs = np.array([g.step(0.0, 1e-5) for _ in range(100000)])
        assert abs(outs.std() - 0.2) / 0.2 <= 0.05

    def test_rc_charging_curve(self):
        g = hw.GeneralNeuron(R=1e3, C=1e-6, Qc=1e9)  # never fires
        rc = 1e-3
        dt = rc / 100.0
        I = 2.0
        for _ in range(int(7 * rc / dt)):
            g.step(I, dt)
        assert g.Q == pytest.approx(I * rc, rel=0.01)

    def test_silent_below_threshold(self):
        g = hw.GeneralNeuron(R=1e3, C=1e-6, Qc=100.0, beta=0.0)
        assert g.step(1.0, 1e-5) == 0.0

    def test_dt_stability_check(self):
        g = hw.GeneralNeuron(R=1e3, C=1e-6, Qc=1.0)
        with pytest.raises(ValueError):
            g.step(0.0, 1.0)


class TestCrossbar:
    def test_zero_weights(self):
        x = hw.program_crossbar(np.zeros((3, 3)), 1e-6, 1e-4)
        assert np.array_equal(x.g_plus, x.g_minus)
        assert not np.any(x.decode())

    def test_round_trip(self):
        W = RngStream(7).uniform(-1, 1, (8, 8))
        x = hw.program_crossbar(W, 1e-6, 1e-4)
        assert np.max(np.abs(x.decode() - W)) <= 1e-9 * np.max(np.abs(W))

    def test_quantization_bound(self):
        W = RngStream(8).uniform(-1, 1, (8, 8))
        x = hw.program_crossbar(W, 1e-6, 1e-4, quant_bits=6)
        bound = (1e-4 - 1e-6) * x.scale / 2 ** 6
        assert np.max(np.abs(x.decode() - W)) <= bound

    def test_matvec_identity(self):
        x = hw.program_crossbar(np.eye(4), 1e-6, 1e-4)
        v = np.array([0.5, -1.0, 2.0, 0.0])
        assert np.max(np.abs(hw.crossbar_matvec(x, v) - v)) <= 1e-12

    def test_matvec_zero_voltage(self):
        x = hw.program_crossbar(RngStream(9).uniform(-1, 1, (4, 4)),
                                1e-6, 1e-4)
        assert not np.any(hw.crossbar_matvec(x, np.zeros(4)))

    def test_matvec_against_oracle(self):
        rng = RngStream(10)
        for _ in range(20):
            W = rng.uniform(-1, 1, (6, 5))
            v = rng.uniform(-1, 1, 5)
            x = hw.program_crossbar(W, 1e-6, 1e-4)
            assert np.max(np.abs(hw.crossbar_matvec(x, v)
                                 - matvec(x.decode(), v))) <= 1e-12

    def test_conductance_range_enforced(self):
        with pytest.raises(ValueError):
            hw.CrossbarArray(np.full((2, 2), 2e-4), np.full((2, 2), 1e-6),
                             1e-6, 1e-4, 1.0)


class TestLfsr:
    def test_full_period(self):
        seen = set()
        state = 1
        for _ in range(65535):
            assert state not in seen
            seen.add(state)
            _, state = hw.lfsr_next(state)
        assert state == 1
        assert len(seen) == 65535

    def test_bit_bias(self):
        state = 1
        ones = 0
        for _ in range(65535):
            bit, state = hw.lfsr_next(state)
            ones += bit
        assert ones == 32768

    def test_zero_state_rejected(self):
        with pytest.raises(ValueError):
            hw.lfsr_next(0)

    def test_deterministic(self):
        a = []
        s = 0xACE1
        for _ in range(32):
            b, s = hw.lfsr_next(s)
            a.append(b)
        c = []
        s = 0xACE1
        for _ in range(32):
            b, s = hw.lfsr_next(s)
            c.append(b)
        assert a == c


class TestDigitalNeuron:
    def test_zero_inputs(self):
        assert hw.digital_neuron_eval(np.zeros(4), np.zeros(4), 0.0) == 0.0

    def test_error_bound_random_instances(self):
        rng = RngStream(11)
        fmt = hw.FixedPointFormat(16, 12)
        for _ in range(200):
            k = int(rng.integers(2, 9))
            w = rng.uniform(-1, 1, k)
            x = rng.uniform(-1, 1, k)
            b = float(rng.uniform(-0.5, 0.5))
            got = hw.digital_neuron_eval(w, x, b, fmt=fmt, lut_size=1024)
            ref = np.tanh(np.dot(w, x) + b)
            bound = 2.0 ** -fmt.frac_bits * k + 4.0 / 1024
            assert abs(got - ref) <= bound

    def test_lut_clamp(self):
        out = hw.digital_neuron_eval(np.array([1.0]), np.array([7.0]), 0.0)
        assert out == pytest.approx(np.tanh(4.0))

    def test_quantize_overflow(self):
        fmt = hw.FixedPointFormat(16, 12)
        with pytest.raises(hw.SaturationError):
            fmt.quantize(10.0)

    def test_round_to_nearest_even(self):
        fmt = hw.FixedPointFormat(16, 12)
        # 0.5 ulp cases round to the even integer
        assert fmt.quantize(1.5 / 4096) == 2
        assert fmt.quantize(2.5 / 4096) == 2


class TestHardwareReadout:
    def test_unquantized_matches_float(self):
        rng = RngStream(12)
        W = rng.uniform(-1, 1, (1, 30))
        states = rng.uniform(-1, 1, (50, 30))
        x = hw.program_crossbar(W, 1e-6, 1e-4)
        out = hw.hardware_esn_readout(x, states)
        ref = states @ W.T
        assert np.max(np.abs(out - ref)) <= 1e-9

    def test_zero_states(self):
        W = RngStream(13).uniform(-1, 1, (1, 10))
        x = hw.program_crossbar(W, 1e-6, 1e-4)
        out = hw.hardware_esn_readout(x, np.zeros((5, 10)))
        assert not np.any(out)

    def test_all_zero_crossbar_refused(self):
        x = hw.program_crossbar(np.zeros((1, 4)), 1e-6, 1e-4)
        with pytest.raises(ValueError):
            hw.hardware_esn_readout(x, np.zeros((3, 4)))
