"""Emulation of the proposed hardware neurons and synapses.

Covers the fixed-point digital neuron (multiply-accumulate plus LUT
activation and an LFSR noise source), the RC-input general neuron, the
soft-magnet stability/retention model, the stochastic MTJ binary neuron,
and memristor-crossbar synaptic weights with differential conductance
pairs.  Everything is cross-checkable against the float64 reference
implementations in core/reservoir.
"""

from dataclasses import dataclass

import numpy as np

from neurocam.core import matvec

K_BOLTZMANN = 1.380649e-23   # J/K
MU_0 = 4.0e-7 * np.pi        # H/m

LFSR_TAPS = 0xB400           # maximal 16-bit polynomial, period 65535


class SaturationError(ArithmeticError):
    """Raised when a fixed-point accumulator or exponent saturates."""


# ---------------------------------------------------------------------------
# Soft-magnet physics


@dataclass
class MagnetParams:
    Ms: float            # saturation magnetization, A/m
    Hk: float            # uniaxial anisotropy field, A/m
    volume: float        # m^3
    T: float = 300.0     # K
    tau0: float = 1e-9   # attempt time, s

    def validate(self):
        for name in ("Ms", "Hk", "volume", "T", "tau0"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be positive" % name)


def barrier_energy(p, include_mu0=True):
    """Magnet energy barrier U = mu0*Ms*Hk*V/2 (SI).

    Returns (U in joules, U/kT).  include_mu0=False computes the raw
    Ms*Hk*V/2 product for CGS-style inputs.
    """
    p.validate()
    U = p.Ms * p.Hk * p.volume / 2.0
    if include_mu0:
        U *= MU_0
    return U, U / (K_BOLTZMANN * p.T)


def retention_time(u_over_kt, tau0):
    """State retention tau = tau0 * exp(U/kT)."""
    if not tau0 > 0:
        raise ValueError("tau0 must be positive")
    if u_over_kt > 700.0:
        raise SaturationError(
            "exp(%g) overflows float64; retention time saturated" % u_over_kt)
    return tau0 * np.exp(u_over_kt)


# ---------------------------------------------------------------------------
# Stochastic MTJ binary neuron


class MtjNeuron:
    """p-bit: emits +-1 with E[out] = tanh(kappa * m_in).

    The thermal term is uniform on (-1, 1), which makes the long-time
    average exactly tanh of the drive.
    """

    def __init__(self, kappa, rng):
        if not np.isfinite(kappa):
            raise ValueError("kappa must be finite")
        self.kappa = float(kappa)
        self.rng = rng

    def sample(self, m_in, size=None):
        m_in = np.asarray(m_in, dtype=np.float64)
        if not np.all(np.isfinite(m_in)):
            raise ValueError("non-finite input")
        noise = self.rng.uniform(-1.0, 1.0, size if size is not None else m_in.shape or None)
        z = np.tanh(self.kappa * m_in) + noise
        out = np.where(z >= 0.0, 1.0, -1.0)
        return out if out.ndim else float(out)


def mtj_sample(n, m_in):
    return n.sample(m_in)


def mtj_transfer_curve(n, inputs, samples_per_point):
    """Per-input mean and standard error of the binary output."""
    if samples_per_point < 1:
        raise ValueError("samples_per_point must be >= 1")
    inputs = np.asarray(inputs, dtype=np.float64)
    means = np.empty(inputs.shape)
    stderrs = np.empty(inputs.shape)
    for i, z in enumerate(inputs):
        s = n.sample(z, size=samples_per_point)
        means[i] = s.mean()
        stderrs[i] = s.std(ddof=1) / np.sqrt(samples_per_point) \
            if samples_per_point > 1 else 1.0
    return means, stderrs


# ---------------------------------------------------------------------------
# General RC-input neuron


class GeneralNeuron:
    """RC delay line + threshold charge + tanh drive + AWGN output.

    State Q integrates dQ/dt = I_in - Q/(R*C) by forward Euler; the
    output fires alpha_g*tanh(dQ/dt * R*C/Qc) only once Q >= Qc, always
    plus beta-scaled Gaussian noise.
    """

    def __init__(self, R, C, Qc, alpha_g=1.0, beta=0.0, rng=None):
        if R <= 0 or C <= 0:
            raise ValueError("R and C must be positive")
        self.R = float(R)
        self.C = float(C)
        self.Qc = float(Qc)
        self.alpha_g = float(alpha_g)
        self.beta = float(beta)
        self.rng = rng
        self.Q = 0.0

    def step(self, I_in, dt):
        rc = self.R * self.C
        if not 0 < dt <= rc / 10.0:
            raise ValueError("dt must satisfy 0 < dt <= R*C/10 for stability")
        dq_dt = I_in - self.Q / rc
        self.Q += dt * dq_dt
        noise = 0.0
        if self.beta != 0.0:
            if self.rng is None:
                raise ValueError("beta != 0 requires an rng")
            noise = self.beta * self.rng.normal()
        if self.Q >= self.Qc:
            return self.alpha_g * np.tanh(dq_dt * rc / self.Qc) + noise
        return noise


def general_neuron_step(g, I_in, dt):
    return g.step(I_in, dt)


# ---------------------------------------------------------------------------
# Memristor crossbar


class CrossbarArray:
    """Differential conductance pair encoding of a signed weight matrix."""

    def __init__(self, g_plus, g_minus, g_min, g_max, scale):
        g_plus = np.asarray(g_plus, dtype=np.float64)
        g_minus = np.asarray(g_minus, dtype=np.float64)
        if g_plus.shape != g_minus.shape:
            raise ValueError("conductance matrices must share a shape")
        eps = 1e-12 * max(abs(g_min), abs(g_max), 1.0)
        for g in (g_plus, g_minus):
            if g.min() < g_min - eps or g.max() > g_max + eps:
                raise ValueError("conductance outside [g_min, g_max]")
        self.g_plus = g_plus
        self.g_minus = g_minus
        self.g_min = float(g_min)
        self.g_max = float(g_max)
        self.scale = float(scale)

    def decode(self):
        return self.scale * (self.g_plus - self.g_minus)


def program_crossbar(weights, g_min, g_max, quant_bits=None):
    """Map signed weights onto conductance pairs in [g_min, g_max].

    w >= 0 programs g_plus = g_min + w/s, g_minus = g_min (mirrored for
    negative w), with s = max|w| / (g_max - g_min).  Optional uniform
    quantization of each conductance to 2**quant_bits steps.
    """
    W = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise ValueError("weights must be finite")
    if not g_max > g_min:
        raise ValueError("need g_max > g_min")
    span = g_max - g_min
    wmax = np.max(np.abs(W))
    if wmax == 0.0:
        gp = np.full(W.shape, g_min)
        return CrossbarArray(gp, gp.copy(), g_min, g_max, 0.0)
    s = wmax / span
    g_plus = np.where(W >= 0, g_min + W / s, g_min)
    g_minus = np.where(W >= 0, g_min, g_min - W / s)
    if quant_bits is not None:
        step = span / (2 ** quant_bits)
        g_plus = g_min + np.round((g_plus - g_min) / step) * step
        g_minus = g_min + np.round((g_minus - g_min) / step) * step
    return CrossbarArray(g_plus, g_minus, g_min, g_max, s)


def crossbar_matvec(x, v):
    """Output currents I = s * (G+ - G-) v, i.e. the decoded weights
    applied through Ohm/Kirchhoff summation."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != x.g_plus.shape[1]:
        raise ValueError("voltage vector length %s, expected %d"
                         % (v.shape, x.g_plus.shape[1]))
    return x.scale * ((x.g_plus - x.g_minus) @ v)


def hardware_esn_readout(x, states):
    """Crossbar readout applied to each reservoir state row."""
    states = np.asarray(states, dtype=np.float64)
    if not np.any(x.decode()):
        raise ValueError("crossbar programmed with all-zero weights")
    return np.array([crossbar_matvec(x, row) for row in states])


# ---------------------------------------------------------------------------
# Digital neuron: LFSR, fixed point, LUT activation


def lfsr_next(state, taps=LFSR_TAPS):
    """One Fibonacci LFSR step (16-bit, left shift, taps fed to bit 0)."""
    state = int(state)
    if not 0 < state <= 0xFFFF:
        raise ValueError("LFSR state must be a nonzero 16-bit value")
    bit = bin(state & taps).count("1") & 1
    new_state = ((state << 1) | bit) & 0xFFFF
    return bit, new_state


@dataclass
class FixedPointFormat:
    total_bits: int = 16
    frac_bits: int = 12

    def validate(self):
        if not (0 < self.frac_bits < self.total_bits <= 32):
            raise ValueError("need 0 < frac < total <= 32")

    def quantize(self, value):
        """Round-to-nearest-even to an integer in this format; raises on
        values outside the representable range."""
        self.validate()
        q = int(np.round(value * (1 << self.frac_bits)))  # numpy rounds half to even
        limit = 1 << (self.total_bits - 1)
        if not -limit <= q < limit:
            raise SaturationError("value %g not representable in Q%d.%d"
                                  % (value, self.total_bits - self.frac_bits,
                                     self.frac_bits))
        return q

    def to_float(self, q):
        return q / float(1 << self.frac_bits)


def make_tanh_lut(lut_size, span=4.0):
    """tanh lookup over [-span, span]: lut_size+1 entries so that 0 maps
    exactly to tanh(0) when lut_size is even."""
    grid = -span + 2.0 * span * np.arange(lut_size + 1) / lut_size
    return grid, np.tanh(grid)


def digital_neuron_eval(weights, inputs, bias, fmt=None, lut_size=1024):
    """Fixed-point multiply-accumulate then LUT tanh.

    Products of two frac_bits operands are exact in 2*frac_bits; the
    accumulator is checked against a 2*total_bits budget and overflow
    raises SaturationError.  The LUT uses nearest-entry lookup over
    [-4, 4] and clamps beyond it.
    """
    fmt = fmt or FixedPointFormat()
    weights = np.asarray(weights, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if weights.shape != inputs.shape:
        raise ValueError("weights/inputs length mismatch")
    qw = [fmt.quantize(w) for w in weights]
    qx = [fmt.quantize(x) for x in inputs]
    qb = fmt.quantize(bias)
    acc = sum(w * x for w, x in zip(qw, qx)) + (qb << fmt.frac_bits)
    acc_limit = 1 << (2 * fmt.total_bits - 1)
    if not -acc_limit <= acc < acc_limit:
        raise SaturationError("accumulator overflow in PROD+SUM block")
    # shift back to frac_bits with round-half-to-even
    z = fmt.to_float(_rshift_rne(acc, fmt.frac_bits))
    span = 4.0
    grid, lut = make_tanh_lut(lut_size, span)
    idx = int(np.round((z + span) * lut_size / (2.0 * span)))
    idx = min(max(idx, 0), lut_size)
    return float(lut[idx])


def _rshift_rne(value, bits):
    """Arithmetic right shift with round-half-to-even."""
    if bits == 0:
        return value
    half = 1 << (bits - 1)
    mask = (1 << bits) - 1
    q, r = value >> bits, value & mask
    if r > half or (r == half and (q & 1)):
        q += 1
    return q
