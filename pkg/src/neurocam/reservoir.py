"""Echo-state network: leaky state update, ridge-trained linear readout,
and the inverse-modeling equalizer used for neural filtering.

The recurrent weights are fixed at initialization; training touches only
the readout.  A Reservoir is single-owner state: clone it (copy_reservoir)
to run several in parallel.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from neurocam.core import RngStream, TimeSeries, ridge_solve, spectral_radius


@dataclass
class ReservoirParams:
    n: int = 300
    a: float = 1.0              # leak rate, forward-Euler decay*dt
    rho: float = 0.5            # target spectral radius of W_self
    input_scale: float = 0.3
    fb_scale: float = 0.0
    connectivity: float = 0.05
    ridge_lambda: float = 1e-12
    washout: int = 200

    def validate(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (0.0 < self.a <= 1.0):
            raise ValueError("leak a must be in (0, 1]")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if not (0.0 < self.connectivity <= 1.0):
            raise ValueError("connectivity must be in (0, 1]")
        if self.washout < 0:
            raise ValueError("washout must be >= 0")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")


class Reservoir:
    def __init__(self, params, W_self, W_in, W_fb, W_out, seed_info=None):
        self.params = params
        self.W_self = W_self
        self.W_in = W_in
        self.W_fb = W_fb
        self.W_out = W_out
        self.x = np.zeros(params.n)
        self.seed_info = seed_info

    @property
    def d_in(self):
        return self.W_in.shape[1]

    @property
    def d_out(self):
        return self.W_fb.shape[1]

    def to_json(self):
        doc = {
            "params": asdict(self.params),
            "d_in": self.d_in,
            "d_out": self.d_out,
            "W_self": self.W_self.ravel().tolist(),
            "W_in": self.W_in.ravel().tolist(),
            "W_fb": self.W_fb.ravel().tolist(),
            "W_out": self.W_out.ravel().tolist(),
            "seed_info": self.seed_info,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        p = ReservoirParams(**doc["params"])
        n, d_in, d_out = p.n, doc["d_in"], doc["d_out"]
        r = cls(
            p,
            np.array(doc["W_self"]).reshape(n, n),
            np.array(doc["W_in"]).reshape(n, d_in),
            np.array(doc["W_fb"]).reshape(n, d_out),
            np.array(doc["W_out"]).reshape(d_out, n),
            seed_info=doc.get("seed_info"),
        )
        return r


def init_reservoir(params, rng, d_in=1, d_out=1):
    """Draw the fixed random weights and rescale W_self to the target
    spectral radius.  Bit-reproducible for a given (seed, stream)."""
    params.validate()
    n = params.n

    W_self = None
    for _attempt in range(2):
        W = rng.uniform(-1.0, 1.0, (n, n))
        mask = rng.uniform(0.0, 1.0, (n, n)) < params.connectivity
        W = W * mask
        raw_rho = spectral_radius(W)
        if raw_rho > 0.0:
            W_self = W * (params.rho / raw_rho)
            break
    if W_self is None:
        raise ValueError("random W_self drew zero spectral radius twice")

    W_in = rng.uniform(-1.0, 1.0, (n, d_in)) * params.input_scale
    W_fb = rng.uniform(-1.0, 1.0, (n, d_out)) * params.fb_scale
    W_out = np.zeros((d_out, n))
    return Reservoir(params, W_self, W_in, W_fb, W_out,
                     seed_info={"seed": rng.seed, "stream": rng.stream})


def copy_reservoir(r):
    c = Reservoir(r.params, r.W_self, r.W_in, r.W_fb, r.W_out.copy(),
                  seed_info=r.seed_info)
    c.x = r.x.copy()
    return c


def step(r, u, y_fb=None):
    """Leaky update x <- (1-a)x + a*tanh(W_self x + W_in u + W_fb y_fb).

    Mutates r.x and returns the new state.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if u.shape[0] != r.d_in:
        raise ValueError("input length %d, expected %d" % (u.shape[0], r.d_in))
    if y_fb is None:
        y_fb = np.zeros(r.d_out)
    else:
        y_fb = np.atleast_1d(np.asarray(y_fb, dtype=np.float64))
        if y_fb.shape[0] != r.d_out:
            raise ValueError("feedback length %d, expected %d" % (y_fb.shape[0], r.d_out))
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y_fb))):
        raise ValueError("non-finite input to step()")
    a = r.params.a
    pre = r.W_self @ r.x + r.W_in @ u + r.W_fb @ y_fb
    r.x = (1.0 - a) * r.x + a * np.tanh(pre)
    return r.x


def readout(r):
    return r.W_out @ r.x


def harvest_states(r, inputs, teacher):
    """Drive the reservoir over the input sequence with teacher forcing
    on the feedback path and collect states after the washout.

    Returns (states, targets): rows are x(t) and teacher(t) for
    t = washout .. len-1.  Leaves r.x at the final state so inference
    can continue without a transient.
    """
    U = _as_2d(inputs, r.d_in, "inputs")
    D = _as_2d(teacher, r.d_out, "teacher")
    if U.shape[0] != D.shape[0]:
        raise ValueError("inputs and teacher must have equal length")
    T = U.shape[0]
    washout = r.params.washout
    if T <= washout:
        raise ValueError("sequence length %d <= washout %d" % (T, washout))
    states = np.empty((T - washout, r.params.n))
    y_fb = np.zeros(r.d_out)
    for t in range(T):
        step(r, U[t], y_fb)
        if t >= washout:
            states[t - washout] = r.x
        y_fb = D[t]  # teacher forcing for the next step
    return states, D[washout:]


def train_readout(r, states, targets):
    """Ridge-fit W_out on harvested states; returns a new Reservoir that
    differs from r only in W_out (and carries r's current state)."""
    W = ridge_solve(states, targets, r.params.ridge_lambda)
    trained = copy_reservoir(r)
    trained.W_out = W.T
    return trained


def equalize(r, distorted):
    """Run the trained inverse model over a distorted series and return
    the reconstruction, same length, continuing from r's current state."""
    if not np.any(r.W_out):
        raise ValueError("reservoir readout is untrained (W_out all zero)")
    if isinstance(distorted, TimeSeries):
        dt = distorted.dt
        U = _as_2d(distorted.samples, r.d_in, "distorted")
    else:
        dt = 1.0
        U = _as_2d(distorted, r.d_in, "distorted")
    out = np.empty(U.shape[0])
    y_fb = r.W_out @ r.x  # free-running feedback (inactive when fb_scale=0)
    for t in range(U.shape[0]):
        step(r, U[t], y_fb)
        y = r.W_out @ r.x
        out[t] = y[0]
        y_fb = y
    return TimeSeries(out, dt=dt)


def run_batch(r, U_batch):
    """Vectorized per-pixel inference: drive one shared trained reservoir
    independently over P parallel scalar series (columns of U_batch,
    shape (T, P)) from a zero state.  No cross-column coupling.

    Returns an array (T, P) of readouts (d_in = d_out = 1 only).
    """
    if r.d_in != 1 or r.d_out != 1:
        raise ValueError("run_batch supports scalar-in scalar-out reservoirs")
    if not np.any(r.W_out):
        raise ValueError("reservoir readout is untrained (W_out all zero)")
    U_batch = np.asarray(U_batch, dtype=np.float64)
    T, P = U_batch.shape
    a = r.params.a
    X = np.zeros((r.params.n, P))
    out = np.empty((T, P))
    w_in = r.W_in[:, 0][:, None]
    w_out = r.W_out[0]
    for t in range(T):
        pre = r.W_self @ X + w_in * U_batch[t][None, :]
        X = (1.0 - a) * X + a * np.tanh(pre)
        out[t] = w_out @ X
    return out


def _as_2d(seq, width, name):
    if isinstance(seq, TimeSeries):
        seq = seq.samples
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError("%s must be (T,) or (T, %d), got %s" % (name, width, arr.shape))
    return arr
