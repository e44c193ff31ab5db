"""Shared numeric primitives: frames, time series, RNG streams, metrics.

Everything here is pure float64 and deterministic.  All stochastic code in
the repository draws from :class:`RngStream` so that a (seed, stream) pair
pins the full run.
"""

import csv
import io

import numpy as np


class SingularSystemError(ValueError):
    """Raised when a least-squares system is singular at lambda = 0."""


class RngStream:
    """Deterministic random stream keyed by (seed, stream id).

    Thin wrapper over numpy's PCG64 seeded through a SeedSequence spawn
    key, so distinct stream ids are statistically independent and the
    same pair always reproduces the same values, on any platform.

    Instances are single-owner: never share one between concurrent
    tasks; give each task its own stream id instead.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, stream):
        """A fresh independent stream under the same seed."""
        return RngStream(self.seed, stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def shuffle(self, x):
        self.gen.shuffle(x)


class Frame:
    """2D grayscale image, row-major float64 pixels in [0, 1]."""

    def __init__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValueError("Frame expects a 2D array, got ndim=%d" % pixels.ndim)
        if not np.all(np.isfinite(pixels)):
            raise ValueError("Frame pixels must be finite")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("Frame intensities must lie in [0, 1]")
        self.pixels = pixels

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def to_pgm(self):
        """Serialize as binary NetPBM P5, maxval 65535, big-endian."""
        raw = np.round(self.pixels * 65535.0).astype(">u2")
        header = b"P5\n%d %d\n65535\n" % (self.width, self.height)
        return header + raw.tobytes()

    @classmethod
    def from_pgm(cls, data):
        buf = io.BytesIO(data)
        fields = []
        while len(fields) < 4:
            line = buf.readline()
            if not line:
                raise ValueError("truncated PGM header")
            line = line.split(b"#")[0]
            fields.extend(line.split())
        if fields[0] != b"P5":
            raise ValueError("expected binary PGM (P5), got %r" % fields[0])
        width, height, maxval = (int(f) for f in fields[1:4])
        if maxval != 65535:
            raise ValueError("expected maxval 65535, got %d" % maxval)
        raw = np.frombuffer(buf.read(width * height * 2), dtype=">u2")
        if raw.size != width * height:
            raise ValueError("truncated PGM pixel data")
        return cls(raw.reshape(height, width).astype(np.float64) / 65535.0)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_pgm())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_pgm(f.read())


class TimeSeries:
    """Uniformly sampled scalar series with sample interval dt > 0."""

    def __init__(self, samples, dt=1.0):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("TimeSeries expects a 1D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("TimeSeries samples must be finite")
        if not dt > 0:
            raise ValueError("dt must be positive, got %r" % (dt,))
        self.samples = samples
        self.dt = float(dt)

    def __len__(self):
        return len(self.samples)

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t", "value"])
        for i, v in enumerate(self.samples):
            w.writerow([repr(float(i * self.dt)), repr(float(v))])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["t", "value"]:
            raise ValueError("expected CSV header 't,value'")
        if len(rows) < 2:
            raise ValueError("empty time series")
        t = np.array([float(r[0]) for r in rows[1:]])
        v = np.array([float(r[1]) for r in rows[1:]])
        dt = t[1] - t[0] if len(t) > 1 else 1.0
        return cls(v, dt=dt)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_csv(f.read())


def _as_samples(x):
    if isinstance(x, TimeSeries):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def nrmse(pred, target):
    """Root mean square error normalized by the target's std deviation.

    Uses population variance of the target; 0 iff pred == target.
    """
    p = _as_samples(pred)
    t = _as_samples(target)
    if p.shape != t.shape:
        raise ValueError("length mismatch: %s vs %s" % (p.shape, t.shape))
    if p.size < 2:
        raise ValueError("need at least 2 samples")
    var = np.var(t)
    if var <= 0.0:
        raise ValueError("target variance is zero; NRMSE undefined")
    return float(np.sqrt(np.mean((p - t) ** 2) / var))


def matvec(M, v):
    """Dense matrix-vector product with explicit shape checking."""
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
        raise ValueError("dimension mismatch: %s x %s" % (M.shape, v.shape))
    return M @ v


def ridge_solve(X, Y, lam):
    """W minimizing ||XW - Y||^2 + lam*||W||^2.

    At lam = 0 a singular normal system raises SingularSystemError
    rather than being silently regularized.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("shape mismatch: X %s, Y %s" % (X.shape, Y.shape))
    k = X.shape[1]
    # QR of the augmented system [X; sqrt(lam) I] keeps the conditioning
    # of X itself instead of squaring it through the normal equations
    if lam > 0:
        A = np.vstack([X, np.sqrt(lam) * np.eye(k)])
        B = np.vstack([Y, np.zeros((k, Y.shape[1]))])
    else:
        A, B = X, Y
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.size < k or diag.min() <= 1e-13 * max(diag.max(), 1e-300):
        raise SingularSystemError(
            "least-squares system is singular (lambda=%g)" % lam)
    return np.linalg.solve(R, Q.T @ B)


def spectral_radius(M, tol=1e-9, max_iter=10000, block=4):
    """Largest absolute eigenvalue, by block power (subspace) iteration.

    The small block handles complex-conjugate dominant pairs that plain
    single-vector power iteration cannot resolve.  Raises if the
    estimate has not stabilized within max_iter sweeps.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix, got %s" % (M.shape,))
    n = M.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    if n <= block + 1:
        # subspace would span everything; the direct answer is cheap
        return float(np.max(np.abs(np.linalg.eigvals(M))))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0x5EED)))
    Q = np.linalg.qr(rng.standard_normal((n, block)))[0]
    prev = np.inf
    for _ in range(max_iter):
        Z = M @ Q
        Q, _ = np.linalg.qr(Z)
        H = Q.T @ M @ Q
        est = float(np.max(np.abs(np.linalg.eigvals(H))))
        if est == 0.0:
            # subspace collapsed (e.g. nilpotent matrix): radius is 0
            return 0.0
        if abs(est - prev) <= tol * max(est, 1e-300):
            return est
        prev = est
    raise RuntimeError("spectral radius estimate did not converge")
