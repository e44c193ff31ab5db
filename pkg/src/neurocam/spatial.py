"""Spatial inferencing: convolution/pooling primitives, a small
backprop-trained patch classifier, and the rotated/sheared region search
that turns a frame into a spatial correlation tuple
{tag, p, x, y, h, w, theta, phi_x, phi_y}.

Coordinate convention: x grows right (columns), y grows down (rows);
pixel (r, c) has its center at continuous point (c + 0.5, r + 0.5), so a
HxW frame covers [0, W] x [0, H].  Box-local coordinates are mapped to
the frame by rotation (theta) followed by shear (phi_x shears x by
tan(phi_x)*y, phi_y shears y by tan(phi_y)*x).
"""

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from neurocam.core import Frame

PATCH_SIZE = 16
BACKGROUND = "background"


class Kernel:
    def __init__(self, weights):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError("kernel must be 2D")
        j, k = weights.shape
        if j % 2 == 0 or k % 2 == 0 or j < 1 or k < 1:
            raise ValueError("kernel dims must be odd and >= 1, got %dx%d" % (j, k))
        if not np.all(np.isfinite(weights)):
            raise ValueError("kernel weights must be finite")
        self.weights = weights

    @property
    def j(self):
        return self.weights.shape[0]

    @property
    def k(self):
        return self.weights.shape[1]


def _pixels(a):
    return a.pixels if isinstance(a, Frame) else np.asarray(a, dtype=np.float64)


def convolve2d(a, u):
    """Valid-mode sliding product: B[r,c] = sum_pq U[p,q] * A[r+p, c+q]."""
    A = _pixels(a)
    U = u.weights if isinstance(u, Kernel) else np.asarray(u, dtype=np.float64)
    j, k = U.shape
    m, n = A.shape
    if j > m or k > n:
        raise ValueError("kernel %s larger than frame %s" % (U.shape, A.shape))
    windows = sliding_window_view(A, (j, k))
    return np.tensordot(windows, U, axes=([2, 3], [0, 1]))


def pool(b, window):
    """Non-overlapping max pooling; partial windows are dropped."""
    B = np.asarray(b, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    m, n = B.shape
    mo, no = m // window, n // window
    if mo == 0 and no == 0:
        raise ValueError("window %d exceeds both dims %s" % (window, B.shape))
    trimmed = B[: mo * window, : no * window]
    return trimmed.reshape(mo, window, no, window).max(axis=(1, 3))


# ---------------------------------------------------------------------------
# Patch classifier: conv(4x 3x3) -> ReLU -> maxpool 2 -> dense -> softmax


class ConvNet:
    """Minimal convolutional classifier over 16x16 patches.

    Immutable after training; forward passes are pure and may run
    concurrently.
    """

    N_KERNELS = 4
    KSIZE = 3
    POOL = 2

    def __init__(self, classes, kernels=None, conv_bias=None,
                 dense_w=None, dense_b=None):
        if BACKGROUND not in classes:
            raise ValueError("classes must include %r" % BACKGROUND)
        self.classes = list(classes)
        nc = len(self.classes)
        side = PATCH_SIZE - self.KSIZE + 1          # 14
        pooled = side // self.POOL                   # 7
        feat = self.N_KERNELS * pooled * pooled      # 196
        self.kernels = np.zeros((self.N_KERNELS, self.KSIZE, self.KSIZE)) \
            if kernels is None else np.asarray(kernels, dtype=np.float64)
        self.conv_bias = np.zeros(self.N_KERNELS) \
            if conv_bias is None else np.asarray(conv_bias, dtype=np.float64)
        self.dense_w = np.zeros((nc, feat)) \
            if dense_w is None else np.asarray(dense_w, dtype=np.float64)
        self.dense_b = np.zeros(nc) \
            if dense_b is None else np.asarray(dense_b, dtype=np.float64)

    def copy(self):
        return ConvNet(self.classes, self.kernels.copy(), self.conv_bias.copy(),
                       self.dense_w.copy(), self.dense_b.copy())

    def parameters(self):
        return [self.kernels, self.conv_bias, self.dense_w, self.dense_b]

    def to_json(self):
        return json.dumps({
            "classes": self.classes,
            "kernels": self.kernels.ravel().tolist(),
            "conv_bias": self.conv_bias.tolist(),
            "dense_w": self.dense_w.ravel().tolist(),
            "dense_b": self.dense_b.tolist(),
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        net = cls(doc["classes"])
        net.kernels = np.array(doc["kernels"]).reshape(net.kernels.shape)
        net.conv_bias = np.array(doc["conv_bias"])
        net.dense_w = np.array(doc["dense_w"]).reshape(net.dense_w.shape)
        net.dense_b = np.array(doc["dense_b"])
        return net


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(net, patches):
    """Class probabilities for a batch of 16x16 patches, shape (B, 16, 16)."""
    probs, _ = _forward_cache(net, patches)
    return probs


def forward(net, patch):
    P = _pixels(patch)
    if P.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError("patch must be %dx%d, got %s" % (PATCH_SIZE, PATCH_SIZE, P.shape))
    return forward_batch(net, P[None])[0]


def _forward_cache(net, patches):
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError("expected (B, %d, %d) patches, got %s"
                         % (PATCH_SIZE, PATCH_SIZE, X.shape))
    ks = net.KSIZE
    win = sliding_window_view(X, (ks, ks), axis=(1, 2))        # (B,14,14,3,3)
    conv = np.tensordot(win, net.kernels, axes=([3, 4], [1, 2]))  # (B,14,14,K)
    conv = conv + net.conv_bias
    relu = np.maximum(conv, 0.0)
    B, side = X.shape[0], PATCH_SIZE - ks + 1
    po = side // net.POOL
    blocks = relu[:, : po * net.POOL, : po * net.POOL, :].reshape(
        B, po, net.POOL, po, net.POOL, net.N_KERNELS)
    pooled = blocks.max(axis=(2, 4))                            # (B,7,7,K)
    feats = pooled.reshape(B, -1)
    logits = feats @ net.dense_w.T + net.dense_b
    probs = _softmax(logits)
    cache = (X, win, conv, relu, blocks, pooled, feats, logits)
    return probs, cache


def loss_and_grads(net, patches, labels, label_smoothing=0.0):
    """Mean cross-entropy and gradients w.r.t. every parameter.

    labels are integer class indices.  With label_smoothing > 0 the
    one-hot targets are mixed with the uniform distribution, which keeps
    the output probabilities off the 0/1 rails; the search relies on
    comparing probabilities, so saturated ties are costly.  Returns
    (loss, [g_kernels, g_conv_bias, g_dense_w, g_dense_b]).
    """
    probs, cache = _forward_cache(net, patches)
    X, win, conv, relu, blocks, pooled, feats, _ = cache
    B = X.shape[0]
    nc = probs.shape[1]
    labels = np.asarray(labels)
    targets = np.full((B, nc), label_smoothing / nc)
    targets[np.arange(B), labels] += 1.0 - label_smoothing
    eps = 1e-300
    loss = -np.mean(np.sum(targets * np.log(probs + eps), axis=1))

    d_logits = (probs - targets) / B
    g_dense_w = d_logits.T @ feats
    g_dense_b = d_logits.sum(axis=0)

    d_feats = d_logits @ net.dense_w
    d_pooled = d_feats.reshape(pooled.shape)
    # route pooling gradient to the max entry of each window
    is_max = blocks == pooled[:, :, None, :, None, :]
    # split ties evenly so the gradient stays the derivative a.e.
    tie_count = is_max.sum(axis=(2, 4), keepdims=True)
    d_blocks = is_max * (d_pooled[:, :, None, :, None, :] / tie_count)
    po = pooled.shape[1]
    d_relu = np.zeros_like(relu)
    d_relu[:, : po * net.POOL, : po * net.POOL, :] = d_blocks.reshape(
        B, po * net.POOL, po * net.POOL, net.N_KERNELS)
    d_conv = d_relu * (conv > 0)

    g_conv_bias = d_conv.sum(axis=(0, 1, 2))
    g_kernels = np.tensordot(d_conv, win, axes=([0, 1, 2], [0, 1, 2]))
    g_kernels = np.transpose(g_kernels, (0, 1, 2))              # (K,3,3)
    return loss, [g_kernels, g_conv_bias, g_dense_w, g_dense_b]


def train(net, patches, labels, epochs=30, lr=0.2, batch_size=32, rng=None,
          label_smoothing=0.05):
    """Mini-batch gradient descent on cross-entropy.  Returns a new net."""
    X = np.asarray(patches, dtype=np.float64)
    y = np.asarray(labels)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 classes in the dataset")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    out = net.copy()
    if np.all(out.kernels == 0.0):
        if rng is None:
            raise ValueError("rng required to initialize an untrained net")
        out.kernels = rng.normal(0.0, 0.3, out.kernels.shape)
        out.dense_w = rng.normal(0.0, 0.05, out.dense_w.shape)
    order = np.arange(X.shape[0])
    for _epoch in range(epochs):
        if rng is not None:
            rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, grads = loss_and_grads(out, X[idx], y[idx],
                                      label_smoothing=label_smoothing)
            for p, g in zip(out.parameters(), grads):
                p -= lr * g
    return out


# ---------------------------------------------------------------------------
# Region search


@dataclass
class SpatialTuple:
    tag: str
    p: float
    x: float
    y: float
    h: float
    w: float
    theta: float = 0.0
    phi_x: float = 0.0
    phi_y: float = 0.0

    def validate(self, frame_shape=None):
        if not (0.0 <= self.p <= 1.0):
            raise ValueError("p must be in [0,1], got %g" % self.p)
        if self.h <= 0 or self.w <= 0:
            raise ValueError("box dims must be positive")
        if frame_shape is not None:
            H, W = frame_shape
            if not (0 <= self.x <= W and 0 <= self.y <= H):
                raise ValueError("box center (%g, %g) outside %dx%d frame"
                                 % (self.x, self.y, W, H))

    def as_row(self):
        return [self.tag, self.p, self.x, self.y, self.h, self.w,
                self.theta, self.phi_x, self.phi_y]


TUPLE_CSV_HEADER = "frame,tag,p,x,y,h,w,theta,phi_x,phi_y"


def tuples_to_csv(tuples):
    lines = [TUPLE_CSV_HEADER]
    for i, tp in enumerate(tuples):
        lines.append(",".join([str(i), tp.tag] +
                              [repr(float(v)) for v in tp.as_row()[1:]]))
    return "\n".join(lines) + "\n"


def tuples_from_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != TUPLE_CSV_HEADER:
        raise ValueError("expected header %r" % TUPLE_CSV_HEADER)
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(SpatialTuple(parts[1], *[float(v) for v in parts[2:]]))
    return out


@dataclass
class SearchConfig:
    scales: tuple = (8, 12, 16, 24, 32)
    stride: int = 4
    theta_grid: tuple = tuple(range(-45, 46, 15))
    phi_grid: tuple = tuple(range(-20, 21, 10))
    prior_center_radius: int = 8
    prior_scale_steps: int = 1
    confidence: float = 0.5
    patch_fill: float = 0.8      # shape extent as a fraction of the box side
    tiebreak_tol: float = 0.02   # near-best margin for the distortion tie-break
    refine_radius: int = 2       # sub-grid recentering window, px
    shear_penalty: float = 0.003  # score penalty per degree of view anisotropy
    gate_top: int = 32           # candidates tried against the template gate
    match_threshold: float = 0.92  # min cosine similarity to the class template


def _grid_centers(extent, scale, stride):
    count = int((extent - scale) // stride) + 1
    return scale / 2.0 + stride * np.arange(count)


def propose_regions(frame_shape, prior=None, cfg=None):
    """Candidate (cx, cy, scale) boxes, all fully inside the frame.

    With a prior tuple, restricts to the subset of the exhaustive grid
    within the prior's neighborhood (small frame-to-frame motion).
    """
    cfg = cfg or SearchConfig()
    H, W = frame_shape
    fitting = [s for s in cfg.scales if s <= min(H, W)]
    if not fitting:
        return [(W / 2.0, H / 2.0, float(min(H, W)))]
    boxes = []
    if prior is None:
        for s in fitting:
            for cy in _grid_centers(H, s, cfg.stride):
                for cx in _grid_centers(W, s, cfg.stride):
                    boxes.append((cx, cy, float(s)))
        return boxes
    prior_scale = (prior.h + prior.w) / 2.0 / cfg.patch_fill
    base = int(np.argmin([abs(s - prior_scale) for s in fitting]))
    lo = max(0, base - cfg.prior_scale_steps)
    hi = min(len(fitting), base + cfg.prior_scale_steps + 1)
    r = cfg.prior_center_radius
    for s in fitting[lo:hi]:
        xs = _grid_centers(W, s, cfg.stride)
        ys = _grid_centers(H, s, cfg.stride)
        for cy in ys[np.abs(ys - prior.y) <= r]:
            for cx in xs[np.abs(xs - prior.x) <= r]:
                boxes.append((cx, cy, float(s)))
    if not boxes:
        # prior sits where no grid point is within reach; fall back to the
        # nearest grid box of the base scale (still in the exhaustive set)
        s = fitting[base]
        xs, ys = _grid_centers(W, s, cfg.stride), _grid_centers(H, s, cfg.stride)
        boxes.append((xs[np.argmin(np.abs(xs - prior.x))],
                      ys[np.argmin(np.abs(ys - prior.y))], float(s)))
    return boxes


def _transform_matrix(theta_deg, phi_x_deg, phi_y_deg):
    t = np.deg2rad(theta_deg)
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    S = np.array([[1.0, np.tan(np.deg2rad(phi_x_deg))],
                  [np.tan(np.deg2rad(phi_y_deg)), 1.0]])
    return S @ R


def _view_decomposition(theta_deg, phi_x_deg, phi_y_deg):
    """Polar form of a view transform: effective rotation, residual
    shear, and an anisotropy measure, all in degrees.

    A shear pair (phi_x = -phi, phi_y = +phi) is geometrically a scaled
    rotation, so different parameter triples can describe nearly the
    same view; the polar form is the canonical way to compare and
    report them.  The rotation angle is folded into [-45, 45) to match
    the search grid; anisotropy is the log eigenvalue ratio of the
    stretch part, which reduces to |phi_x| + |phi_y| for small shear
    and to zero for any pure (scaled) rotation.
    """
    M = _transform_matrix(theta_deg, phi_x_deg, phi_y_deg)
    th = np.arctan2(M[1, 0] - M[0, 1], M[0, 0] + M[1, 1])
    c, s = np.cos(th), np.sin(th)
    Q = M @ np.array([[c, s], [-s, c]])     # symmetric stretch part
    Q = Q / np.sqrt(np.linalg.det(Q))
    phi_x = np.rad2deg(np.arctan2(Q[0, 1], Q[0, 0]))
    phi_y = np.rad2deg(np.arctan2(Q[1, 0], Q[1, 1]))
    ev = np.linalg.eigvalsh(Q)
    aniso = np.rad2deg(np.log(ev[1] / ev[0]))
    theta = (np.rad2deg(th) + 45.0) % 90.0 - 45.0
    return theta, phi_x, phi_y, aniso


def _patch_centroid(patch):
    """Intensity centroid of a patch in unit box coordinates, i.e.
    (0, 0) for a perfectly centered shape and +-0.5 at the edges."""
    g = (np.arange(PATCH_SIZE) + 0.5) / PATCH_SIZE - 0.5
    total = patch.sum()
    if total <= 1e-9:
        return 0.5, 0.5     # empty patch: worst offset, fails any gate
    u = float((patch.sum(axis=0) * g).sum() / total)
    v = float((patch.sum(axis=1) * g).sum() / total)
    return u, v


_TEMPLATE_CACHE = {}


def _class_template(cls, fill):
    """Centered axis-aligned rendering of a class at the training fill
    fraction, the appearance a correctly framed detection must have."""
    key = (cls, round(fill, 6))
    if key not in _TEMPLATE_CACHE:
        half = PATCH_SIZE / 2.0
        size = fill * PATCH_SIZE
        _TEMPLATE_CACHE[key] = render_shape((PATCH_SIZE, PATCH_SIZE), cls,
                                            half, half, size, size)
    return _TEMPLATE_CACHE[key]


def _template_match(patch, tmpl):
    """Cosine similarity between a sampled patch and a class template."""
    num = float((patch * tmpl).sum())
    den = float(np.sqrt((patch ** 2).sum() * (tmpl ** 2).sum()))
    return num / den if den > 1e-12 else 0.0


_VIEW_TABLE_CACHE = {}


def _view_table(cfg):
    """Per-config table over the full theta x phi grid: raw parameters,
    their polar form, and the distortion penalty, row-major in the same
    order _refine_scale scores views."""
    key = (cfg.theta_grid, cfg.phi_grid, cfg.shear_penalty)
    if key not in _VIEW_TABLE_CACHE:
        rows = []
        for th in cfg.theta_grid:
            for px in cfg.phi_grid:
                for py in cfg.phi_grid:
                    rows.append((th, px, py)
                                + _view_decomposition(th, px, py))
        table = np.array(rows)              # (n, 7): raw triple + polar
        penalty = cfg.shear_penalty * np.abs(table[:, 6])
        _VIEW_TABLE_CACHE[key] = (table, penalty)
    return _VIEW_TABLE_CACHE[key]


def sample_patch_batch(pixels, params):
    """Resample rotated/sheared parallelogram regions into 16x16 patches.

    params: array (N, 7) of (cx, cy, w, h, theta, phi_x, phi_y).  The
    classifier grid is inverse-mapped through the transform with
    bilinear interpolation; samples outside the frame read 0.
    """
    P = np.asarray(pixels, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    H, W = P.shape
    N = params.shape[0]
    g = (np.arange(PATCH_SIZE) + 0.5) / PATCH_SIZE - 0.5
    gx, gy = np.meshgrid(g, g)                      # (16,16), unit box coords
    t = np.deg2rad(params[:, 4])
    tx = np.tan(np.deg2rad(params[:, 5]))
    ty = np.tan(np.deg2rad(params[:, 6]))
    ct, st = np.cos(t), np.sin(t)
    mats = np.empty((N, 2, 2))
    mats[:, 0, 0] = ct + tx * st        # S @ R, rows composed directly
    mats[:, 0, 1] = -st + tx * ct
    mats[:, 1, 0] = ty * ct + st
    mats[:, 1, 1] = -ty * st + ct
    lx = gx[None] * params[:, 2, None, None]        # scale by w
    ly = gy[None] * params[:, 3, None, None]        # scale by h
    fx = params[:, 0, None, None] + mats[:, 0, 0, None, None] * lx \
        + mats[:, 0, 1, None, None] * ly
    fy = params[:, 1, None, None] + mats[:, 1, 0, None, None] * lx \
        + mats[:, 1, 1, None, None] * ly
    # continuous point -> pixel-center coordinates
    cx = fx - 0.5
    cy = fy - 0.5
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    tx = cx - x0
    ty = cy - y0
    out = np.zeros((N, PATCH_SIZE, PATCH_SIZE))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            wgt = (tx if dx else 1.0 - tx) * (ty if dy else 1.0 - ty)
            vals = np.where(valid, P[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], 0.0)
            out += wgt * vals
    return out


def render_shape(canvas_shape, shape, cx, cy, w, h, theta=0.0, phi_x=0.0,
                 phi_y=0.0, intensity=1.0, background=0.0, ss=3):
    """Render a filled square or disk with rotation/shear, anti-aliased by
    ss x ss supersampling.  Returns a (H, W) float array."""
    if shape not in ("square", "disk"):
        raise ValueError("unknown shape %r" % shape)
    H, W = canvas_shape
    M = _transform_matrix(theta, phi_x, phi_y)
    Minv = np.linalg.inv(M)
    sub = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(H)[:, None] + sub[None, :]).ravel()
    xs = (np.arange(W)[:, None] + sub[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    dx = px - cx
    dy = py - cy
    lx = Minv[0, 0] * dx + Minv[0, 1] * dy
    ly = Minv[1, 0] * dx + Minv[1, 1] * dy
    ux = lx / (w / 2.0)
    uy = ly / (h / 2.0)
    if shape == "square":
        inside = (np.abs(ux) <= 1.0) & (np.abs(uy) <= 1.0)
    else:
        inside = ux ** 2 + uy ** 2 <= 1.0
    cov = inside.reshape(H, ss, W, ss).mean(axis=(1, 3))
    return background + (intensity - background) * cov


def make_training_patches(rng, n_per_class=120, classes=("square", "disk"),
                          fill=0.8, jitter_px=1.5, jitter_theta=7.0):
    """Synthetic labeled 16x16 patches for the classifier.

    Every shape patch goes through the same bilinear box sampling the
    region search uses (render at box scale, then view the box), so the
    training distribution matches what the search actually feeds the
    net.  Foreground classes show a well-framed shape at the fill
    fraction with small positional/size/rotation jitter.  Background
    patches mix featureless fields (empty, noise, gradient, near-uniform
    bright) with badly framed or badly aligned shapes: too small,
    overflowing the patch, off center, only partially in view,
    misrotated, or viewed under a wrong shear.  Those hard negatives are
    what lets the search discriminate box scale, position, and transform
    instead of saturating on any blob under any view.
    """
    patches, labels = [], []
    all_classes = list(classes) + [BACKGROUND]
    side = PATCH_SIZE
    box_scales = (8, 12, 16, 24, 32)

    def shape_view(cls, size_p, off_p, d_theta, phi_xv, phi_yv, inten):
        # render at a random box scale and sample through the box, like
        # the search does; patch-unit size/offset scale with the box
        s = box_scales[int(rng.integers(0, len(box_scales)))]
        f = s / float(side)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        th_r = rng.uniform(-45.0, 45.0)
        canvas = render_shape((2 * s, 2 * s), cls,
                              s + off_p * f * np.cos(ang),
                              s + off_p * f * np.sin(ang),
                              size_p * f, size_p * f,
                              theta=th_r, intensity=inten)
        params = np.array([[s, s, s, s, th_r + d_theta, phi_xv, phi_yv]])
        return sample_patch_batch(canvas, params)[0]

    for ci, cls in enumerate(classes):
        for _ in range(n_per_class):
            size = fill * side * (1.0 + rng.uniform(-0.12, 0.12))
            img = shape_view(cls, size, rng.uniform(0.0, jitter_px),
                             rng.uniform(-jitter_theta, jitter_theta),
                             0.0, 0.0, rng.uniform(0.75, 1.0))
            img = img + rng.normal(0.0, 0.02, img.shape)
            patches.append(np.clip(img, 0.0, 1.0))
            labels.append(ci)
    def bad_view():
        """Random nuisance vector guaranteed outside the positive margin.

        All factors vary jointly: the search's false peaks come from
        combinations (e.g. oversized box plus shear) that single-factor
        negatives never cover.
        """
        cls = classes[int(rng.integers(0, len(classes)))]
        rotatable = cls != "disk"
        while True:
            size = side * rng.uniform(0.15, 2.2)
            off = rng.uniform(0.0, 12.0)
            d_theta = rng.uniform(-45.0, 45.0) if rotatable else 0.0
            phx = rng.uniform(-25.0, 25.0) if rng.uniform() < 0.5 else 0.0
            phy = rng.uniform(-25.0, 25.0) if rng.uniform() < 0.5 else 0.0
            framed = (abs(size / (fill * side) - 1.0) < 0.2
                      and off < jitter_px + 1.0
                      and abs(d_theta) < jitter_theta + 3.0
                      and abs(phx) < 8.0 and abs(phy) < 8.0)
            if not framed:
                return shape_view(cls, size, off, d_theta, phx, phy,
                                  rng.uniform(0.75, 1.0))

    rotatable = [c for c in classes if c != "disk"]

    def diamond_view():
        """Well-framed rotatable shape seen under a badly wrong rotation.

        At patch resolution a square viewed 15-45 degrees off axis has
        soft corners and reads as a disk unless the net is shown it is
        neither class; these negatives carry that lesson.
        """
        cls = rotatable[int(rng.integers(0, len(rotatable)))]
        size = fill * side * (1.0 + rng.uniform(-0.12, 0.12))
        d_theta = rng.choice([-1.0, 1.0]) * rng.uniform(14.0, 45.0)
        return shape_view(cls, size, rng.uniform(0.0, jitter_px), d_theta,
                          0.0, 0.0, rng.uniform(0.75, 1.0))

    bg_kinds = ("empty", "noise", "gradient", "bright",
                "shape", "shape", "shape", "shape", "shape",
                "diamond", "diamond", "diamond")
    n_bg = 3 * n_per_class
    for i in range(n_bg):
        kind = bg_kinds[i % len(bg_kinds)]
        if kind == "diamond" and not rotatable:
            kind = "shape"
        if kind == "empty":
            img = np.full((side, side), rng.uniform(0.0, 0.1))
        elif kind == "noise":
            img = rng.uniform(0.0, 0.35, (side, side))
        elif kind == "gradient":
            ramp = np.linspace(0.0, rng.uniform(0.3, 0.9), side)
            img = np.tile(ramp, (side, 1))
            if rng.uniform() < 0.5:
                img = img.T
        elif kind == "bright":
            img = np.full((side, side), rng.uniform(0.85, 1.0))
        elif kind == "diamond":
            img = diamond_view()
        else:
            img = bad_view()
        img = img + rng.normal(0.0, 0.02, (side, side))
        patches.append(np.clip(img, 0.0, 1.0))
        labels.append(len(classes))
    return np.array(patches), np.array(labels), all_classes


def score_region(net, frame, box, theta, phi_x, phi_y):
    """Best non-background class and its probability for one region."""
    cx, cy, s = box
    if s < 2:
        raise ValueError("degenerate box (side %g < 2 px)" % s)
    patch = sample_patch_batch(_pixels(frame),
                               np.array([[cx, cy, s, s, theta, phi_x, phi_y]]))[0]
    probs = forward(net, patch)
    bg = net.classes.index(BACKGROUND)
    masked = probs.copy()
    masked[bg] = -1.0
    best = int(np.argmax(masked))
    return net.classes[best], float(probs[best])


def search_size(frame_shape, prior, cfg=None):
    """Forward-pass budget of extract_tuple for this frame.

    Coarse localization sweeps every candidate box over the rotation
    grid only; the full rotation x shear grid runs during refinement of
    the top locations.  The refine term is an upper bound (fewer scales
    may fit the frame).
    """
    cfg = cfg or SearchConfig()
    n_theta = len(cfg.theta_grid)
    n_grid = n_theta * len(cfg.phi_grid) ** 2
    coarse = len(propose_regions(frame_shape, prior, cfg)) * n_theta
    fitting = [s for s in cfg.scales if s <= min(frame_shape)] or [min(frame_shape)]
    if prior is not None:
        n_loc, n_sc, rad = 2, 2, cfg.refine_radius
    else:
        n_loc, n_sc, rad = 6, 3, cfg.stride
    n_sc = min(n_sc, len(fitting))
    window = max((2 * (rad + max(1, int(round(s / PATCH_SIZE)))) + 1) ** 2
                 for s in fitting)
    return coarse + n_loc * n_sc * window * n_grid


def _score_boxes(net, pixels, boxes, cfg):
    """Classify every box under the full rotation/shear grid.

    Returns (params, probs): rows of (cx, cy, s, s, theta, phi_x, phi_y)
    and the matching class probabilities.
    """
    combos = []
    for cx, cy, s in boxes:
        for th in cfg.theta_grid:
            for px in cfg.phi_grid:
                for py in cfg.phi_grid:
                    combos.append((cx, cy, s, s, th, px, py))
    params = np.array(combos)
    probs = forward_batch(net, sample_patch_batch(pixels, params))
    return params, probs


def _refine_scale(net, P, cx0, cy0, s, r, cfg):
    """Score a window of 1 px shifted boxes at one scale.

    The interior (2r+1)^2 boxes reach every center within r px of the
    coarse grid point, so with r >= stride/2 no true center is out of
    range; the surrounding margin exists only so each interior box has
    a full neighborhood of shifted copies.  The robust score of a view
    is the minimum of its class probability over that neighborhood,
    which is what separates genuine detections from the isolated false
    peaks a tiny classifier produces somewhere in a ~1e5 view grid.
    """
    bg = net.classes.index(BACKGROUND)
    n_grid = len(cfg.theta_grid) * len(cfg.phi_grid) ** 2
    # perturbation distance of one patch pixel; anything smaller is a
    # sub-pixel wiggle for large boxes and collapses nothing
    d = max(1, int(round(s / PATCH_SIZE)))
    r = r + d
    W = 2 * r + 1
    local = [(cx0 + dx, cy0 + dy, s)
             for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    _, lprobs = _score_boxes(net, P, local, cfg)
    cube = lprobs.reshape(W, W, n_grid, len(net.classes))
    inner = cube[d:W - d, d:W - d]
    neigh_min = np.min([cube[d + dy:W - d + dy, d + dx:W - d + dx]
                        for dy in (-d, 0, d) for dx in (-d, 0, d)], axis=0)
    fg_in = inner.copy()
    fg_in[..., bg] = -1.0
    cls_in = np.argmax(fg_in, axis=-1)
    rob_in = np.take_along_axis(neigh_min, cls_in[..., None], axis=-1)[..., 0]
    _, penalty = _view_table(cfg)
    rob_in = rob_in - penalty
    return inner, neigh_min, rob_in, cls_in, r, d


def extract_tuple(net, frame, prior=None, cfg=None):
    """Best classifier response over candidate boxes x the transform
    grids, hardened against the failure modes of a tiny classifier.

    Coarse localization sweeps every candidate box over the rotation
    grid (shear views are never needed to find the object and are the
    classifier's main adversarial surface).  The top distinct locations
    are then refined over the full rotation x shear grid at neighboring
    scales with 1 px recentering, scoring each view by the minimum of
    its class probability over shifted centers: false peaks are isolated
    in position while a genuinely well-framed shape keeps scoring high
    in a whole neighborhood.  A small shear penalty breaks saturated
    ties in favor of plausible views.

    A shear pair (phi_x = -phi, phi_y = +phi) is geometrically a
    rotation, so several views at the winning box describe the same
    detection; the least distorted near-best view for the winning class
    is reported.

    With a prior the search trusts frame-to-frame locality and spends a
    smaller budget (fewer refined locations and scales).

    Reported h, w are the box side scaled by the training fill fraction,
    i.e. an estimate of the shape extent rather than the search box.
    """
    cfg = cfg or SearchConfig()
    P = _pixels(frame)
    bg = net.classes.index(BACKGROUND)

    # coarse localization: rotation grid only
    boxes = propose_regions(P.shape, prior, cfg)
    combos = np.array([(cx, cy, s, s, th, 0.0, 0.0)
                       for cx, cy, s in boxes for th in cfg.theta_grid])
    probs = forward_batch(net, sample_patch_batch(P, combos))
    fg = probs.copy()
    fg[:, bg] = -1.0
    combo_p = fg.max(axis=1)
    fitting = [s for s in cfg.scales if s <= min(P.shape)]
    table, penalty = _view_table(cfg)
    results = []

    def refine(cx0, cy0, s0, n_sc, rad):
        near_scales = sorted(fitting, key=lambda s: abs(s - s0))[:n_sc] \
            if fitting else [s0]
        for s in near_scales:
            res = _refine_scale(net, P, cx0, cy0, float(s), rad, cfg)
            results.append((float(s), cx0, cy0, res))

    def gate():
        """Rank refined views globally and pick the best one whose patch
        actually looks like its claimed class: sub-pixel recenter on the
        intensity centroid, then require the recentered patch to match a
        rendered template of the class.  A saturated impostor view
        frames the object off center or truncated and fails this
        model-free check.  Returns (pick, centroid shift, gate passed).
        """
        robs = np.concatenate([res[2].ravel() for _, _, _, res in results])
        segments = np.cumsum([0] + [res[2].size for _, _, _, res in results])
        order = np.argsort(-robs, kind="stable")
        for k in order[:cfg.gate_top]:
            j = int(np.searchsorted(segments, k, side="right")) - 1
            s, cx0, cy0, res = results[j]
            by, bx, ti = np.unravel_index(k - segments[j], res[2].shape)
            r, d = res[4], res[5]
            th, px, py = table[ti, :3]
            box = np.array([cx0 + (bx + d - r), cy0 + (by + d - r),
                            s, s, th, px, py])
            u, v = _patch_centroid(sample_patch_batch(P, box[None])[0])
            M = _transform_matrix(th, px, py)
            shift = np.clip(M @ np.array([u * s, v * s]), -2.0, 2.0)
            box[:2] += shift
            patch = sample_patch_batch(P, box[None])[0]
            cls_k = net.classes[int(res[3][by, bx, ti])]
            tmpl = _class_template(cls_k, cfg.patch_fill)
            if _template_match(patch, tmpl) >= cfg.match_threshold:
                return int(k), segments, shift, True
        return int(order[0]), segments, np.zeros(2), False

    if prior is not None:
        # refine at the prior's exact center first (the coarse grid can
        # be off by half its stride); fall back to the coarse winner
        # only when no candidate there survives the template gate
        prior_scale = (prior.h + prior.w) / 2.0 / cfg.patch_fill
        refine(prior.x, prior.y, prior_scale, 2, cfg.refine_radius)
        pick, segments, cshift, passed = gate()
        if not passed:
            cx, cy, s = combos[int(np.argmax(combo_p))][:3]
            if max(abs(cx - prior.x), abs(cy - prior.y)) > 2.0:
                refine(cx, cy, s, 2, cfg.refine_radius)
                pick, segments, cshift, passed = gate()
    else:
        # refinement must reach every center the coarse dedupe can have
        # suppressed, i.e. a full stride around each kept location
        locs = []
        for k in np.argsort(-combo_p, kind="stable"):
            cx, cy, s = combos[k][:3]
            if all(max(abs(cx - ax), abs(cy - ay)) > cfg.stride
                   for ax, ay in locs):
                locs.append((cx, cy))
                refine(cx, cy, s, 3, cfg.stride)
            if len(locs) == 6:
                break
        pick, segments, cshift, passed = gate()

    j = int(np.searchsorted(segments, pick, side="right")) - 1
    s_win, cx0, cy0, (inner, neigh_min, rob_in, cls_in, r, d) = results[j]
    by, bx, ti = np.unravel_index(pick - segments[j], rob_in.shape)
    cls_best = int(cls_in[by, bx, ti])

    # canonicalize the transform: least distorted near-best view of the
    # winning class at the winning box, reported in polar form (several
    # grid triples describe the same transform)
    robv = neigh_min[by, bx, :, cls_best] - penalty
    near = np.flatnonzero(robv >= robv.max() - cfg.tiebreak_tol)
    aniso = np.abs(table[near, 6])
    rot = np.abs(table[near, 3])
    ti = int(near[np.lexsort((-robv[near], rot, aniso))[0]])

    p_best = float(inner[by, bx, ti, cls_best])
    th, px, py = table[ti, 3:6]
    cx = cx0 + (bx + d - r) + cshift[0]
    cy = cy0 + (by + d - r) + cshift[1]
    tag = net.classes[cls_best] if p_best >= cfg.confidence else BACKGROUND
    return SpatialTuple(tag=tag, p=p_best, x=float(cx), y=float(cy),
                        h=float(s_win) * cfg.patch_fill,
                        w=float(s_win) * cfg.patch_fill,
                        theta=float(th), phi_x=float(px), phi_y=float(py))
