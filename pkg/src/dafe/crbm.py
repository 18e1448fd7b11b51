"""Convolutional RBMs with probabilistic max-pooling, stacked into a CDBN.

Array layout is channels-first, optionally with a leading batch axis:
visible ``(C_in, N_V, N_V)``, detection ``(K, N_H, N_H)``, pooling
``(K, N_P, N_P)``.

The bottom-up signal is the energy derivative with respect to a hidden unit,
``I(h^k_ij) = b_k + sum_c sum_rs W[k,c,r,s] v[c, i+r, j+s]``, i.e. a valid
correlation of the visible map with the filter (equivalently a true
convolution with the flipped filter).  The top-down visible mean is its
adjoint, a full convolution of the hidden map with the filter.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DataError, DimensionError, ParameterError
from .tensor import as_tensor, flip180, l2_normalize_rows


@dataclass
class CrbmLayer:
    W: np.ndarray          # (K, C_in, N_W, N_W)
    b: np.ndarray          # (K,)
    c: float
    pool: int
    visible: str = "gaussian"   # "gaussian" or "binary"
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = as_tensor(self.W)
        self.b = as_tensor(self.b)
        self.c = float(self.c)
        if self.W.ndim != 4 or self.W.shape[2] != self.W.shape[3]:
            raise DimensionError(f"filters must be (K, C, N_W, N_W), got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise DimensionError("one hidden bias per filter required")
        if self.pool < 1 or self.W.shape[0] < 1 or self.W.shape[2] < 1:
            raise ParameterError("K, N_W and pool size must be positive")
        if self.visible not in ("gaussian", "binary"):
            raise ParameterError(f"unknown visible type {self.visible!r}")

    @property
    def n_filters(self):
        return self.W.shape[0]

    @property
    def in_channels(self):
        return self.W.shape[1]

    @property
    def filter_size(self):
        return self.W.shape[2]

    def detection_size(self, visible_size):
        return visible_size - self.filter_size + 1

    def pooled_size(self, visible_size):
        return self.detection_size(visible_size) // self.pool

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class BlockActivation:
    detection: np.ndarray   # P(h=1|.) per unit, (..., K, N_H, N_H) cropped to a multiple of C
    pooling: np.ndarray     # P(p=1|.) per block, (..., K, N_P, N_P)
    off: np.ndarray         # P(all units of block off), same shape as pooling
    pool: int


@dataclass
class CdbnStack:
    layers: list
    input_size: int
    trained: bool = False

    def __post_init__(self):
        size = self.input_size
        for i, layer in enumerate(self.layers):
            if i > 0 and layer.in_channels != self.layers[i - 1].n_filters:
                raise DimensionError(f"layer {i} expects {layer.in_channels} channels, "
                                     f"previous layer has {self.layers[i - 1].n_filters} filters")
            if layer.detection_size(size) < layer.pool:
                raise DimensionError(f"layer {i}: visible size {size} too small")
            size = layer.pooled_size(size)

    def visible_sizes(self):
        sizes = [self.input_size]
        for layer in self.layers[:-1]:
            sizes.append(layer.pooled_size(sizes[-1]))
        return sizes

    def feature_dim(self, mode="third_layer"):
        dims = []
        for layer, size in zip(self.layers, self.visible_sizes()):
            dims.append(layer.n_filters * layer.pooled_size(size) ** 2)
        return dims[-1] if mode == "third_layer" else sum(dims)

    def copy(self):
        return copy.deepcopy(self)


def init_layer(n_filters, in_channels, filter_size, pool, rng, visible="gaussian",
               weight_var=0.01):
    W = rng.normal(np.sqrt(weight_var), (n_filters, in_channels, filter_size, filter_size))
    return CrbmLayer(W=W, b=np.zeros(n_filters), c=0.0, pool=pool, visible=visible)


def build_stack(geometry, in_channels, input_size, rng, weight_var=0.01):
    """Randomly initialised stack from ``[(K, N_W, pool), ...]``.

    The first layer has Gaussian visible units; higher layers see pooling
    probabilities and use binary visible units.
    """
    layers = []
    channels = in_channels
    for i, (k, nw, pool) in enumerate(geometry):
        layers.append(init_layer(k, channels, nw, pool, rng,
                                 visible="gaussian" if i == 0 else "binary",
                                 weight_var=weight_var))
        channels = k
    return CdbnStack(layers=layers, input_size=input_size)


def stack_shapes(input_size, geometry):
    """Per layer ``(visible, detection, cropped detection, pooled)`` sizes."""
    out = []
    size = input_size
    for _, nw, pool in geometry:
        nh = size - nw + 1
        cropped = nh - nh % pool
        out.append((size, nh, cropped, cropped // pool))
        size = cropped // pool
    return out


# -- linear maps -----------------------------------------------------------

def _windows(x, n):
    return sliding_window_view(x, (n, n), axis=(-2, -1))


def correlate(x, W):
    """sum_c corr_valid(x[c], W[k, c]) for every k; x is (..., C, H, W)."""
    x = as_tensor(x)
    if x.shape[-3] != W.shape[1]:
        raise DimensionError(f"input has {x.shape[-3]} channels, filters expect {W.shape[1]}")
    if x.shape[-1] < W.shape[-1] or x.shape[-2] < W.shape[-2]:
        raise DimensionError("filter larger than visible map")
    win = _windows(x, W.shape[-1])
    out = np.tensordot(win, W, axes=([-5, -2, -1], [1, 2, 3]))
    return np.moveaxis(out, -1, -3)


def full_convolve(h, W):
    """Adjoint of ``correlate``: sum_k conv_full(h[k], flip180(W[k, c])) per channel c."""
    h = as_tensor(h)
    n = W.shape[-1]
    pad = [(0, 0)] * (h.ndim - 2) + [(n - 1, n - 1), (n - 1, n - 1)]
    win = _windows(np.pad(h, pad), n)
    out = np.tensordot(win, flip180(W), axes=([-5, -2, -1], [0, 2, 3]))
    return np.moveaxis(out, -1, -3)


def filter_gradient(x, dI):
    """d/dW of sum(dI * correlate(x, W)); batch axes of x and dI are summed."""
    x = as_tensor(x)
    dI = as_tensor(dI)
    n = x.shape[-1] - dI.shape[-1] + 1
    win = _windows(x, n)
    lead = list(range(dI.ndim - 3))
    return np.tensordot(dI, win, axes=(lead + [dI.ndim - 2, dI.ndim - 1],
                                       lead + [win.ndim - 4, win.ndim - 3]))


def _pad_hidden(h, full):
    """Zero-pad a cropped detection map back to the full detection size."""
    dy, dx = full[0] - h.shape[-2], full[1] - h.shape[-1]
    if dy == 0 and dx == 0:
        return h
    pad = [(0, 0)] * (h.ndim - 2) + [(0, dy), (0, dx)]
    return np.pad(h, pad)


def crop_to_pool(signal, pool):
    """Drop trailing rows/columns so the detection map tiles into pool blocks."""
    H, W = signal.shape[-2:]
    return signal[..., :H - H % pool, :W - W % pool]


# -- conditionals ----------------------------------------------------------

def bottom_up(v, layer):
    return correlate(v, layer.W) + layer.b[:, None, None]


def top_down(h, layer):
    return full_convolve(h, layer.W)


def _to_blocks(x, pool):
    *lead, K, H, W = x.shape
    x = x.reshape(*lead, K, H // pool, pool, W // pool, pool)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, K, H // pool, W // pool, pool * pool)


def _from_blocks(x, pool):
    *lead, K, P, Q, _ = x.shape
    x = x.reshape(*lead, K, P, Q, pool, pool)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, K, P * pool, Q * pool)


def block_probs(signal, pool, pool_signal=None):
    """Block softmax over the C*C on-states plus the all-off state.

    ``pool_signal`` (shape of the pooling map) is added to every unit of its
    block; it carries the top-down input from the layer above during Gibbs
    sampling.
    """
    signal = as_tensor(signal)
    H, W = signal.shape[-2:]
    if H % pool or W % pool:
        raise DimensionError(f"detection map {H}x{W} not divisible by pool size {pool}")
    blocks = _to_blocks(signal, pool)
    if pool_signal is not None:
        blocks = blocks + as_tensor(pool_signal)[..., None]
    m = np.maximum(blocks.max(axis=-1), 0.0)
    e = np.exp(blocks - m[..., None])
    off_e = np.exp(-m)
    denom = off_e + e.sum(axis=-1)
    probs = e / denom[..., None]
    return BlockActivation(detection=_from_blocks(probs, pool), pooling=probs.sum(axis=-1),
                           off=off_e / denom, pool=pool)


def sample_block(act, rng):
    """Draw binary detection states, at most one unit on per block."""
    probs = _to_blocks(act.detection, act.pool)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.uniform(probs.shape[:-1])[..., None]
    # The first unit whose cumulative mass exceeds u is on; if none does the block is off.
    below = cdf <= u
    idx = below.sum(axis=-1)
    states = np.zeros_like(probs)
    on = idx < probs.shape[-1]
    np.put_along_axis(states, np.where(on, idx, 0)[..., None], on[..., None].astype(float), axis=-1)
    return _from_blocks(states, act.pool)


def pooled_states(h, pool):
    return _to_blocks(as_tensor(h), pool).sum(axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def visible_conditional(h, layer, visible_size=None):
    """Mean of the visible units given (possibly cropped) detection states."""
    h = as_tensor(h)
    if h.shape[-3] != layer.n_filters:
        raise DimensionError("hidden map channel count does not match filters")
    if visible_size is not None:
        nh = layer.detection_size(visible_size)
        h = _pad_hidden(h, (nh, nh))
    lin = top_down(h, layer) + layer.c
    return lin if layer.visible == "gaussian" else _sigmoid(lin)


def infer(v, layer):
    """Mean-field detection and pooling probabilities of one layer."""
    return block_probs(crop_to_pool(bottom_up(v, layer), layer.pool), layer.pool)


def check_block_constraint(h, pool):
    h = as_tensor(h)
    if np.any((h != 0.0) & (h != 1.0)):
        raise ContractError("hidden states must be binary")
    if np.any(pooled_states(crop_to_pool(h, pool), pool) > 1.0):
        raise ContractError("more than one unit on in a pooling block")
    H, W = h.shape[-2:]
    if np.any(h[..., H - H % pool:, :]) or np.any(h[..., :, W - W % pool:]):
        raise ContractError("units outside the pooled region must be off")


def energy(v, h, layer):
    """Energy of one (v, h) configuration, with h on the full detection grid."""
    v = as_tensor(v)
    h = as_tensor(h)
    nh = layer.detection_size(v.shape[-1])
    h = _pad_hidden(h, (nh, nh))
    check_block_constraint(h, layer.pool)
    interaction = -np.sum(h * correlate(v, layer.W))
    bias_h = -np.sum(layer.b[:, None, None] * h)
    bias_v = -layer.c * np.sum(v)
    quad = 0.5 * np.sum(v * v) if layer.visible == "gaussian" else 0.0
    return float(interaction + quad + bias_h + bias_v)


# -- contrastive divergence ------------------------------------------------

@dataclass
class CdHyper:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.002
    sparsity_target: float = 0.01
    sparsity_weight: float = 1.0
    batch_size: int = 10


def cd_gradients(layer, v0, act0, v1, act1, hyper):
    """CD statistics plus the sparsity gradient; all quantities are ascent directions."""
    B = v0.shape[0]
    nh = layer.detection_size(v0.shape[-1])
    n_units = B * nh * nh
    h0 = _pad_hidden(act0.detection, (nh, nh))
    h1 = _pad_hidden(act1.detection, (nh, nh))
    gW = (filter_gradient(v0, h0) - filter_gradient(v1, h1)) / n_units
    gb = (h0 - h1).sum(axis=(0, 2, 3)) / n_units
    gc = float(np.mean(v0 - v1))
    if hyper.sparsity_weight:
        # exact gradient of -lambda/2 * (target - q_k)^2 with q_k the mean detection probability
        n_cropped = B * act0.detection.shape[-1] * act0.detection.shape[-2]
        q = act0.detection.sum(axis=(0, 2, 3)) / n_cropped
        scale = hyper.sparsity_weight * (hyper.sparsity_target - q)
        hoff = act0.detection * np.repeat(np.repeat(act0.off, layer.pool, -2), layer.pool, -1)
        gb = gb + scale * hoff.sum(axis=(0, 2, 3)) / n_cropped
        gW = gW + scale[:, None, None, None] * filter_gradient(v0, _pad_hidden(hoff, (nh, nh))) / n_cropped
    return gW, gb, gc


def apply_update(layer, gW, gb, gc, hyper):
    """Momentum step with weight decay; returns a new layer."""
    new = layer.copy()
    vel = new.velocity
    vW = vel.get("W", np.zeros_like(new.W))
    vb = vel.get("b", np.zeros_like(new.b))
    vc = vel.get("c", 0.0)
    vW = hyper.momentum * vW + hyper.lr * (gW - hyper.weight_decay * new.W)
    vb = hyper.momentum * vb + hyper.lr * gb
    vc = hyper.momentum * vc + hyper.lr * gc
    new.W = new.W + vW
    new.b = new.b + vb
    new.c = float(new.c + vc)
    new.velocity = {"W": vW, "b": vb, "c": float(vc)}
    return new


def cd_update(layer, batch, hyper, rng):
    """One CD-1 step on a mini-batch; returns ``(new_layer, stats)``."""
    v0 = as_tensor(batch)
    if v0.ndim == 3:
        v0 = v0[None]
    if v0.shape[0] == 0:
        raise DataError("empty batch")
    act0 = infer(v0, layer)
    hs = sample_block(act0, rng)
    v1 = visible_conditional(hs, layer, v0.shape[-1])
    act1 = infer(v1, layer)
    gW, gb, gc = cd_gradients(layer, v0, act0, v1, act1, hyper)
    new = apply_update(layer, gW, gb, gc, hyper)
    stats = {"mse": float(np.mean((v0 - v1) ** 2)),
             "mean_activation": float(act0.detection.mean())}
    return new, stats


def reconstruction_error(layer, data, chunk=64, limit=500):
    """Mean-field reconstruction MSE over (at most ``limit``) samples of ``data``."""
    data = data[:limit]
    total = 0.0
    for i in range(0, data.shape[0], chunk):
        v = data[i:i + chunk]
        act = infer(v, layer)
        recon = visible_conditional(act.detection, layer, v.shape[-1])
        total += float(np.sum((recon - v) ** 2))
    return total / data.size


def train_layer(layer, data, epochs, hyper, rng, layer_index=0, log=None):
    """Run ``epochs`` of CD over ``data`` (N, C, H, W); returns ``(layer, curve)``.

    ``curve`` holds ``(epoch, layer_index, mse)`` for epoch 0 (before any
    update) through ``epochs``, using the deterministic mean-field
    reconstruction error so values are comparable across epochs.
    """
    data = as_tensor(data)
    if data.shape[0] == 0:
        raise DataError("empty dataset")

    def record(epoch):
        mse = reconstruction_error(layer, data)
        curve.append((epoch, layer_index, mse))
        if log is not None:
            log(epoch, layer_index, mse)

    curve = []
    record(0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(data.shape[0])
        for start in range(0, len(order), hyper.batch_size):
            layer, _ = cd_update(layer, data[order[start:start + hyper.batch_size]], hyper, rng)
        record(epoch)
    return layer, curve


def layer_output(data, layer, chunk=64):
    """Pooling probabilities for a whole dataset, computed in chunks."""
    outs = [infer(data[i:i + chunk], layer).pooling for i in range(0, data.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def pretrain_stack(stack, data, epochs, hyper, rng, log=None):
    """Greedy layer-wise CD training; each trained layer is frozen before the next."""
    data = as_tensor(data)
    if data.ndim != 4 or data.shape[0] == 0:
        raise DataError("pretraining data must be a non-empty (N, C, H, W) array")
    stack = stack.copy()
    curves = []
    x = data
    for i in range(len(stack.layers)):
        stack.layers[i], curve = train_layer(stack.layers[i], x, epochs, hyper, rng,
                                             layer_index=i, log=log)
        curves.extend(curve)
        if i + 1 < len(stack.layers):
            x = layer_output(x, stack.layers[i])
    stack.trained = True
    return stack, curves


# -- Gibbs sampling over the whole stack -----------------------------------

def _pool_signal(stack, i, h_above):
    """Top-down input to layer i's pooling units from layer i+1's detection states."""
    if i + 1 >= len(stack.layers):
        return None
    above = stack.layers[i + 1]
    sizes = stack.visible_sizes()
    nh = above.detection_size(sizes[i + 1])
    return top_down(_pad_hidden(h_above, (nh, nh)), above) + above.c


def gibbs_chain(stack, v, rng):
    """Infinite block-Gibbs chain; yields ``(v, detection states, pooling states)`` per sweep.

    Each sweep samples every hidden layer in order given the layer below and
    the detection states above, then the visible layer given layer one.
    Inter-layer connections reuse the filters of the layer above.
    """
    v = as_tensor(v).copy()
    n = len(stack.layers)
    hs = [None] * n
    ps = [None] * n
    x = v
    for i, layer in enumerate(stack.layers):
        hs[i] = sample_block(infer(x, layer), rng)
        ps[i] = pooled_states(hs[i], layer.pool)
        x = ps[i]
    first = stack.layers[0]
    while True:
        x = v
        for i, layer in enumerate(stack.layers):
            sig = crop_to_pool(bottom_up(x, layer), layer.pool)
            act = block_probs(sig, layer.pool, _pool_signal(stack, i, hs[i + 1] if i + 1 < n else None))
            hs[i] = sample_block(act, rng)
            ps[i] = pooled_states(hs[i], layer.pool)
            x = ps[i]
        mean = visible_conditional(hs[0], first, v.shape[-1])
        if first.visible == "gaussian":
            v = rng.gaussian(mean)
        else:
            v = rng.bernoulli(mean)
        yield v, list(hs), list(ps)


def gibbs_sample_all(stack, v, steps, rng):
    """Run ``steps`` sweeps and return the final pooling samples of every layer."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    chain = gibbs_chain(stack, v, rng)
    for _ in range(steps):
        _, _, ps = next(chain)
    return ps


# -- deterministic embedding -----------------------------------------------

def forward(stack, x, upto=None, start=0):
    """Mean-field pass; returns per-layer caches ``(input, BlockActivation)``."""
    caches = []
    layers = stack.layers[start:upto]
    for layer in layers:
        act = infer(x, layer)
        caches.append((x, act))
        x = act.pooling
    return caches


def _flatten_features(caches, mode):
    lead = caches[-1][1].pooling.shape[:-3]
    if mode == "third_layer":
        return caches[-1][1].pooling.reshape(*lead, -1)
    if mode == "concat_all":
        return np.concatenate([act.pooling.reshape(*lead, -1) for _, act in caches], axis=-1)
    raise ParameterError(f"unknown feature mode {mode!r}")


def extract_features(stack, x, mode="third_layer", require_trained=True):
    """Unit-norm feature vector(s) for input(s) ``x`` of shape (..., C, H, W)."""
    if require_trained and not stack.trained:
        raise ContractError("stack has not been trained")
    caches = forward(stack, as_tensor(x))
    raw = _flatten_features(caches, mode)
    return l2_normalize_rows(raw)[0]


def layer_backward(layer, cache, d_pooled, need_input_grad=True):
    """Gradients of a scalar through one mean-field layer.

    ``d_pooled`` is dL/d(pooling probabilities).  Returns ``(dW, db, dx)``.
    """
    x, act = cache
    pool = layer.pool
    up = np.repeat(np.repeat(d_pooled * act.off, pool, -2), pool, -1)
    # dP(block on)/dI(unit) = P(unit on) * P(block off)
    dI = act.detection * up
    nh = layer.detection_size(x.shape[-1])
    dI = _pad_hidden(dI, (nh, nh))
    dW = filter_gradient(x, dI)
    db = dI.sum(axis=tuple(range(dI.ndim - 3)) + (dI.ndim - 2, dI.ndim - 1))
    dx = full_convolve(dI, layer.W) if need_input_grad else None
    return dW, db, dx


def features_backward(stack, caches, d_raw, mode="third_layer", start=0, trainable=None):
    """Back-propagate dL/d(raw flattened features) into layer parameters.

    ``caches`` come from ``forward(stack, x, start=start)``; only layers whose
    absolute index is in ``trainable`` receive gradients.  Returns a dict
    ``{index: (dW, db)}``.
    """
    n = len(caches)
    if trainable is None:
        trainable = set(range(start, start + n))
    lowest = min(trainable)
    lead = caches[-1][1].pooling.shape[:-3]
    d_pooled = [None] * n
    if mode == "third_layer":
        d_pooled[-1] = d_raw.reshape(caches[-1][1].pooling.shape)
    else:
        offset = 0
        for i, (_, act) in enumerate(caches):
            size = int(np.prod(act.pooling.shape[len(lead):]))
            d_pooled[i] = d_raw[..., offset:offset + size].reshape(act.pooling.shape)
            offset += size
    grads = {}
    carry = None
    for i in reversed(range(n)):
        idx = start + i
        d = d_pooled[i] if carry is None else (carry if d_pooled[i] is None else carry + d_pooled[i])
        if d is None:
            continue
        need = idx > lowest
        dW, db, dx = layer_backward(stack.layers[idx], caches[i], d, need_input_grad=need)
        if idx in trainable:
            grads[idx] = (dW, db)
        carry = dx
        if not need:
            break
    return grads
