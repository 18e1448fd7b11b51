"""Dense float64 numerics used throughout the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Convolutions
here are *correlations* (the kernel is not flipped); a true convolution is
obtained by passing ``flip180(kernel)``.
"""

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError, ParameterError

DAFT_MAGIC = b"DAFT"
DAFT_VERSION = 1


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


def conv_valid(x, kernel):
    """Valid-mode 2-D correlation: out[i, j] = sum_rs kernel[r, s] * x[i + r, j + s]."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise DimensionError("conv_valid expects 2-D input and kernel")
    h, w = kernel.shape
    if h > x.shape[0] or w > x.shape[1]:
        raise DimensionError(f"kernel {kernel.shape} larger than input {x.shape}")
    windows = sliding_window_view(x, (h, w))
    return np.einsum("ijrs,rs->ij", windows, kernel)


def conv_full(x, kernel):
    """Full-mode 2-D correlation over the input zero-padded by the kernel size minus one.

    This is the adjoint of ``conv_valid(., flip180(kernel))``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise DimensionError("conv_full expects 2-D input and kernel")
    if x.size == 0 or kernel.size == 0:
        raise DimensionError("conv_full expects non-empty tensors")
    h, w = kernel.shape
    padded = np.pad(x, ((h - 1, h - 1), (w - 1, w - 1)))
    return conv_valid(padded, kernel)


def flip180(kernel):
    kernel = as_tensor(kernel)
    if kernel.ndim < 2:
        raise DimensionError("flip180 expects at least 2 dimensions")
    return kernel[..., ::-1, ::-1].copy()


def l2_normalize(x):
    """Scale ``x`` to unit Euclidean norm.

    Returns ``(y, degenerate)``.  A zero vector maps to itself with
    ``degenerate=True`` instead of raising.
    """
    x = as_tensor(x)
    norm = np.sqrt(np.dot(x.ravel(), x.ravel()))
    if norm == 0.0:
        return np.zeros_like(x), True
    return x / norm, False


def l2_normalize_rows(x):
    """Row-wise ``l2_normalize``; returns ``(y, degenerate_mask)``."""
    x = as_tensor(x)
    norms = np.sqrt(np.einsum("...i,...i->...", x, x))
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    return x / safe[..., None], degenerate


def l2_normalize_rows_backward(x, y, degenerate, grad):
    """Vector-Jacobian product of ``y = x / |x|``; zero on degenerate rows."""
    norms = np.sqrt(np.einsum("...i,...i->...", x, x))
    safe = np.where(degenerate, 1.0, norms)[..., None]
    out = (grad - y * np.einsum("...i,...i->...", y, grad)[..., None]) / safe
    return np.where(degenerate[..., None], 0.0, out)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


class SeededRng:
    """Reproducible random stream keyed by ``(seed, stream)``.

    Distinct stream ids give statistically independent sequences from the
    same seed.  Do not share one instance between concurrent callers.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, stream):
        return SeededRng(self.seed, stream)

    def get_state(self):
        return {"seed": self.seed, "stream": self.stream,
                "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state):
        self.generator.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], state["stream"])
        rng.set_state(state)
        return rng

    def uniform(self, size=None):
        return self.generator.random(size)

    def bernoulli(self, p, size=None):
        p = as_tensor(p)
        if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
            raise ParameterError("bernoulli probability outside [0, 1]")
        if size is None:
            size = p.shape
        return (self.generator.random(size) < p).astype(np.float64)

    def gaussian(self, mean, size=None):
        """Unit-variance normal draws around ``mean``."""
        mean = as_tensor(mean)
        if size is None:
            size = mean.shape
        return mean + self.generator.standard_normal(size)

    def normal(self, scale, size):
        return scale * self.generator.standard_normal(size)

    def categorical(self, weights):
        """Draw one index with probability proportional to ``weights``."""
        weights = as_tensor(weights)
        if weights.ndim != 1 or weights.size == 0:
            raise ParameterError("categorical weights must be a non-empty vector")
        if np.any(~np.isfinite(weights)) or np.any(weights < 0.0):
            raise ParameterError("categorical weights must be finite and non-negative")
        total = weights.sum()
        if total <= 0.0:
            raise ParameterError("categorical weights sum to zero")
        cdf = np.cumsum(weights) / total
        u = self.generator.random()
        return int(min(np.searchsorted(cdf, u, side="right"), weights.size - 1))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def choice(self, n, size, replace=False):
        return self.generator.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self.generator.permutation(n)


def sample(distribution, rng, *args):
    """Dispatch a draw by distribution name: ``bernoulli``, ``gaussian`` or ``categorical``."""
    try:
        draw = {"bernoulli": rng.bernoulli, "gaussian": rng.gaussian,
                "categorical": rng.categorical}[distribution]
    except KeyError:
        raise ParameterError(f"unknown distribution {distribution!r}") from None
    return draw(*args)


def daft_bytes(x):
    x = np.ascontiguousarray(as_tensor(x))
    header = DAFT_MAGIC + struct.pack("<II", DAFT_VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + x.astype("<f8").tobytes()


def daft_from_bytes(buf, offset=0):
    """Parse one DAFT tensor from ``buf`` at ``offset``; returns ``(array, end_offset)``."""
    if len(buf) - offset < 12:
        raise FormatError("truncated DAFT header", offset)
    if buf[offset:offset + 4] != DAFT_MAGIC:
        raise FormatError("bad DAFT magic", offset)
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != DAFT_VERSION:
        raise FormatError(f"unsupported DAFT version {version}", offset + 4)
    pos = offset + 12
    if len(buf) - pos < 8 * rank:
        raise FormatError("truncated DAFT dims", pos)
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise FormatError("truncated DAFT data", pos)
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return data.reshape(shape), pos + nbytes


def write_daft(path, x):
    with open(path, "wb") as fh:
        fh.write(daft_bytes(x))


def read_daft(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = daft_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after DAFT tensor", end)
    return arr
