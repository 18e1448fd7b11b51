"""Image preprocessing: resize, whitening, uniform LBP, Gabor responses, PCA."""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError
from .tensor import as_tensor, conv_full, flip180, read_daft

VISIBLE_SIZE = 150
LBP_BINS = 59

# 8-neighbourhood, bit i set when neighbour i >= centre.
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _transitions(code):
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def _build_lbp_table():
    table = np.full(256, LBP_BINS - 1, dtype=np.int64)
    uniform = [c for c in range(256) if _transitions(c) <= 2]
    assert len(uniform) == LBP_BINS - 1
    for b, code in enumerate(uniform):
        table[code] = b
    return table


LBP_TABLE = _build_lbp_table()


def resize_bilinear(image, shape=(VISIBLE_SIZE, VISIBLE_SIZE)):
    """Corner-aligned bilinear resize of a 2-D image."""
    image = as_tensor(image)
    H, W = image.shape
    if H < 2 or W < 2:
        raise DimensionError("resize_bilinear needs at least 2x2 input")
    h, w = shape
    if (h, w) == (H, W):
        return image.copy()
    ys = np.linspace(0.0, H - 1, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0.0, W - 1, w) if w > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(int), H - 2)
    x0 = np.minimum(np.floor(xs).astype(int), W - 2)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    a = image[np.ix_(y0, x0)]
    b = image[np.ix_(y0, x0 + 1)]
    c = image[np.ix_(y0 + 1, x0)]
    d = image[np.ix_(y0 + 1, x0 + 1)]
    return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d)


def whiten(channel):
    """Standardize to zero mean, unit (population) variance.

    Returns ``(out, degenerate)``; a constant channel gives zeros and ``True``.
    """
    channel = as_tensor(channel)
    centred = channel - channel.mean()
    std = np.sqrt(np.mean(centred * centred))
    if std == 0.0 or not np.isfinite(std):
        return np.zeros_like(channel), True
    return centred / std, False


def lbp_codes(image):
    """Raw 8-bit LBP(8,1) code per pixel with clamped borders."""
    image = as_tensor(image)
    H, W = image.shape
    rows = np.arange(H)
    cols = np.arange(W)
    codes = np.zeros((H, W), dtype=np.int64)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = image[np.ix_(np.clip(rows + dy, 0, H - 1), np.clip(cols + dx, 0, W - 1))]
        codes |= (nb >= image).astype(np.int64) << bit
    return codes


def lbp_map(image):
    """One-hot uniform-LBP map of shape (59, H, W); non-uniform codes go to bin 58."""
    bins = LBP_TABLE[lbp_codes(image)]
    out = np.zeros((LBP_BINS,) + bins.shape)
    np.put_along_axis(out, bins[None], 1.0, axis=0)
    return out


def gabor_kernel(wavelength, theta, sigma_ratio=0.56, gamma=0.5, psi=0.0, size=11):
    half = size // 2
    y, x = np.mgrid[-half:size - half, -half:size - half].astype(np.float64)
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    sigma = sigma_ratio * wavelength
    envelope = np.exp(-(xr ** 2 + (gamma * yr) ** 2) / (2.0 * sigma ** 2))
    return envelope * np.cos(2.0 * np.pi * xr / wavelength + psi)


def default_gabor_bank(wavelengths=(4.0, 8.0), n_orientations=4, size=11,
                       sigma_ratio=0.56, gamma=0.5, psi=0.0):
    thetas = [np.pi * i / n_orientations for i in range(n_orientations)]
    return np.stack([gabor_kernel(lam, th, sigma_ratio, gamma, psi, size)
                     for lam in wavelengths for th in thetas])


def gabor_bank(image, kernels=None):
    """Filter responses (G, H, W): full convolution cropped back to the input size."""
    image = as_tensor(image)
    if kernels is None:
        kernels = default_gabor_bank()
    out = []
    for k in kernels:
        full = conv_full(image, flip180(k))
        oy, ox = (k.shape[0] - 1) // 2, (k.shape[1] - 1) // 2
        out.append(full[oy:oy + image.shape[0], ox:ox + image.shape[1]])
    return np.stack(out)


def input_stack(image, size=VISIBLE_SIZE, channels=("intensity", "lbp", "gabor"),
                gabor_kernels=None):
    """Build the visible-layer channels for one grayscale image.

    Order is intensity (1), LBP (59), Gabor (G); absent roles are skipped.
    """
    img = resize_bilinear(image, (size, size))
    parts = []
    for role in channels:
        if role == "intensity":
            parts.append(whiten(img)[0][None])
        elif role == "lbp":
            parts.append(lbp_map(img))
        elif role == "gabor":
            parts.append(gabor_bank(img, gabor_kernels))
        else:
            raise DataError(f"unknown channel role {role!r}")
    return np.concatenate(parts, axis=0)


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (D, k) orthonormal columns
    explained_variance: np.ndarray

    @property
    def n_components(self):
        return self.basis.shape[1]


def pca_fit(features, k=500, rank_tol=1e-10):
    X = as_tensor(features)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("pca_fit needs at least 2 samples")
    mean = X.mean(axis=0)
    centred = X - mean
    # SVD of the centred data gives covariance eigenvectors without forming D x D.
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    var = s ** 2 / (X.shape[0] - 1)
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s.size else 0
    n = min(k, X.shape[1], rank)
    basis = vt[:n].T.copy()
    for j in range(n):
        col = basis[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, j] = -col
    return PcaModel(mean=mean, basis=basis, explained_variance=var[:n])


def pca_project(model, x):
    x = as_tensor(x)
    if x.shape[-1] != model.mean.shape[0]:
        raise DimensionError(f"expected dimension {model.mean.shape[0]}, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis


def pca_reconstruct(model, z):
    return as_tensor(z) @ model.basis.T + model.mean


def load_image(path):
    """Read an 8-bit PGM (or any Pillow-readable grayscale file) or a DAFT tensor."""
    path = str(path)
    if path.endswith(".daft"):
        return read_daft(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "F"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64)


def save_pgm(path, image):
    arr = np.clip(np.rint(as_tensor(image)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")
