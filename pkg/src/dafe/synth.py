"""Synthetic re-identification data and the on-disk dataset layout.

Each identity is a composition of smooth blobs.  Images of one identity lie
on a curved one-parameter pose path (blobs drift along a bent trajectory),
and every camera view applies its own smooth warp and brightness shift to
all identities.  Pixels are quantized to uint8 so the PGM round trip is exact.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .preproc import load_image, save_pgm, whiten
from .tensor import SeededRng


@dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 40
    views: int = 2
    images_per_view: int = 4
    size: int = 48
    curvature: float = 1.5
    noise: float = 0.05
    blobs: int = 6
    pose_range: float = 0.12
    warp: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.identities < 2 or self.views < 2:
            raise ParameterError("need at least 2 identities and 2 views")
        if self.images_per_view < 1 or self.size < 8:
            raise ParameterError("need images_per_view >= 1 and size >= 8")


@dataclass
class SyntheticDataset:
    images: np.ndarray       # (N, H, W), values 0..255
    identities: np.ndarray   # (N,)
    views: np.ndarray        # (N,)

    def __len__(self):
        return len(self.identities)

    def subset(self, mask):
        return SyntheticDataset(self.images[mask], self.identities[mask], self.views[mask])


def _render(blobs, X, Y):
    centres, widths, amps = blobs
    img = np.zeros_like(X)
    for (cx, cy), s, a in zip(centres, widths, amps):
        img += a * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
    return img


def generate_synthetic(spec=SyntheticSpec()):
    rng = SeededRng(spec.seed, stream=11)
    n = spec.size
    grid = (np.arange(n) + 0.5) / n
    Y0, X0 = np.meshgrid(grid, grid, indexing="ij")
    # per-view warp fields and photometric shifts, shared by all identities
    views = []
    for _ in range(spec.views):
        freq = rng.uniform(2) * 1.5 + 0.5
        phase = rng.uniform(2) * 2 * np.pi
        amp = spec.warp / n
        X = X0 + amp * np.sin(2 * np.pi * freq[0] * Y0 + phase[0])
        Y = Y0 + amp * np.sin(2 * np.pi * freq[1] * X0 + phase[1])
        views.append((X, Y, rng.normal(0.15, None), 1.0 + rng.normal(0.1, None)))
    images, ids, vids = [], [], []
    for ident in range(spec.identities):
        centres = 0.2 + 0.6 * rng.uniform((spec.blobs, 2))
        widths = 0.05 + 0.08 * rng.uniform(spec.blobs)
        amps = rng.uniform(spec.blobs) * 0.7 + 0.3
        amps *= np.where(rng.uniform(spec.blobs) < 0.5, -1.0, 1.0)
        direction = rng.normal(1.0, (spec.blobs, 2))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        normal = direction[:, ::-1] * np.array([-1.0, 1.0])
        for v, (X, Y, shift, gain) in enumerate(views):
            for _ in range(spec.images_per_view):
                u = 2 * rng.uniform() - 1
                # curved pose path: linear drift plus a quadratic bend
                moved = centres + spec.pose_range * (u * direction + spec.curvature * u * u * normal)
                img = gain * _render((moved, widths, amps), X, Y) + shift
                img = img + rng.normal(spec.noise, (n, n))
                images.append(np.clip(np.round(128 + 60 * img), 0, 255))
                ids.append(ident)
                vids.append(v)
    return SyntheticDataset(np.array(images), np.array(ids), np.array(vids))


def stripe_images(n, size=8, noise=0.1, seed=0):
    """Whitened horizontal or vertical square-wave stripes, shape (n, 1, size, size).

    Periods are 2 to 4 pixels with a random phase; used to exercise CD pretraining.
    """
    if n < 1 or size < 2:
        raise ParameterError("need n >= 1 and size >= 2")
    rng = SeededRng(seed)
    out = np.empty((n, 1, size, size))
    for i in range(n):
        period = int(rng.integers(2, 5))
        phase = int(rng.integers(0, period))
        line = ((np.arange(size) + phase) % period < period / 2).astype(float)
        img = np.tile(line, (size, 1))
        if rng.uniform() < 0.5:
            img = img.T
        out[i, 0] = whiten(img + rng.normal(noise, (size, size)))[0]
    return out


def save_dataset(root, data):
    """Write ``root/<identity>/<view>/<k>.pgm``."""
    root = Path(root)
    counters = {}
    for img, ident, view in zip(data.images, data.identities, data.views):
        key = (int(ident), int(view))
        k = counters.get(key, 0)
        counters[key] = k + 1
        folder = root / f"{key[0]:04d}" / f"{key[1]}"
        folder.mkdir(parents=True, exist_ok=True)
        save_pgm(folder / f"{k:03d}.pgm", img)


def load_dataset(root):
    """Read the ``root/<identity>/<view>/<image>`` layout; labels are indices of sorted names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    images, ids, vids = [], [], []
    id_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    view_names = sorted({v.name for d in id_dirs for v in d.iterdir() if v.is_dir()})
    for i, d in enumerate(id_dirs):
        for v in sorted(p for p in d.iterdir() if p.is_dir()):
            for f in sorted(p for p in v.iterdir() if p.is_file()):
                try:
                    images.append(load_image(f))
                except Exception as exc:
                    raise DataError(f"cannot read image {f}: {exc}") from exc
                ids.append(i)
                vids.append(view_names.index(v.name))
    if not images:
        raise DataError(f"no images under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images have differing shapes {sorted(shapes)}")
    return SyntheticDataset(np.array(images), np.array(ids), np.array(vids))
