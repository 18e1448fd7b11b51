import numpy as np
import pytest

from dafe.errors import DataError, DimensionError
from dafe.preproc import (LBP_BINS, default_gabor_bank, gabor_bank, input_stack, lbp_codes,
                          lbp_map, load_image, pca_fit, pca_project, pca_reconstruct,
                          resize_bilinear, save_pgm, whiten)


def test_resize_constant_and_identity():
    np.testing.assert_allclose(resize_bilinear(np.full((7, 9), 3.5), (150, 150)), 3.5)
    x = np.random.default_rng(0).normal(size=(150, 150))
    np.testing.assert_array_equal(resize_bilinear(x), x)


def test_resize_midpoint():
    out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), (2, 3))
    np.testing.assert_allclose(out[:, 1], 0.5)
    np.testing.assert_allclose(out[:, 0], 0.0)
    np.testing.assert_allclose(out[:, 2], 1.0)


def test_whiten():
    out, flag = whiten(np.array([0.0, 2.0]))
    np.testing.assert_allclose(out, [-1.0, 1.0])
    assert not flag
    x = np.random.default_rng(1).normal(3.0, 7.0, size=(20, 30))
    w, _ = whiten(x)
    assert abs(w.mean()) < 1e-12
    assert abs(w.var() - 1.0) < 1e-10
    np.testing.assert_allclose(whiten(w)[0], w, atol=1e-12)
    z, flag = whiten(np.full(5, 2.0))
    assert flag and not z.any()


def reference_lbp(image):
    H, W = image.shape
    offsets = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]
    codes = np.zeros((H, W), dtype=int)
    for y in range(H):
        for x in range(W):
            code = 0
            for bit, (dy, dx) in enumerate(offsets):
                ny = min(max(y + dy, 0), H - 1)
                nx = min(max(x + dx, 0), W - 1)
                if image[ny, nx] >= image[y, x]:
                    code |= 1 << bit
            codes[y, x] = code
    return codes


def reference_bin(code):
    bits = [(code >> i) & 1 for i in range(8)]
    transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
    if transitions > 2:
        return 58
    uniform = [c for c in range(256)
               if sum(((c >> i) & 1) != ((c >> ((i + 1) % 8)) & 1) for i in range(8)) <= 2]
    return uniform.index(code)


def test_lbp_constant_image():
    m = lbp_map(np.full((150, 150), 4.0))
    assert m.shape == (LBP_BINS, 150, 150)
    assert np.all(lbp_codes(np.full((5, 5), 1.0)) == 255)
    assert np.all(m[reference_bin(255)] == 1.0)


def test_lbp_one_hot_and_reference():
    img = np.random.default_rng(2).integers(0, 6, size=(12, 14)).astype(float)
    m = lbp_map(img)
    np.testing.assert_array_equal(m.sum(axis=0), 1.0)
    assert set(np.unique(m)) <= {0.0, 1.0}
    codes = reference_lbp(img)
    np.testing.assert_array_equal(lbp_codes(img), codes)
    expected = np.vectorize(reference_bin)(codes)
    np.testing.assert_array_equal(m.argmax(axis=0), expected)


def brute_filter(image, kernel):
    H, W = image.shape
    h = kernel.shape[0] // 2
    out = np.zeros_like(image)
    for y in range(H):
        for x in range(W):
            for r in range(kernel.shape[0]):
                for s in range(kernel.shape[1]):
                    yy, xx = y - (r - h), x - (s - h)
                    if 0 <= yy < H and 0 <= xx < W:
                        out[y, x] += kernel[r, s] * image[yy, xx]
    return out


def test_gabor_bank():
    bank = default_gabor_bank()
    assert bank.shape == (8, 11, 11)
    assert not gabor_bank(np.zeros((20, 20)), bank).any()
    impulse = np.zeros((31, 31))
    impulse[15, 15] = 1.0
    resp = gabor_bank(impulse, bank)
    for g in range(8):
        np.testing.assert_allclose(resp[g, 10:21, 10:21], bank[g], atol=1e-14)
    img = np.random.default_rng(3).normal(size=(16, 16))
    resp = gabor_bank(img, bank[:2])
    for g in range(2):
        np.testing.assert_allclose(resp[g], brute_filter(img, bank[g]), atol=1e-12)


def test_input_stack_channels():
    img = np.random.default_rng(4).integers(0, 256, size=(60, 40)).astype(float)
    stack = input_stack(img, size=32)
    assert stack.shape == (1 + 59 + 8, 32, 32)
    assert set(np.unique(stack[1:60])) <= {0.0, 1.0}
    assert abs(stack[0].mean()) < 1e-12
    with pytest.raises(DataError):
        input_stack(img, size=32, channels=("colour",))


def test_pca_rank_one_line():
    rng = np.random.default_rng(5)
    direction = np.array([1.0, 2.0, -2.0]) / 3.0
    X = rng.normal(size=(50, 1)) * direction + np.array([1.0, 0.0, 3.0])
    model = pca_fit(X, k=1)
    assert abs(abs(model.basis[:, 0] @ direction) - 1.0) < 1e-8
    full = pca_fit(X, k=5)
    assert full.n_components == 1


def test_pca_reconstruction_and_orthonormality():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(40, 6))
    model = pca_fit(X, k=500)
    assert model.n_components == 6
    np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(6), atol=1e-8)
    np.testing.assert_allclose(pca_reconstruct(model, pca_project(model, X)), X, atol=1e-8)
    np.testing.assert_allclose(pca_project(model, model.mean), 0.0, atol=1e-12)
    Z = pca_project(model, X)
    cov = np.cov(Z.T)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 1e-6 * np.max(np.diag(cov))
    # sign convention: largest-magnitude coordinate of every column is positive
    idx = np.argmax(np.abs(model.basis), axis=0)
    assert np.all(model.basis[idx, np.arange(6)] > 0)


def test_pca_explained_variance():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(4000, 3)) * np.array([10.0, 1.0, 1.0])
    model = pca_fit(X, k=3)
    eig = np.linalg.eigvalsh(np.cov(X.T))[::-1]
    np.testing.assert_allclose(model.explained_variance, eig, rtol=1e-8)
    assert eig[0] / eig.sum() >= 0.96


def test_pca_project_matches_loop_and_errors():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(30, 5))
    model = pca_fit(X, k=3)
    x = rng.normal(size=5)
    expected = [sum(model.basis[d, j] * (x[d] - model.mean[d]) for d in range(5)) for j in range(3)]
    np.testing.assert_allclose(pca_project(model, x), expected, atol=1e-12)
    with pytest.raises(DimensionError):
        pca_project(model, np.ones(4))
    with pytest.raises(DataError):
        pca_fit(X[:1])


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(9).integers(0, 256, size=(10, 7)).astype(float)
    save_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes()[:2] == b"P5"
    np.testing.assert_array_equal(load_image(tmp_path / "a.pgm"), img)
