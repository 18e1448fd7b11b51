"""Learned pairwise similarity over the difference and mean of two unit features.

    e = |f_i - f_j|,  u = (f_i + f_j) / 2
    e_bar = r(relu(W_e e + b_e)),  u_bar = r(relu(W_u u + b_u)),  r(x) = x / |x|
    c = relu(W_c [e_bar; u_bar] + b_c)
    S = W_s . c + b_s

All functions broadcast over leading axes so a whole batch of pairs is
scored in one call.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import as_tensor, l2_normalize_rows, l2_normalize_rows_backward

PARAM_NAMES = ("We", "be", "Wu", "bu", "Wc", "bc", "Ws", "bs")


@dataclass
class SimilarityHead:
    We: np.ndarray   # (d, d)
    be: np.ndarray   # (d,)
    Wu: np.ndarray   # (d, d)
    bu: np.ndarray   # (d,)
    Wc: np.ndarray   # (d, 2d): maps [e_bar; u_bar] to R^d
    bc: np.ndarray   # (d,)
    Ws: np.ndarray   # (d,): maps c to a scalar
    bs: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            setattr(self, f.name, float(value) if f.name == "bs" else as_tensor(value).copy())
        d = self.dim
        expected = {"We": (d, d), "be": (d,), "Wu": (d, d), "bu": (d,),
                    "Wc": (d, 2 * d), "bc": (d,), "Ws": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dim(self):
        return self.be.shape[0]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return SimilarityHead(**self.params())


def init_head(d, rng, weight_var=0.01):
    """Zero biases, zero-mean normal weights with the given variance."""
    std = np.sqrt(weight_var)
    return SimilarityHead(We=rng.normal(std, (d, d)), be=np.zeros(d),
                          Wu=rng.normal(std, (d, d)), bu=np.zeros(d),
                          Wc=rng.normal(std, (d, 2 * d)), bc=np.zeros(d),
                          Ws=rng.normal(std, (d,)), bs=0.0)


def _check_unit(f, tol):
    norms = np.linalg.norm(f, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError("features must lie on the unit sphere")


def pair_features(fi, fj, tol=1e-6):
    fi = as_tensor(fi)
    fj = as_tensor(fj)
    _check_unit(fi, tol)
    _check_unit(fj, tol)
    return np.abs(fi - fj), (fi + fj) / 2.0


def _forward(head, fi, fj, tol=1e-6):
    fi = as_tensor(fi)
    fj = as_tensor(fj)
    e, u = pair_features(fi, fj, tol)
    ae = e @ head.We.T + head.be
    au = u @ head.Wu.T + head.bu
    re = np.maximum(ae, 0.0)
    ru = np.maximum(au, 0.0)
    ebar, deg_e = l2_normalize_rows(re)
    ubar, deg_u = l2_normalize_rows(ru)
    z = np.concatenate([ebar, ubar], axis=-1)
    ac = z @ head.Wc.T + head.bc
    c = np.maximum(ac, 0.0)
    S = c @ head.Ws + head.bs
    cache = dict(fi=fi, fj=fj, e=e, u=u, ae=ae, au=au, re=re, ru=ru, ebar=ebar, ubar=ubar,
                 deg_e=deg_e, deg_u=deg_u, z=z, ac=ac, c=c)
    return S, cache


def similarity(head, fi, fj):
    S, _ = _forward(head, fi, fj)
    return float(S) if np.ndim(S) == 0 else S


def backward(head, cache, dS):
    """Gradients of sum(dS * S) w.r.t. head parameters and both inputs.

    Parameter gradients are summed over pairs; input gradients keep the
    pair axes.  Sub-gradient conventions: sign(0) = 0 and relu'(0) = 0.
    """
    dS = as_tensor(dS)
    lead = cache["c"].shape[:-1]
    dS = np.broadcast_to(dS, lead)
    flat = lambda a: a.reshape(-1, a.shape[-1])
    c, z = flat(cache["c"]), flat(cache["z"])
    g = dS.reshape(-1)
    grads = {"Ws": c.T @ g, "bs": float(g.sum())}
    dac = (g[:, None] * head.Ws) * (flat(cache["ac"]) > 0)
    grads["Wc"] = dac.T @ z
    grads["bc"] = dac.sum(axis=0)
    dz = dac @ head.Wc
    d = head.dim
    dre = l2_normalize_rows_backward(flat(cache["re"]), flat(cache["ebar"]),
                              cache["deg_e"].reshape(-1), dz[:, :d])
    dru = l2_normalize_rows_backward(flat(cache["ru"]), flat(cache["ubar"]),
                              cache["deg_u"].reshape(-1), dz[:, d:])
    dae = dre * (flat(cache["ae"]) > 0)
    dau = dru * (flat(cache["au"]) > 0)
    grads["We"] = dae.T @ flat(cache["e"])
    grads["be"] = dae.sum(axis=0)
    grads["Wu"] = dau.T @ flat(cache["u"])
    grads["bu"] = dau.sum(axis=0)
    de = dae @ head.We
    du = dau @ head.Wu
    sgn = np.sign(flat(cache["fi"]) - flat(cache["fj"]))
    shape = lead + (d,)
    grads["fi"] = (de * sgn + du / 2.0).reshape(shape)
    grads["fj"] = (-de * sgn + du / 2.0).reshape(shape)
    return grads


def similarity_grad(head, fi, fj):
    """Exact gradient of S(fi, fj) for every parameter and both features."""
    _, cache = _forward(head, fi, fj)
    return backward(head, cache, 1.0)


def min_abs_preactivation(head, fi, fj):
    """Distance of the closest ReLU / abs input to its kink (for well-posed finite differences)."""
    _, cache = _forward(head, fi, fj)
    return min(np.min(np.abs(cache["fi"] - cache["fj"])), np.min(np.abs(cache["ae"])),
               np.min(np.abs(cache["au"])), np.min(np.abs(cache["ac"])))


def score_matrix(head, A, B=None):
    """Scores between every row of ``A`` and every row of ``B`` (default ``A``)."""
    A = as_tensor(A)
    B = A if B is None else as_tensor(B)
    rows = max(1, 200_000 // max(1, len(B) * A.shape[1]))
    parts = [_forward(head, A[i:i + rows, None, :], B[None, :, :])[0] for i in range(0, len(A), rows)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, len(B)))
