"""Hard quadruplet mining, the two-margin quadruplet loss and the baseline losses."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .tensor import as_tensor


@dataclass(frozen=True)
class Margins:
    alpha1: float = 1.0
    alpha2: float = 0.5

    def __post_init__(self):
        if not (self.alpha1 > self.alpha2 > 0):
            raise ParameterError(f"margins must satisfy alpha1 > alpha2 > 0, got {self.alpha1}, {self.alpha2}")


@dataclass(frozen=True)
class Quadruplet:
    """Anchor ``i``, its least similar positive ``j``, local positive ``l`` and hardest negative ``k``."""
    i: int
    j: int
    l: int
    k: int
    s_ij: float
    s_ik: float
    s_il: float
    fallback: bool = False


def pair_masks(labels):
    """Boolean (positive, negative) pair masks for a label vector."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    return positive, ~same


def _check_scores(scores, labels):
    scores = as_tensor(scores)
    n = len(labels)
    if scores.shape != (n, n):
        raise DimensionError(f"score matrix {scores.shape} does not match {n} labels")
    if not np.all(np.isfinite(scores)):
        raise DataError("score matrix contains non-finite values")
    return scores


def _hard_negative(scores, negative, i):
    if not negative[i].any():
        raise DataError(f"anchor {i} has no negative in the batch")
    return int(np.argmax(np.where(negative[i], scores[i], -np.inf)))


def _local_positive(scores, positive, i, k):
    above = positive[i] & (scores[i] > scores[i, k])
    fallback = not above.any()
    pool = positive[i] if fallback else above
    return int(np.argmin(np.where(pool, scores[i], np.inf))), fallback


def _make(scores, i, j, l, k, fallback):
    return Quadruplet(i, j, l, k, float(scores[i, j]), float(scores[i, k]), float(scores[i, l]), fallback)


def mine_quadruplet(scores, labels, rng=None, random_positive=False):
    """Select the hard quadruplet of a batch; ties go to the lowest flat index.

    The anchor pair is the least similar positive pair, the negative is the
    anchor's most similar negative, and the local positive is the anchor's
    least similar positive that still beats the negative.  When no positive
    beats it, the least similar positive is used and ``fallback`` is set.
    With ``random_positive`` the local positive is a uniform draw from the
    anchor's positives instead (ablation; needs ``rng``).
    """
    labels = np.asarray(labels)
    scores = _check_scores(scores, labels)
    positive, negative = pair_masks(labels)
    if not positive.any():
        raise DataError("batch has no positive pair")
    i, j = divmod(int(np.argmin(np.where(positive, scores, np.inf))), len(labels))
    k = _hard_negative(scores, negative, i)
    if random_positive:
        candidates = np.flatnonzero(positive[i])
        l = int(candidates[rng.integers(len(candidates))])
        return _make(scores, i, j, l, k, False)
    l, fallback = _local_positive(scores, positive, i, k)
    return _make(scores, i, j, l, k, fallback)


def mine_per_identity(scores, labels, rng=None, random_positive=False):
    """One quadruplet per identity, each anchored on that identity's least similar pair."""
    labels = np.asarray(labels)
    scores = _check_scores(scores, labels)
    positive, negative = pair_masks(labels)
    out = []
    for ident in np.unique(labels):
        member = labels == ident
        mask = positive & member[:, None]
        if not mask.any():
            continue
        i, j = divmod(int(np.argmin(np.where(mask, scores, np.inf))), len(labels))
        k = _hard_negative(scores, negative, i)
        if random_positive:
            candidates = np.flatnonzero(positive[i])
            out.append(_make(scores, i, j, int(candidates[rng.integers(len(candidates))]), k, False))
            continue
        l, fallback = _local_positive(scores, positive, i, k)
        out.append(_make(scores, i, j, l, k, fallback))
    if not out:
        raise DataError("batch has no positive pair")
    return out


def quadruplet_loss(q, margins=Margins()):
    return (max(0.0, margins.alpha1 + q.s_ik - q.s_ij)
            + max(0.0, margins.alpha2 + q.s_ik - q.s_il))


def quadruplet_score_grads(q, margins=Margins()):
    """Sub-gradient of the loss as ``[((a, b), dL/dS_ab), ...]`` (zero at the hinge)."""
    first = float(margins.alpha1 + q.s_ik - q.s_ij > 0)
    second = float(margins.alpha2 + q.s_ik - q.s_il > 0)
    return [((q.i, q.j), -first), ((q.i, q.k), first + second), ((q.i, q.l), -second)]


def _sqdist(a, b):
    diff = a - b
    return np.einsum("...i,...i->...", diff, diff)


def triplet_loss(features, triplets, alpha):
    """Mean hinge of ``|f_i - f_j|^2 - |f_i - f_k|^2 + alpha`` over rows ``(i, j, k)``.

    ``j`` shares the anchor's identity and ``k`` does not.  Returns
    ``(loss, dL/dfeatures)``.
    """
    F = as_tensor(features)
    t = np.asarray(triplets, dtype=int).reshape(-1, 3)
    if len(t) == 0:
        raise DataError("no triplets")
    fi, fj, fk = F[t[:, 0]], F[t[:, 1]], F[t[:, 2]]
    pre = _sqdist(fi, fj) - _sqdist(fi, fk) + alpha
    active = (pre > 0).astype(float)[:, None] / len(t)
    grad = np.zeros_like(F)
    # d/dfi = 2(fi - fj) - 2(fi - fk) = 2(fk - fj)
    np.add.at(grad, t[:, 0], 2.0 * active * (fk - fj))
    np.add.at(grad, t[:, 1], 2.0 * active * (fj - fi))
    np.add.at(grad, t[:, 2], 2.0 * active * (fi - fk))
    return float(np.mean(np.maximum(pre, 0.0))), grad


def quadruplet_as_triplets_terms(features, q, alpha):
    """The two triplet pre-hinge terms sharing anchor and negative."""
    F = as_tensor(features)
    fi, fj, fl, fk = F[q.i], F[q.j], F[q.l], F[q.k]
    neg = _sqdist(fi, fk)
    return _sqdist(fi, fj) - neg + alpha, _sqdist(fi, fl) - neg + alpha


def quadruplet_as_triplets(features, q, alpha):
    """Hinge of the two shared-anchor triplets combined: ``|fi-fj|^2 + |fi-fl|^2 - 2|fi-fk|^2 + 2 alpha``."""
    F = as_tensor(features)
    fi, fj, fl, fk = F[q.i], F[q.j], F[q.l], F[q.k]
    pre = _sqdist(fi, fj) + _sqdist(fi, fl) - 2.0 * _sqdist(fi, fk) + 2.0 * alpha
    return float(max(pre, 0.0))


def nca_loss(features, labels):
    """Neighbourhood component analysis loss with the self pair excluded.

    Returns ``(loss, dL/dfeatures, skipped)`` where ``skipped`` counts samples
    without a same-class partner (their terms are left out of the mean).
    """
    F = as_tensor(features)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("nca needs at least two classes")
    positive, _ = pair_masks(labels)
    n = len(labels)
    D = _sqdist(F[:, None, :], F[None, :, :])
    logits = np.where(np.eye(n, dtype=bool), -np.inf, -D)
    m = np.max(logits, axis=1, keepdims=True)
    w = np.exp(logits - m)
    P = w / w.sum(axis=1, keepdims=True)
    has = positive.any(axis=1)
    skipped = int(np.sum(~has))
    if skipped == n:
        raise DataError("no sample has a same-class partner")
    p_same = np.where(positive, P, 0.0).sum(axis=1)
    terms = -np.log(p_same[has])
    loss = float(terms.mean())
    # dL_n/dlogit_nm = P_nm - [m same class] P_nm / p_same_n
    dlogit = P - np.where(positive, P, 0.0) / np.where(has, p_same, 1.0)[:, None]
    dlogit[~has] = 0.0
    dlogit /= has.sum()
    dD = -dlogit
    sym = dD + dD.T
    grad = 2.0 * (sym.sum(axis=1)[:, None] * F - sym @ F)
    return loss, grad, skipped
