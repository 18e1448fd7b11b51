"""Single-shot re-identification evaluation: splits, CMC and mAP."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError
from .simhead import score_matrix
from .tensor import SeededRng, as_tensor


@dataclass
class EvalSplit:
    probe: np.ndarray      # dataset indices
    gallery: np.ndarray    # one dataset index per identity
    trial: int


@dataclass
class EvalReport:
    cmc: np.ndarray                    # cmc[r - 1] = rank-r rate, averaged over trials
    map: float
    trials: int
    per_trial_cmc: list = field(default_factory=list)
    per_trial_map: list = field(default_factory=list)
    excluded: int = 0

    @property
    def rank1(self):
        return float(self.cmc[0])

    def rank(self, r):
        return float(self.cmc[min(r, len(self.cmc)) - 1])


def make_splits(identities, views, trials=10, seed=0, gallery_view=1):
    """Per trial: one random gallery-view image per identity; all other-view images probe.

    Identities lacking a gallery-view or a probe-view image are dropped; the
    count of dropped identities is returned alongside the splits.
    """
    identities = np.asarray(identities)
    views = np.asarray(views)
    rng = SeededRng(seed, stream=3)
    keep, excluded = [], 0
    for ident in np.unique(identities):
        mine = identities == ident
        if np.any(mine & (views == gallery_view)) and np.any(mine & (views != gallery_view)):
            keep.append(ident)
        else:
            excluded += 1
    if not keep:
        raise DataError("no identity has images in both gallery and probe views")
    keep = np.array(keep)
    probe = np.flatnonzero(np.isin(identities, keep) & (views != gallery_view))
    splits = []
    for t in range(trials):
        gallery = []
        for ident in keep:
            options = np.flatnonzero((identities == ident) & (views == gallery_view))
            gallery.append(options[rng.integers(len(options))])
        splits.append(EvalSplit(probe=probe, gallery=np.array(gallery), trial=t))
    return splits, excluded


def _ranked_relevance(scores, probe_ids, gallery_ids, exclude_self=False):
    """Relevance rows ordered by descending score, tied non-matches placed first.

    With ``exclude_self`` (square all-vs-all scores) the diagonal is neither
    ranked nor counted as relevant.
    """
    scores = as_tensor(scores)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if scores.shape != (len(probe_ids), len(gallery_ids)):
        raise DimensionError(f"score matrix {scores.shape} does not match probe/gallery sizes")
    relevant = probe_ids[:, None] == gallery_ids[None, :]
    if exclude_self:
        if scores.shape[0] != scores.shape[1]:
            raise DimensionError("self exclusion needs a square score matrix")
        off = ~np.eye(len(probe_ids), dtype=bool)
        n = len(probe_ids)
        scores = scores[off].reshape(n, n - 1)
        relevant = relevant[off].reshape(n, n - 1)
    has = relevant.any(axis=1)
    order = np.lexsort((relevant, -scores), axis=1)
    ranked = np.take_along_axis(relevant, order, axis=1)
    return ranked[has], int(np.sum(~has))


def cmc(scores, probe_ids, gallery_ids):
    """Cumulative match rates; returns ``(rates, excluded)`` with ``rates[r-1]`` for rank r.

    Ties are pessimistic: gallery items scoring equal to the true match rank above it.
    """
    ranked, excluded = _ranked_relevance(scores, probe_ids, gallery_ids)
    G = ranked.shape[1]
    if len(ranked) == 0:
        raise DataError("no probe identity appears in the gallery")
    first = np.argmax(ranked, axis=1)
    rates = np.cumsum(np.bincount(first, minlength=G)) / len(ranked)
    return rates, excluded


def map_score(scores, probe_ids, gallery_ids, exclude_self=False):
    """Mean average precision; with one relevant item per probe AP = 1 / rank."""
    ranked, excluded = _ranked_relevance(scores, probe_ids, gallery_ids, exclude_self)
    if len(ranked) == 0:
        raise DataError("no probe identity appears in the gallery")
    hits = np.cumsum(ranked, axis=1)
    positions = np.arange(1, ranked.shape[1] + 1)
    precision = hits / positions
    ap = np.sum(precision * ranked, axis=1) / ranked.sum(axis=1)
    return float(np.mean(ap)), excluded


def multi_query(scores, probe_ids):
    """Max-pool score rows over each probe identity's queries."""
    probe_ids = np.asarray(probe_ids)
    ids = np.unique(probe_ids)
    pooled = np.stack([scores[probe_ids == i].max(axis=0) for i in ids])
    return pooled, ids


def evaluate_scores(score_fn, identities, splits, mq=False, excluded=0):
    """Average CMC and mAP over ``splits``; ``score_fn(probe_idx, gallery_idx)`` returns a matrix."""
    identities = np.asarray(identities)
    curves, maps = [], []
    for split in splits:
        S = score_fn(split.probe, split.gallery)
        pids = identities[split.probe]
        if mq:
            S, pids = multi_query(S, pids)
        gids = identities[split.gallery]
        rates, _ = cmc(S, pids, gids)
        m, _ = map_score(S, pids, gids)
        curves.append(rates)
        maps.append(m)
    return EvalReport(cmc=np.mean(curves, axis=0), map=float(np.mean(maps)), trials=len(splits),
                      per_trial_cmc=curves, per_trial_map=maps, excluded=excluded)


def evaluate(features, identities, views, head=None, trials=10, seed=0, mq=False, gallery_view=1):
    """Score every probe-gallery pair with the similarity head (or negative
    squared Euclidean distance when ``head`` is None) and average over trials.
    ``features`` are unit rows computed once for the whole dataset.
    """
    F = as_tensor(features)
    splits, excluded = make_splits(identities, views, trials, seed, gallery_view)
    if head is None:
        def score_fn(p, g):
            diff = F[p][:, None, :] - F[g][None, :, :]
            return -np.einsum("ijk,ijk->ij", diff, diff)
    else:
        probe = splits[0].probe
        candidates = np.flatnonzero(np.asarray(views) == gallery_view)
        table = score_matrix(head, F[probe], F[candidates])
        column = {int(c): i for i, c in enumerate(candidates)}

        def score_fn(p, g):
            return table[:, [column[int(i)] for i in g]]
    return evaluate_scores(score_fn, identities, splits, mq=mq, excluded=excluded)
