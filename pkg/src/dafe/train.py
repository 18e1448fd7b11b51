"""End-to-end pipeline: preprocessing, pretraining, metric fine-tuning, evaluation."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from .crbm import CdHyper, _flatten_features, build_stack, forward, features_backward, pretrain_stack
from .errors import ConfigError, FormatError
from .evalproto import evaluate, map_score
from .mining import Margins, mine_per_identity, mine_quadruplet, quadruplet_loss, quadruplet_score_grads, triplet_loss
from .preproc import default_gabor_bank, input_stack, pca_fit, pca_project, resize_bilinear
from .simhead import PARAM_NAMES, _forward, backward, init_head, score_matrix
from .synth import SyntheticSpec, generate_synthetic
from .tensor import SeededRng, l2_normalize_rows, l2_normalize_rows_backward

LOG_COLUMNS = ("iteration", "loss", "s_ij", "s_ik", "s_il", "fallback")
MONITOR_COLUMNS = ("iteration", "train_retrieval_error")

# rng stream ids, one per consumer so ablations share every other draw
STREAM_STACK_INIT, STREAM_HEAD_INIT, STREAM_PRETRAIN = 30, 31, 32
STREAM_BATCH, STREAM_MINING, STREAM_AUGMENT = 40, 41, 42


@dataclass
class Model:
    stack: object
    head: object
    pca: object = None
    mode: str = "third_layer"

    def copy(self):
        return Model(self.stack.copy(), self.head.copy(), self.pca, self.mode)


@dataclass
class TrainState:
    iteration: int
    velocity: dict
    batch_rng: SeededRng
    mining_rng: SeededRng
    augment_rng: SeededRng
    rows: list = field(default_factory=list)
    monitor: list = field(default_factory=list)


# -- data ---------------------------------------------------------------------

def synthetic_from_config(config):
    return generate_synthetic(SyntheticSpec(
        identities=config["data.identities"], views=config["data.views"],
        images_per_view=config["data.images_per_view"], size=config["data.size"],
        curvature=config["data.curvature"], noise=config["data.noise"], blobs=config["data.blobs"],
        pose_range=config["data.pose_range"], warp=config["data.warp"], seed=config["seed"]))


def split_dataset(data, config):
    """Training and test subsets.

    ``images``: every identity in both, the first half of each identity's
    images per view train and the rest test.  ``identities``: the first
    ``data.train_identities`` identities (sorted) train, the rest test.
    """
    if config["data.split"] == "identities":
        ids = np.unique(data.identities)
        n = config["data.train_identities"]
        if n >= len(ids):
            raise ConfigError(f"need more than {n} identities, dataset has {len(ids)}")
        train = np.isin(data.identities, ids[:n])
    else:
        train = np.zeros(len(data), dtype=bool)
        for ident in np.unique(data.identities):
            for view in np.unique(data.views):
                members = np.flatnonzero((data.identities == ident) & (data.views == view))
                if len(members) < 2:
                    raise ConfigError("the image split needs 2 images per identity and view")
                train[members[:len(members) // 2]] = True
    return data.subset(train), data.subset(~train)


def prepare_inputs(images, config):
    """Stack the configured channels for every image: (N, C, S, S)."""
    kernels = None
    if "gabor" in config["preproc.channels"]:
        kernels = default_gabor_bank(config["preproc.gabor_wavelengths"],
                                     config["preproc.gabor_orientations"])
    return np.stack([input_stack(img, config["preproc.size"], config["preproc.channels"], kernels)
                     for img in images])


def augment_images(images, rng, max_crop=5):
    """Random crop of 0 to ``max_crop`` pixels per side, stretched back to full size."""
    out = []
    for img in images:
        h, w = img.shape
        top, left, bottom, right = rng.integers(0, max_crop + 1, size=4)
        crop = img[top:h - bottom, left:w - right]
        out.append(resize_bilinear(crop, (h, w)))
    return np.stack(out)


# -- model construction ---------------------------------------------------------

def geometry(config):
    return list(zip(config["stack.maps"], config["stack.filters"], config["stack.pool"]))


def init_model(config, in_channels):
    """Randomly initialised stack and head without PCA; the untrained baseline."""
    seed = config["seed"]
    stack = build_stack(geometry(config), in_channels, config["preproc.size"],
                        SeededRng(seed, STREAM_STACK_INIT), config["stack.weight_var"])
    d = stack.feature_dim(config["feature.mode"])
    head = init_head(d, SeededRng(seed, STREAM_HEAD_INIT), config["head.weight_var"])
    return Model(stack=stack, head=head, mode=config["feature.mode"])


def cd_hyper(config):
    return CdHyper(lr=config["pretrain.lr"], momentum=config["pretrain.momentum"],
                   weight_decay=config["pretrain.weight_decay"],
                   sparsity_target=config["pretrain.sparsity_target"],
                   sparsity_weight=config["pretrain.sparsity_weight"],
                   batch_size=config["pretrain.batch_size"])


def pretrain_model(config, inputs):
    """Greedy CD pretraining on ``inputs`` plus the optional PCA fit; returns ``(model, curve)``.

    The head is re-initialised at the final feature dimension.
    """
    model = init_model(config, inputs.shape[1])
    rng = SeededRng(config["seed"], STREAM_PRETRAIN)
    stack, curve = pretrain_stack(model.stack, inputs, config["pretrain.epochs"], cd_hyper(config), rng)
    model.stack = stack
    if config["preproc.pca"]:
        raw = raw_features(model, inputs)
        model.pca = pca_fit(raw, config["preproc.pca"])
        model.head = init_head(model.pca.n_components, SeededRng(config["seed"], STREAM_HEAD_INIT),
                               config["head.weight_var"])
    return model, curve


# -- embedding ------------------------------------------------------------------

def raw_features(model, x, chunk=64):
    parts = [_flatten_features(forward(model.stack, x[i:i + chunk]), model.mode)
             for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0)


def embed(model, x, chunk=64):
    """Unit-norm embeddings of preprocessed inputs ``x`` (N, C, S, S)."""
    raw = raw_features(model, x, chunk)
    if model.pca is not None:
        raw = pca_project(model.pca, raw)
    return l2_normalize_rows(raw)[0]


def lower_outputs(model, x, start, chunk=64):
    """``[x]`` followed by the pooling outputs of layers ``0..start-1``; frozen during fine-tuning."""
    outs = [[] for _ in range(start)]
    for i in range(0, len(x), chunk):
        for j, (_, act) in enumerate(forward(model.stack, x[i:i + chunk], upto=start)):
            outs[j].append(act.pooling)
    return [x] + [np.concatenate(o, axis=0) for o in outs]


def embed_from(model, lower, start):
    """Embeddings from ``lower_outputs``; returns ``(F, tape)`` for ``embed_backward``."""
    n = len(lower[-1])
    caches = forward(model.stack, lower[-1], start=start) if start < len(model.stack.layers) else []
    parts = []
    if model.mode == "concat_all":
        parts = [p.reshape(n, -1) for p in lower[1:]]
    elif not caches:
        parts = [lower[-1].reshape(n, -1)]
    fixed = sum(p.shape[1] for p in parts)
    if caches:
        parts.append(_flatten_features(caches, model.mode))
    raw = np.concatenate(parts, axis=-1)
    proj = pca_project(model.pca, raw) if model.pca is not None else raw
    F, deg = l2_normalize_rows(proj)
    return F, dict(caches=caches, proj=proj, F=F, deg=deg, fixed=fixed)


def embed_backward(model, tape, dF, start):
    """Parameter gradients ``{layer_index: (dW, db)}`` of layers ``start..`` from dL/dF."""
    if not tape["caches"]:
        return {}
    dproj = l2_normalize_rows_backward(tape["proj"], tape["F"], tape["deg"], dF)
    draw = dproj @ model.pca.basis.T if model.pca is not None else dproj
    draw = draw[:, tape["fixed"]:]
    trainable = set(range(start, len(model.stack.layers)))
    return features_backward(model.stack, tape["caches"], draw, model.mode, start, trainable)


# -- losses on a batch ---------------------------------------------------------------

def quadruplet_batch(head, F, labels, margins, mining_rng=None, random_positive=False,
                     per_identity=False, quads=None):
    """Mean quadruplet loss over mined quadruplets with gradients for the head and ``F``.

    Returns ``(loss, head_grads, dF, quads)``.  Passing ``quads`` skips mining
    (used to check gradients at a fixed selection).
    """
    if quads is None:
        S = score_matrix(head, F)
        if per_identity:
            quads = mine_per_identity(S, labels, mining_rng, random_positive)
        else:
            quads = [mine_quadruplet(S, labels, mining_rng, random_positive)]
    # re-score the selected pairs so the loss is a function of the current F and head
    pairs = np.array([(q.i, m) for q in quads for m in (q.j, q.k, q.l)])
    S, cache = _forward(head, F[pairs[:, 0]], F[pairs[:, 1]])
    quads = [replace(q, s_ij=S[3 * n], s_ik=S[3 * n + 1], s_il=S[3 * n + 2]) for n, q in enumerate(quads)]
    coef = np.zeros(len(pairs))
    loss = 0.0
    for n, q in enumerate(quads):
        loss += quadruplet_loss(q, margins)
        # score gradients come in (i, j), (i, k), (i, l) order, matching ``pairs``
        coef[3 * n:3 * n + 3] = [g for _, g in quadruplet_score_grads(q, margins)]
    grads = backward(head, cache, coef / len(quads))
    dF = np.zeros_like(F)
    np.add.at(dF, pairs[:, 0], grads.pop("fi"))
    np.add.at(dF, pairs[:, 1], grads.pop("fj"))
    return loss / len(quads), grads, dF, quads


def batch_triplets(labels):
    """Every (anchor, positive, negative) index triple of a labelled batch."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    a, p = np.nonzero(same & ~np.eye(len(labels), dtype=bool))
    rows = [(i, j, k) for i, j in zip(a, p) for k in np.flatnonzero(~same[i])]
    return np.array(rows, dtype=int)


# -- fine-tuning -------------------------------------------------------------------

def finetune_start(config, model):
    n = len(model.stack.layers)
    return {"head": n, "top": n - 1, "all": 0}[config["train.finetune"]]


def new_state(config):
    seed = config["seed"]
    return TrainState(iteration=0, velocity={}, batch_rng=SeededRng(seed, STREAM_BATCH),
                      mining_rng=SeededRng(seed, STREAM_MINING),
                      augment_rng=SeededRng(seed, STREAM_AUGMENT))


def sample_batch(identities, config, rng):
    """P identities without replacement, K images of each without replacement."""
    P, K = config["mining.batch_identities"], config["mining.batch_images"]
    ids, counts = np.unique(identities, return_counts=True)
    eligible = ids[counts >= K]
    if len(eligible) < P:
        raise ConfigError(f"a {P}x{K} batch needs {P} identities with {K} images, "
                          f"the training set has {len(eligible)}")
    chosen = eligible[rng.choice(len(eligible), P)]
    picks = []
    for ident in chosen:
        members = np.flatnonzero(identities == ident)
        picks.append(members[rng.choice(len(members), K)])
    return np.concatenate(picks)


def _apply(params, grads, velocity, prefix, lr, momentum, decay):
    for name, g in grads.items():
        key = f"{prefix}{name}"
        p = params[name]
        v = velocity.get(key, np.zeros_like(p) if isinstance(p, np.ndarray) else 0.0)
        v = momentum * v - lr * (g + decay * p)
        velocity[key] = v
        params[name] = p + v
    return params


def train_step(model, state, config, lower, images, identities, start):
    """One fine-tuning iteration in place; returns the CSV row."""
    idx = sample_batch(identities, config, state.batch_rng)
    labels = identities[idx]
    if config["train.augment"]:
        x = prepare_inputs(augment_images(images[idx], state.augment_rng), config)
        batch_lower = lower_outputs(model, x, start)
    else:
        batch_lower = [o[idx] for o in lower]
    F, tape = embed_from(model, batch_lower, start)
    lr, mom, decay = config["train.lr"], config["train.momentum"], config["train.weight_decay"]
    if config["loss.kind"] == "triplet":
        loss, dF = triplet_loss(F, batch_triplets(labels), config["loss.triplet_margin"])
        row = (state.iteration + 1, loss, np.nan, np.nan, np.nan, 0)
    else:
        margins = Margins(config["loss.alpha1"], config["loss.alpha2"])
        loss, hgrads, dF, quads = quadruplet_batch(
            model.head, F, labels, margins, state.mining_rng,
            config["mining.random_positive"], config["mining.per_identity"])
        q = quads[0]
        row = (state.iteration + 1, loss, q.s_ij, q.s_ik, q.s_il, int(q.fallback))
        params = _apply(model.head.params(), hgrads, state.velocity, "head.", lr, mom, decay)
        for name in PARAM_NAMES:
            setattr(model.head, name, float(params[name]) if name == "bs" else params[name])
    for idx_layer, (dW, db) in embed_backward(model, tape, dF, start).items():
        layer = model.stack.layers[idx_layer]
        params = _apply({"W": layer.W, "b": layer.b}, {"W": dW, "b": db}, state.velocity,
                        f"layer{idx_layer}.", lr, mom, decay)
        layer.W, layer.b = params["W"], params["b"]
    state.iteration += 1
    state.rows.append(row)
    return row


def retrieval_error(model, x, identities, use_head):
    """1 - mAP of all-vs-all retrieval (self excluded) over ``x``."""
    F = embed(model, x)
    if use_head:
        S = score_matrix(model.head, F)
    else:
        S = -np.sum((F[:, None, :] - F[None, :, :]) ** 2, axis=-1)
    return 1.0 - map_score(S, identities, identities, exclude_self=True)[0]


def train_embedding(config, data, model, state=None, inputs=None, checkpoint_path=None, stop_at=None):
    """Fine-tune ``model`` on ``data`` (training identities); returns ``(model, state)``.

    ``state`` resumes an earlier run.  A checkpoint is written every
    ``train.checkpoint_every`` iterations and at the end when a path is given.
    """
    model = model.copy()
    state = new_state(config) if state is None else state
    x = prepare_inputs(data.images, config) if inputs is None else inputs
    start = finetune_start(config, model)
    lower = lower_outputs(model, x, start)
    total = config["train.iterations"] if stop_at is None else min(stop_at, config["train.iterations"])
    every = config["train.checkpoint_every"]
    monitor = config["train.monitor_every"]
    use_head = config["loss.kind"] != "triplet"
    if monitor and state.iteration == 0 and not state.monitor:
        state.monitor.append((0, retrieval_error(model, x, data.identities, use_head)))
    while state.iteration < total:
        train_step(model, state, config, lower, data.images, data.identities, start)
        if monitor and state.iteration % monitor == 0:
            state.monitor.append((state.iteration, retrieval_error(model, x, data.identities, use_head)))
        if checkpoint_path and every and state.iteration % every == 0:
            save_training(checkpoint_path, config, model, state)
    if checkpoint_path:
        save_training(checkpoint_path, config, model, state)
    return model, state


# -- persistence --------------------------------------------------------------------

def model_sections(model, config):
    return {"config": {"text": config.to_text()},
            "cdbn": ckpt.stack_to_payload(model.stack),
            "head": ckpt.head_to_payload(model.head),
            "pca": ckpt.pca_to_payload(model.pca),
            "feature": {"mode": model.mode}}


def save_training(path, config, model, state=None, extra=None):
    sections = model_sections(model, config)
    if state is not None:
        sections["optimizer"] = {"iteration": state.iteration, "velocity": state.velocity,
                                 "rows": [list(r) for r in state.rows],
                                 "monitor": [list(r) for r in state.monitor]}
        sections["rng"] = {"batch": state.batch_rng.get_state(),
                           "mining": state.mining_rng.get_state(),
                           "augment": state.augment_rng.get_state()}
    sections.update(extra or {})
    ckpt.save_checkpoint(path, sections)


def load_training(path):
    """Returns ``(config, model, state_or_None)``."""
    from .config import parse_config_text
    s = ckpt.load_checkpoint(path)
    try:
        config = parse_config_text(s["config"]["text"])
        model = Model(stack=ckpt.stack_from_payload(s["cdbn"]), head=ckpt.head_from_payload(s["head"]),
                      pca=ckpt.pca_from_payload(s["pca"]), mode=s["feature"]["mode"])
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks section {exc}", None) from exc
    state = None
    if "optimizer" in s:
        o, r = s["optimizer"], s["rng"]
        velocity = {k: (float(v) if not isinstance(v, np.ndarray) else v) for k, v in o["velocity"].items()}
        state = TrainState(iteration=o["iteration"], velocity=velocity,
                           batch_rng=SeededRng.from_state(r["batch"]),
                           mining_rng=SeededRng.from_state(r["mining"]),
                           augment_rng=SeededRng.from_state(r["augment"]),
                           rows=[tuple(x) for x in o["rows"]], monitor=[tuple(x) for x in o["monitor"]])
    return config, model, state


# -- evaluation -----------------------------------------------------------------------

def evaluate_model(model, config, data, inputs=None, use_head=True):
    """Repeated-split CMC/mAP report on ``data``; Euclidean ranking when ``use_head`` is false."""
    x = prepare_inputs(data.images, config) if inputs is None else inputs
    F = embed(model, x)
    return evaluate(F, data.identities, data.views, head=model.head if use_head else None,
                    trials=config["eval.trials"], seed=config["seed"], mq=config["eval.mq"],
                    gallery_view=config["eval.gallery_view"])

