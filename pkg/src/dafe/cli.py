"""Command-line interface: ``dafe <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format error.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import optim
from . import train as T
from .config import load_config
from .errors import ConfigError, DafeError, DataError, ParameterError
from .preproc import load_image
from .simhead import score_matrix
from .synth import load_dataset, save_dataset
from .tensor import read_daft, write_daft


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, config):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return T.synthetic_from_config(config)


def _config(args):
    return load_config(args.config, seed=args.seed)


def _from_checkpoint(args):
    """Model and config from ``--checkpoint``; an explicit ``--config`` replaces the stored one."""
    stored, model, state = T.load_training(args.checkpoint)
    config = _config(args) if args.config else stored
    if args.seed is not None and not args.config:
        config = config.updated(seed=args.seed)
    return config, model, state


# -- subcommands -------------------------------------------------------------

def cmd_synth(args):
    config = _config(args)
    data = T.synthetic_from_config(config)
    save_dataset(_out_dir(args), data)
    print(f"wrote {len(data)} images of {len(np.unique(data.identities))} identities to {args.out}")


def cmd_pretrain(args):
    config = _config(args)
    train, _ = T.split_dataset(_dataset(args, config), config)
    model, curve = T.pretrain_model(config, T.prepare_inputs(train.images, config))
    out = _out_dir(args)
    T.save_training(out / "pretrained.ckpt", config, model)
    write_csv(out / "recon.csv", ("epoch", "layer", "mse"), curve)
    print(f"pretrained {len(model.stack.layers)} layers on {len(train)} images -> {out / 'pretrained.ckpt'}")


def cmd_train(args):
    out = _out_dir(args)
    state = None
    if args.resume:
        stored, model, state = T.load_training(args.resume)
        config = _config(args) if args.config else stored
        if state is None:
            raise ConfigError("--resume needs a training checkpoint, not a pretrained one")
    elif args.init:
        _, model, _ = T.load_training(args.init)
        config = _config(args)
    else:
        config = _config(args)
        model = None
    if args.iterations is not None:
        config = config.updated(train__iterations=args.iterations)
    train, _ = T.split_dataset(_dataset(args, config), config)
    x = T.prepare_inputs(train.images, config)
    if model is None:
        model, curve = T.pretrain_model(config, x)
        write_csv(out / "recon.csv", ("epoch", "layer", "mse"), curve)
    model, state = T.train_embedding(config, train, model, state=state, inputs=x,
                                     checkpoint_path=out / "model.ckpt", stop_at=args.stop_at)
    write_csv(out / "train.csv", T.LOG_COLUMNS, state.rows)
    if state.monitor:
        write_csv(out / "monitor.csv", T.MONITOR_COLUMNS, state.monitor)
    if state.rows:
        from .plotting import plot_loss
        rows = np.array(state.rows, dtype=float)
        plot_loss(out / "loss.png", rows[:, 0], rows[:, 1])
    print(f"trained {state.iteration} iterations -> {out / 'model.ckpt'}")


def cmd_eval(args):
    config, model, _ = _from_checkpoint(args)
    changes = {}
    if args.trials is not None:
        changes["eval__trials"] = args.trials
    if args.mq:
        changes["eval__mq"] = True
    config = config.updated(**changes) if changes else config
    data = _dataset(args, config)
    if args.split == "test":
        _, data = T.split_dataset(data, config)
    use_head = not args.euclidean
    report = T.evaluate_model(model, config, data, use_head=use_head)
    out = _out_dir(args)
    rows = [(t, r + 1, rate) for t, curve in enumerate(report.per_trial_cmc) for r, rate in enumerate(curve)]
    write_csv(out / "cmc.csv", ("trial", "rank", "rate"), rows)
    metrics = [("rank1", report.rank(1)), ("rank5", report.rank(5)), ("rank10", report.rank(10)),
               ("rank20", report.rank(20)), ("map", report.map), ("trials", report.trials),
               ("excluded_identities", report.excluded)]
    write_csv(out / "report.csv", ("metric", "value"), metrics)
    from .plotting import plot_cmc
    plot_cmc(out / "cmc.png", {"similarity head" if use_head else "euclidean": report.cmc})
    print(f"rank-1 {100 * report.rank1:.2f}%  mAP {100 * report.map:.2f}%  ({report.trials} trials)")


def cmd_bench_optim(args):
    config = _config(args)
    variant = args.variant or config["optim.variant"]
    if variant not in optim.VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(optim.VARIANTS)}")
    mu = config["optim.mu"] if args.mu is None else args.mu
    if mu <= 0:
        raise ParameterError("--mu must be positive")
    problem = optim.make_benchmark(n_samples=config["optim.samples"], dim=config["optim.dim"], mu=mu,
                                   clusters=config["optim.clusters"], seed=config["seed"])
    q = config["optim.q"] if args.q is None else args.q
    k = config["optim.k"] if args.k is None else args.k
    epochs = config["optim.epochs"] if args.epochs is None else args.epochs
    _, rows = optim.run(problem, variant, epochs=epochs, seed=config["seed"], q=q, k=k)
    out = Path(args.out)
    if out.suffix == ".csv":
        out.parent.mkdir(parents=True, exist_ok=True)
        trace, figure = out, out.with_suffix(".png")
    else:
        out.mkdir(parents=True, exist_ok=True)
        trace, figure = out / "trace.csv", out / "suboptimality.png"
    write_csv(trace, ("evaluations", "suboptimality", "wall_seconds"), rows)
    from .plotting import plot_suboptimality
    plot_suboptimality(figure, {variant: rows}, problem.n_samples)
    print(f"{variant}: final suboptimality {rows[-1][1]:.3e} after {rows[-1][0]} evaluations")


def cmd_extract(args):
    config, model, _ = _from_checkpoint(args)
    data = _dataset(args, config)
    F = T.embed(model, T.prepare_inputs(data.images, config))
    out = _out_dir(args)
    write_daft(out / "features.daft", F)
    write_csv(out / "labels.csv", ("index", "identity", "view"),
              zip(range(len(data)), data.identities, data.views))
    print(f"wrote {F.shape[0]} features of dimension {F.shape[1]} to {out / 'features.daft'}")


def cmd_score(args):
    config, model, _ = _from_checkpoint(args)
    if args.pair:
        x = T.prepare_inputs(np.stack([load_image(p) for p in args.pair]), config)
        F = T.embed(model, x)
    elif args.features:
        F = read_daft(args.features)
        if F.ndim != 2:
            raise DataError("features file must hold an (N, d) matrix")
    else:
        raise UsageError("score needs --features or --pair")
    if F.shape[1] != model.head.dim:
        raise DataError(f"features have dimension {F.shape[1]}, the head expects {model.head.dim}")
    S = score_matrix(model.head, F)
    out = _out_dir(args)
    n = len(F)
    write_csv(out / "scores.csv", ("i", "j", "score"),
              ((i, j, S[i, j]) for i in range(n) for j in range(n) if i != j))
    if args.pair:
        print(f"score {S[0, 1]:.6f}")
    else:
        print(f"wrote {n * (n - 1)} pair scores to {out / 'scores.csv'}")


def build_parser():
    parser = Parser(prog="dafe", description="Adaptive feature embedding for re-identification.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    def add(name, func, help_text, out_help="output directory"):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed and DAFE_SEED")
        p.add_argument("--out", required=True, help=out_help)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate the synthetic dataset")
    p = add("pretrain", cmd_pretrain, "greedy CD pretraining of the CRBM stack")
    p.add_argument("--data", help="dataset root (default: synthetic data from the config)")
    p = add("train", cmd_train, "fine-tune the embedding and similarity head")
    p.add_argument("--data", help="dataset root (default: synthetic data from the config)")
    p.add_argument("--init", help="pretrained checkpoint (default: pretrain first)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--iterations", type=int, help="overrides train.iterations")
    p.add_argument("--stop-at", type=int, help="stop after this iteration (for later resume)")
    p = add("eval", cmd_eval, "single-shot CMC and mAP evaluation")
    p.add_argument("--checkpoint", required=True, help="model checkpoint from train")
    p.add_argument("--data", help="dataset root (default: synthetic data from the config)")
    p.add_argument("--trials", type=int, help="overrides eval.trials")
    p.add_argument("--mq", action="store_true", help="multi-query max pooling")
    p.add_argument("--split", choices=("test", "all"), default="test", help="images to evaluate on")
    p.add_argument("--euclidean", action="store_true", help="rank by feature distance, not the head")
    p = add("bench-optim", cmd_bench_optim, "finite-sum optimizer benchmark",
            out_help="trace CSV path or output directory")
    p.add_argument("--variant", help=", ".join(optim.VARIANTS))
    p.add_argument("--q", type=int, help="refresh count for qsaga and svrg")
    p.add_argument("--k", type=int, help="neighbourhood size for nsaga")
    p.add_argument("--mu", type=float, help="ridge strength")
    p.add_argument("--epochs", type=int, help="passes over the data")
    p = add("extract", cmd_extract, "write unit-norm features for a dataset")
    p.add_argument("--checkpoint", required=True, help="model checkpoint from train")
    p.add_argument("--data", help="dataset root (default: synthetic data from the config)")
    p = add("score", cmd_score, "similarity scores between features or two images")
    p.add_argument("--checkpoint", required=True, help="model checkpoint from train")
    p.add_argument("--features", help="features.daft written by extract")
    p.add_argument("--pair", nargs=2, metavar="IMAGE", help="score two image files")
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        args.func(args)
        return 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, ParameterError) as exc:
        print(f"dafe: configuration error: {exc}", file=sys.stderr)
        return 1
    except DafeError as exc:
        print(f"dafe: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"dafe: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
