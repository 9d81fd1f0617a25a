"""Command-line entry point: ``smoothforest <subcommand> ...``.

Subcommands: gen-data, train, finetune, heatmap, gradcheck, eval. Every
subcommand is deterministic given its flags and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from .boosting import BoostingConfig, train_boosted_forest
from .exceptions import DimensionError, DivergenceError, ForestFormatError
from .forest import LEAF_INITS, generate_random_forest
from .heatmap import evaluate_grid, total_variation, write_grid_csv, write_pgm
from .neural import ACTIVATIONS, EmbeddingNet, Layer
from .oracle import gradcheck_model
from .serialization import export_forest, load_forest, load_model, save_model
from .smoothing import SmoothedForest
from .training import SCHEDULES, Model, TrainConfig, accuracy, fit, mean_squared_error

EXIT_USAGE = 2
EXIT_FAILED = 1


class CLIError(Exception):
    """Problem with the inputs; reported on stderr with a nonzero exit."""


def format_delta(initial: float, final: float) -> str:
    """Relative change ``(final - initial) / initial`` as a signed percentage.

    One decimal place; an exact zero change prints as ``0``.
    """
    if initial == 0:
        raise ValueError("relative change undefined for an initial value of 0")
    delta = (final - initial) / initial
    if delta == 0:
        return "0"
    return f"{100 * delta:+.1f}%"


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _require_file(path, what):
    if not Path(path).is_file():
        raise CLIError(f"{what} not found: {path}")
    return path


def _load_table(path, what="data file"):
    _require_file(path, what)
    try:
        return ds.load_csv(path)
    except ds.CSVFormatError as exc:
        raise CLIError(str(exc))


def _prepare_out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}")
    return out


def _loss_for(labels):
    labels = np.asarray(labels)
    if labels.dtype.kind == "f" and np.any(labels != np.round(labels)):
        return "squared_error", 1
    k = int(labels.max()) + 1 if labels.size else 2
    if k <= 2:
        return "sigmoid_cross_entropy", 1
    return "softmax_cross_entropy", k


def _splits(args, data):
    """(train, valid, test) from explicit files or a seeded split of ``data``."""
    if args.valid:
        valid = _load_table(args.valid, "validation file")
        test = _load_table(args.test, "test file") if args.test else valid
        return data, valid, test
    if args.test:
        test = _load_table(args.test, "test file")
        train, valid = ds.split(data, (1 - args.valid_fraction, args.valid_fraction),
                                seed=args.seed)
        return train, valid, test
    f = args.valid_fraction
    train, valid, test = ds.split(data, (1 - 2 * f, f, f), seed=args.seed)
    return train, valid, test


def _score_line(model, dataset, hard=True):
    if model.loss == "squared_error":
        return f"mean squared error: {mean_squared_error(model, dataset, hard):.6f}"
    return f"accuracy: {accuracy(model, dataset, hard):.4f}"


def _train_config(args, sigma):
    return TrainConfig(batch_size=args.batch, epochs=args.epochs, patience=args.patience,
                       schedule=args.schedule, sigma=sigma, sigma_end=args.sigma_end,
                       decay=args.decay, lr=args.lr, seed=args.seed)


# subcommands ---------------------------------------------------------------

def cmd_gen_data(args):
    spec = ds.SyntheticSpec(args.kind, n=args.n, noise=args.noise, seed=args.seed,
                            n_classes=args.classes, dim=args.dim)
    data = ds.generate(spec)
    out = Path(args.out)
    if out.parent and not out.parent.is_dir():
        raise CLIError(f"output directory does not exist: {out.parent}")
    try:
        ds.write_csv(data, out)
    except OSError as exc:
        raise CLIError(f"cannot write {out}: {exc}")
    print(f"wrote {len(data)} rows to {out}")
    return 0


def cmd_train(args):
    data = _load_table(args.data)
    out = _prepare_out_dir(args.out)
    train, valid, test = _splits(args, data)
    loss, n_out = _loss_for(data.labels)
    rng = np.random.default_rng(args.seed)
    embed = EmbeddingNet.mlp(data.n_features, args.layers, args.hidden_activation,
                             args.output_activation, rng)
    forest = generate_random_forest(args.trees, embed.output_dim, args.depth, args.leaf_init,
                                    n_out, rng)
    config = _train_config(args, args.sigma)
    model = Model(embed, forest, sigma=args.sigma, loss=loss)
    model, history = fit(model, train, valid, config)
    history.write(out / "metrics.jsonl")
    save_model(model, out)
    print(f"best epoch {history.best_epoch} of {len(history)}")
    print(f"test {_score_line(model, test)}")
    return 0


def identity_adapter(dim) -> EmbeddingNet:
    """Linear layer initialised to the identity map, with identity activation."""
    return EmbeddingNet([Layer(np.eye(dim), np.zeros(dim), "identity")])


def cmd_finetune(args):
    data = _load_table(args.data, "embedding table")
    out = _prepare_out_dir(args.out)
    train, valid, test = _splits(args, data)
    loss, n_out = _loss_for(data.labels)
    if loss == "squared_error":
        raise CLIError("finetune reports accuracy and needs class labels")
    if args.forest:
        _require_file(args.forest, "forest document")
        forest = load_forest(args.forest)
        if forest.input_dim != data.n_features:
            raise DimensionError(
                f"forest expects {forest.input_dim} inputs but the embedding table has "
                f"{data.n_features} columns"
            )
        if any(leaf.trainable for leaf in forest.leaves()):
            print("warning: forest has trainable leaves; freezing them for fine-tuning",
                  file=sys.stderr)
    else:
        boost = BoostingConfig(num_trees=args.boost_rounds, max_depth=args.boost_depth,
                               learning_rate=args.boost_lr,
                               loss="logistic" if n_out == 1 else "softmax",
                               n_classes=None if n_out == 1 else n_out)
        forest = train_boosted_forest(train, boost)
    forest.set_trainable(False)
    before = export_forest(forest)
    model = Model(identity_adapter(data.n_features), forest, sigma=args.sigma, loss=loss,
                  leaf_trainable=False)
    initial = accuracy(model, test)
    model, history = fit(model, train, valid, _train_config(args, args.sigma))
    final = accuracy(model, test)
    if export_forest(model.forest) != before:
        raise CLIError("internal error: the frozen forest changed during fine-tuning")
    history.write(out / "metrics.jsonl")
    save_model(model, out)
    report = {"initial_accuracy": initial, "finetuned_accuracy": final,
              "delta": format_delta(initial, final), "forest_unchanged": True}
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(f"{'initial':>10} {'fine-tuned':>10} {'delta':>8}")
    print(f"{initial:>10.4f} {final:>10.4f} {report['delta']:>8}")
    return 0


def cmd_heatmap(args):
    _require_file(args.forest, "forest document")
    forest = load_forest(args.forest)
    if forest.input_dim > 2:
        raise DimensionError(f"heatmap needs a forest with input_dim 1 or 2, "
                             f"got {forest.input_dim}")
    bounds = args.bounds
    if bounds is not None:
        if len(bounds) != 2 * forest.input_dim:
            raise CLIError(f"--bounds needs {2 * forest.input_dim} numbers")
        bounds = list(zip(bounds[0::2], bounds[1::2]))
    if any(s < 0 for s in args.sigmas):
        raise CLIError("sigma values must be >= 0")
    prefix = Path(args.out)
    if not prefix.parent.is_dir():
        raise CLIError(f"output directory does not exist: {prefix.parent}")
    smoothed = SmoothedForest(forest)
    sigmas = args.sigmas if 0.0 in args.sigmas else [0.0] + args.sigmas
    for sigma in sigmas:
        axes, grid = evaluate_grid(forest, sigma, args.resolution, bounds, args.output,
                                   smoothed)
        stem = f"{prefix}_sigma{sigma:g}"
        write_grid_csv(axes, grid, stem + ".csv")
        if forest.input_dim == 2:
            write_pgm(grid, stem + ".pgm", binary=args.binary)
        print(f"sigma {sigma:g}: total variation {total_variation(grid):.6f}")
    return 0


def cmd_gradcheck(args):
    if args.random:
        rng = np.random.default_rng(args.seed)
        embed = EmbeddingNet.mlp(args.dim, [args.hidden, args.dim], "tanh", "sigmoid", rng)
        forest = generate_random_forest(args.trees, args.dim, args.depth, "uniform01", 1, rng)
        model = Model(embed, forest, sigma=args.sigma)
    else:
        if not args.model:
            raise CLIError("gradcheck needs --model or --random")
        _require_file(args.model, "model manifest")
        try:
            model = load_model(args.model)
        except (ValueError, KeyError, OSError) as exc:
            raise CLIError(f"cannot load model {args.model}: {exc}")
        if args.sigma_given:
            model.perturb = type(model.perturb)(args.sigma)
    corrupt = {args.corrupt: 2.0} if args.corrupt else None
    report = gradcheck_model(model, args.cases, args.tolerance, args.seed, corrupt=corrupt)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {report.max_rel_err:.3e} "
          f"(tolerance {args.tolerance:g}) over {len(report.entries)} gradients")
    if report.message:
        print(report.message)
    elif not report.passed:
        print(f"worst gradient: {report.worst}")
    return 0 if report.passed else EXIT_FAILED


def cmd_eval(args):
    _require_file(args.model, "model manifest")
    try:
        model = load_model(args.model)
    except (ValueError, KeyError, OSError) as exc:
        raise CLIError(f"cannot load model {args.model}: {exc}")
    if args.sigma is not None:
        model.perturb = type(model.perturb)(args.sigma)
    data = _load_table(args.data)
    if data.n_features != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} features, data has "
                             f"{data.n_features}")
    print(_score_line(model, data, hard=not args.smooth))
    return 0


# parser --------------------------------------------------------------------

def _add_split_flags(p):
    p.add_argument("--data", required=True, help="CSV with features and a final label column")
    p.add_argument("--valid", help="separate validation CSV")
    p.add_argument("--test", help="separate test CSV")
    p.add_argument("--valid-fraction", type=float, default=0.1,
                   help="fraction held out for validation (and again for test) when "
                        "no separate files are given")


def _add_optim_flags(p, epochs, lr, patience):
    p.add_argument("--batch", type=_positive_int, default=512)
    p.add_argument("--epochs", type=_positive_int, default=epochs)
    p.add_argument("--patience", type=int, default=patience)
    p.add_argument("--lr", type=_positive_float, default=lr)
    p.add_argument("--sigma", type=_positive_float, default=0.015)
    p.add_argument("--schedule", choices=SCHEDULES, default="fixed")
    p.add_argument("--sigma-end", type=_positive_float, default=0.001)
    p.add_argument("--decay", type=_positive_float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="smoothforest",
        description="Train embeddings through decision forests smoothed by Gaussian "
                    "input noise.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("--kind", choices=ds.SYNTHETIC_KINDS, default="identity_line")
    p.add_argument("--n", type=_positive_int, default=5000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--classes", type=int, default=3, help="gaussian_blobs only")
    p.add_argument("--dim", type=int, default=4, help="rotated_embeddings only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an embedding and leaves through a random forest")
    _add_split_flags(p)
    p.add_argument("--trees", type=_positive_int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--leaf-init", choices=LEAF_INITS, default="binary01")
    p.add_argument("--layers", type=_int_list, default=[1],
                   help="comma-separated layer widths; the last is the forest input width")
    p.add_argument("--hidden-activation", choices=ACTIVATIONS, default="relu")
    p.add_argument("--output-activation", choices=ACTIVATIONS, default="sigmoid")
    _add_optim_flags(p, epochs=200, lr=1e-2, patience=20)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune an adapter through a frozen forest")
    _add_split_flags(p)
    p.add_argument("--forest", help="forest document; a boosted forest is trained if omitted")
    p.add_argument("--boost-rounds", type=int, default=6)
    p.add_argument("--boost-depth", type=int, default=2)
    p.add_argument("--boost-lr", type=_positive_float, default=0.3)
    _add_optim_flags(p, epochs=100, lr=1e-3, patience=20)
    p.set_defaults(func=cmd_finetune, valid_fraction=1 / 6)

    p = sub.add_parser("heatmap", help="hard and smoothed forest output on a grid")
    p.add_argument("--forest", required=True)
    p.add_argument("--sigmas", type=_float_list, default=[0.0, 0.05, 0.10, 0.15])
    p.add_argument("--resolution", type=_positive_int, default=200)
    p.add_argument("--bounds", type=_float_list,
                   help="lo,hi per feature (default 0,1 for each)")
    p.add_argument("--output", type=int, default=0, help="forest output component")
    p.add_argument("--binary", action="store_true", help="write P5 instead of P2 images")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--model", help="model.json manifest")
    p.add_argument("--random", action="store_true", help="check a random small model")
    p.add_argument("--dim", type=_positive_int, default=3)
    p.add_argument("--hidden", type=_positive_int, default=4)
    p.add_argument("--trees", type=_positive_int, default=4)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--sigma", type=_positive_float, default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--cases", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", metavar="NAME",
                   help="double the analytic gradient NAME (negative control)")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="score a trained model on a CSV")
    p.add_argument("--model", required=True, help="model.json manifest")
    p.add_argument("--data", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--hard", action="store_true", help="exact forest (default)")
    mode.add_argument("--smooth", action="store_true", help="smoothed forest")
    p.add_argument("--sigma", type=_positive_float, default=None,
                   help="override the model's sigma for --smooth")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck":
        args.sigma_given = args.sigma is not None
        if args.sigma is None:
            args.sigma = 0.1
    try:
        return args.func(args)
    except (CLIError, DimensionError, ForestFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
