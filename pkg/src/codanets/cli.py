"""``codanets`` command-line entry point.

Every command writes its artifacts plus ``manifest.json`` (resolved
configuration, seed, precision and SHA-256 of each artifact) into ``--out``.
Passing that manifest back through ``--config`` repeats the run.

The thread count of the BLAS backend is taken from ``CODA_NUM_THREADS``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path


from . import __version__
from . import tensor as tn
from .errors import CodaError, ConfigurationError, ContractError, ParseError

logger = logging.getLogger("codanets")

THREADS_ENV = "CODA_NUM_THREADS"
EXIT_USAGE = 2


class UsageError(CodaError):
    """Bad user input that is detected after argument parsing (exit code 2)."""


# -- helpers -------------------------------------------------------------------------------------------
def _int_list(text: str) -> list:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text: str) -> list:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, artifacts: list) -> Path:
    out = Path(args.out)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "precision": args.precision,
        "config": config,
        "artifacts": {Path(p).name: _sha256(Path(p)) for p in artifacts},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(path) -> dict:
    """Flat key-value YAML (or a manifest, whose ``config`` block is used)."""
    import yaml

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a key-value mapping at top level")
    if "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    return {k.replace("-", "_"): v for k, v in data.items()}


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_net(path):
    from .serialization import load_model

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _dataset(args, classes=None):
    """Train/validation split of the dataset selected by ``--dataset``."""
    from .data import load_cifar_binary, load_idx, mnist_subset, split_train_val

    classes = classes if classes is not None else args.classes
    if args.dataset == "mnist":
        ds = mnist_subset(classes, args.per_class)
    else:
        for p in filter(None, (args.images, args.labels)):
            if not Path(p).is_file():
                raise UsageError(f"data file not found: {p}")
        if args.dataset == "idx":
            if not (args.images and args.labels):
                raise UsageError("--dataset idx needs --images and --labels")
            full = load_idx(args.images, args.labels)
        else:
            if not args.images:
                raise UsageError("--dataset cifar needs --images (a binary batch file)")
            full = load_cifar_binary(args.images)
        ds = mnist_subset(classes, args.per_class, source=full)
    ds.images = ds.images.astype(tn.get_dtype())
    return split_train_val(ds, args.val_fraction)


def _net_config(args, in_channels: int, num_classes: int):
    from .net import NetConfig

    return NetConfig(in_channels=in_channels, num_classes=num_classes, kind=args.rescale.upper(),
                     encoding=args.encoding, temperature=args.temperature)


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(optimizer=args.optimizer, lr=args.lr, batch_size=args.batch_size,
                       epochs=args.epochs, seed=args.seed)


def _build_net(args, config):
    from .net import build_coda_net, build_hybrid

    if args.stem_depth > 0:
        return build_hybrid(args.stem_depth, args.coda_depth, config, seed=args.seed)
    if args.coda_depth != 3:
        return build_hybrid(0, args.coda_depth, config, seed=args.seed)
    return build_coda_net(config, seed=args.seed)


# -- commands ---------------------------------------------------------------------------------------------
def cmd_train(args) -> list:
    from .serialization import save_model
    from .training import accuracy, train

    out = _out_dir(args)
    train_set, val_set = _dataset(args)
    net = _build_net(args, _net_config(args, train_set.images.shape[1], train_set.class_count))
    initial = accuracy(net, val_set.images, val_set.labels)
    net, history = train(net, train_set, _train_config(args), eval_set=val_set)
    model_path = save_model(net, out / "model.coda")
    hist_path = out / "history.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy", "eval_accuracy"])
        for h in history:
            writer.writerow([h["epoch"], repr(h["loss"]), repr(h["accuracy"]), repr(h["eval_accuracy"])])
    final = history[-1]["eval_accuracy"] if history else initial
    print(f"initial validation accuracy {initial:.4f}")
    print(f"final validation accuracy   {final:.4f}")
    return [model_path, hist_path]


def cmd_explain(args) -> list:
    from .decomposition import effective_row
    from .export import grayscale_rgb, write_contributions_csv, write_heatmap_ppm, write_ppm

    net = _load_net(args.model)
    out = _out_dir(args)
    _, val_set = _dataset(args, classes=args.classes[:net.num_classes])
    if not 0 <= args.index < len(val_set):
        raise UsageError(f"--index {args.index} outside [0, {len(val_set) - 1}]")
    image = val_set.images[args.index]
    cls = int(net.predict(image[None]).argmax()) if args.cls is None else args.cls
    if not 0 <= cls < net.num_classes:
        raise UsageError(f"class index {cls} outside [0, {net.num_classes - 1}]")
    if not 0 <= args.depth < net.num_depths:
        raise UsageError(f"depth {args.depth} outside [0, {net.num_depths - 1}]")
    dec = effective_row(net, image, cls, args.depth)
    total = float(dec.contributions.sum())
    recon = dec.reconstructed_logit
    print(f"image {args.index} (label {val_set.labels[args.index]}), class {cls}, depth {args.depth}")
    print(f"logit               {dec.logit:.10g}")
    print(f"bias part           {dec.bias_part:.10g}")
    print(f"contribution sum    {total:.10g}  (divided by T={net.temperature:g}: {total / net.temperature:.10g})")
    print(f"residual            {recon - dec.logit:.3e}  (relative {dec.relative_error:.3e})")
    heat = write_heatmap_ppm(out / "contributions.ppm", dec.spatial().values, scale=args.scale)
    table = write_contributions_csv(out / "contributions.csv", dec.contributions)
    rgb = grayscale_rgb(image).repeat(args.scale, axis=0).repeat(args.scale, axis=1)
    img = write_ppm(out / "image.ppm", rgb)
    return [heat, table, img]


def cmd_pointing(args) -> list:
    from .export import grayscale_rgb, write_ppm
    from .metrics import compose_grids, evaluate_localisation, write_localisation_csv

    net = _load_net(args.model)
    out = _out_dir(args)
    _, val_set = _dataset(args, classes=args.classes[:net.num_classes])
    grids = compose_grids(val_set, net, args.grid_n, args.grids, seed=args.seed, per_class=args.pool)
    results = []
    for method in args.method:
        res = evaluate_localisation(net, grids, method, args.depth, seed=args.seed)
        print(f"{method:>10s}: mean {res.mean:.4f}  std {res.std:.4f}  (1/n^2 = {1 / args.grid_n ** 2:.4f})")
        results.append(res)
    csv_path = out / "localisation.csv"
    write_localisation_csv(csv_path, results)
    artifacts = [csv_path]
    for g, grid in enumerate(grids[:args.dump]):
        artifacts.append(write_ppm(out / f"grid_{g:03d}.ppm", grayscale_rgb(grid.composite)))
    return artifacts


def cmd_removal(args) -> list:
    from .metrics import pixel_removal_curve, write_removal_csv

    net = _load_net(args.model)
    out = _out_dir(args)
    _, val_set = _dataset(args, classes=args.classes[:net.num_classes])
    images, labels = val_set.images[:args.count], val_set.labels[:args.count]
    curves = []
    for method in args.method:
        orders = ["random"] if method == "random" else args.order
        for order in orders:
            curve = pixel_removal_curve(net, images, labels, method, order, args.fractions, seed=args.seed)
            print(f"{method:>10s} {order:>12s}: " + " ".join(f"{v:.4f}" for v in curve.mean_confidence))
            curves.append(curve)
    path = out / "removal.csv"
    write_removal_csv(path, curves)
    return [path]


def cmd_temperature(args) -> list:
    from .metrics import summarise_temperature, temperature_study, write_temperature_csv

    out = _out_dir(args)
    train_set, val_set = _dataset(args)
    net_config = _net_config(args, train_set.images.shape[1], train_set.class_count)
    rows = temperature_study(train_set, val_set, args.temperatures, args.seeds, net_config,
                             _train_config(args), n=args.grid_n, grids=args.grids, per_class=args.pool)
    for row in summarise_temperature(rows):
        print(f"T={row['temperature']:g}: accuracy {row['accuracy']:.4f}  localisation {row['localisation']:.4f}")
    path = out / "temperature.csv"
    write_temperature_csv(path, rows)
    return [path]


def cmd_evdemo(args) -> list:
    from .experiments import EV_THRESHOLD, eigen_recovery
    from .export import grayscale_rgb, write_ppm

    out = _out_dir(args)
    res = eigen_recovery(n=args.samples, sigma=args.sigma, steps=args.steps, lr=args.lr, bank_seed=args.seed,
                         noise_seed=args.noise_seed)
    artifacts = []
    for i, (tpl, cos) in enumerate(zip(res.templates, res.cosines)):
        print(f"template {i}: cosine with top-{len(res.singular_vectors)} subspace {cos:.4f}")
        artifacts.append(write_ppm(out / f"template_{i}.ppm", grayscale_rgb(tpl.reshape(28, 28))))
    for i, v in enumerate(res.singular_vectors):
        # singular vectors have arbitrary sign; show them with a non-negative mean
        v = v if v.sum() >= 0 else -v
        v = (v - v.min()) / max(v.max() - v.min(), 1e-12)
        artifacts.append(write_ppm(out / f"singular_vector_{i}.ppm", grayscale_rgb(v.reshape(28, 28))))
    path = out / "cosines.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["template", "cosine"])
        for i, cos in enumerate(res.cosines):
            writer.writerow([i, repr(float(cos))])
    print("recovered" if res.passed else "not recovered", f"(threshold {EV_THRESHOLD})")
    return [path] + artifacts


def cmd_bench(args) -> list:
    from .bench import bench_forward, write_bench_csv
    from .net import NetConfig

    out = _out_dir(args)
    variants = [v.upper() for v in args.variants]
    config = NetConfig(encoding=args.encoding, temperature=args.temperature)
    results = bench_forward(config, variants, args.batch_sizes, args.reps, args.warmup, seed=args.seed)
    for r in results:
        print(f"{r.variant:>3s} batch {r.batch:4d}: {r.mean_ms:9.3f} ms +- {r.std_ms:7.3f}  peak {r.peak_bytes:>12d} B")
    path = out / "bench.csv"
    write_bench_csv(path, results)
    return [path]


# -- parser -------------------------------------------------------------------------------------------------
def _common(p, out_default: str) -> None:
    p.add_argument("--config", help="YAML key-value file (or a previous manifest.json) with flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _data(p) -> None:
    p.add_argument("--dataset", choices=("mnist", "idx", "cifar"), default="mnist",
                   help="mnist: the bundled 5000-digit sample; idx/cifar: files given by --images/--labels")
    p.add_argument("--images", help="IDX image file or CIFAR-10 binary batch")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--classes", type=_int_list, default=[0, 1, 2], help="comma-separated class ids")
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)


def _model(p) -> None:
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--rescale", choices=("l2", "sq", "wb"), default="l2")
    p.add_argument("--encoding", choices=("six", "embed"), default="six")
    p.add_argument("--stem-depth", type=int, default=0)
    p.add_argument("--coda-depth", type=int, default=3)


def _training(p) -> None:
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--batch-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codanets", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network, write model.coda and history.csv")
    _common(p, "runs/train")
    _data(p)
    _model(p)
    _training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="linear decomposition of one logit for one image")
    _common(p, "runs/explain")
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, default=0, help="index into the validation split")
    p.add_argument("--class", dest="cls", type=int, default=None, help="class to explain (default: predicted)")
    p.add_argument("--depth", type=int, default=0)
    p.add_argument("--scale", type=int, default=8, help="pixel upscaling of the PPM output")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("pointing", help="grid localisation scores")
    _common(p, "runs/pointing")
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--grid-n", type=int, default=2)
    p.add_argument("--grids", type=int, default=50)
    p.add_argument("--pool", type=int, default=100, help="most confident images per class")
    p.add_argument("--method", type=lambda s: s.split(","), default=["inherent"],
                   help="comma-separated: inherent, grad, ixg, occ-K, random, oracle")
    p.add_argument("--depth", type=int, default=0)
    p.add_argument("--dump", type=int, default=3, help="number of composite grids written as PPM")
    p.set_defaults(func=cmd_pointing)

    p = sub.add_parser("removal", help="pixel-removal curves")
    _common(p, "runs/removal")
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", type=lambda s: s.split(","), default=["inherent", "random"])
    p.add_argument("--order", type=lambda s: s.split(","), default=["least_first"],
                   help="comma-separated: least_first, most_first, random")
    p.add_argument("--fractions", type=_float_list, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--count", type=int, default=200, help="number of validation images")
    p.set_defaults(func=cmd_removal)

    p = sub.add_parser("temperature", help="accuracy and localisation versus temperature")
    _common(p, "runs/temperature")
    _data(p)
    _model(p)
    _training(p)
    p.add_argument("--temperatures", type=_float_list, default=[10.0, 1000.0])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--grid-n", type=int, default=2)
    p.add_argument("--grids", type=int, default=50)
    p.add_argument("--pool", type=int, default=100)
    p.set_defaults(func=cmd_temperature, classes=[0, 1, 2, 3], epochs=5)

    p = sub.add_parser("evdemo", help="singular vectors of a unit fitted to noisy digits")
    _common(p, "runs/evdemo")
    p.add_argument("--samples", type=int, default=3072)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.set_defaults(func=cmd_evdemo, seed=1)

    p = sub.add_parser("bench", help="forward time and peak allocation of L2 / SQ / WB")
    _common(p, "runs/bench")
    p.add_argument("--variants", type=lambda s: s.split(","), default=["l2", "sq", "wb"])
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 16, 128])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--encoding", choices=("six", "embed"), default="six")
    p.add_argument("--temperature", type=float, default=10.0)
    p.set_defaults(func=cmd_bench, precision="f32")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = _load_config(args.config)
        except CodaError as exc:
            parser.exit(EXIT_USAGE, f"codanets: error: {exc}\n")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"command"})
        if unknown:
            parser.exit(EXIT_USAGE, f"codanets: error: unknown config keys: {', '.join(unknown)}\n")
        values.pop("command", None)
        # re-parse so that explicit flags override the file
        for action in sub._actions:
            if action.dest in values and isinstance(values[action.dest], str) and action.type is not None:
                values[action.dest] = action.type(values[action.dest])
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            with tn.precision(args.precision):
                artifacts = args.func(args)
                manifest = _write_manifest(args, artifacts)
    except UsageError as exc:
        print(f"codanets {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ContractError, ConfigurationError, CodaError, ValueError) as exc:
        print(f"codanets {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(artifacts)} artifact(s) and {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
