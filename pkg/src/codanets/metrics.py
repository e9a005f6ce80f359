"""Quantitative interpretability: grid localisation and pixel-removal curves.

Localisation follows the multi-image pointing game: ``n x n`` tiles of
distinct classes are stitched into one composite, an attribution map for
class ``c`` is computed on the composite, and the score is the fraction of
positive attribution mass that falls inside the tile of class ``c``.
Channel contributions are summed first and then clamped at zero.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .data import LabeledImageSet, subset_by_confidence
from .decomposition import baseline_attributions, batch_contributions, occlusion_maps
from .errors import ContractError
from .net import CodaNet

logger = logging.getLogger(__name__)


@dataclass
class GridTask:
    """``n*n`` tiles (row-major) of distinct classes and their composite image."""

    n: int
    tiles: np.ndarray
    classes: np.ndarray
    composite: np.ndarray
    tile_shape: tuple

    def tile_index(self, class_c: int) -> int:
        hits = np.flatnonzero(self.classes == class_c)
        if len(hits) != 1:
            raise ContractError(f"class {class_c} does not occur in this grid")
        return int(hits[0])


def stitch(tiles: np.ndarray, n: int) -> np.ndarray:
    """``(n*n, C, H, W) -> (C, n*H, n*W)``, row-major."""
    _, c, h, w = tiles.shape
    return tiles.reshape(n, n, c, h, w).transpose(2, 0, 3, 1, 4).reshape(c, n * h, n * w)


def compose_grids(dataset: LabeledImageSet, net: CodaNet, n: int, count: int, seed: int = 0,
                  per_class: int = 100) -> list:
    """``count`` grids drawn from the ``per_class`` most confident images of each class."""
    if dataset.class_count < n * n:
        raise ContractError(f"a {n}x{n} grid needs {n * n} classes, dataset has {dataset.class_count}")
    pool = subset_by_confidence(dataset, net, per_class)
    present = [c for c in range(dataset.class_count) if len(pool.by_class(c))]
    if len(present) < n * n:
        raise ContractError(f"only {len(present)} classes have confidently classified images; need {n * n}")
    rng = np.random.default_rng(seed)
    grids = []
    for _ in range(count):
        classes = rng.choice(present, size=n * n, replace=False)
        picks = [rng.choice(pool.by_class(c)) for c in classes]
        tiles = pool.images[picks]
        grids.append(GridTask(n, tiles, np.asarray(classes), stitch(tiles, n), tiles.shape[-2:]))
    return grids


def localisation_score(attribution_map, grid: GridTask, class_c: int) -> float:
    """Positive mass inside the tile of ``class_c`` over total positive mass.

    The map may be coarser than the composite as long as each side divides
    evenly into ``n`` tiles.  Maps without positive mass score ``1/n^2``.
    """
    values = np.asarray(attribution_map, dtype=np.float64)
    if values.ndim == 3:
        values = values.sum(axis=0)
    n = grid.n
    h, w = values.shape
    if h % n or w % n:
        raise ContractError(f"attribution map {values.shape} cannot be split into {n}x{n} tiles")
    pos = np.maximum(values, 0.0)
    z = pos.sum()
    if z <= 0:
        return 1.0 / (n * n)
    t = grid.tile_index(class_c)
    i, j = divmod(t, n)
    th, tw = h // n, w // n
    return float(pos[i * th:(i + 1) * th, j * tw:(j + 1) * tw].sum() / z)


def _input_geometry(net: CodaNet, images) -> tuple:
    with tn.no_grad():
        return net.encode(images[:1]).shape[-2:]


def attribution_maps(net: CodaNet, images, classes, method: str, depth: int = 0, rng=None) -> np.ndarray:
    """Channel-summed attribution maps ``(N, H_t, W_t)`` for one class per image.

    ``method`` is ``inherent``, ``grad``, ``ixg``, ``occ-K`` (patch size K,
    stride K/2) or ``random`` (uniform positive noise on the map geometry).
    Only ``inherent`` supports ``depth > 0``.
    """
    images = np.asarray(images)
    classes = np.asarray(classes).reshape(-1)
    method = method.lower()
    if method == "inherent":
        return batch_contributions(net, images, classes, depth).sum(axis=1)
    if depth != 0:
        raise ContractError(f"method {method!r} is only defined at depth 0")
    if method == "random":
        rng = np.random.default_rng(rng)
        return rng.uniform(0.0, 1.0, size=(len(images), *_input_geometry(net, images)))
    out = []
    if method.startswith("occ"):
        size = int(method.split("-")[1]) if "-" in method else 4
        if size < 1:
            raise ContractError(f"occlusion patch size must be >= 1, got {method!r}")
        if classes.size and not (0 <= classes.min() and classes.max() < net.num_classes):
            raise ContractError(f"class indices must lie in [0, {net.num_classes - 1}]")
        cache = {}  # grids score several classes on one composite
        for image, c in zip(images, classes):
            key = image.tobytes()
            if key not in cache:
                net.eval()
                a0 = net.activations(image)[0]
                cache[key] = occlusion_maps(net, a0, size, max(size // 2, 1))
            out.append(cache[key][int(c)])
        return np.stack(out)
    for image, c in zip(images, classes):
        out.append(baseline_attributions(net, image, int(c), method).values)
    return np.stack(out)


@dataclass
class LocalisationResult:
    method: str
    grid_ids: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.scores.mean())

    @property
    def std(self) -> float:
        return float(self.scores.std())

    def per_class(self) -> dict:
        return {int(c): float(self.scores[self.classes == c].mean()) for c in np.unique(self.classes)}


def evaluate_localisation(net: CodaNet, grids, method: str = "inherent", depth: int = 0, seed: int = 0,
                          ) -> LocalisationResult:
    """Score every class of every grid (``oracle`` puts all mass in the correct tile)."""
    rng = np.random.default_rng(seed)
    ids, classes, scores = [], [], []
    for g, grid in enumerate(grids):
        k = len(grid.classes)
        if method == "oracle":
            maps = []
            for c in grid.classes:
                m = np.zeros(grid.composite.shape[-2:])
                i, j = divmod(grid.tile_index(c), grid.n)
                th, tw = grid.tile_shape
                m[i * th + th // 2, j * tw + tw // 2] = 1.0
                maps.append(m)
        else:
            composites = np.repeat(grid.composite[None], k, axis=0)
            maps = attribution_maps(net, composites, grid.classes, method, depth, rng)
        for c, m in zip(grid.classes, maps):
            ids.append(g)
            classes.append(int(c))
            scores.append(localisation_score(m, grid, int(c)))
    return LocalisationResult(method, np.asarray(ids), np.asarray(classes), np.asarray(scores))


def write_localisation_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid_id", "class", "method", "score"])
        for res in results:
            for g, c, s in zip(res.grid_ids, res.classes, res.scores):
                writer.writerow([int(g), int(c), res.method, repr(float(s))])


# -- pixel removal -------------------------------------------------------------------------------------
@dataclass
class RemovalCurve:
    method: str
    order: str
    fractions: np.ndarray
    mean_confidence: np.ndarray
    confidences: np.ndarray = field(repr=False)


def removal_orderings(importance: np.ndarray, order: str, rng) -> np.ndarray:
    """Flattened position order per image; ties break by flattened index (stable sort)."""
    flat = importance.reshape(len(importance), -1)
    if order == "least_first":
        return np.argsort(flat, axis=1, kind="stable")
    if order == "most_first":
        return np.argsort(-flat, axis=1, kind="stable")
    if order == "random":
        return np.stack([rng.permutation(flat.shape[1]) for _ in range(len(flat))])
    raise ContractError(f"unknown removal order {order!r}")


def pixel_removal_curve(net: CodaNet, images, labels, method: str = "inherent", order: str = "least_first",
                        fractions=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5), seed: int = 0, batch_size: int = 64,
                        ) -> RemovalCurve:
    """Mean target probability after zeroing a growing fraction of input positions.

    Positions are removed in the model-input space: all encoded channels of a
    pixel (or the whole embedding vector) are set to zero.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if (np.diff(fractions) < 0).any() or fractions.min() < 0 or fractions.max() > 1:
        raise ContractError("fractions must be ascending within [0, 1]")
    images = np.asarray(images)
    labels = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng(seed)
    net.eval()
    if method == "random":
        order = "random"
        importance = np.zeros((len(images), *_input_geometry(net, images)))
    else:
        importance = attribution_maps(net, images, labels, method)
    ranks = removal_orderings(importance, order, rng)
    n_pos = ranks.shape[1]
    conf = np.zeros((len(images), len(fractions)))
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        a0 = net.activations(images[sl])[0]
        for f, frac in enumerate(fractions):
            m = int(round(frac * n_pos))
            mask = np.ones((len(a0), n_pos), dtype=bool)
            np.put_along_axis(mask, ranks[sl, :m], False, axis=1)
            removed = a0 * mask.reshape(len(a0), 1, *a0.shape[-2:])
            with tn.no_grad():
                logits = net.logits_from(removed, 0).data
            conf[sl, f] = expit(logits[np.arange(len(a0)), labels[sl]])
    return RemovalCurve(method, order, fractions, conf.mean(axis=0), conf)


def write_removal_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "order", "fraction", "mean_confidence"])
        for curve in curves:
            for frac, value in zip(curve.fractions, curve.mean_confidence):
                writer.writerow([curve.method, curve.order, repr(float(frac)), repr(float(value))])


# -- temperature study ------------------------------------------------------------------------------------------
def temperature_study(train_set: LabeledImageSet, eval_set: LabeledImageSet, temperatures, seeds,
                      net_config=None, train_config=None, n: int = 2, grids: int = 50, per_class: int = 100):
    """Train one net per ``(T, seed)``; report test accuracy and mean inherent localisation.

    Returns a list of dicts with keys ``temperature``, ``seed``, ``accuracy``
    and ``localisation``.
    """
    from dataclasses import replace

    from .net import NetConfig, build_coda_net
    from .training import TrainConfig, accuracy, train

    temperatures = list(temperatures)
    net_config = net_config or NetConfig(in_channels=train_set.images.shape[1], num_classes=train_set.class_count)
    train_config = train_config or TrainConfig()
    rows = []
    for T in temperatures:
        for seed in seeds:
            net = build_coda_net(replace(net_config, temperature=float(T)), seed=seed)
            net, _ = train(net, train_set, replace(train_config, seed=seed))
            acc = accuracy(net, eval_set.images, eval_set.labels)
            tasks = compose_grids(eval_set, net, n, grids, seed=seed, per_class=per_class)
            loc = evaluate_localisation(net, tasks, "inherent")
            rows.append({"temperature": float(T), "seed": int(seed), "accuracy": acc, "localisation": loc.mean})
            logger.info("T=%g seed=%d accuracy=%.4f localisation=%.4f", T, seed, acc, loc.mean)
    return rows


def summarise_temperature(rows) -> list:
    """Mean accuracy and localisation per temperature."""
    out = []
    for T in sorted({r["temperature"] for r in rows}):
        sel = [r for r in rows if r["temperature"] == T]
        out.append({"temperature": T,
                    "accuracy": float(np.mean([r["accuracy"] for r in sel])),
                    "localisation": float(np.mean([r["localisation"] for r in sel]))})
    return out


def write_temperature_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["temperature", "seed", "accuracy", "localisation"])
        for r in rows:
            writer.writerow([repr(r["temperature"]), r["seed"], repr(r["accuracy"]), repr(r["localisation"])])


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
