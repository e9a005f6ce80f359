"""Grid pointing game: do the contributions point at the right digit?

Four digits from different classes are tiled into a 2x2 grid.  For each
class present, an attribution map is computed on the whole grid and scored by
the share of its positive mass that falls inside that class's tile.  Chance
level is 1/4; a perfect explainer scores 1.

    python3 demos/03_localisation.py
"""

from codanets.experiments import mnist_task
from codanets.metrics import compose_grids, evaluate_localisation
from codanets.net import NetConfig, build_coda_net
from codanets.training import TrainConfig, train

train_set, val_set = mnist_task(classes=(0, 1, 2, 3))
net = build_coda_net(NetConfig(num_classes=4, temperature=1000.0), seed=0)
net, _ = train(net, train_set, TrainConfig(epochs=3))

grids = compose_grids(val_set, net, n=2, count=10, seed=0, per_class=50)
print(f"{len(grids)} grids of {grids[0].composite.shape[-1]}x{grids[0].composite.shape[-2]} pixels\n")
for method in ("inherent", "ixg", "grad", "occ-8", "random", "oracle"):
    res = evaluate_localisation(net, grids, method)
    print(f"{method:>9s}: {res.mean:.3f} +- {res.std:.3f}")
