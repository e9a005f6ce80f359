"""Pixel removal: if the least important pixels go first, confidence should hold.

Pixels are ranked by their inherent contribution to the true class and set to
zero in order.  Removing the least important ones first should hurt the
prediction less than removing pixels at random, and removing the most
important ones first should hurt it most.

    python3 demos/04_pixel_removal.py
"""

from codanets.experiments import mnist_task
from codanets.metrics import pixel_removal_curve
from codanets.net import NetConfig, build_coda_net
from codanets.training import TrainConfig, train

train_set, val_set = mnist_task(classes=(0, 1, 2))
net = build_coda_net(NetConfig(num_classes=3), seed=0)
net, _ = train(net, train_set, TrainConfig(epochs=3))

images, labels = val_set.images[:200], val_set.labels[:200]
fractions = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
print("fraction removed:      " + "  ".join(f"{f:5.1f}" for f in fractions))
for method, order in [("inherent", "least_first"), ("random", "random"), ("inherent", "most_first")]:
    curve = pixel_removal_curve(net, images, labels, method, order, fractions, seed=0)
    print(f"{method + ' ' + order:>22s} " + "  ".join(f"{v:5.3f}" for v in curve.mean_confidence))
