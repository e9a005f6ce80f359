"""A hybrid: two conv+ReLU blocks feeding a two-layer CoDA head.

ReLU networks are piecewise linear, so the hybrid is still one input-dependent
linear map.  Its decomposition is exact at every depth, including inside the
stem, where the dynamic weights are frozen and the gradient gives the row.

    python3 demos/06_hybrid.py
"""

from codanets.decomposition import effective_row
from codanets.experiments import mnist_task
from codanets.net import NetConfig, build_hybrid
from codanets.training import TrainConfig, train

train_set, val_set = mnist_task(classes=(0, 1, 2))
net = build_hybrid(stem_depth=2, coda_depth=2, config=NetConfig(num_classes=3), seed=0)
net, history = train(net, train_set, TrainConfig(epochs=3), eval_set=val_set)
print(f"validation accuracy after 3 epochs: {history[-1]['eval_accuracy']:.3f}")

image = val_set.images[0]
for depth in range(net.num_depths):
    dec = effective_row(net, image, int(val_set.labels[0]), depth)
    where = "stem" if 0 < depth <= len(net.stem) else ("input" if depth == 0 else "head")
    print(f"depth {depth} ({where:5s}): relative reconstruction error {dec.relative_error:.1e}")
