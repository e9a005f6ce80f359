"""Train a small CoDA net on three MNIST digits, then explain one prediction.

The whole network is one input-dependent linear map, so every logit splits
exactly into per-pixel contributions plus the fixed output bias.  The script
prints that bookkeeping and writes the contribution map as a PPM image
(red supports the class, blue speaks against it).

    python3 demos/02_train_and_explain.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from codanets.decomposition import effective_row
from codanets.experiments import mnist_task
from codanets.export import grayscale_rgb, write_heatmap_ppm, write_ppm
from codanets.net import NetConfig, build_coda_net
from codanets.serialization import load_model, save_model
from codanets.training import TrainConfig, accuracy, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_explain")
out.mkdir(parents=True, exist_ok=True)

train_set, val_set = mnist_task(classes=(0, 1, 2))
net = build_coda_net(NetConfig(num_classes=3, temperature=10.0), seed=0)
print(f"{len(train_set)} training and {len(val_set)} validation images")
print(f"accuracy before training: {accuracy(net, val_set.images, val_set.labels):.3f}")
net, history = train(net, train_set, TrainConfig(epochs=3), eval_set=val_set)
for h in history:
    print(f"epoch {h['epoch']}: loss {h['loss']:.4f}  val accuracy {h['eval_accuracy']:.3f}")

# Save and reload: the binary container round-trips bit for bit.
path = save_model(net, out / "model.coda")
net = load_model(path)

image, label = val_set.images[0], int(val_set.labels[0])
cls = int(net.predict(image[None]).argmax())
dec = effective_row(net, image, cls)
print(f"\nimage 0 has label {label}, predicted {cls}")
print(f"logit                       {dec.logit:+.6f}")
print(f"sum of contributions / T    {dec.contributions.sum() / net.temperature:+.6f}")
print(f"fixed bias b0               {dec.bias_part:+.6f}")
print(f"reconstruction error        {abs(dec.reconstructed_logit - dec.logit):.2e}")

for depth in range(net.num_depths):
    total = effective_row(net, image, cls, depth).contributions.sum()
    print(f"depth {depth}: contributions sum to {total:+.6f}")

spatial = dec.spatial().values
write_heatmap_ppm(out / "contributions.ppm", spatial, scale=8)
write_ppm(out / "image.ppm", grayscale_rgb(image).repeat(8, axis=0).repeat(8, axis=1))
share = spatial.clip(min=0).sum() / np.abs(spatial).sum()
print(f"\n{share:.0%} of the absolute contribution mass is positive; maps written to {out}/")
