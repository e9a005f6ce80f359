"""Temperature: dividing the logits by a larger T makes the explanations sharper.

With a large T the network can only reach confident outputs by aligning its
dynamic weights closely with the input, which concentrates the contributions
on the class evidence.  This is a short run (one seed, 3 epochs); the
acceptance suite uses three seeds.

    python3 demos/05_temperature.py
"""

from codanets.experiments import mnist_task
from codanets.metrics import summarise_temperature, temperature_study
from codanets.net import NetConfig
from codanets.training import TrainConfig

train_set, val_set = mnist_task(classes=(0, 1, 2, 3))
rows = temperature_study(train_set, val_set, temperatures=[10.0, 1000.0], seeds=[0],
                         net_config=NetConfig(num_classes=4), train_config=TrainConfig(epochs=3),
                         n=2, grids=30, per_class=50)
for row in summarise_temperature(rows):
    print(f"T = {row['temperature']:6g}: accuracy {row['accuracy']:.3f}, localisation {row['localisation']:.3f}")
