"""Ready-made experiment recipes shared by the CLI, the demos and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .dau import DauBank, align_fit, subspace_cosines, top_right_singular_vectors
from .data import LabeledImageSet, make_noisy_templates, mnist_bundled, mnist_subset, split_train_val

# Golden settings for the eigenvector-recovery run (cosine threshold 0.9).
EV_SAMPLES = 3072
EV_SIGMA = 0.5
EV_RANK = 3
EV_STEPS = 120
EV_LR = 1.0
EV_BANK_SEED = 1
EV_NOISE_SEED = 0
EV_THRESHOLD = 0.9


@dataclass
class EigenRecovery:
    templates: np.ndarray
    singular_vectors: np.ndarray
    cosines: np.ndarray
    bank: DauBank

    @property
    def passed(self) -> bool:
        return bool((self.cosines >= EV_THRESHOLD).all())


def digit_templates(classes=(0, 1, 2), source: LabeledImageSet | None = None) -> np.ndarray:
    """The first image of each digit class, ``(len(classes), 784)``."""
    source = source if source is not None else mnist_bundled()
    return np.stack([source.images[source.by_class(c)[0]].reshape(-1) for c in classes])


def eigen_recovery(templates=None, n: int = EV_SAMPLES, sigma: float = EV_SIGMA, rank: int = EV_RANK,
                   steps: int = EV_STEPS, lr: float = EV_LR, bank_seed: int = EV_BANK_SEED,
                   noise_seed: int = EV_NOISE_SEED) -> EigenRecovery:
    """Fit one bias-free L2 unit to noisy digits and compare its top singular vectors to the digits.

    The noise is zero-mean and unclipped so that the sample mean is the
    template mean; clipping at 0 would add a constant offset to every sample.
    """
    templates = digit_templates() if templates is None else np.asarray(templates, dtype=np.float64)
    flat = templates.reshape(len(templates), -1)
    noisy = make_noisy_templates(flat, n, sigma, seed=noise_seed, clip=False)
    bank = DauBank.init(1, flat.shape[1], rank, "L2", rng=bank_seed)
    bank.b = None
    fitted = align_fit(bank, noisy.samples, steps, lr)
    basis = top_right_singular_vectors(fitted, 0, rank)
    return EigenRecovery(flat, basis, subspace_cosines(flat, basis), fitted)


def mnist_task(classes=(0, 1, 2), per_class: int | None = None, val_fraction: float = 0.2):
    """Train/validation split of a relabelled MNIST class subset, cast to the working precision."""
    ds = mnist_subset(classes, per_class)
    ds.images = ds.images.astype(tn.get_dtype())
    return split_train_val(ds, val_fraction)
