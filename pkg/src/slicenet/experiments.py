"""Seeded end-to-end phantom experiments used by the acceptance suite.

Each function is deterministic in its seed.  Training settings come from
``PHANTOM_TRAIN``: the scaled-down network stalls with the library's default
learning rate on this small corpus, so the phantom runs use a smaller one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import convnet as C
from . import dataset as D
from . import evaluate as E
from . import tps_augment as A
from . import volume_profile as V

PHANTOM_TRAIN = C.TrainConfig(learning_rate=0.002, momentum=0.9, batch_size=16, epochs=10,
                              weight_decay=5e-4, lr_decay_factor=0.1, lr_decay_interval=8)


def _train_config(epochs: int, seed: int) -> C.TrainConfig:
    return replace(PHANTOM_TRAIN, epochs=epochs, seed=seed, lr_decay_interval=max(1, int(0.75 * epochs)))


@dataclass
class LearningRun:
    model: C.ConvNetModel
    report: E.EvalReport
    history: list[C.EpochRecord]
    test_ids: list[str]


def phantom_learning(seed: int = 7, per_class: int = 100, epochs: int = 10, size: int = 256) -> LearningRun:
    """Train the scaled-down network on an 80/20 split of the phantom corpus."""
    names = C.DEFAULT_CLASSES
    entries = D.phantom_entries(per_class, seed, size)
    sp = D.split(entries, 0.8, seed, names)
    train = D.to_arrays(sp.train, names)
    test = D.to_arrays(sp.test, names)
    model = C.ConvNetModel.build(C.scaled_down_architecture(len(names)), names, (1, size, size), seed)
    model, history = C.train(model, train, _train_config(epochs, seed), held_out=test)
    return LearningRun(model, E.evaluate(model, *test), history, [e.id for e in sp.test])


@dataclass
class BenefitRun:
    plain: E.EvalReport
    augmented: E.EvalReport
    n_train: int
    n_augmented: int
    n_test: int

    @property
    def improved(self) -> bool:
        return self.augmented.error_rate < self.plain.error_rate


TRAIN_BOUNDS = A.Bounds(max_translation=12.0, max_rotation=8.0, max_control_jitter=16.0)
TEST_BOUNDS = A.Bounds(max_translation=0.0, max_rotation=0.0, max_control_jitter=16.0)


def augmentation_benefit(seed: int, per_class: int = 20, counts=(2, 2, 2), test_variants: int = 5,
                         plain_epochs: int = 30, augmented_epochs: int = 8) -> BenefitRun:
    """Plain vs augmented training, scored on TPS-deformed copies of held-out images.

    The test deformations use a different seed stream from the training
    augmentation, so the test warps are never seen during training.  The
    plain model gets more epochs so both runs take a similar number of steps.
    """
    names = list(C.DEFAULT_CLASSES)
    raw = D.generate_phantoms(per_class, seed)
    entries = [D.Entry(img.id, img.id, label, image=img) for img, label in raw]
    sp = D.split(entries, 0.8, seed, names)

    def arrays(pairs):
        x = np.stack([D.preprocess(img).pixels for img, _ in pairs])[:, None]
        return x, np.array([names.index(lab) for _, lab in pairs], dtype=np.intp)

    test = arrays([(img, e.label) for e in sp.test
                   for img, _ in A.augment_image(e.image, (1, 1, test_variants), TEST_BOUNDS, seed + 1000)])
    plain = arrays([(e.image, e.label) for e in sp.train])
    augmented = arrays([(img, e.label) for e in sp.train
                        for img, _ in A.augment_image(e.image, tuple(counts), TRAIN_BOUNDS, seed)])
    reports = []
    for data, epochs in ((plain, plain_epochs), (augmented, augmented_epochs)):
        model = C.ConvNetModel.build(C.scaled_down_architecture(len(names)), names, seed=seed)
        model, _ = C.train(model, data, _train_config(epochs, seed))
        reports.append(E.evaluate(model, *test))
    return BenefitRun(reports[0], reports[1], len(plain[1]), len(augmented[1]), len(test[1]))


@dataclass
class BoundaryRun:
    profile: V.SliceProfile
    labels: list[str | None]

    def blend_gaps(self, a: str = "lungs", b: str = "liver") -> np.ndarray:
        """``|p(a) - p(b)|`` on the blend-zone slices."""
        zone = np.array([lab is None for lab in self.labels])
        return np.abs(self.profile.column(a) - self.profile.column(b))[zone]

    def pure_accuracy(self) -> float:
        idx = [i for i, lab in enumerate(self.labels) if lab is not None]
        names = self.profile.class_names
        hits = [names[self.profile.argmax()[i]] == self.labels[i] for i in idx]
        return float(np.mean(hits))


def boundary_profile(model: C.ConvNetModel, seed: int = 0, per_segment: int = 10, blend: int = 5,
                     segments: Sequence[str] = ("lungs", "liver"), threads: int | None = 1) -> BoundaryRun:
    """Profile a stacked phantom volume with linearly blended slices between segments."""
    vol, labels = V.stacked_phantom_volume([(s, per_segment) for s in segments], blend, seed,
                                           model.input_shape[1])
    return BoundaryRun(V.profile(model, vol, threads), labels)
