"""Mini-batch SGD with classical momentum for the model zoo."""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged in epoch {epoch}: loss={loss}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    arch: str
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    dataset: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def accuracy(model, ds):
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(nn.predict_batched(model, ds.images) == ds.labels))


def train(dataset, config, test=None):
    """Fit a fresh ``config.arch`` network to ``dataset``.

    The result is fully determined by ``(config, dataset)``.  Final train
    (and, when ``test`` is given, test) accuracy and per-epoch losses are
    recorded in ``model.metadata``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    init_rng = np.random.default_rng(config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    layers = nn.build_layers(config.arch, dataset.input_shape, dataset.num_classes, init_rng)
    nn.infer_shapes(dataset.input_shape, layers)
    params = [p for layer in layers for p in layer.params]
    velocity = [np.zeros_like(p) for p in params]

    x_all, y_all = dataset.images, dataset.labels
    n = len(y_all)
    losses = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, caches = nn._forward_cached(layers, x_all[idx])
            loss, dlogits = nn.cross_entropy_grad(logits, y_all[idx])
            _, grads = nn._backward(layers, caches, dlogits / len(idx), want_params=True)
            flat = [g for layer_grads in grads for g in layer_grads]
            for p, v, g in zip(params, velocity, flat):
                v *= config.momentum
                v -= config.learning_rate * g
                p += v
            total += float(loss.sum())
        epoch_loss = total / n
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(epoch, epoch_loss)
        losses.append(epoch_loss)
        log.debug("%s seed=%d epoch %d loss %.6f", config.arch, config.seed, epoch, epoch_loss)

    meta = {"arch": config.arch, "seed": int(config.seed),
            "train_config": asdict(config), "epoch_losses": losses}
    model = nn.Model(dataset.input_shape, dataset.num_classes, layers, meta)
    meta["train_acc"] = accuracy(model, dataset)
    if test is not None:
        meta["test_acc"] = accuracy(model, test)
    model = nn.Model(dataset.input_shape, dataset.num_classes, layers, meta)
    log.info("trained %s: train_acc=%.4f test_acc=%s", model.name, meta["train_acc"],
             meta.get("test_acc"))
    return model
