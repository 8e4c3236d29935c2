"""End-to-end semantic transceiver for the molecular link.

Images are standardized, encoded to a k-dimensional feature vector (five
dense layers), squashed by the quantizer (three layers, sigmoid head) into
release fractions W in (0,1)^k, transmitted one symbol per slot, and the
received normalized symbols are decoded (three layers, softmax head) into
class probabilities.

Training runs the symbols through the frozen channel surrogate so that the
cross-entropy gradient reaches the encoder and quantizer; evaluation runs
them through the real slot sampler instead. Consecutive symbols of a frame
occupy consecutive slots, so each symbol's channel context is (itself, its
predecessor), with a silent slot before the frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .channel import ChannelParams, SymbolSequence, observe_frames
from .dataset import Dataset, one_hot
from .nn import DenseNet, Tensor
from .surrogate import ChannelSurrogate, TrainingDivergedError

SEMANTIC_ROLE = "semantic_model"

DEFAULT_SYMBOLS = 16
DEFAULT_CLASSES = 4
ENCODER_HIDDEN = (128, 64, 64, 32)   # five layers to the k-dim feature
QUANTIZER_HIDDEN = (32, 32)          # three layers, sigmoid head
DECODER_HIDDEN = (64, 32)            # three layers, softmax head


@dataclass
class SemanticModel:
    """Encoder/quantizer/decoder stack plus input standardization."""

    encoder: DenseNet
    quantizer: DenseNet
    decoder: DenseNet
    symbols: int
    num_classes: int
    image_shape: tuple[int, int, int]
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    input_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def parameters(self) -> list[Tensor]:
        return (self.encoder.parameters() + self.quantizer.parameters()
                + self.decoder.parameters())

    def state_arrays(self) -> list[np.ndarray]:
        return (self.encoder.state_arrays() + self.quantizer.state_arrays()
                + self.decoder.state_arrays())

    def standardize(self, images: np.ndarray) -> np.ndarray:
        return (np.asarray(images, dtype=float) - self.input_mean) / self.input_std

    def save(self, path) -> None:
        meta = {
            "k": self.symbols,
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "input_mean": [float(v) for v in self.input_mean],
            "input_std": [float(v) for v in self.input_std],
        }
        nets = {"encoder": self.encoder, "quantizer": self.quantizer, "decoder": self.decoder}
        nn.save_checkpoint(path, SEMANTIC_ROLE, nets, meta)

    @classmethod
    def load(cls, path) -> "SemanticModel":
        _, nets, meta = nn.load_checkpoint(path, expect_role=SEMANTIC_ROLE)
        return cls(
            encoder=nets["encoder"], quantizer=nets["quantizer"], decoder=nets["decoder"],
            symbols=int(meta["k"]), num_classes=int(meta["num_classes"]),
            image_shape=tuple(meta["image_shape"]),
            input_mean=np.array(meta["input_mean"], dtype=float),
            input_std=np.array(meta["input_std"], dtype=float),
        )


def build_semantic_model(
    rng: np.random.Generator,
    image_shape: tuple[int, int, int] = (16, 16, 1),
    symbols: int = DEFAULT_SYMBOLS,
    num_classes: int = DEFAULT_CLASSES,
    input_mean: np.ndarray | None = None,
    input_std: np.ndarray | None = None,
) -> SemanticModel:
    d = int(np.prod(image_shape))
    encoder = DenseNet([d, *ENCODER_HIDDEN, symbols],
                       ["leaky_relu"] * 4 + ["identity"], rng=rng)
    quantizer = DenseNet([symbols, *QUANTIZER_HIDDEN, symbols],
                         ["leaky_relu"] * 2 + ["sigmoid"], rng=rng)
    decoder = DenseNet([symbols, *DECODER_HIDDEN, num_classes],
                       ["leaky_relu"] * 2 + ["softmax"], rng=rng)
    if input_mean is None:
        input_mean = np.zeros(d)
    if input_std is None:
        input_std = np.ones(d)
    return SemanticModel(
        encoder=encoder, quantizer=quantizer, decoder=decoder,
        symbols=symbols, num_classes=num_classes, image_shape=image_shape,
        input_mean=np.asarray(input_mean, dtype=float),
        input_std=np.asarray(input_std, dtype=float),
    )


def standardization_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std of the training set (std floored at 1e-6)."""
    images = np.asarray(images, dtype=float)
    return images.mean(axis=0), np.maximum(images.std(axis=0), 1e-6)


def encode_batch(model: SemanticModel, images: np.ndarray) -> Tensor:
    """Release fractions W in (0,1)^(B,k) for a standardized image batch."""
    x = Tensor(model.standardize(np.atleast_2d(images)))
    return model.quantizer.forward(model.encoder.forward(x))


def encode(model: SemanticModel, image) -> SymbolSequence:
    """Release fractions for one image as an immutable symbol frame."""
    image = np.asarray(image, dtype=float).reshape(-1)
    expected = int(np.prod(model.image_shape))
    if image.size != expected:
        raise ValueError(f"image has {image.size} values, model expects {expected}")
    w = encode_batch(model, image[None, :]).data[0]
    return SymbolSequence(w)


def _frame_contexts(w: Tensor) -> Tensor:
    """Per-symbol (current, previous) context rows, silent before the frame.

    (B, k) releases become (B*k, 2) rows ordered frame-major, so gradients
    reach each symbol both from its own slot and from the successor's ISI
    context.
    """
    b, k = w.data.shape
    prev = nn.concat([Tensor(np.zeros((b, 1))), w[:, : k - 1]], axis=1)
    return nn.concat([nn.reshape(w, (b * k, 1)), nn.reshape(prev, (b * k, 1))], axis=1)


def transmit_train(
    rng: np.random.Generator | None,
    model: SemanticModel,
    surrogate: ChannelSurrogate,
    images: np.ndarray,
    frozen_noise=None,
) -> Tensor:
    """Class probabilities with the full gradient path through the surrogate.

    The surrogate must be frozen; its parameters receive no gradient but
    the sampled symbols stay differentiable w.r.t. the transmit side.
    """
    if not surrogate.frozen:
        raise ValueError("channel surrogate must be frozen before joint training")
    w = encode_batch(model, images)
    b, k = w.data.shape
    ctx = _frame_contexts(w)
    w_rx = surrogate.sample_tensor(ctx, rng, frozen_noise=frozen_noise)
    return model.decoder.forward(nn.reshape(w_rx, (b, k)))


def transmit_eval(
    rng: np.random.Generator,
    model: SemanticModel,
    p: ChannelParams,
    images: np.ndarray,
    t: float | None = None,
) -> np.ndarray:
    """Class probabilities through the real slot sampler (no gradients)."""
    w = encode_batch(model, images).data
    w_rx = observe_frames(rng, p, w, t)
    return model.decoder.forward(Tensor(w_rx)).data


def report_bcr(model: SemanticModel, input_dims: tuple[int, int, int] | None = None) -> float:
    """Bandwidth compression ratio: symbols per frame over input values."""
    dims = input_dims if input_dims is not None else model.image_shape
    return model.symbols / float(np.prod(dims))


def wilson_interval(successes: int, total: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if total <= 0:
        raise ValueError("total must be positive")
    phat = successes / total
    denom = 1.0 + z * z / total
    center = (phat + z * z / (2 * total)) / denom
    half = z * math.sqrt(phat * (1 - phat) / total + z * z / (4 * total * total)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == total else min(1.0, center + half)
    return lo, hi


@dataclass(frozen=True)
class TrainConfig:
    """End-to-end training settings."""

    epochs: int = 40
    batch_size: int = 64
    lr: float = 2e-2
    momentum: float = 0.9
    val_fraction: float = 0.1
    patience: int = 8            # epochs without val-loss improvement
    min_delta: float = 1e-4


def train_end_to_end(
    rng: np.random.Generator,
    train_set: Dataset,
    surrogate: ChannelSurrogate,
    cfg: TrainConfig = TrainConfig(),
    model: SemanticModel | None = None,
) -> tuple[SemanticModel, dict]:
    """Minimize mean cross-entropy through the frozen surrogate.

    Returns the trained model and per-epoch history (train/val loss and
    accuracy). Stops early once the validation loss has not improved by
    ``min_delta`` for ``patience`` epochs; on a non-finite loss the last
    finite-epoch parameters are restored and TrainingDivergedError raised.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if not surrogate.frozen:
        raise ValueError("channel surrogate must be frozen before joint training")
    images, labels = train_set.images, train_set.labels
    n_val = max(1, int(len(labels) * cfg.val_fraction))
    perm = rng.permutation(len(labels))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    num_classes = train_set.num_classes
    if model is None:
        mean, std = standardization_stats(images[tr_idx])
        model = build_semantic_model(
            rng, image_shape=(train_set.height, train_set.width, train_set.channels),
            num_classes=num_classes, input_mean=mean, input_std=std,
        )
    opt = nn.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    history: dict = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": []}
    best_val = math.inf
    stale = 0
    last_good = model.state_arrays()

    def batch_eval(idx) -> tuple[float, float]:
        y = transmit_train(rng, model, surrogate, images[idx])
        loss = nn.cross_entropy(y.data, one_hot(labels[idx], num_classes))
        acc = float((y.data.argmax(axis=1) == labels[idx]).mean())
        return loss, acc

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr_idx))
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = tr_idx[order[start:start + cfg.batch_size]]
            y = transmit_train(rng, model, surrogate, images[sel])
            loss = nn.cross_entropy(y, one_hot(labels[sel], num_classes))
            value = float(loss.data)
            if not math.isfinite(value):
                model.encoder.load_state_arrays(last_good[:len(model.encoder.parameters())])
                rest = last_good[len(model.encoder.parameters()):]
                nq = len(model.quantizer.parameters())
                model.quantizer.load_state_arrays(rest[:nq])
                model.decoder.load_state_arrays(rest[nq:])
                raise TrainingDivergedError(
                    f"cross-entropy became non-finite at epoch {epoch}", history
                )
            loss.backward()
            opt.step()
            epoch_loss += value * len(sel)
            epoch_correct += int((y.data.argmax(axis=1) == labels[sel]).sum())
        history["train_loss"].append(epoch_loss / len(tr_idx))
        history["train_acc"].append(epoch_correct / len(tr_idx))
        val_loss, val_acc = batch_eval(val_idx)
        history["val_loss"].append(val_loss)
        history["val_acc"].append(val_acc)
        last_good = model.state_arrays()
        if val_loss < best_val - cfg.min_delta:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return model, history


def evaluate_accuracy(
    rng: np.random.Generator,
    model: SemanticModel,
    p: ChannelParams,
    test_set: Dataset,
    n_trials: int = 3,
) -> tuple[float, float, float]:
    """Fraction correct through the real channel, averaged over noise draws.

    Each trial re-samples every test frame's channel noise from an
    independent per-trial stream; the pooled correct count gives a 95%
    binomial (Wilson) interval.
    """
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    trial_seeds = rng.integers(0, 2 ** 63 - 1, size=n_trials)
    correct = 0
    total = 0
    for seed in trial_seeds:
        trial_rng = np.random.default_rng(int(seed))
        y = transmit_eval(trial_rng, model, p, test_set.images)
        correct += int((y.argmax(axis=1) == test_set.labels).sum())
        total += len(test_set)
    lo, hi = wilson_interval(correct, total)
    return correct / total, lo, hi
