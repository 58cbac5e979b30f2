"""Minimal patch classifier with hand-written gradients.

A shared linear+ReLU encoder embeds each (H/P) x (W/P) patch; a patch
head scores every embedding separately and an image head scores the mean
embedding:

    f_n          = relu(W_embed^T vec(patch_n) + b_embed)
    patch_logits = W_patch^T f_n + b_patch          (one row per patch)
    image_logits = W_img^T mean_n(f_n) + b_img

Gradients for all parameter blocks and for the input pixels are computed
analytically, which keeps training, gradient checking, and sign-based
adversarial probing free of autodiff dependencies.  All parameters and
intermediate activations are float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses
from .data import Dataset, one_hot
from .errors import ConfigError, FormatError, NumericError
from .masks import PatchMask, full_mask, sample_random_mask
from .mixing import MixedSample, patchmix
from .rng import RngKey

PARAM_FIELDS = ("w_embed", "b_embed", "w_patch", "b_patch", "w_img", "b_img")
WEIGHT_FIELDS = ("w_embed", "w_patch", "w_img")

MODEL_MAGIC = b"PMXM"
MODEL_VERSION = 1
# magic, version, grid_size, class_count, hidden_dim, patch_pixels
_MODEL_HEADER = struct.Struct("<4sIIIII")


@dataclass
class ReferenceModel:
    grid_size: int
    class_count: int
    hidden_dim: int
    patch_pixels: int
    w_embed: np.ndarray  # (patch_pixels, hidden_dim)
    b_embed: np.ndarray  # (hidden_dim,)
    w_patch: np.ndarray  # (hidden_dim, class_count)
    b_patch: np.ndarray  # (class_count,)
    w_img: np.ndarray    # (hidden_dim, class_count)
    b_img: np.ndarray    # (class_count,)

    @classmethod
    def initialize(
        cls,
        grid_size: int,
        class_count: int,
        hidden_dim: int,
        patch_pixels: int,
        rng: np.random.Generator,
    ) -> "ReferenceModel":
        """Gaussian weights with std sqrt(2 / fan_in); zero biases."""
        if min(grid_size, class_count, hidden_dim, patch_pixels) < 1:
            raise ConfigError("model dimensions must be positive")
        return cls(
            grid_size=grid_size,
            class_count=class_count,
            hidden_dim=hidden_dim,
            patch_pixels=patch_pixels,
            w_embed=rng.normal(0.0, np.sqrt(2.0 / patch_pixels), (patch_pixels, hidden_dim)),
            b_embed=np.zeros(hidden_dim),
            w_patch=rng.normal(0.0, np.sqrt(2.0 / hidden_dim), (hidden_dim, class_count)),
            b_patch=np.zeros(class_count),
            w_img=rng.normal(0.0, np.sqrt(2.0 / hidden_dim), (hidden_dim, class_count)),
            b_img=np.zeros(class_count),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "ReferenceModel":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in PARAM_FIELDS:
            kwargs[name] = kwargs[name].copy()
        return ReferenceModel(**kwargs)

    @property
    def patch_count(self) -> int:
        return self.grid_size**2


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    alpha: float = 1.0
    grid_size: int = 4
    eta_min: float = 0.0
    loss_mode: str = "both"
    mix_probability: float = 1.0
    hidden_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be at least 1")
        if self.eta_min < 0 or self.eta_min > self.lr0:
            raise ConfigError("eta_min must lie in [0, lr0]")
        if self.loss_mode not in losses.LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ConfigError("mix_probability must lie in [0, 1]")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_top1: float
    val_patch_acc: float


def patchify(images: np.ndarray, grid_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, P*P, patch_pixels), patches in row-major grid order."""
    b, h, w, c = images.shape
    if h % grid_size != 0 or w % grid_size != 0:
        raise ConfigError(f"image {w}x{h} not divisible by grid size {grid_size}")
    ph, pw = h // grid_size, w // grid_size
    x = images.reshape(b, grid_size, ph, grid_size, pw, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_size * grid_size, ph * pw * c)


def unpatchify(patch_grads: np.ndarray, shape: tuple, grid_size: int) -> np.ndarray:
    """Inverse of :func:`patchify` for gradient layouts."""
    b, h, w, c = shape
    ph, pw = h // grid_size, w // grid_size
    x = patch_grads.reshape(b, grid_size, grid_size, ph, pw, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _forward_arrays(model: ReferenceModel, images64: np.ndarray):
    patches = patchify(images64, model.grid_size)
    if patches.shape[2] != model.patch_pixels:
        raise ConfigError(
            f"model expects {model.patch_pixels} pixels per patch, "
            f"input provides {patches.shape[2]}"
        )
    pre = patches @ model.w_embed + model.b_embed
    feats = np.maximum(pre, 0.0)
    mean_feats = feats.mean(axis=1)
    patch_logits = feats @ model.w_patch + model.b_patch
    image_logits = mean_feats @ model.w_img + model.b_img
    return patches, pre, feats, mean_feats, patch_logits, image_logits


def forward_batch(model: ReferenceModel, images: np.ndarray):
    """Return (patch_logits, image_logits) for a stack of images."""
    out = _forward_arrays(model, np.asarray(images, dtype=np.float64))
    return out[4], out[5]


def forward(model: ReferenceModel, image: np.ndarray) -> losses.ModelOutputs:
    """Score a single image."""
    if image.ndim != 3:
        raise ConfigError("image must have shape (height, width, channels)")
    patch_logits, image_logits = forward_batch(model, image[None])
    return losses.ModelOutputs(patch_logits[0], image_logits[0])


def batch_gradients(
    model: ReferenceModel,
    images: np.ndarray,
    image_targets: np.ndarray,
    patch_labels: np.ndarray | None,
    loss_mode: str,
):
    """Mean-over-batch loss with parameter and per-sample input gradients.

    Returns ``(loss, grads, input_grads)`` where ``grads`` maps parameter
    names to arrays of matching shape and ``input_grads`` has the shape
    of ``images``.  All gradients are of the mean-over-batch objective.
    """
    if loss_mode not in losses.LOSS_MODES:
        raise ConfigError(f"unknown loss mode {loss_mode!r}")
    images64 = np.asarray(images, dtype=np.float64)
    b = images64.shape[0]
    if b < 1:
        raise ConfigError("empty batch")
    n = model.patch_count
    need_patch = loss_mode != "image_only"
    need_image = loss_mode != "patch_only"
    if need_patch:
        if patch_labels is None:
            raise ConfigError(f"loss mode {loss_mode!r} requires patch labels")
        patch_labels = np.asarray(patch_labels, dtype=np.int64)
        if patch_labels.shape != (b, n):
            raise ConfigError(
                f"patch labels shape {patch_labels.shape}, expected {(b, n)}"
            )
        if patch_labels.min() < 0 or patch_labels.max() >= model.class_count:
            raise ConfigError(f"patch label outside [0, {model.class_count})")
    image_targets = np.asarray(image_targets, dtype=np.float64)
    if image_targets.shape != (b, model.class_count):
        raise ConfigError(
            f"image targets shape {image_targets.shape}, "
            f"expected {(b, model.class_count)}"
        )

    patches, pre, feats, mean_feats, patch_logits, image_logits = _forward_arrays(
        model, images64
    )

    # Loss values (per sample, then mean).
    l_image = np.zeros(b)
    l_patch = np.zeros(b)
    d_img = np.zeros_like(image_logits)
    d_patch = None
    if need_image:
        img_logp = losses.log_softmax(image_logits)
        l_image = -(image_targets * img_logp).sum(axis=1)
        d_img = np.exp(img_logp) - image_targets
        losses.record_loss_eval("image", b)
    if need_patch:
        patch_logp = losses.log_softmax(patch_logits)
        picked = np.take_along_axis(patch_logp, patch_labels[..., None], axis=2)
        l_patch = -picked[..., 0].sum(axis=1)
        d_patch = np.exp(patch_logp)
        np.put_along_axis(
            d_patch,
            patch_labels[..., None],
            np.take_along_axis(d_patch, patch_labels[..., None], axis=2) - 1.0,
            axis=2,
        )
        losses.record_loss_eval("patch", b)

    per_sample = np.array(
        [losses.combined_loss(li, lp, model.grid_size, loss_mode) for li, lp in zip(l_image, l_patch)]
    )
    loss = float(per_sample.mean())
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")

    # Chain rule, scaled for the mean over the batch and the loss mode.
    if loss_mode == "both":
        s_img, s_patch = 0.5 / b, 0.5 / (b * n)
    elif loss_mode == "image_only":
        s_img, s_patch = 1.0 / b, 0.0
    else:  # patch_only
        s_img, s_patch = 0.0, 1.0 / (b * n)

    g_img = d_img * s_img                          # (B, C)
    grads = {name: np.zeros_like(getattr(model, name)) for name in PARAM_FIELDS}
    d_feats = np.zeros_like(feats)
    if need_image:
        grads["w_img"] = mean_feats.T @ g_img
        grads["b_img"] = g_img.sum(axis=0)
        d_feats += (g_img @ model.w_img.T)[:, None, :] / n
    if need_patch and s_patch > 0.0:
        g_patch = d_patch * s_patch                # (B, n, C)
        grads["w_patch"] = np.tensordot(feats, g_patch, axes=([0, 1], [0, 1]))
        grads["b_patch"] = g_patch.sum(axis=(0, 1))
        d_feats += g_patch @ model.w_patch.T
    d_pre = d_feats * (pre > 0.0)
    grads["w_embed"] = np.tensordot(patches, d_pre, axes=([0, 1], [0, 1]))
    grads["b_embed"] = d_pre.sum(axis=(0, 1))
    d_patches = d_pre @ model.w_embed.T
    input_grads = unpatchify(d_patches, images64.shape, model.grid_size)
    return loss, grads, input_grads


def backward(model: ReferenceModel, batch: Sequence[MixedSample], loss_mode: str):
    """Gradients of the mean loss over a batch of mixed samples."""
    if not batch:
        raise ConfigError("empty batch")
    images = np.stack([s.image for s in batch])
    targets = np.stack([s.image_label for s in batch])
    patch_labels = None
    if loss_mode != "image_only":
        if any(s.patch_labels is None for s in batch):
            raise ConfigError(f"loss mode {loss_mode!r} requires patch labels")
        patch_labels = np.stack([s.patch_labels for s in batch])
    return batch_gradients(model, images, targets, patch_labels, loss_mode)


def cosine_lr(epoch: int, total_epochs: int, lr0: float, eta_min: float = 0.0) -> float:
    """Cosine annealing from lr0 (epoch 0) down to eta_min (epoch = total)."""
    if epoch < 0 or (total_epochs >= 0 and epoch > total_epochs):
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    if total_epochs <= 0:
        return lr0
    return eta_min + (lr0 - eta_min) * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0


def init_velocity(model: ReferenceModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(model, name)) for name in PARAM_FIELDS}


def sgd_nesterov_step(
    model: ReferenceModel,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> ReferenceModel:
    """One Nesterov momentum step, updating model and velocity in place.

    Weight decay applies to weight matrices only, never to biases:

        g' = g + wd * w
        v  = momentum * v + g'
        w  = w - lr * (g' + momentum * v)
    """
    for name in PARAM_FIELDS:
        w = getattr(model, name)
        g = grads[name]
        if weight_decay != 0.0 and name in WEIGHT_FIELDS:
            g = g + weight_decay * w
        v = velocity[name]
        v *= momentum
        v += g
        w -= lr * (g + momentum * v)
    return model


def evaluate_model(model: ReferenceModel, dataset: Dataset, batch_size: int = 256):
    """(top-1 accuracy, patch accuracy) with every patch labeled by the image."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    correct = 0
    patch_correct = 0
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        patch_logits, image_logits = forward_batch(model, dataset.images[start:stop])
        labels = dataset.labels[start:stop]
        correct += int((np.argmax(image_logits, axis=1) == labels).sum())
        patch_preds = np.argmax(patch_logits, axis=2)
        patch_correct += int((patch_preds == labels[:, None]).sum())
    top1 = correct / len(dataset)
    patch_acc = patch_correct / (len(dataset) * model.patch_count)
    return top1, patch_acc


def _train_loop(
    model: ReferenceModel,
    cfg: TrainConfig,
    val: Dataset,
    batch_source: Callable[[int, np.random.Generator], Iterable[list[MixedSample]]],
    stream_tag: str,
) -> list[EpochMetrics]:
    """Shared SGD driver.  ``batch_source(epoch, rng)`` yields sample batches.

    The learning-rate schedule spans epochs 0 .. epochs-1 so the final
    epoch runs exactly at eta_min.
    """
    velocity = init_velocity(model)
    key = RngKey(cfg.seed)
    span = cfg.epochs - 1
    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, span, cfg.lr0, cfg.eta_min)
        rng = key.child(stream_tag, "epoch", epoch).generator()
        batch_losses = []
        for index, batch in enumerate(batch_source(epoch, rng)):
            try:
                loss, grads, _ = backward(model, batch, cfg.loss_mode)
            except NumericError as err:
                raise NumericError(f"epoch {epoch}, batch {index}: {err}") from err
            sgd_nesterov_step(model, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            batch_losses.append(loss)
        if not batch_losses:
            raise ConfigError("training produced no batches")
        top1, patch_acc = evaluate_model(model, val)
        metrics.append(
            EpochMetrics(epoch, float(lr), float(np.mean(batch_losses)), top1, patch_acc)
        )
    return metrics


def _check_train_inputs(train: Dataset, val: Dataset, cfg: TrainConfig) -> None:
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    if train.images.shape[1:] != val.images.shape[1:]:
        raise ConfigError("train and validation image shapes differ")
    if train.class_count != val.class_count:
        raise ConfigError("train and validation class counts differ")
    if train.height % cfg.grid_size or train.width % cfg.grid_size:
        raise ConfigError(
            f"images {train.width}x{train.height} not divisible by grid size {cfg.grid_size}"
        )


def train_random_patchmix(
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    mask_sampler: Callable[[int, float, np.random.Generator], PatchMask] | None = None,
):
    """Train a model on randomly grid-mixed batches.

    Every epoch shuffles the training set, pairs each batch element with
    a random partner from the same batch, and composes the pair under a
    fresh random mask (an all-ones mask when the per-sample mix draw
    fails, so mix_probability = 0 reduces to plain classifier training).

    Returns ``(model, per-epoch metrics)``.
    """
    _check_train_inputs(train, val, cfg)
    sampler = mask_sampler if mask_sampler is not None else sample_random_mask
    p = cfg.grid_size
    ones = full_mask(p)

    def batches(epoch: int, rng: np.random.Generator):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            partner = rng.permutation(len(idx))
            batch = []
            for pos, i in enumerate(idx):
                j = int(idx[partner[pos]])
                if rng.random() < cfg.mix_probability:
                    mask = sampler(p, cfg.alpha, rng)
                else:
                    mask = ones
                batch.append(
                    patchmix(
                        train.images[i],
                        int(train.labels[i]),
                        train.images[j],
                        int(train.labels[j]),
                        mask,
                        train.class_count,
                    )
                )
            yield batch

    ppc = (train.height // p) * (train.width // p) * train.channels
    model = ReferenceModel.initialize(
        p,
        train.class_count,
        cfg.hidden_dim,
        ppc,
        RngKey(cfg.seed).child("rand-train", "init").generator(),
    )
    metrics = _train_loop(model, cfg, val, batches, "rand-train")
    return model, metrics


def fgsm_attack(
    model: ReferenceModel, image: np.ndarray, label: int, epsilon: float
) -> np.ndarray:
    """One-step sign attack against the image head.

    x_adv = clip(x + epsilon * sign(d image_loss / d x), 0, 1)
    """
    adv = fgsm_attack_batch(model, image[None], np.asarray([label]), epsilon)
    return adv[0]


def fgsm_attack_batch(
    model: ReferenceModel, images: np.ndarray, labels: np.ndarray, epsilon: float
) -> np.ndarray:
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    targets = np.stack([one_hot(int(y), model.class_count) for y in labels])
    _, _, input_grads = batch_gradients(model, images, targets, None, "image_only")
    adv = images.astype(np.float64) + epsilon * np.sign(input_grads)
    return np.clip(adv, 0.0, 1.0)


def adversarial_accuracy(
    model: ReferenceModel, dataset: Dataset, epsilon: float, batch_size: int = 256
) -> float:
    """Top-1 accuracy under the one-step sign attack."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        labels = dataset.labels[start:stop]
        adv = fgsm_attack_batch(model, dataset.images[start:stop], labels, epsilon)
        _, image_logits = forward_batch(model, adv)
        correct += int((np.argmax(image_logits, axis=1) == labels).sum())
    return correct / len(dataset)


def save_model(model: ReferenceModel, path) -> None:
    """Write a model checkpoint (magic ``PMXM``).

    Header u32 fields: version, grid size, class count, hidden dim, patch
    pixels; then each parameter block as little-endian float64 in
    declaration order.
    """
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        model.grid_size,
        model.class_count,
        model.hidden_dim,
        model.patch_pixels,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in PARAM_FIELDS:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_model(path) -> ReferenceModel:
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, grid_size, class_count, hidden_dim, patch_pixels = (
        _MODEL_HEADER.unpack_from(raw)
    )
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shapes = {
        "w_embed": (patch_pixels, hidden_dim),
        "b_embed": (hidden_dim,),
        "w_patch": (hidden_dim, class_count),
        "b_patch": (class_count,),
        "w_img": (hidden_dim, class_count),
        "b_img": (class_count,),
    }
    expected = _MODEL_HEADER.size + sum(
        8 * int(np.prod(shape)) for shape in shapes.values()
    )
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = _MODEL_HEADER.size
    blocks = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        blocks[name] = (
            np.frombuffer(raw, "<f8", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += 8 * count
    return ReferenceModel(
        grid_size=grid_size,
        class_count=class_count,
        hidden_dim=hidden_dim,
        patch_pixels=patch_pixels,
        **blocks,
    )


def metrics_csv_lines(metrics: Sequence[EpochMetrics]) -> list[str]:
    """One comma-separated line per epoch: epoch, lr, train_loss, val_top1, val_patch_acc."""
    return [
        f"{m.epoch},{m.lr!r},{m.train_loss!r},{m.val_top1!r},{m.val_patch_acc!r}"
        for m in metrics
    ]


def save_metrics(metrics: Sequence[EpochMetrics], path) -> None:
    Path(path).write_text("\n".join(metrics_csv_lines(metrics)) + "\n")


def load_metrics(path) -> list[EpochMetrics]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"bad metrics line {line!r}")
        rows.append(
            EpochMetrics(
                int(parts[0]), float(parts[1]), float(parts[2]),
                float(parts[3]), float(parts[4]),
            )
        )
    return rows
