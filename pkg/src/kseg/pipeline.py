"""Domain configurations, losses, the training loop, and evaluation.

The three domain configurations differ in where inputs and labels live:

  SpatialToSpatial  identity input, class-index labels, cross-entropy
  KToK              packed-spectrum input, per-class packed-spectrum labels,
                    mean squared error over all coefficients
  KToSpatial        packed-spectrum input, class-index labels, cross-entropy

Per-slice feature layouts are class-major: a spatial prediction row is C
blocks of H*W logits, a k-space row is C blocks of (real planes ++ imag
planes). Masks are decoded by per-voxel argmax (KToK first applies the
inverse FFT per class channel); ties break toward the lower class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kspace
from .autodiff import Tensor
from .data import LabelVolume, Volume
from .errors import ConfigError, DimensionError, TrainingError
from .metrics import MetricsReport, aggregate, subject_metrics
from .models import Model, ModelSpec, build_model

DOMAIN_SPATIAL = "SpatialToSpatial"
DOMAIN_K_TO_K = "KToK"
DOMAIN_K_TO_SPATIAL = "KToSpatial"
DOMAINS = (DOMAIN_SPATIAL, DOMAIN_K_TO_K, DOMAIN_K_TO_SPATIAL)

# domain -> (input in k-space, labels in k-space, loss kind)
_DOMAIN_TABLE = {
    DOMAIN_SPATIAL: (False, False, "cross_entropy"),
    DOMAIN_K_TO_K: (True, True, "mse"),
    DOMAIN_K_TO_SPATIAL: (True, False, "cross_entropy"),
}


def domain_properties(domain: str) -> tuple[bool, bool, str]:
    if domain not in _DOMAIN_TABLE:
        raise ConfigError(f"unknown domain configuration {domain!r}")
    return _DOMAIN_TABLE[domain]


def input_features(domain: str, height: int, width: int) -> int:
    k_input, _, _ = domain_properties(domain)
    return kspace.packed_feature_count(height, width) if k_input else height * width


def output_features(domain: str, height: int, width: int, num_classes: int) -> int:
    _, k_labels, _ = domain_properties(domain)
    per_class = (
        kspace.packed_feature_count(height, width) if k_labels else height * width
    )
    return num_classes * per_class


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the seed fixes the entire run."""

    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be positive")


def prepare_inputs(volume: Volume, domain: str) -> np.ndarray:
    """Per-slice input feature rows (D, in_features); volume already normalized."""
    k_input, _, _ = domain_properties(domain)
    if k_input:
        return kspace.planes_to_features(kspace.volume_to_kspace(volume.data))
    d = volume.data.shape[0]
    return volume.data.reshape(d, -1)


def prepare_targets(labels: LabelVolume, domain: str, num_classes: int) -> np.ndarray:
    """(D, H*W) class indices, or (D, C * 2*H*(W/2+1)) packed spectra."""
    _, k_labels, _ = domain_properties(domain)
    d = labels.data.shape[0]
    if not k_labels:
        return labels.data.reshape(d, -1).astype(np.int64)
    per_class = kspace.labels_to_kspace(labels.data, num_classes)
    return np.concatenate(
        [kspace.planes_to_features(p) for p in per_class], axis=1
    )


def prepare_batch(samples, domain: str, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack (Volume, LabelVolume) pairs into model inputs and loss targets."""
    inputs = np.stack([prepare_inputs(v, domain) for v, _ in samples])
    targets = np.stack([prepare_targets(l, domain, num_classes) for _, l in samples])
    return inputs, targets


def cross_entropy(logits: Tensor, target_classes: np.ndarray, num_classes: int) -> Tensor:
    """Per-voxel softmax cross-entropy, averaged over all voxels.

    ``logits`` is (B, D, C*V) class-major; ``target_classes`` is (B, D, V).
    """
    b, d, feat = logits.shape
    v = feat // num_classes
    log_probs = ad.log_softmax(logits.reshape(b, d, num_classes, v), axis=2)
    onehot = np.zeros((b, d, num_classes, v))
    np.put_along_axis(onehot, target_classes[:, :, None, :], 1.0, axis=2)
    picked = log_probs * Tensor(onehot)
    return ad.scale(picked.sum(), -1.0 / (b * d * v))


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all packed coefficients of all class channels."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def make_loss(domain: str, num_classes: int):
    """Loss callable (pred Tensor, target ndarray) -> scalar Tensor."""
    _, _, kind = domain_properties(domain)
    if kind == "cross_entropy":
        return lambda pred, target: cross_entropy(pred, target, num_classes)
    return mse


def decode_prediction(features: np.ndarray, domain: str, num_classes: int,
                      height: int, width: int) -> np.ndarray:
    """Per-slice prediction rows (D, out_features) -> (D, H, W) class mask."""
    _, k_labels, _ = domain_properties(domain)
    d = features.shape[0]
    if k_labels:
        per_class = features.reshape(d, num_classes, -1)
        channels = np.stack(
            [
                kspace.kspace_to_volume(
                    kspace.features_to_planes(per_class[:, c, :], height, width)
                )
                for c in range(num_classes)
            ]
        )
    else:
        channels = features.reshape(d, num_classes, height, width).transpose(1, 0, 2, 3)
    # np.argmax returns the first maximum: ties break toward the lower class
    return channels.argmax(axis=0)


def predict_mask(model: Model, volume: Volume, domain: str, num_classes: int) -> LabelVolume:
    """Forward one (normalized) volume and decode the class mask."""
    d, h, w = volume.data.shape
    inputs = prepare_inputs(volume, domain)[None]
    out = model.forward(Tensor(inputs))
    mask = decode_prediction(out.data[0], domain, num_classes, h, w)
    return LabelVolume(mask.astype(np.uint16), spacing_mm=volume.spacing_mm)


def evaluate(model: Model, samples, domain: str, num_classes: int,
             config_id: str = "") -> MetricsReport:
    """Predict every subject and aggregate per-class and macro metrics."""
    samples = list(samples)
    if not samples:
        raise ConfigError("evaluate requires at least one subject")
    reports = []
    for volume, labels in samples:
        pred = predict_mask(model, volume, domain, num_classes)
        reports.append(subject_metrics(pred.data, labels.data, num_classes))
    return aggregate(reports, num_classes, config_id=config_id)


class Adam:
    """Adam with bias correction; state arrays keyed like the param dict."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        cfg = self.cfg
        bc1 = 1.0 - cfg.beta1 ** self.step_count
        bc2 = 1.0 - cfg.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    history: list[dict]  # epoch, train_loss, val_loss, val_dice_macro
    best_epoch: int
    steps: int = 0


def train(cfg: TrainConfig, spec: ModelSpec, domain: str,
          samples: list[tuple[Volume, LabelVolume]],
          train_idx: list[int], val_idx: list[int], num_classes: int,
          augment_fn=None) -> TrainResult:
    """Optimize the model; returns the best-validation checkpoint and history.

    ``samples`` must already be z-normalized. ``augment_fn(sample, epoch,
    index)`` may return a fresh augmented (Volume, LabelVolume) per epoch;
    when None, features are precomputed once. Fully deterministic given the
    config seed (single-threaded).
    """
    if not train_idx or not val_idx:
        raise ConfigError("train and validation splits must be non-empty")
    d, h, w = samples[0][0].data.shape
    model = build_model(spec, seed=cfg.seed)
    optimizer = Adam(model.params, cfg)
    loss_fn = make_loss(domain, num_classes)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    cache = {
        i: (prepare_inputs(samples[i][0], domain),
            prepare_targets(samples[i][1], domain, num_classes))
        for i in set(train_idx) | set(val_idx)
    } if augment_fn is None else None
    val_samples = [samples[i] for i in val_idx]

    history: list[dict] = []
    best = {"dice": -1.0, "epoch": -1, "params": None}
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        if augment_fn is None:
            epoch_data = cache
        else:
            epoch_data = {}
            for i in train_idx:
                vol, lab = augment_fn(samples[i], epoch, i)
                epoch_data[i] = (
                    prepare_inputs(vol, domain),
                    prepare_targets(lab, domain, num_classes),
                )
            for i in val_idx:
                if i not in epoch_data:
                    epoch_data[i] = (
                        prepare_inputs(samples[i][0], domain),
                        prepare_targets(samples[i][1], domain, num_classes),
                    )
        order = shuffle_rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chosen = [train_idx[j] for j in order[start : start + cfg.batch_size]]
            xb = np.stack([epoch_data[i][0] for i in chosen])
            yb = np.stack([epoch_data[i][1] for i in chosen])
            step += 1
            with ad.Tape() as tape:
                out = model.forward(Tensor(xb))
                loss = loss_fn(out, yb)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite training loss at step {step} (epoch {epoch})"
                    )
                tape.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            losses.append(value)

        val_losses = []
        for i in val_idx:
            out = model.forward(Tensor(epoch_data[i][0][None]))
            val_losses.append(loss_fn(out, epoch_data[i][1][None]).item())
        val_report = evaluate(model, val_samples, domain, num_classes)
        val_dice = val_report.macro.dice
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": float(np.mean(val_losses)),
            "val_dice_macro": val_dice,
        })
        if val_dice > best["dice"]:
            best = {
                "dice": val_dice,
                "epoch": epoch,
                "params": {k: p.data.copy() for k, p in model.params.items()},
            }
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    assert best["params"] is not None
    return TrainResult(
        best_params=best["params"],
        history=history,
        best_epoch=best["epoch"],
        steps=step,
    )
