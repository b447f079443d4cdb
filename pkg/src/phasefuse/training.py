"""Loss, optimizer, schedule, augmentation, fold assignment and the training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.ndimage import affine_transform, zoom

from . import tensor as T
from .enhance import EnhancementConfig, build_filter_bank, enhance
from .errors import ConfigError, ContractError, DataError, ShapeError
from .metrics import confusion_matrix, roc_auc_ovr
from .model import FusionModel, ModelConfig
from .tensor import Tensor


@dataclass
class AugmentConfig:
    enabled: bool = True
    translate: float = 0.1  # fraction of the image size per axis
    rotate: float = 10.0  # degrees
    brightness_low: float = 0.8
    brightness_high: float = 1.25
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.translate < 0 or self.rotate < 0 or not 0 <= self.flip_prob <= 1:
            raise ConfigError("augmentation ranges must be non-negative and flip_prob in [0, 1]")
        if not 0 < self.brightness_low <= self.brightness_high:
            raise ConfigError("need 0 < brightness_low <= brightness_high")


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 35
    warmup_epochs: int = 4
    batch_size: int = 32
    seed: int = 0
    folds: int = 5
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = _from_dict(AugmentConfig, self.augment, "augment")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d, "training")

    def to_dict(self) -> dict:
        return asdict(self)


def _from_dict(cls, d: dict, section: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


# ------------------------------------------------------------------- loss


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid binary cross-entropy over every element of ``(B, K)``."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_loss: logits {logits.shape} vs targets {t.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=-1) == 1)):
        raise ContractError("bce_loss: every target row must be one-hot")
    z = logits.data
    # softplus(z) - t*z == -[t log s(z) + (1-t) log(1-s(z))]
    loss = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - t * z
    n = z.size
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return T._make(np.array([loss.sum() / n]), (logits,), lambda g: (g[0] * (sig - t) / n,))


def one_hot(labels, k: int = 3) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


# -------------------------------------------------------------- optimizer


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9):
    """``v <- momentum*v + g``; ``p <- p - lr*v``.  Returns new (params, velocity)."""
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        v = velocity.get(k)
        if v is None:
            v = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"sgd: shape mismatch for {k}: {p.shape}, {g.shape}, {v.shape}")
        v = momentum * v + g
        new_v[k] = v
        new_p[k] = p - lr * v
    return new_p, new_v


def cosine_warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


# ------------------------------------------------------------ augmentation


@dataclass
class Transform:
    dy: float = 0.0
    dx: float = 0.0
    angle: float = 0.0  # degrees
    brightness: float = 1.0
    flip: bool = False


def sample_transform(rng: np.random.Generator, cfg: AugmentConfig, size: int) -> Transform:
    # draw every variate unconditionally so toggles never shift the stream
    dy, dx = rng.uniform(-1, 1, 2) * cfg.translate * size
    angle = rng.uniform(-1, 1) * cfg.rotate
    bright = math.exp(rng.uniform(math.log(cfg.brightness_low), math.log(cfg.brightness_high)))
    flip = bool(rng.uniform() < cfg.flip_prob)
    if not cfg.enabled:
        return Transform()
    return Transform(dy, dx, angle, bright, flip)


def resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    factors = (size / h, size / w) + (1,) * (img.ndim - 2)
    return zoom(img, factors, order=1, mode="nearest", grid_mode=True)


def _geometric(ch: np.ndarray, t: Transform) -> np.ndarray:
    if t.angle or t.dy or t.dx:
        h, w = ch.shape
        c = np.array([(h - 1) / 2, (w - 1) / 2])
        a = math.radians(t.angle)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        # output pixel o samples input rot @ (o - c) + c - shift
        offset = c - rot @ c - rot @ np.array([t.dy, t.dx])
        ch = affine_transform(ch, rot, offset=offset, order=1, mode="constant", cval=0.0)
    if t.flip:
        ch = ch[:, ::-1]
    return ch


def apply_transform(img: np.ndarray, t: Transform, photometric: bool = True) -> np.ndarray:
    """Geometric then (optionally) brightness transform, channel by channel; no standardization."""
    chans = img[..., None] if img.ndim == 2 else img
    out = np.stack([_geometric(chans[..., i], t) for i in range(chans.shape[-1])], axis=-1)
    if photometric and t.brightness != 1.0:
        out = np.clip(out * t.brightness, 0.0, 1.0)
    return out[..., 0] if img.ndim == 2 else out


def standardize(img: np.ndarray) -> np.ndarray:
    chans = img[..., None] if img.ndim == 2 else img
    mu = chans.mean(axis=(0, 1), keepdims=True)
    sd = chans.std(axis=(0, 1), keepdims=True)
    out = (chans - mu) / np.where(sd > 1e-8, sd, 1.0)
    return out[..., 0] if img.ndim == 2 else out


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig, size: int | None = None) -> np.ndarray:
    """resize, translate, rotate, brightness, flip, standardize."""
    size = size or img.shape[0]
    img = resize(img, size)
    return standardize(apply_transform(img, sample_transform(rng, cfg, size)))


def augment_pair(cxr: np.ndarray, mf: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
                 size: int) -> tuple[np.ndarray, np.ndarray]:
    """Augment a (grayscale, multi-feature) pair with one shared geometric draw.

    Brightness is applied to the grayscale image only: the multi-feature
    image of a rescaled input is unchanged, so skipping it keeps the pair
    consistent.  The grayscale output is replicated to three channels.
    """
    cxr, mf = resize(cxr, size), resize(mf, size)
    t = sample_transform(rng, cfg, size)
    a = standardize(apply_transform(cxr, t))
    b = standardize(apply_transform(mf, t, photometric=False))
    return np.repeat(a[..., None], 3, axis=-1), b


def eval_pair(cxr: np.ndarray, mf: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    a = standardize(resize(cxr, size))
    return np.repeat(a[..., None], 3, axis=-1), standardize(resize(mf, size))


# ------------------------------------------------------------------ folds


def stratified_kfold(labels, k: int, seed: int) -> np.ndarray:
    """Per-class seeded shuffle followed by round-robin fold assignment."""
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ConfigError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = np.full(labels.shape, -1, dtype=int)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ConfigError(f"class {c} has {idx.size} samples, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % k
    return folds


# -------------------------------------------------------------- the loop


@dataclass
class Dataset:
    cxr: np.ndarray  # (N, H, W) in [0, 1]
    mf: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray
    folds: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def prepare_dataset(manifest, size: int, enh_cfg: EnhancementConfig | None = None) -> Dataset:
    """Load, resize and enhance every image listed in ``manifest``."""
    from .data import read_image

    if len(manifest) == 0:
        raise DataError("manifest is empty")
    missing = [str(e.path) for e in manifest.entries if not e.path.is_file()]
    if missing:
        raise DataError(f"{len(missing)} missing image(s), first: {missing[0]}")
    enh_cfg = enh_cfg or EnhancementConfig()
    bank = build_filter_bank(enh_cfg, (size, size))
    cxr, mf = [], []
    for e in manifest.entries:
        img = resize(read_image(e.path), size)
        cxr.append(img)
        mf.append(enhance(img, enh_cfg, bank).stack())
    return Dataset(np.stack(cxr), np.stack(mf), manifest.labels, manifest.folds)


@dataclass
class TrainResult:
    model: FusionModel
    history: list[dict]
    config: dict


def _batches(x_idx, bs):
    for i in range(0, len(x_idx), bs):
        yield x_idx[i:i + bs]


def _eval_batches(data: "Dataset", idx, size: int, batch_size: int = 64):
    """``(cxr, mf)`` batches under the evaluation transform."""
    for b in _batches(np.asarray(idx), batch_size):
        pairs = [eval_pair(data.cxr[i], data.mf[i], size) for i in b]
        yield np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def predict_scores(model: FusionModel, data: Dataset, idx, batch_size: int = 64) -> np.ndarray:
    """Sigmoid class scores for the samples ``idx`` (evaluation transform only)."""
    out = [1.0 / (1.0 + np.exp(-model(cxr, mf).data))
           for cxr, mf in _eval_batches(data, idx, model.arch.image_size, batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.num_classes))


def train(cfg: TrainConfig, data: Dataset, arch: ModelConfig, fold: int | None = None,
          callback=None) -> TrainResult:
    """Train one model; ``fold`` selects the held-out fold (``None`` trains on everything)."""
    if len(data) == 0:
        raise DataError("empty dataset")
    k = arch.num_classes
    counts = np.bincount(data.labels, minlength=k)
    if np.any(counts == 0):
        raise DataError(f"class {int(np.flatnonzero(counts == 0)[0])} has no samples")
    if fold is None:
        train_idx, val_idx = np.arange(len(data)), np.array([], dtype=int)
    else:
        folds = data.folds if data.folds is not None else stratified_kfold(data.labels, cfg.folds, cfg.seed)
        if not 0 <= fold < cfg.folds:
            raise ConfigError(f"fold {fold} outside [0, {cfg.folds})")
        train_idx, val_idx = np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)
        if train_idx.size == 0:
            raise DataError(f"fold {fold} leaves no training samples")

    seeds = np.random.SeedSequence([cfg.seed, -1 if fold is None else fold]).spawn(2)
    model = FusionModel.init(arch, int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    if arch.head_data_init:
        model.init_head_from_data(_eval_batches(data, train_idx, arch.image_size))
    params = model.params
    velocity: dict = {}
    targets = one_hot(data.labels, k)
    size = arch.image_size
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_warmup_lr(epoch, cfg)
        order = train_idx[rng.permutation(train_idx.size)]
        losses, weights = [], []
        for b in _batches(order, cfg.batch_size):
            pairs = [augment_pair(data.cxr[i], data.mf[i], rng, cfg.augment, size) for i in b]
            x1 = np.stack([p[0] for p in pairs])
            x2 = np.stack([p[1] for p in pairs])
            pt = {n: Tensor(v, requires_grad=True) for n, v in params.items()}
            with T.Tape() as tape:
                loss = bce_loss(model.forward(x1, x2, pt), targets[b])
            T.backward(tape, loss)
            grads = {n: t.grad if t.grad is not None else np.zeros_like(t.data) for n, t in pt.items()}
            params, velocity = sgd_momentum_step(params, grads, velocity, lr, cfg.momentum)
            model.params = params
            losses.append(loss.item())
            weights.append(len(b))
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.average(losses, weights=weights)),
               "val_acc": float("nan"), "val_auc_macro": float("nan")}
        if val_idx.size:
            scores = predict_scores(model, data, val_idx)
            pred = scores.argmax(axis=1)
            cm = confusion_matrix(data.labels[val_idx], pred, k)
            row["val_acc"] = float(np.trace(cm) / cm.sum())
            row["val_auc_macro"] = roc_auc_ovr(scores, data.labels[val_idx]).macro
        history.append(row)
        if callback is not None:
            callback(row)
    echo = {"training": cfg.to_dict(), "model": arch.to_dict(), "fold": fold}
    return TrainResult(model, history, echo)


def cross_validate(cfg: TrainConfig, data: Dataset, arch: ModelConfig, callback=None) -> list[TrainResult]:
    return [train(cfg, data, arch, f, callback) for f in range(cfg.folds)]
