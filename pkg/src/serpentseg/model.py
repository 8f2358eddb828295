"""Fusion decoder, full dual-branch model, training loss, and optimizer.

Decoding starts from the transformer's 1/32 map and climbs one scale per
stage; snake-branch features join at 1/16 .. 1/1 and transformer features at
1/32 .. 1/4, with the previous stage's output bilinearly upsampled into every
concatenation. A final 1x1 convolution produces two logit channels at input
resolution.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import SpatialAttention, apply_attention
from .encoders import (
    CHANNEL_ATTENTION_MODES,
    CONV_MODES,
    MixTransformerEncoder,
    SnakeEncoder,
    make_channel_attention,
)
from .module import Conv2d, Module
from .tensor import (
    ContractViolation,
    Tensor,
    concat,
    exp,
    log_softmax,
    mul,
    narrow,
    no_grad,
    relu,
    softmax,
    tmean,
    tsum,
    upsample_bilinear,
)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during optimization."""


@dataclass
class ModelConfig:
    image_channels: int = 1
    snake_widths: tuple = (8, 16, 32, 64, 128)
    transformer_widths: tuple = (16, 32, 64, 128)
    transformer_depths: tuple = (1, 1, 1, 1)
    transformer_heads: tuple = (1, 2, 4, 8)
    transformer_reductions: tuple = (8, 4, 2, 1)
    decoder_widths: tuple = (64, 48, 32, 24, 16)  # scales 1/16, 1/8, 1/4, 1/2, 1/1
    wcam_ratio: int = 8
    num_classes: int = 2
    seed: int = 0
    conv_mode: str = "enhanced"
    channel_attention: str = "wcam"

    def validate(self):
        if len(self.snake_widths) != 5 or len(self.decoder_widths) != 5:
            raise ContractViolation("snake_widths and decoder_widths need 5 entries")
        for name in ("transformer_widths", "transformer_depths", "transformer_heads",
                     "transformer_reductions"):
            if len(getattr(self, name)) != 4:
                raise ContractViolation(f"{name} needs 4 entries")
        if any(w <= 0 for w in (*self.snake_widths, *self.transformer_widths,
                                *self.decoder_widths)):
            raise ContractViolation("widths must be positive")
        if self.conv_mode not in CONV_MODES:
            raise ContractViolation(f"conv_mode must be one of {CONV_MODES}")
        if self.channel_attention not in CHANNEL_ATTENTION_MODES:
            raise ContractViolation(
                f"channel_attention must be one of {CHANNEL_ATTENTION_MODES}")
        if self.num_classes != 2:
            raise ContractViolation("binary segmentation only: num_classes is fixed at 2")
        return self


def tiny_config(seed: int = 0, **overrides) -> ModelConfig:
    """Small widths for CPU-scale experiments and the acceptance runs."""
    cfg = ModelConfig(
        snake_widths=(4, 8, 12, 16, 24),
        transformer_widths=(8, 16, 24, 32),
        transformer_heads=(1, 2, 2, 4),
        decoder_widths=(24, 16, 12, 8, 8),
        wcam_ratio=4,
        seed=seed,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


class FusionStage(Module):
    """Concatenate available features, gate, smooth with two convs, add residual."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 channel_attention: str = "wcam", ratio: int = 8):
        super().__init__()
        self.ca = make_channel_attention(channel_attention, cin, ratio, rng)
        self.sa = SpatialAttention(rng=rng)
        self.conv1 = Conv2d(cin, cout, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, rng=rng)
        self.proj = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, parts: list[Tensor]) -> Tensor:
        shapes = {p.data.shape[2:] for p in parts}
        if len(shapes) != 1:
            raise ContractViolation(
                f"fusion inputs disagree spatially: {[p.data.shape for p in parts]}"
            )
        cat = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        sa_map = self.sa(cat)
        if self.ca is not None:
            att = apply_attention(cat, self.ca(cat), sa_map)
        else:
            att = mul(cat, sa_map)
        h = relu(self.conv1(att))
        h = self.conv2(h)
        res = cat if self.proj is None else self.proj(cat)
        return h + res


class _Encoders(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.dsc = SnakeEncoder(cfg.image_channels, cfg.snake_widths, rng,
                                conv_mode=cfg.conv_mode,
                                channel_attention=cfg.channel_attention,
                                ratio=cfg.wcam_ratio)
        self.mit = MixTransformerEncoder(cfg.image_channels, cfg.transformer_widths,
                                         cfg.transformer_depths, cfg.transformer_heads,
                                         cfg.transformer_reductions, rng)


class SnakeFormer(Module):
    """Dual-branch crack segmentation network with attention-fused decoding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.enc = _Encoders(cfg, rng)
        sw = cfg.snake_widths
        tw = cfg.transformer_widths
        dw = cfg.decoder_widths
        ca, ratio = cfg.channel_attention, cfg.wcam_ratio
        # deepest stage refines the lone 1/32 transformer map at its own width
        self._stage_in = [
            tw[3],
            sw[4] + tw[2] + tw[3],
            sw[3] + tw[1] + dw[0],
            sw[2] + tw[0] + dw[1],
            sw[1] + dw[2],
            sw[0] + dw[3],
        ]
        outs = [tw[3], *dw]
        dec = Module()
        for i, (cin, cout) in enumerate(zip(self._stage_in, outs)):
            dec.register_module(f"s{32 >> i}", FusionStage(cin, cout, rng,
                                                           channel_attention=ca,
                                                           ratio=ratio))
        self.dec = dec
        self._stages = [dec._modules[f"s{32 >> i}"] for i in range(6)]
        self.head = Conv2d(dw[4], cfg.num_classes, 1, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.data.shape[2:]
        if h % 32 or w % 32:
            raise ContractViolation(
                f"input spatial dims must be divisible by 32, got {image.data.shape}"
            )
        dsc = self.enc.dsc(image)   # 1/1, 1/2, 1/4, 1/8, 1/16
        mit = self.enc.mit(image)   # 1/4, 1/8, 1/16, 1/32
        d = self._stages[0]([mit[3]])
        d = self._stages[1]([dsc[4], mit[2], upsample_bilinear(d, 2)])
        d = self._stages[2]([dsc[3], mit[1], upsample_bilinear(d, 2)])
        d = self._stages[3]([dsc[2], mit[0], upsample_bilinear(d, 2)])
        d = self._stages[4]([dsc[1], upsample_bilinear(d, 2)])
        d = self._stages[5]([dsc[0], upsample_bilinear(d, 2)])
        return self.head(d)


def combined_loss(logits: Tensor, target) -> Tensor:
    """Mean pixel cross-entropy plus soft Dice on the crack-class probability."""
    t = np.asarray(target)
    n, c, h, w = logits.data.shape
    if c != 2:
        raise ContractViolation(f"expected 2 logit channels, got {logits.data.shape}")
    if t.shape != (n, h, w):
        raise ContractViolation(
            f"target shape {t.shape} does not match logits {logits.data.shape}"
        )
    if not np.isin(t, (0, 1)).all():
        raise ContractViolation("target mask must be binary")
    t = t.astype(logits.data.dtype).reshape(n, 1, h, w)
    tt = Tensor(t)
    lsm = log_softmax(logits, axis=1)
    l0 = narrow(lsm, 1, 0, 1)
    l1 = narrow(lsm, 1, 1, 1)
    ce = -tmean(mul(tt, l1) + mul(Tensor(1.0 - t), l0))
    p1 = exp(l1)
    eps = 1.0
    inter = tsum(mul(p1, tt))
    dice = 1.0 - (2.0 * inter + eps) / (tsum(p1) + float(t.sum()) + eps)
    return ce + dice


def predict_probabilities(model: SnakeFormer, images: np.ndarray) -> np.ndarray:
    """Crack-class probability maps for a (N, C, H, W) image batch."""
    with no_grad():
        logits = model(Tensor(images.astype(np.float32)))
        probs = softmax(logits, axis=1)
    return probs.data[:, 1]


def predict_masks(model: SnakeFormer, images: np.ndarray,
                  threshold: float = 0.5) -> np.ndarray:
    return (predict_probabilities(model, images) > threshold).astype(np.uint8)


class Adam:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, named_params, lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named]
        self.v = [np.zeros_like(p.data) for _, p in self.named]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, (name, p) in enumerate(self.named):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name}")
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    val_f1: float
    seconds: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_iou:.6f}"
                f"\t{self.val_f1:.6f}\t{self.seconds:.3f}")


@dataclass
class TrainResult:
    records: list[EpochRecord] = field(default_factory=list)
    best_state: dict | None = None
    best_iou: float = -1.0
    best_epoch: int = 0


def _as_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.stack([s[0] for s in samples])[:, None, :, :].astype(np.float32)
    masks = np.stack([s[1] for s in samples]).astype(np.uint8)
    return imgs, masks


def evaluate_model(model: SnakeFormer, pairs, batch_size: int = 8):
    """Mean IoU and F1 of thresholded predictions over (image, mask) pairs."""
    from .metrics import aggregate, confusion_counts, pixel_metrics

    per = []
    for lo in range(0, len(pairs), batch_size):
        imgs, masks = _as_batch(pairs[lo:lo + batch_size])
        preds = predict_masks(model, imgs)
        for p, m in zip(preds, masks):
            per.append(pixel_metrics(confusion_counts(p, m)))
    ious = float(np.mean([m[0] for m in per]))
    f1s = float(np.mean([m[3] for m in per]))
    return ious, f1s


def train_loop(model: SnakeFormer, train_pairs, val_pairs, epochs: int,
               batch_size: int, lr: float = 1e-4, weight_decay: float = 1e-4,
               seed: int = 0, log=None) -> TrainResult:
    """Deterministic training: shuffling, batching, and updates all derive
    from ``seed``. Keeps the state dict of the best-validation-IoU epoch."""
    if not train_pairs:
        raise ContractViolation("training set is empty")
    rng = np.random.default_rng(seed)
    opt = Adam(model.named_parameters(), lr=lr, weight_decay=weight_decay)
    result = TrainResult()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_pairs))
        losses = []
        for bi, lo in enumerate(range(0, len(order), batch_size)):
            chunk = [train_pairs[i] for i in order[lo:lo + batch_size]]
            imgs, masks = _as_batch(chunk)
            logits = model(Tensor(imgs))
            loss = combined_loss(logits, masks)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi}")
            model.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        val_iou, val_f1 = evaluate_model(model, val_pairs, batch_size)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_iou, val_f1,
                          time.perf_counter() - t0)
        result.records.append(rec)
        if log is not None:
            log(rec)
        if val_iou > result.best_iou:
            result.best_iou = val_iou
            result.best_epoch = epoch
            result.best_state = model.state_dict()
    return result
