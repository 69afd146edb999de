"""Single-shot PCI estimation: detector/segmenter contracts, mask input, CNN head.

The detector and segmenter are pluggable backends. :func:`oracle_backends`
replays an annotation record (boxes as detections, union of boxes as the
mask) so the whole stage runs and trains without pretrained weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .annotations import AnnotationRecord, BoundingBox, DistressType
from .autodiff import Tensor, init
from .autodiff.io import CheckpointError, load_checkpoint, read_manifest, save_checkpoint

N_CLASSES = len(DistressType)


# ---------------------------------------------------------------------------
# Backend contracts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_probs: tuple[float, ...]
    confidence: float

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.class_probs)
        if len(probs) != N_CLASSES:
            raise ValueError(f"class_probs must have {N_CLASSES} entries, got {len(probs)}")
        if any(p < 0 for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValueError("class_probs must be a probability vector")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "class_probs", probs)

    @property
    def distress(self) -> DistressType:
        return list(DistressType)[int(np.argmax(self.class_probs))]


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", values.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class DetectorBackend(Protocol):
    def detect(self, image: np.ndarray) -> list[Detection]: ...


class SegmenterBackend(Protocol):
    def segment(self, image: np.ndarray, boxes: Sequence[BoundingBox]) -> BinaryMask: ...


def rasterize_boxes(boxes: Sequence[BoundingBox], height: int, width: int) -> BinaryMask:
    """Union of boxes; a pixel is covered when its center lies in ``[x0, x1) x [y0, y1)``."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        c0 = min(max(math.ceil(box.x0 - 0.5), 0), width)
        c1 = min(max(math.ceil(box.x1 - 0.5), 0), width)
        r0 = min(max(math.ceil(box.y0 - 0.5), 0), height)
        r1 = min(max(math.ceil(box.y1 - 0.5), 0), height)
        mask[r0:r1, c0:c1] = 1
    return BinaryMask(mask)


class OracleDetector:
    def __init__(self, record: AnnotationRecord):
        self.record = record

    def detect(self, image: np.ndarray) -> list[Detection]:
        types = list(DistressType)
        out = []
        for inst in self.record.instances:
            probs = [0.0] * N_CLASSES
            probs[types.index(inst.distress)] = 1.0
            out.append(Detection(inst.box, tuple(probs), 1.0))
        return out


class OracleSegmenter:
    def __init__(self, record: AnnotationRecord):
        self.record = record

    def segment(self, image: np.ndarray, boxes: Sequence[BoundingBox]) -> BinaryMask:
        height, width = np.asarray(image).shape[:2]
        return rasterize_boxes(boxes, height, width)


def oracle_backends(record: AnnotationRecord) -> tuple[OracleDetector, OracleSegmenter]:
    return OracleDetector(record), OracleSegmenter(record)


def build_mask(image: np.ndarray, detector: DetectorBackend, segmenter: SegmenterBackend) -> BinaryMask:
    detections = detector.detect(image)
    return segmenter.segment(image, [d.box for d in detections])


def concat_input(image, mask: BinaryMask) -> Tensor:
    """Append the mask as one extra channel: (H, W, C) -> (H, W, C + 1)."""
    image = ad.as_tensor(image)
    if image.ndim != 3:
        raise ad.DimensionError(f"concat_input: image must be (H, W, C), got {image.shape}")
    if image.shape[:2] != mask.values.shape:
        raise ad.DimensionError(f"concat_input: image {image.shape[:2]} vs mask {mask.values.shape}")
    channel = Tensor(mask.values.astype(np.float64)[:, :, None])
    return ad.concat([image, channel], axis=2)


# ---------------------------------------------------------------------------
# CNN head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PciModelConfig:
    height: int
    width: int
    in_channels: int  # image channels + 1 mask channel
    channels: tuple[int, ...] = (8, 8, 8, 8)
    kernel_size: int = 3
    output_bias: float = 50.0

    def __post_init__(self) -> None:
        if len(self.channels) != 4:
            raise ValueError("the PCI head has exactly four convolutional layers")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd so padding preserves the spatial size")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))


class PciModel:
    """Four conv+ReLU layers (same padding), flatten, one fully-connected unit."""

    def __init__(self, config: PciModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: PciModelConfig, seed: int = 0) -> "PciModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        c_in, k = config.in_channels, config.kernel_size
        for layer, c_out in enumerate(config.channels, start=1):
            params[f"conv{layer}.w"] = init.conv(rng, k, k, c_in, c_out)
            params[f"conv{layer}.b"] = init.zeros(c_out)
            c_in = c_out
        flat = config.height * config.width * c_in
        params["fc.w"] = init.dense(rng, flat, 1)
        params["fc.b"] = Tensor(np.full(1, config.output_bias), requires_grad=True)
        return cls(config, params)

    def forward(self, x) -> Tensor:
        """Raw PCI for (H, W, C+1) -> scalar or (N, H, W, C+1) -> (N,)."""
        x = ad.as_tensor(x)
        cfg = self.config
        expected = (cfg.height, cfg.width, cfg.in_channels)
        if x.shape[-3:] != expected or x.ndim not in (3, 4):
            raise ad.DimensionError(f"pci_forward: expected input (..., {expected}), got {x.shape}")
        batched = x.ndim == 4
        h = x if batched else x.reshape(1, *x.shape)
        pad = cfg.kernel_size // 2
        for layer in range(1, 5):
            h = ad.relu(ad.conv2d(h, self.params[f"conv{layer}.w"], self.params[f"conv{layer}.b"], pad))
        flat = h.reshape(h.shape[0], -1)
        out = ad.linear(flat, self.params["fc.w"], self.params["fc.b"]).reshape(-1)
        return out if batched else out.reshape(())

    def predict(self, x) -> np.ndarray | float:
        """Inference PCI clamped to [0, 100]."""
        with ad.no_grad():
            raw = self.forward(x).data
        clamped = np.clip(raw, 0.0, 100.0)
        return float(clamped) if clamped.ndim == 0 else clamped

    def save(self, directory) -> None:
        meta = asdict(self.config)
        meta["kind"] = "pci"
        save_checkpoint(directory, self.params, meta)

    @classmethod
    def load(cls, directory) -> "PciModel":
        meta = dict(read_manifest(directory).get("meta", {}))
        if meta.pop("kind", None) != "pci":
            raise CheckpointError(f"{directory}: not a PCI checkpoint")
        try:
            config = PciModelConfig(**{**meta, "channels": tuple(meta["channels"])})
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{directory}: bad model config in manifest ({exc})") from None
        model = cls.init(config)
        load_checkpoint(directory, model.params)
        return model


def pci_forward(model: PciModel, x) -> Tensor:
    return model.forward(x)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def pci_loss(pred, target) -> Tensor:
    """Mean squared error between predicted and ground-truth PCI."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.DimensionError(f"pci_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return ad.mean(diff * diff)


@dataclass(frozen=True)
class DetectionLossWeights:
    coord: float = 1.0
    conf: float = 1.0
    cls: float = 1.0
    dice: float = 1.0
    bce: float = 1.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


DICE_EPS = 1e-6
PROB_CLAMP = 1e-7


def _mask_operands(pred, gt) -> tuple[Tensor, np.ndarray]:
    pred = ad.as_tensor(pred)
    gt_values = gt.values if isinstance(gt, BinaryMask) else np.asarray(gt)
    if pred.shape != gt_values.shape:
        raise ad.DimensionError(f"mask loss: pred {pred.shape} vs gt {gt_values.shape}")
    return pred, gt_values.astype(np.float64)


def dice_loss(pred, gt) -> Tensor:
    pred, g = _mask_operands(pred, gt)
    inter = (pred * g).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + float(g.sum()) + DICE_EPS)


def mask_bce_loss(pred, gt) -> Tensor:
    """Per-pixel mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    pred, g = _mask_operands(pred, gt)
    p = ad.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = g * ad.log(p) + (1.0 - g) * ad.log(1.0 - p)
    return -ad.mean(ll)


def sam_loss(pred, gt, weights: DetectionLossWeights = DetectionLossWeights()) -> Tensor:
    return weights.dice * dice_loss(pred, gt) + weights.bce * mask_bce_loss(pred, gt)


def _binary_kl(target: float, pred: float) -> float:
    total = 0.0
    for t, q in ((target, pred), (1 - target, 1 - pred)):
        if t > 0:
            total += t * (math.log(t) - math.log(max(q, PROB_CLAMP)))
    return total


def _categorical_kl(target: Sequence[float], pred: Sequence[float]) -> float:
    total = 0.0
    for t, q in zip(target, pred):
        if t > 0:
            total += t * (math.log(t) - math.log(max(q, PROB_CLAMP)))
    return total


def _loc_loss(pred: BoundingBox, target: BoundingBox) -> float:
    a = (pred.cx, pred.cy, math.sqrt(pred.w), math.sqrt(pred.h))
    b = (target.cx, target.cy, math.sqrt(target.w), math.sqrt(target.h))
    return math.fsum((x - y) ** 2 for x, y in zip(a, b))


@dataclass(frozen=True)
class YoloLossTerms:
    loc: float
    conf: float
    cls: float
    weights: DetectionLossWeights = field(default_factory=DetectionLossWeights)

    @property
    def total(self) -> float:
        w = self.weights
        return w.coord * self.loc + w.conf * self.conf + w.cls * self.cls


def yolo_loss_terms(
    preds: Sequence[Detection],
    targets: Sequence[Detection],
    weights: DetectionLossWeights = DetectionLossWeights(),
) -> YoloLossTerms:
    """Unweighted component sums over caller-matched (pred, target) pairs.

    Localization is squared error on (cx, cy, sqrt w, sqrt h). Confidence and
    class terms are cross-entropies minus the target's own entropy, so they
    vanish exactly when prediction equals target, soft targets included.
    """
    if len(preds) != len(targets):
        raise ValueError(f"yolo loss: {len(preds)} predictions vs {len(targets)} targets")
    loc = math.fsum(_loc_loss(p.box, t.box) for p, t in zip(preds, targets))
    conf = math.fsum(_binary_kl(t.confidence, p.confidence) for p, t in zip(preds, targets))
    cls = math.fsum(_categorical_kl(t.class_probs, p.class_probs) for p, t in zip(preds, targets))
    return YoloLossTerms(loc, conf, cls, weights)


def yolo_composite_loss(
    preds: Sequence[Detection],
    targets: Sequence[Detection],
    weights: DetectionLossWeights = DetectionLossWeights(),
) -> float:
    return yolo_loss_terms(preds, targets, weights).total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PciTrainConfig:
    epochs: int = 2000
    lr: float = 3e-4
    lr_schedule: str = "cosine"  # or "constant"
    seed: int = 0
    channels: tuple[int, ...] = (8, 8, 8, 8)
    kernel_size: int = 3
    output_bias: float = 50.0


def prepare_inputs(samples: Sequence[tuple[AnnotationRecord, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Run the backends and stack image+mask inputs with their PCI targets."""
    if not samples:
        raise ValueError("train_pci needs a non-empty dataset")
    xs, ys = [], []
    shape = None
    for record, image in samples:
        image = np.asarray(image, dtype=np.float64)
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise ad.DimensionError(f"image {record.image_id!r} has shape {image.shape}, expected {shape}")
        detector, segmenter = oracle_backends(record)
        mask = build_mask(image, detector, segmenter)
        xs.append(concat_input(image, mask).data)
        ys.append(record.pci)
    return np.stack(xs), np.asarray(ys, dtype=np.float64)


def train_pci(
    samples: Sequence[tuple[AnnotationRecord, np.ndarray]],
    config: PciTrainConfig = PciTrainConfig(),
) -> tuple[PciModel, list[float]]:
    """Full-batch Adam on the MSE objective; returns the model and per-epoch loss."""
    if config.lr_schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")
    x, y = prepare_inputs(samples)
    model = PciModel.init(
        PciModelConfig(
            height=x.shape[1],
            width=x.shape[2],
            in_channels=x.shape[3],
            channels=config.channels,
            kernel_size=config.kernel_size,
            output_bias=config.output_bias,
        ),
        seed=config.seed,
    )
    opt = ad.Adam(model.params, lr=config.lr)
    inputs = Tensor(x)
    history: list[float] = []
    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            opt.state.lr = ad.cosine_lr(config.lr, epoch, config.epochs)
        opt.zero_grad()
        loss = pci_loss(model.forward(inputs), y)
        loss.backward()
        opt.step()
        history.append(loss.item())
    return model, history
