"""Tumour ROI extraction and GBM-vs-LGG classification with a 3D residual network."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import interp
from .errors import ConfigError, NoTumourError, NumericError, ShapeError, ValidationError
from .nn import functional as F
from .nn.layers import ConvNormAct, Linear, Module, ResidualBlock
from .nn.optim import Optimizer, OptimizerConfig
from .rng import rng_stream
from .tensor import Tensor, no_grad
from .unet import UNetConfig, segment_volume
from .volumes import ModelCheckpoint, Volume

log = logging.getLogger(__name__)

CLASSES = ("LGG", "GBM")  # logit order; GBM is the positive class
GBM = CLASSES.index("GBM")


@dataclass(frozen=True)
class RoiBox:
    min_corner: tuple
    max_corner: tuple  # exclusive
    margin_fraction: float = 0.1

    @property
    def slices(self):
        return tuple(slice(lo, hi) for lo, hi in zip(self.min_corner, self.max_corner))

    @property
    def shape(self):
        return tuple(hi - lo for lo, hi in zip(self.min_corner, self.max_corner))


def largest_component(mask):
    """Largest 26-connected foreground component (ties: first in scan order)."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        raise NoTumourError()
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def extract_roi(t1ce, mask, margin_fraction=0.1):
    """Bounding box of the largest tumour component, grown by ``floor(margin * extent)`` per side."""
    m = np.asarray(mask.values if isinstance(mask, Volume) else mask) > 0
    if m.shape != t1ce.dims:
        raise ShapeError(f"mask dims {m.shape} differ from T1ce dims {t1ce.dims}")
    if not m.any():
        raise NoTumourError()
    comp = largest_component(m)
    idx = np.argwhere(comp)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    grow = np.floor(margin_fraction * (hi - lo)).astype(int)
    lo = np.maximum(lo - grow, 0)
    hi = np.minimum(hi + grow, np.array(t1ce.dims))
    box = RoiBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi), margin_fraction)
    return box, Volume(t1ce.values[box.slices].copy(), t1ce.spacing)


def resize_roi(crop, size):
    """Anisotropic align-corners trilinear stretch of ``crop`` to ``size``^3 -> ``[1, 1, s, s, s]``."""
    values = crop.values if isinstance(crop, Volume) else np.asarray(crop)
    if values.size == 0:
        raise ShapeError("resize_roi: empty crop")
    out = interp.resize(values.astype(np.float64), (size,) * 3, axes=(0, 1, 2))
    return Tensor(out.astype(np.float32)[None, None])


@dataclass(frozen=True)
class ClassifierConfig:
    input_size: int = 32  # 112 at full scale
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 16
    blocks: int = 4
    block_channels: tuple = (16, 32, 64, 128)
    block_strides: tuple = (1, 2, 2, 2)
    num_classes: int = 2
    batch_size: int = 8
    margin_fraction: float = 0.1

    def __post_init__(self):
        if self.blocks != 4 or len(self.block_channels) != 4 or len(self.block_strides) != 4:
            raise ConfigError("the classifier has exactly 4 residual blocks")
        if self.stem_kernel != 7:
            raise ConfigError("the stem convolution has kernel size 7")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of 16")
        if self.num_classes != 2:
            raise ConfigError("only binary GBM/LGG classification is supported")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even for class-balanced batches")


class ResNetClassifier(Module):
    """k7 stem -> 4 residual blocks -> global average pool -> linear to 2 logits."""

    def __init__(self, config, rng):
        self.config = config
        self.stem = ConvNormAct(1, config.stem_channels, rng, kernel=config.stem_kernel, stride=config.stem_stride)
        blocks, c_in = [], config.stem_channels
        for c_out, stride in zip(config.block_channels, config.block_strides):
            blocks.append(ResidualBlock(c_in, c_out, rng, stride=stride))
            c_in = c_out
        self.blocks = blocks
        self.fc = Linear(c_in, config.num_classes, rng)

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.fc(F.global_avg_pool(x))


def build_classifier(config=ClassifierConfig(), seed=0):
    return ResNetClassifier(config, rng_stream(seed, "init"))


def load_classifier(checkpoint, config=ClassifierConfig()):
    net = build_classifier(config)
    net.load_state_dict(checkpoint.tensors)
    return net


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    rotate: bool = True
    max_shift_fraction: float = 0.1


NO_AUGMENT = AugmentConfig(p_flip=0.0, rotate=False, max_shift_fraction=0.0)


def _shift(vol, shifts):
    """Translate with zero fill (pad by the shift, crop back to size)."""
    out = np.zeros_like(vol)
    src, dst = [], []
    for s, n in zip(shifts, vol.shape):
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = vol[tuple(src)]
    return out


def augment(x, rng, config=AugmentConfig()):
    """Per-sample random flips, a k*90 degree rotation about a random axis, and translation.

    Operates on ``[b, c, s, s, s]`` arrays or tensors. Every sample consumes
    the same number of draws whatever is enabled.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 5 or not data.shape[2] == data.shape[3] == data.shape[4]:
        raise ShapeError(f"augment expects cubic [b, c, s, s, s] input, got {data.shape}")
    size = data.shape[2]
    max_shift = int(np.floor(config.max_shift_fraction * size))
    out = np.empty_like(data)
    for i in range(data.shape[0]):
        flips = rng.random(3) < config.p_flip
        k, axis = int(rng.integers(4)), int(rng.integers(3))
        shifts = rng.integers(-max_shift, max_shift + 1, size=3) if max_shift else np.zeros(3, int)
        vol = data[i]
        for ax in np.flatnonzero(flips):
            vol = np.flip(vol, axis=1 + ax)
        if config.rotate and k:
            plane = tuple(1 + a for a in range(3) if a != axis)
            vol = np.rot90(vol, k, axes=plane)
        if max_shift:
            vol = np.stack([_shift(ch, shifts) for ch in vol])
        out[i] = vol
    return Tensor(out) if isinstance(x, Tensor) else out


class BalancedSampler:
    """Yields index batches with exactly ``batch_size / 2`` samples of each class.

    Each class is drawn without replacement from a reshuffled queue, so all of
    its samples are visited before any repeats.
    """

    def __init__(self, labels, batch_size, rng):
        labels = np.asarray(labels)
        self.pools = [np.flatnonzero(labels == c) for c in range(len(CLASSES))]
        if any(p.size == 0 for p in self.pools):
            raise ValidationError("class-balanced training needs both GBM and LGG cases")
        if batch_size % 2:
            raise ConfigError("batch_size must be even for class-balanced batches")
        self.half = batch_size // 2
        self.rng = rng
        self.queues = [np.empty(0, dtype=np.int64) for _ in self.pools]

    def _take(self, c):
        chosen = []
        while len(chosen) < self.half:
            if self.queues[c].size == 0:
                self.queues[c] = self.rng.permutation(self.pools[c])
            n = min(self.half - len(chosen), self.queues[c].size)
            chosen.extend(self.queues[c][:n].tolist())
            self.queues[c] = self.queues[c][n:]
        return chosen

    def next_batch(self):
        return self._take(0) + self._take(1)


def label_index(grade):
    if isinstance(grade, str):
        if grade not in CLASSES:
            raise ValidationError(f"grade must be GBM or LGG, got {grade!r}")
        return CLASSES.index(grade)
    return int(grade)


@dataclass
class ClassifierTrainResult:
    checkpoint: ModelCheckpoint
    trace: list
    model: Module


def train_classifier(rois, grades, config=ClassifierConfig(), optimizer=None, steps=100, seed=0,
                     augmentation=AugmentConfig(), checkpoint_path=None, log_every=0, monitor=None):
    """SGD training on resized ROIs (``[s, s, s]`` arrays or ``[1, 1, s, s, s]`` tensors).

    ``monitor(step, model)`` runs after every update; a truthy return ends training early.
    """
    labels = np.array([label_index(g) for g in grades])
    if len(rois) != len(labels) or not len(rois):
        raise ValidationError("train_classifier needs one grade per ROI and at least one ROI")
    s = config.input_size
    data = np.stack([np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float32).reshape(s, s, s)
                     for r in rois])[:, None]
    optimizer = optimizer or OptimizerConfig.classification()
    net = build_classifier(config, seed)
    opt = Optimizer(net.parameters(), optimizer)
    sampler = BalancedSampler(labels, config.batch_size, rng_stream(seed, "patch-sampling"))
    aug_rng = rng_stream(seed, "augmentation")
    trace = []
    for step in range(1, steps + 1):
        idx = sampler.next_batch()
        x = augment(data[idx], aug_rng, augmentation)
        loss = F.cross_entropy(net(Tensor(x)), labels[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"classification loss became {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(value)
        if log_every and step % log_every == 0:
            log.info("train-cls step %d loss %.5f", step, value)
        if monitor is not None and monitor(step, net):
            break
    checkpoint = ModelCheckpoint(net.state_dict())
    if checkpoint_path:
        checkpoint.save(checkpoint_path)
    return ClassifierTrainResult(checkpoint, trace, net)


def predict_proba(model, rois, batch_size=8):
    """Softmax probabilities ``[n, 2]`` (columns LGG, GBM) for stacked ROIs ``[n, 1, s, s, s]``."""
    rois = np.asarray(rois.data if isinstance(rois, Tensor) else rois, dtype=np.float32)
    out = []
    with no_grad():
        for i in range(0, len(rois), batch_size):
            out.append(F.softmax(model(Tensor(rois[i : i + batch_size])).data))
    return np.concatenate(out) if out else np.zeros((0, 2))


def decide(p_gbm):
    return "GBM" if p_gbm >= 0.5 else "LGG"


def roi_tensor(case, mask, config=ClassifierConfig()):
    """Crop the largest-component ROI from the case's T1ce and resize it for the classifier."""
    _, crop = extract_roi(case.modalities["T1ce"], mask, config.margin_fraction)
    return resize_roi(crop, config.input_size)


@dataclass
class GradeResult:
    case_id: str
    label: str
    p_gbm: float
    mask: Volume = field(repr=False, default=None)


class GradingPipeline:
    """segment -> largest-component ROI on T1ce -> resize -> classifier -> softmax."""

    def __init__(self, seg_model, cls_model, seg_config=UNetConfig(), cls_config=ClassifierConfig()):
        if isinstance(seg_model, ModelCheckpoint):
            from .unet import load_unet

            seg_model = load_unet(seg_model, seg_config)
        if isinstance(cls_model, ModelCheckpoint):
            cls_model = load_classifier(cls_model, cls_config)
        self.seg_model, self.cls_model = seg_model, cls_model
        self.seg_config, self.cls_config = seg_config, cls_config

    def segment(self, case, exclude=()):
        return segment_volume(case, self.seg_model, self.seg_config, exclude=exclude)[0]

    def classify(self, case, mask):
        roi = roi_tensor(case, mask, self.cls_config)
        p_gbm = float(predict_proba(self.cls_model, roi.data)[0, GBM])
        return decide(p_gbm), p_gbm

    def grade(self, case, exclude=()):
        mask = self.segment(case, exclude)
        label, p_gbm = self.classify(case, mask)
        return GradeResult(case.case_id, label, p_gbm, mask)


def grade(case, seg_checkpoint, cls_checkpoint, seg_config=UNetConfig(), cls_config=ClassifierConfig(),
          exclude=()):
    """Full two-stage prediction for one case; raises :class:`NoTumourError` on an empty mask."""
    return GradingPipeline(seg_checkpoint, cls_checkpoint, seg_config, cls_config).grade(case, exclude)
