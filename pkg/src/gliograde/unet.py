"""3D U-Net for whole-tumour segmentation: model, patch training, sliding-window inference."""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, NumericError, ValidationError
from .nn import functional as F
from .nn.layers import Conv3d, ConvNormAct, Module
from .nn.optim import Optimizer, OptimizerConfig
from .rng import rng_stream
from .tensor import Tensor, concat, no_grad
from .volumes import MODALITIES, ModelCheckpoint, Volume

log = logging.getLogger(__name__)

T1, T1CE, T2, FLAIR = range(4)


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_features: int = 25
    in_channels: int = 4
    patch_size: int = 32  # 128 at full scale
    batch_size: int = 2
    leaky_slope: float = 0.01
    foreground_bias: float = 0.5

    def __post_init__(self):
        if self.levels < 1 or self.base_features < 1 or self.in_channels < 1:
            raise ConfigError("levels, base_features and in_channels must be positive")
        if self.patch_size < 1 or self.patch_size % 2 ** (self.levels - 1):
            raise ConfigError(
                f"patch_size {self.patch_size} must be divisible by 2^(levels-1) = {2 ** (self.levels - 1)}"
            )
        if self.patch_size // 2 ** (self.levels - 1) < 2:
            raise ConfigError(f"patch_size {self.patch_size} leaves < 2 voxels at the deepest level")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 <= self.foreground_bias <= 1:
            raise ConfigError("foreground_bias must be a probability")

    @property
    def features(self):
        return [self.base_features * 2**level for level in range(self.levels)]


@dataclass(frozen=True)
class ModalityDropoutPolicy:
    p_drop_t1: float = 0.5
    p_drop_one_of_t2_flair: float = 0.5


class UNet(Module):
    """Encoder: per level two (conv3 -> IN -> leaky ReLU); stride-2 conv between levels.

    Decoder: per level a 3x3x3 conv + IN + leaky ReLU at the coarse resolution,
    trilinear x2 upsampling, concatenation with the encoder skip, then two
    (conv3 -> IN -> leaky ReLU). Head: 1x1x1 conv to one channel + sigmoid.
    """

    def __init__(self, config, rng):
        self.config = config
        f, slope = config.features, config.leaky_slope
        self.encoder = []
        self.down = []
        for level in range(config.levels):
            c_in = config.in_channels if level == 0 else f[level - 1]
            self.encoder.append(
                [ConvNormAct(c_in, f[level], rng, slope=slope), ConvNormAct(f[level], f[level], rng, slope=slope)]
            )
            if level < config.levels - 1:
                self.down.append(ConvNormAct(f[level], f[level], rng, stride=2, slope=slope))
        self.encoder = [_Stage(convs) for convs in self.encoder]
        self.up = []
        self.decoder = []
        for level in range(config.levels - 2, -1, -1):
            self.up.append(ConvNormAct(f[level + 1], f[level], rng, slope=slope))
            self.decoder.append(
                _Stage([ConvNormAct(2 * f[level], f[level], rng, slope=slope),
                        ConvNormAct(f[level], f[level], rng, slope=slope)])
            )
        self.head = Conv3d(f[0], 1, 1, rng)

    def forward(self, x):
        skips = []
        for level, stage in enumerate(self.encoder):
            x = stage(x)
            if level < len(self.down):
                skips.append(x)
                x = self.down[level](x)
        for up, stage in zip(self.up, self.decoder):
            x = F.upsample_trilinear2x(up(x))
            x = stage(concat([x, skips.pop()], axis=1))
        return F.sigmoid(self.head(x))


class _Stage(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_unet(config=UNetConfig(), seed=0):
    return UNet(config, rng_stream(seed, "init"))


def infer_unet_config(checkpoint, **overrides):
    """Recover ``levels``/``base_features``/``in_channels`` from tensor names and shapes."""
    names = list(checkpoint.tensors)
    levels = len({n.split(".")[1] for n in names if n.startswith("encoder.")})
    first = checkpoint.tensors.get("encoder.0.layers.0.conv.weight")
    if levels < 1 or first is None:
        raise CheckpointError("checkpoint does not look like a U-Net (no encoder tensors)")
    fields = {"levels": levels, "base_features": first.shape[0], "in_channels": first.shape[1]}
    fields.update(overrides)
    return UNetConfig(**fields)


def load_unet(checkpoint, config):
    net = build_unet(config)
    net.load_state_dict(checkpoint.tensors)
    return net


# -- training -----------------------------------------------------------------------


def _pad_to(array, size, axes):
    pad = [(0, 0)] * array.ndim
    for ax in axes:
        pad[ax] = (0, max(0, size - array.shape[ax]))
    return np.pad(array, pad) if any(p[1] for p in pad) else array


def sample_patch(image, mask, config, rng):
    """Crop a random ``patch_size``^3 window from ``image`` ``[c, d, h, w]`` and ``mask``.

    With probability ``foreground_bias`` the window is centred (clipped to the
    volume) on a uniformly chosen tumour voxel; otherwise its corner is uniform
    over all valid positions. Volumes smaller than the patch are zero-padded.
    """
    if mask is None:
        raise ContractError("sample_patch needs a segmentation mask (training requires labels)")
    p = config.patch_size
    image = _pad_to(image, p, (1, 2, 3))
    mask = _pad_to(mask, p, (0, 1, 2))
    dims = np.array(mask.shape)
    u = rng.random()
    fg = np.flatnonzero(mask)
    if u < config.foreground_bias and fg.size:
        voxel = np.array(np.unravel_index(fg[rng.integers(fg.size)], mask.shape))
        start = np.clip(voxel - p // 2, 0, dims - p)
    else:
        start = rng.integers(0, dims - p + 1)
    sl = tuple(slice(s, s + p) for s in start)
    x = image[(slice(None),) + sl]
    y = mask[sl]
    return Tensor(x[None].astype(np.float32)), Tensor(y[None, None].astype(np.float32))


def apply_modality_dropout(x, policy, rng):
    """Zero T1 and/or one of T2/FLAIR per sample; T1ce is never touched.

    A T2/FLAIR channel is only dropped when its partner still carries signal,
    so at least one of them always survives. Three uniforms are drawn per
    sample regardless of outcome to keep the stream aligned.
    """
    data = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    for i in range(data.shape[0]):
        u_t1, u_pair, u_coin = rng.random(3)
        if u_t1 < policy.p_drop_t1:
            data[i, T1] = 0
        if u_pair < policy.p_drop_one_of_t2_flair:
            drop, keep = (T2, FLAIR) if u_coin < 0.5 else (FLAIR, T2)
            if np.any(data[i, keep]):
                data[i, drop] = 0
    return Tensor(data) if isinstance(x, Tensor) else data


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    trace: list
    model: Module


def train_segmentation(cases, config=UNetConfig(), optimizer=None, steps=100, seed=0,
                       dropout=ModalityDropoutPolicy(), checkpoint_every=0, checkpoint_path=None,
                       log_every=0, monitor=None):
    """Patch-based training with soft dice loss; returns checkpoint, per-step loss trace and model.

    ``monitor(step, model)`` runs after every update; a truthy return ends training early.
    """
    if not cases:
        raise ValidationError("train_segmentation needs at least one case")
    unlabeled = [c.case_id for c in cases if c.segmentation is None]
    if unlabeled:
        raise ValidationError(f"cases without segmentation: {unlabeled[:5]}")
    optimizer = optimizer or OptimizerConfig.segmentation()
    net = build_unet(config, seed)
    opt = Optimizer(net.parameters(), optimizer)
    patch_rng = rng_stream(seed, "patch-sampling")
    drop_rng = rng_stream(seed, "dropout")
    images = [c.stacked() for c in cases]
    masks = [c.segmentation.values for c in cases]
    trace = []
    for step in range(1, steps + 1):
        xs, ys = [], []
        for _ in range(config.batch_size):
            k = patch_rng.integers(len(cases))
            x, y = sample_patch(images[k], masks[k], config, patch_rng)
            xs.append(x.data)
            ys.append(y.data)
        x = apply_modality_dropout(np.concatenate(xs), dropout, drop_rng)
        y = np.concatenate(ys)
        pred = net(Tensor(x))
        if not np.all(np.isfinite(pred.data)):
            raise NumericError(f"segmentation output became non-finite at step {step}")
        loss = F.soft_dice_loss(pred, Tensor(y))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"segmentation loss became {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(value)
        if log_every and step % log_every == 0:
            log.info("train-seg step %d loss %.5f", step, value)
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            ModelCheckpoint(net.state_dict()).save(checkpoint_path)
        if monitor is not None and monitor(step, net):
            break
    checkpoint = ModelCheckpoint(net.state_dict())
    if checkpoint_path:
        checkpoint.save(checkpoint_path)
    return TrainResult(checkpoint, trace, net)


# -- inference ---------------------------------------------------------------------------


def window_starts(n, p):
    """Start offsets covering ``[0, n)`` with ``p``-wide windows at 50% overlap."""
    step = max(1, p // 2)
    starts = list(range(0, n - p + 1, step))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def segment_volume(case, model, config=UNetConfig(), exclude=(), window_order=None, window_batch=None):
    """Sliding-window probability map and 0.5-thresholded mask for ``case``.

    ``model`` is a :class:`UNet` or a :class:`ModelCheckpoint`. Modalities in
    ``exclude`` (and missing ones) are fed as zeros. Overlapping windows are
    averaged uniformly; windows are reduced in a fixed order (or
    ``window_order``, a permutation, for testing).
    """
    if case.modalities["T1ce"] is None or (case.modalities["T2"] is None and case.modalities["FLAIR"] is None):
        raise ValidationError(f"case {case.case_id}: needs T1ce and T2 and/or FLAIR")
    net = load_unet(model, config) if isinstance(model, ModelCheckpoint) else model
    p = config.patch_size
    image = case.stacked(exclude=exclude)
    dims = image.shape[1:]
    image = _pad_to(image, p, (1, 2, 3))
    padded = image.shape[1:]
    windows = [(a, b, c) for a in window_starts(padded[0], p)
               for b in window_starts(padded[1], p) for c in window_starts(padded[2], p)]
    if window_order is not None:
        windows = [windows[i] for i in window_order]
    total = np.zeros(padded, dtype=np.float64)
    count = np.zeros(padded, dtype=np.float64)
    nb = window_batch or config.batch_size
    with no_grad():
        for i in range(0, len(windows), nb):
            group = windows[i : i + nb]
            x = np.stack([image[:, a : a + p, b : b + p, c : c + p] for a, b, c in group])
            prob = net(Tensor(x)).data[:, 0]
            for (a, b, c), pr in zip(group, prob):
                total[a : a + p, b : b + p, c : c + p] += pr
                count[a : a + p, b : b + p, c : c + p] += 1.0
    prob = (total / count)[: dims[0], : dims[1], : dims[2]]
    spacing = case.spacing
    mask = Volume((prob >= 0.5).astype(np.float32), spacing)
    return mask, Volume(prob.astype(np.float32), spacing)


__all__ = [
    "MODALITIES", "ModalityDropoutPolicy", "TrainResult", "UNet", "UNetConfig", "apply_modality_dropout",
    "build_unet", "infer_unet_config", "load_unet", "sample_patch", "segment_volume", "train_segmentation",
    "window_starts",
]
