import numpy as np
import pytest
from scipy import stats

from gliograde.errors import CheckpointError, ConfigError, ContractError, NumericError, ValidationError
from gliograde.nn import OptimizerConfig
from gliograde.phantom import PhantomSpec, generate
from gliograde.tensor import Tensor, no_grad
from gliograde.unet import (
    ModalityDropoutPolicy, UNetConfig, apply_modality_dropout, build_unet, infer_unet_config, sample_patch,
    segment_volume, train_segmentation, window_starts,
)
from gliograde.volumes import ModelCheckpoint, MultiModalCase, Volume

TINY = UNetConfig(levels=2, base_features=3, patch_size=8, batch_size=2)
SMALL_CASE = dict(dims=(14, 12, 10), brain_half_axes=(5.5, 5.0, 4.0), tumour_half_axis_range=(1.5, 2.5),
                  tumour_offset_range=1.0)


def test_default_features():
    assert UNetConfig().features == [25, 50, 100, 200]
    assert UNetConfig().patch_size == 32 and UNetConfig().batch_size == 2


@pytest.mark.parametrize("fields", [dict(patch_size=12), dict(levels=5, patch_size=16), dict(batch_size=0),
                                    dict(foreground_bias=1.5)])
def test_invalid_config(fields):
    with pytest.raises(ConfigError):
        UNetConfig(**fields)


def test_forward_shape_and_range():
    net = build_unet(UNetConfig(base_features=4), seed=0)
    with no_grad():
        y = net(Tensor(np.random.default_rng(0).standard_normal((1, 4, 32, 32, 32)).astype(np.float32)))
    assert y.shape == (1, 1, 32, 32, 32)
    assert np.all((y.data > 0) & (y.data < 1))


def test_encoder_widths_in_checkpoint():
    net = build_unet(UNetConfig(), seed=0)
    params = net.parameters()
    widths = [params[f"encoder.{lvl}.layers.1.conv.weight"].shape[0] for lvl in range(4)]
    assert widths == [25, 50, 100, 200]
    assert infer_unet_config(ModelCheckpoint(net.state_dict())) == UNetConfig()


def test_load_mismatched_checkpoint():
    ckpt = ModelCheckpoint(build_unet(TINY, 0).state_dict())
    with pytest.raises(CheckpointError):
        segment_volume(generate(PhantomSpec(**SMALL_CASE)), ckpt, UNetConfig(levels=2, base_features=4, patch_size=8))


def test_forced_foreground_patch_contains_the_voxel():
    image = np.zeros((4, 20, 20, 20), np.float32)
    mask = np.zeros((20, 20, 20), np.float32)
    mask[17, 2, 9] = 1
    cfg = UNetConfig(levels=2, patch_size=8, foreground_bias=1.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, y = sample_patch(image, mask, cfg, rng)
        assert y.data.sum() == 1
        assert y.shape == (1, 1, 8, 8, 8)


def test_uniform_patch_corners():
    """With no foreground bias the corner is uniform over all 13 valid offsets per axis."""
    dims, p = 20, 8
    image = np.broadcast_to(np.arange(dims, dtype=np.float32)[None, :, None, None], (4, dims, dims, dims))
    cfg = UNetConfig(levels=2, patch_size=p, foreground_bias=0.0)
    rng = np.random.default_rng(3)
    corners = [int(sample_patch(image, np.zeros((dims,) * 3), cfg, rng)[0].data[0, 0, 0, 0, 0]) for _ in range(1000)]
    counts = np.bincount(corners, minlength=dims - p + 1)
    assert counts.size == dims - p + 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_small_volume_is_zero_padded():
    image = np.ones((4, 5, 6, 7), np.float32)
    mask = np.ones((5, 6, 7), np.float32)
    x, y = sample_patch(image, mask, UNetConfig(levels=2, patch_size=8), np.random.default_rng(0))
    assert x.shape == (1, 4, 8, 8, 8)
    assert x.data.sum() == 4 * 5 * 6 * 7 and y.data.sum() == 5 * 6 * 7


def test_patch_requires_mask():
    with pytest.raises(ContractError):
        sample_patch(np.zeros((4, 8, 8, 8)), None, TINY, np.random.default_rng(0))


def test_dropout_policies():
    x = np.ones((64, 4, 2, 2, 2), np.float32)
    rng = np.random.default_rng(0)
    out = apply_modality_dropout(x, ModalityDropoutPolicy(1.0, 0.0), rng)
    assert not out[:, 0].any() and out[:, 1:].all()
    assert np.array_equal(apply_modality_dropout(x, ModalityDropoutPolicy(0.0, 0.0), rng), x)


def test_dropout_rates_and_t1ce_survival():
    n = 10000
    x = np.ones((n, 4, 1, 1, 1), np.float32)
    out = apply_modality_dropout(x, ModalityDropoutPolicy(), np.random.default_rng(1))[:, :, 0, 0, 0]
    assert out[:, 1].all()
    assert abs((out[:, 0] == 0).mean() - 0.5) < 0.02
    pair_dropped = (out[:, 2] == 0) | (out[:, 3] == 0)
    assert abs(pair_dropped.mean() - 0.5) < 0.02
    assert not ((out[:, 2] == 0) & (out[:, 3] == 0)).any()


def test_dropout_keeps_missing_channels_zero_and_never_empties_the_pair():
    x = np.ones((500, 4, 1, 1, 1), np.float32)
    x[:, 2] = 0  # T2 missing
    out = apply_modality_dropout(x, ModalityDropoutPolicy(), np.random.default_rng(2))
    assert not out[:, 2].any() and out[:, 3].all() and out[:, 1].all()


def test_dropout_accepts_tensors():
    out = apply_modality_dropout(Tensor(np.ones((2, 4, 1, 1, 1))), ModalityDropoutPolicy(), np.random.default_rng(0))
    assert isinstance(out, Tensor)


def _cases(n=2):
    return [generate(PhantomSpec(seed=i, grade=("LGG", "GBM")[i % 2], **SMALL_CASE)) for i in range(n)]


def test_zero_steps_returns_initialisation():
    result = train_segmentation(_cases(), TINY, steps=0, seed=5)
    assert result.trace == []
    assert result.checkpoint == ModelCheckpoint(build_unet(TINY, 5).state_dict())


def test_training_is_bit_reproducible(tmp_path):
    a = train_segmentation(_cases(), TINY, steps=4, seed=1, checkpoint_path=tmp_path / "a.ggc")
    b = train_segmentation(_cases(), TINY, steps=4, seed=1, checkpoint_path=tmp_path / "b.ggc")
    assert a.trace == b.trace and len(a.trace) == 4
    assert (tmp_path / "a.ggc").read_bytes() == (tmp_path / "b.ggc").read_bytes()
    c = train_segmentation(_cases(), TINY, steps=4, seed=2)
    assert c.trace != a.trace


def test_periodic_checkpoints(tmp_path):
    train_segmentation(_cases(), TINY, steps=2, seed=0, checkpoint_every=1, checkpoint_path=tmp_path / "m.ggc")
    assert ModelCheckpoint.load(tmp_path / "m.ggc").tensors


def test_training_needs_labels():
    case = _cases(1)[0]
    unlabeled = MultiModalCase(case.case_id, case.modalities)
    with pytest.raises(ValidationError):
        train_segmentation([unlabeled], TINY, steps=1)


def test_nan_loss_aborts_with_step():
    case = _cases(1)[0]
    bad = dict(case.modalities)
    bad["T1ce"] = Volume(np.full(case.dims, np.nan, np.float32))
    with pytest.raises(NumericError, match="step 1"):
        train_segmentation([MultiModalCase("nan", bad, case.segmentation, case.grade)], TINY, steps=1)


@pytest.mark.parametrize("n, p, expected", [(8, 8, [0]), (20, 8, [0, 4, 8, 12]), (13, 8, [0, 4, 5]), (5, 8, [])])
def test_window_starts(n, p, expected):
    if n < p:
        with pytest.raises(IndexError):
            window_starts(n, p)
    else:
        assert window_starts(n, p) == expected


def test_segment_patch_sized_volume():
    case = generate(PhantomSpec(dims=(8, 8, 8), brain_half_axes=(3, 3, 3), tumour_half_axis_range=(1, 1.5),
                                tumour_offset_range=0.5))
    mask, prob = segment_volume(case, build_unet(TINY, 0), TINY)
    assert mask.dims == prob.dims == (8, 8, 8)
    assert set(np.unique(mask.values)) <= {0.0, 1.0}
    assert np.all((prob.values >= 0) & (prob.values <= 1))


def test_segment_small_volume_is_padded_and_cropped_back():
    case = generate(PhantomSpec(dims=(6, 7, 9), brain_half_axes=(2, 2.5, 3), tumour_half_axis_range=(1, 1),
                                tumour_offset_range=0.2))
    mask, _ = segment_volume(case, build_unet(TINY, 0), TINY)
    assert mask.dims == (6, 7, 9)


def test_constant_predictions_average_to_themselves():
    class Constant:
        def __call__(self, x):
            return Tensor(np.full((x.shape[0], 1) + x.shape[2:], 0.7, np.float32))

    case = generate(PhantomSpec(**SMALL_CASE))
    _, prob = segment_volume(case, Constant(), TINY)
    np.testing.assert_allclose(prob.values, 0.7, rtol=1e-6)


def test_window_order_does_not_matter():
    case = generate(PhantomSpec(**SMALL_CASE))
    net = build_unet(TINY, 3)
    _, ref = segment_volume(case, net, TINY)
    n = len(window_starts(14, 8)) * len(window_starts(12, 8)) * len(window_starts(10, 8))
    order = np.random.default_rng(0).permutation(n)
    _, shuffled = segment_volume(case, net, TINY, window_order=order, window_batch=1)
    np.testing.assert_allclose(shuffled.values, ref.values, rtol=1e-6, atol=1e-6)


def test_zero_fill_equals_missing_modalities():
    full = generate(PhantomSpec(**SMALL_CASE))
    missing = MultiModalCase("m", {"T1ce": full.modalities["T1ce"], "FLAIR": full.modalities["FLAIR"]})
    zeros = {m: Volume(np.zeros(full.dims)) for m in ("T1", "T2")}
    zero_filled = MultiModalCase("z", {**missing.modalities, **zeros})
    net = build_unet(TINY, 0)
    a = segment_volume(missing, net, TINY)[1].values
    b = segment_volume(zero_filled, net, TINY)[1].values
    c = segment_volume(full, net, TINY, exclude=("T1", "T2"))[1].values
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_segment_needs_t1ce_and_pair():
    case = generate(PhantomSpec(**SMALL_CASE))
    case.modalities["T2"] = case.modalities["FLAIR"] = None
    with pytest.raises(ValidationError):
        segment_volume(case, build_unet(TINY, 0), TINY)


def test_optimizer_is_adam_by_default():
    result = train_segmentation(_cases(), TINY, steps=1, seed=0)
    sgd = train_segmentation(_cases(), TINY, optimizer=OptimizerConfig("sgd", 1e-4), steps=1, seed=0)
    assert result.trace == sgd.trace
    assert result.checkpoint != sgd.checkpoint
