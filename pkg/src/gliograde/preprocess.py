"""Voxel-spacing resampling and per-modality intensity normalisation.

Inputs are assumed skull-stripped: zero voxels are background and are
excluded from the normalisation statistics and left at exactly zero.
"""

import numpy as np

from . import interp
from .errors import DegenerateInputError, DomainError
from .volumes import MultiModalCase, Volume


def resampled_dims(dims, spacing, target_spacing):
    return tuple(max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(dims, spacing, target_spacing))


def resample(volume, target_spacing=(1.0, 1.0, 1.0)):
    """Trilinear, align-corners resample onto ``target_spacing`` (mm per voxel)."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or not all(t > 0 for t in target_spacing):
        raise DomainError(f"target spacing must be three positive values, got {target_spacing}")
    dims = resampled_dims(volume.dims, volume.spacing, target_spacing)
    if dims == volume.dims and np.allclose(volume.spacing, target_spacing):
        return Volume(volume.values.copy(), target_spacing, volume.affine)
    values = interp.resize(volume.values.astype(np.float64), dims, axes=(0, 1, 2))
    return Volume(values.astype(np.float32), target_spacing, volume.affine)


def znormalize(volume):
    """Map brain (non-zero) voxels to ``(x - mean) / std`` using population statistics."""
    values = volume.values
    brain = values != 0
    region = values[brain].astype(np.float64)
    if region.size < 2:
        raise DegenerateInputError(f"znormalize: need >= 2 brain voxels, found {region.size}")
    mean = region.mean()
    std = region.std()
    if not std > 0:
        raise DegenerateInputError("znormalize: brain region has zero standard deviation")
    out = np.zeros(values.shape, dtype=np.float64)
    out[brain] = (region - mean) / std
    return Volume(out.astype(np.float32), volume.spacing, volume.affine)


def preprocess_case(case, target_spacing=(1.0, 1.0, 1.0)):
    """Resample every present volume to ``target_spacing`` and normalise each modality."""
    mods = {
        m: (znormalize(resample(v, target_spacing)) if v is not None else None)
        for m, v in case.modalities.items()
    }
    seg = case.segmentation
    if seg is not None:
        seg = resample(seg, target_spacing)
        seg = Volume((seg.values >= 0.5).astype(np.float32), seg.spacing, seg.affine)
    return MultiModalCase(case.case_id, mods, segmentation=seg, grade=case.grade)
