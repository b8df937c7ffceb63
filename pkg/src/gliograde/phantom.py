"""Seeded synthetic glioma phantoms with exact ground truth.

A phantom is an ellipsoidal "brain" on a zero background with one ellipsoidal
tumour inside it. The tumour is hyperintense on T2/FLAIR for both grades.
On T1ce a GBM shows an enhancing rim around a dark necrotic core, whereas an
LGG is isointense to brain. A voxel belongs to an ellipsoid iff its centre
(integer index coordinates) satisfies the ellipsoid inequality.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .rng import rng_stream
from .volumes import GRADES, MODALITIES, MultiModalCase, Volume

BRAIN_INTENSITY = {"T1": 1.0, "T1ce": 1.0, "T2": 0.8, "FLAIR": 0.9}


@dataclass(frozen=True)
class PhantomSpec:
    grade: str = "GBM"
    seed: int = 0
    dims: tuple = (48, 48, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    brain_half_axes: tuple = (20.0, 21.0, 19.0)
    brain_intensity: dict = field(default_factory=lambda: dict(BRAIN_INTENSITY))
    tumour_half_axis_range: tuple = (6.0, 12.0)
    tumour_offset_range: float = 8.0
    # explicit geometry overrides the random draw
    tumour_center: tuple = None
    tumour_half_axes: tuple = None
    rim_fraction: float = 0.6
    rim_intensity: float = 2.0
    core_intensity: float = 0.3
    t1_tumour_intensity: float = 0.6
    t2_flair_tumour_gain: float = 2.0
    noise_sigma: float = 0.05
    omit: tuple = ()


def ellipsoid_mask(dims, center, half_axes):
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, half_axes))
    return q <= 1.0


def normalized_radius(dims, center, half_axes):
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    return np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, half_axes)))


def _surface_inside(center, half_axes, brain_center, brain_axes, n_theta=64, n_phi=128):
    theta = np.linspace(0.0, np.pi, n_theta)[:, None]
    phi = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)[None, :]
    unit = (np.cos(theta) + 0 * phi, np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi))
    q = sum(
        ((c + a * u - bc) / ba) ** 2
        for c, a, u, bc, ba in zip(center, half_axes, unit, brain_center, brain_axes)
    )
    return float(q.max()) < 1.0


def tumour_geometry(spec, rng=None):
    """Return ``(center, half_axes)``, drawing unset values from ``rng``."""
    brain_center = tuple((n - 1) / 2.0 for n in spec.dims)
    if spec.tumour_center is not None and spec.tumour_half_axes is not None:
        center, axes = tuple(map(float, spec.tumour_center)), tuple(map(float, spec.tumour_half_axes))
        if not _surface_inside(center, axes, brain_center, spec.brain_half_axes):
            raise ValidationError("phantom spec: tumour ellipsoid is not inside the brain ellipsoid")
        return center, axes
    lo, hi = spec.tumour_half_axis_range
    for _ in range(1000):
        axes = tuple(rng.uniform(lo, hi, 3)) if spec.tumour_half_axes is None else spec.tumour_half_axes
        offset = rng.uniform(-spec.tumour_offset_range, spec.tumour_offset_range, 3)
        center = tuple(c + o for c, o in zip(brain_center, offset)) if spec.tumour_center is None else spec.tumour_center
        if _surface_inside(center, axes, brain_center, spec.brain_half_axes):
            return tuple(map(float, center)), tuple(map(float, axes))
    raise ValidationError("phantom spec: could not place a tumour inside the brain in 1000 draws")


def generate(spec, case_id=None, rng=None):
    """Build a :class:`MultiModalCase` with ground-truth mask and grade."""
    if spec.grade not in GRADES:
        raise ValidationError(f"phantom grade must be GBM or LGG, got {spec.grade!r}")
    omit = set(spec.omit)
    if "T1ce" in omit or {"T2", "FLAIR"} <= omit or omit - set(MODALITIES):
        raise ValidationError(f"phantom spec: cannot omit {sorted(omit)}")
    rng = rng if rng is not None else rng_stream(spec.seed, "phantom")
    dims = tuple(spec.dims)
    brain_center = tuple((n - 1) / 2.0 for n in dims)
    if any(c - a < 0 or c + a > n - 1 for c, a, n in zip(brain_center, spec.brain_half_axes, dims)):
        raise ValidationError(f"phantom spec: brain half-axes {spec.brain_half_axes} exceed volume {dims}")
    center, axes = tumour_geometry(spec, rng)

    brain = ellipsoid_mask(dims, brain_center, spec.brain_half_axes)
    radius = normalized_radius(dims, center, axes)
    tumour = radius <= 1.0
    if np.any(tumour & ~brain):
        raise ValidationError("phantom spec: tumour voxels fall outside the brain")
    rim = tumour & (radius > spec.rim_fraction)
    core = tumour & ~rim

    modalities = {}
    for name in MODALITIES:
        base = spec.brain_intensity[name]
        vol = np.where(brain, base, 0.0)
        if name in ("T2", "FLAIR"):
            vol[tumour] = base * spec.t2_flair_tumour_gain
        elif name == "T1":
            vol[tumour] = spec.t1_tumour_intensity
        elif spec.grade == "GBM":
            vol[rim] = spec.rim_intensity
            vol[core] = spec.core_intensity
        # noise is drawn for every modality, so omitting one leaves the others unchanged
        noise = rng.normal(0.0, 1.0, dims) * spec.noise_sigma if spec.noise_sigma > 0 else 0.0
        vol = np.where(brain, vol + noise, 0.0)
        if name not in omit:
            modalities[name] = Volume(vol.astype(np.float32), spec.spacing)
    seg = Volume(tumour.astype(np.float32), spec.spacing)
    case_id = case_id or f"phantom_{spec.seed}"
    return MultiModalCase(case_id, modalities, segmentation=seg, grade=spec.grade)


def generate_cohort(count, seed, **spec_fields):
    """``count`` phantoms alternating LGG/GBM, each from its own sub-stream of ``seed``."""
    template = PhantomSpec(seed=seed, **spec_fields)
    cases = []
    for i in range(count):
        spec = replace(template, grade=GRADES[i % 2])
        cases.append(generate(spec, case_id=f"phantom_{i:03d}", rng=rng_stream(seed, "phantom", i)))
    return cases


def rim_core_discriminator(case, gap=None):
    """Hand-coded grader: T1ce rim mean minus core mean inside the true mask.

    Returns ``"GBM"`` when the rim is brighter than the core by more than
    half the constructed gap. Used to show the phantom task is solvable.
    """
    spec = PhantomSpec()
    gap = (spec.rim_intensity - spec.core_intensity) / 2.0 if gap is None else gap
    mask = case.segmentation.values > 0
    t1ce = case.modalities["T1ce"].values
    idx = np.argwhere(mask)
    center = idx.mean(axis=0)
    half = (idx.max(axis=0) - idx.min(axis=0)) / 2.0 + 0.5
    r = normalized_radius(mask.shape, center, half)
    rim, core = mask & (r > spec.rim_fraction), mask & (r <= spec.rim_fraction)
    if not rim.any() or not core.any():
        return "LGG"
    return "GBM" if t1ce[rim].mean() - t1ce[core].mean() > gap else "LGG"
