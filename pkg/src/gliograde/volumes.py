"""Volumes, multi-modal cases and their on-disk formats.

Formats (all little-endian):

* NIfTI-1 single file (``.nii``): uint8 / int16 / float32 payloads, 3 spatial
  dims, ``scl_slope``/``scl_inter`` applied when the slope is non-zero.
* Native volume (``.ggv``): ``b"GGV1"``, u32 dims[3], f32 spacing[3], f32
  payload in row-major order.
* Native case (``.ggk``): ``b"GGK1"``, u16 id length, UTF-8 id, u8 presence
  bits (T1, T1ce, T2, FLAIR, segmentation), u8 grade (0 none, 1 LGG, 2 GBM),
  then one embedded ``.ggv`` record per present volume in that order.
* Checkpoint (``.ggc``): ``b"GGC1"``, u32 tensor count; per tensor u16 name
  length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload.
* Manifest: UTF-8 CSV with header ``case_id,t1,t1ce,t2,flair,seg,grade``.
"""

import csv
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileError, FormatError, ValidationError

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
GRADES = ("LGG", "GBM")
MANIFEST_HEADER = ["case_id", "t1", "t1ce", "t2", "flair", "seg", "grade"]

VOLUME_MAGIC = b"GGV1"
CASE_MAGIC = b"GGK1"
CHECKPOINT_MAGIC = b"GGC1"


@dataclass(eq=False)
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValidationError(f"volume must be 3-D with positive extents, got {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValidationError(f"voxel spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.values.shape

    def same_grid(self, other):
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)


@dataclass(eq=False)
class MultiModalCase:
    """Up to four co-registered modalities; missing ones are ``None``."""

    case_id: str
    modalities: dict
    segmentation: Volume = None
    grade: str = None

    def __post_init__(self):
        self.modalities = {m: self.modalities.get(m) for m in MODALITIES}
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValidationError(f"case {self.case_id}: unknown modalities {sorted(unknown)}")
        if self.modalities["T1ce"] is None:
            raise ValidationError(f"case {self.case_id}: T1ce is required")
        if self.modalities["T2"] is None and self.modalities["FLAIR"] is None:
            raise ValidationError(f"case {self.case_id}: needs T2 and/or FLAIR")
        ref = self.modalities["T1ce"]
        for name, vol in list(self.modalities.items()) + [("segmentation", self.segmentation)]:
            if vol is not None and not vol.same_grid(ref):
                raise ValidationError(
                    f"case {self.case_id}: {name} grid {vol.dims}/{vol.spacing} "
                    f"differs from T1ce {ref.dims}/{ref.spacing}"
                )
        if self.grade is not None and self.grade not in GRADES:
            raise ValidationError(f"case {self.case_id}: grade must be GBM or LGG, got {self.grade!r}")

    @property
    def available(self):
        return {m: v is not None for m, v in self.modalities.items()}

    @property
    def dims(self):
        return self.modalities["T1ce"].dims

    @property
    def spacing(self):
        return self.modalities["T1ce"].spacing

    def stacked(self, exclude=()):
        """``[4, d, h, w]`` float32 array in channel order T1, T1ce, T2, FLAIR; missing -> 0."""
        out = np.zeros((len(MODALITIES),) + self.dims, dtype=np.float32)
        for i, m in enumerate(MODALITIES):
            vol = self.modalities[m]
            if vol is not None and m not in exclude:
                out[i] = vol.values
        return out


# -- NIfTI-1 -----------------------------------------------------------------

_NIFTI_FIELDS = [
    ("i", "sizeof_hdr"), ("10s", "data_type"), ("18s", "db_name"), ("i", "extents"),
    ("h", "session_error"), ("b", "regular"), ("b", "dim_info"), ("8h", "dim"),
    ("3f", "intent_p"), ("h", "intent_code"), ("h", "datatype"), ("h", "bitpix"),
    ("h", "slice_start"), ("8f", "pixdim"), ("f", "vox_offset"), ("f", "scl_slope"),
    ("f", "scl_inter"), ("h", "slice_end"), ("b", "slice_code"), ("b", "xyzt_units"),
    ("f", "cal_max"), ("f", "cal_min"), ("f", "slice_duration"), ("f", "toffset"),
    ("i", "glmax"), ("i", "glmin"), ("80s", "descrip"), ("24s", "aux_file"),
    ("h", "qform_code"), ("h", "sform_code"), ("6f", "quatern"), ("4f", "srow_x"),
    ("4f", "srow_y"), ("4f", "srow_z"), ("16s", "intent_name"), ("4s", "magic"),
]
_NIFTI_FORMAT = "<" + "".join(f for f, _ in _NIFTI_FIELDS)
assert struct.calcsize(_NIFTI_FORMAT) == 348

_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}


def _unpack_header(raw):
    values = struct.unpack(_NIFTI_FORMAT, raw)
    header, pos = {}, 0
    for fmt, name in _NIFTI_FIELDS:
        n = int(fmt[:-1]) if fmt[:-1] and fmt[-1] != "s" else 1
        header[name] = values[pos] if n == 1 else values[pos : pos + n]
        pos += n
    return header


def read_nifti(path):
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 348:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header ({len(raw)} bytes)")
    if struct.unpack("<i", raw[:4])[0] != 348:
        if struct.unpack(">i", raw[:4])[0] == 348:
            raise FormatError(f"{path}: sizeof_hdr indicates a big-endian header, which is unsupported")
        raise FormatError(f"{path}: sizeof_hdr must be 348")
    hdr = _unpack_header(raw[:348])
    if hdr["magic"] != b"n+1\x00":
        raise FormatError(f"{path}: magic {hdr['magic']!r} is not single-file NIfTI-1 'n+1\\0'")
    dim = hdr["dim"]
    if dim[0] != 3:
        raise FormatError(f"{path}: dim[0] = {dim[0]}, only 3 spatial dimensions are supported")
    dims = tuple(int(n) for n in dim[1:4])
    if min(dims) < 1:
        raise FormatError(f"{path}: dim[1..3] = {dims} must be positive")
    dtype = _NIFTI_DTYPES.get(hdr["datatype"])
    if dtype is None:
        raise FormatError(f"{path}: datatype {hdr['datatype']} unsupported (uint8, int16, float32 only)")
    offset = int(hdr["vox_offset"])
    if offset < 348:
        raise FormatError(f"{path}: vox_offset {hdr['vox_offset']} points inside the header")
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"{path}: payload truncated, expected {nbytes} bytes at offset {offset}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    # first index varies fastest on disk
    values = data.reshape(dims, order="F").astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope):
        values = values * slope + inter
    spacing = tuple(abs(float(s)) for s in hdr["pixdim"][1:4])
    if not all(s > 0 for s in spacing):
        raise FormatError(f"{path}: pixdim[1..3] = {spacing} must be positive")
    if hdr["sform_code"] > 0:
        affine = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"], (0, 0, 0, 1)], dtype=np.float64)
    else:
        affine = np.diag(spacing + (1.0,))
    return Volume(values.astype(np.float32), spacing, affine)


def write_nifti(path, volume):
    """Write a float32 single-file NIfTI-1 with a diagonal sform."""
    hdr = {name: 0 for _, name in _NIFTI_FIELDS}
    hdr.update(
        sizeof_hdr=348, data_type=b"", db_name=b"", regular=b"r"[0], dim=(3, *volume.dims, 1, 1, 1, 1),
        intent_p=(0.0, 0.0, 0.0), datatype=16, bitpix=32, pixdim=(1.0, *volume.spacing, 1, 1, 1, 1),
        vox_offset=352.0, scl_slope=1.0, scl_inter=0.0, xyzt_units=2, descrip=b"gliograde",
        aux_file=b"", sform_code=1, quatern=(0.0,) * 6, srow_x=(volume.spacing[0], 0, 0, 0),
        srow_y=(0, volume.spacing[1], 0, 0), srow_z=(0, 0, volume.spacing[2], 0),
        intent_name=b"", magic=b"n+1\x00",
    )
    flat = []
    for fmt, name in _NIFTI_FIELDS:
        value = hdr[name]
        flat.extend(value if isinstance(value, tuple) else [value])
    header = struct.pack(_NIFTI_FORMAT, *flat) + b"\x00" * 4
    payload = np.asarray(volume.values, dtype="<f4").tobytes(order="F")
    _write_bytes(path, header + payload)


# -- native formats -------------------------------------------------------------


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FileError(f"{path}: cannot read ({exc.strerror or exc})") from exc


def _write_bytes(path, data):
    """Write via a sibling temp file + rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise FileError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def _check_magic(buf, magic, what):
    got = buf.read(4)
    if got == magic:
        return
    if len(got) == 4 and got[:3] == magic[:3]:
        raise FormatError(f"{what}: unsupported format version byte {got[3:]!r}, expected {magic[3:]!r}")
    raise FormatError(f"{what}: bad magic {got!r}, expected {magic!r}")


def _read_exact(buf, n, what):
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"{what}: truncated (wanted {n} bytes, got {len(data)})")
    return data


def _encode_volume(volume):
    return (
        VOLUME_MAGIC
        + struct.pack("<3I", *volume.dims)
        + struct.pack("<3f", *volume.spacing)
        + np.asarray(volume.values, dtype="<f4").tobytes()
    )


def _decode_volume(buf, what):
    _check_magic(buf, VOLUME_MAGIC, what)
    dims = struct.unpack("<3I", _read_exact(buf, 12, what))
    spacing = struct.unpack("<3f", _read_exact(buf, 12, what))
    count = int(np.prod(dims))
    payload = _read_exact(buf, 4 * count, what)
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    try:
        return Volume(values, spacing)
    except ValidationError as exc:
        raise FormatError(f"{what}: {exc}") from exc


def write_native(path, obj):
    """Write a :class:`Volume` (``GGV1``) or :class:`MultiModalCase` (``GGK1``)."""
    if isinstance(obj, Volume):
        _write_bytes(path, _encode_volume(obj))
        return
    if not isinstance(obj, MultiModalCase):
        raise TypeError(f"cannot write {type(obj).__name__} in native format")
    name = obj.case_id.encode("utf-8")
    vols = [obj.modalities[m] for m in MODALITIES] + [obj.segmentation]
    flags = sum(1 << i for i, v in enumerate(vols) if v is not None)
    grade = 0 if obj.grade is None else 1 + GRADES.index(obj.grade)
    parts = [CASE_MAGIC, struct.pack("<H", len(name)), name, struct.pack("<BB", flags, grade)]
    parts += [_encode_volume(v) for v in vols if v is not None]
    _write_bytes(path, b"".join(parts))


def read_native(path):
    """Read either native format, dispatching on the magic."""
    raw = _read_bytes(path)
    what = str(path)
    if raw[:3] == VOLUME_MAGIC[:3]:
        return _decode_volume(io.BytesIO(raw), what)
    buf = io.BytesIO(raw)
    _check_magic(buf, CASE_MAGIC, what)
    (n,) = struct.unpack("<H", _read_exact(buf, 2, what))
    case_id = _read_exact(buf, n, what).decode("utf-8")
    flags, grade = struct.unpack("<BB", _read_exact(buf, 2, what))
    if grade > len(GRADES):
        raise FormatError(f"{what}: grade code {grade} invalid")
    vols = [_decode_volume(buf, what) if flags >> i & 1 else None for i in range(5)]
    if buf.read(1):
        raise FormatError(f"{what}: trailing bytes after last volume")
    try:
        return MultiModalCase(
            case_id,
            dict(zip(MODALITIES, vols[:4])),
            segmentation=vols[4],
            grade=None if grade == 0 else GRADES[grade - 1],
        )
    except ValidationError as exc:
        raise FormatError(f"{what}: {exc}") from exc


def read_volume(path):
    """Read ``.nii`` via the NIfTI reader, anything else as a native volume."""
    if str(path).endswith(".nii"):
        return read_nifti(path)
    vol = read_native(path)
    if not isinstance(vol, Volume):
        raise FormatError(f"{path}: expected a volume, found a case container")
    return vol


# -- checkpoints ------------------------------------------------------------------


@dataclass(eq=False)
class ModelCheckpoint:
    """Ordered ``name -> float32 array`` bundle."""

    tensors: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint) or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def to_bytes(self):
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(self.tensors))]
        for name, value in self.tensors.items():
            value = np.asarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            parts += [
                struct.pack("<H", len(encoded)), encoded,
                struct.pack("<B", value.ndim), struct.pack(f"<{value.ndim}I", *value.shape),
                value.tobytes(),
            ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw, what="checkpoint"):
        buf = io.BytesIO(raw)
        _check_magic(buf, CHECKPOINT_MAGIC, what)
        (count,) = struct.unpack("<I", _read_exact(buf, 4, what))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(buf, 2, what))
            name = _read_exact(buf, n, what).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(buf, 1, what))
            dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, what))
            size = int(np.prod(dims)) if rank else 1
            payload = _read_exact(buf, 4 * size, what)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if buf.read(1):
            raise FormatError(f"{what}: trailing bytes after {count} tensors")
        return cls(tensors)

    def save(self, path):
        _write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(_read_bytes(path), str(path))


# -- manifests ----------------------------------------------------------------------


@dataclass
class CaseDescriptor:
    case_id: str
    paths: dict  # modality -> Path | None
    seg: Path = None
    grade: str = None

    @property
    def available(self):
        return {m: self.paths.get(m) is not None for m in MODALITIES}

    def load(self):
        vols = {m: (read_volume(p) if p is not None else None) for m, p in self.paths.items()}
        seg = read_volume(self.seg) if self.seg is not None else None
        return MultiModalCase(self.case_id, vols, segmentation=seg, grade=self.grade)


def load_manifest(path):
    path = Path(path)
    text = _read_bytes(path).decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise FormatError(f"{path}: header must be exactly {','.join(MANIFEST_HEADER)}")
    base = path.parent
    out, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
        cells = dict(zip(MANIFEST_HEADER, (c.strip() for c in row)))
        case_id = cells["case_id"]
        if not case_id:
            raise ValidationError(f"{path}:{lineno}: empty case_id")
        if case_id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate case_id {case_id}")
        seen.add(case_id)

        def resolve(cell):
            return None if not cell else (base / cell if not os.path.isabs(cell) else Path(cell))

        paths = {m: resolve(cells[m.lower()]) for m in MODALITIES}
        if paths["T1ce"] is None:
            raise ValidationError(f"case {case_id}: T1ce path is required")
        if paths["T2"] is None and paths["FLAIR"] is None:
            raise ValidationError(f"case {case_id}: needs a T2 and/or FLAIR path")
        grade = cells["grade"] or None
        if grade is not None and grade not in GRADES:
            raise ValidationError(f"case {case_id}: grade must be GBM, LGG or empty, got {grade!r}")
        out.append(CaseDescriptor(case_id, paths, resolve(cells["seg"]), grade))
    return out


def write_manifest(path, descriptors):
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for d in descriptors:
        writer.writerow(
            [d.case_id] + [rel(d.paths.get(m)) for m in MODALITIES] + [rel(d.seg), d.grade or ""]
        )
    _write_bytes(path, buf.getvalue().encode("utf-8"))
