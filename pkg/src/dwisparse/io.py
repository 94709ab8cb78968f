"""Reading and writing of volumetric MRI data and gradient schemes.

Supports a deliberate subset of the NIfTI-1 file format: single-file
(.nii) images with the 348-byte header, little-endian byte order and
int16 / float32 / float64 voxel data.  Gradient schemes are read from
FSL-style bval / bvec text files.

The in-memory voxel order is fixed and documented: a voxel index
(x, y, z, v) maps to the linear file offset x + X*(y + Y*(z + Z*v)),
i.e. x varies fastest and the volume index v slowest, matching the
on-disk layout of NIfTI-1.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# voxel datatype codes of the format; the only ones this reader accepts
DT_INT16 = 4
DT_FLOAT32 = 16
DT_FLOAT64 = 64

_DTYPE_FOR_CODE = {
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
    DT_FLOAT64: np.dtype("<f8"),
}
_CODE_FOR_NAME = {
    "int16": DT_INT16,
    "float32": DT_FLOAT32,
    "float64": DT_FLOAT64,
}

# Complete 348-byte header layout, little-endian.
HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# header fields copied verbatim from input to output; they describe
# orientation and annotation and are never interpreted by this package
_PASSTHROUGH_FIELDS = (
    "dim_info",
    "intent_p1",
    "intent_p2",
    "intent_p3",
    "intent_code",
    "xyzt_units",
    "toffset",
    "descrip",
    "aux_file",
    "qform_code",
    "sform_code",
    "quatern_b",
    "quatern_c",
    "quatern_d",
    "qoffset_x",
    "qoffset_y",
    "qoffset_z",
    "srow_x",
    "srow_y",
    "srow_z",
    "intent_name",
)


class VolumeIOError(Exception):
    """Base class for file format problems in this module."""


class HeaderError(VolumeIOError):
    """Header is malformed: bad magic, bad size field or bad dimensions."""


class UnsupportedDatatypeError(VolumeIOError):
    """Voxel datatype is valid NIfTI-1 but outside the supported subset."""


class TruncatedDataError(VolumeIOError):
    """File ends before the voxel data announced by the header."""


class GradientError(VolumeIOError):
    """bval / bvec files are malformed or mutually inconsistent."""


@dataclass
class Volume4D:
    """A 4D image: three spatial axes plus the volume (diffusion) axis.

    Parameters
    ----------
    data : ndarray, shape (X, Y, Z, V)
        Voxel values as float64.  3D images are stored with V = 1.
    spacing : tuple of float
        Voxel edge lengths in millimetres along x, y, z.
    header : ndarray or None
        Original file header (structured scalar of ``HEADER_DTYPE``).
        Orientation fields are copied verbatim on write, never used for
        any computation.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    header: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[..., np.newaxis]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got {self.data.ndim}D")
        if any(s <= 0 for s in self.data.shape):
            raise ValueError(f"volume axes must be positive, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive lengths, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        """Spatial dimensions (X, Y, Z)."""
        return self.data.shape[:3]

    @property
    def n_volumes(self) -> int:
        return self.data.shape[3]

    def validate(self) -> None:
        """Check the full-array invariant that all intensities are finite."""
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")

    def copy(self) -> "Volume4D":
        hdr = None if self.header is None else self.header.copy()
        return Volume4D(self.data.copy(), self.spacing, hdr)


@dataclass
class Mask3D:
    """Boolean region of interest over the spatial grid."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 4 and self.data.shape[3] == 1:
            self.data = self.data[..., 0]
        if self.data.ndim != 3:
            raise ValueError(f"mask must be 3D, got {self.data.ndim}D")
        self.data = self.data != 0

    @property
    def n_selected(self) -> int:
        return int(self.data.sum())


@dataclass
class GradientTable:
    """Per-volume b-values and unit gradient directions.

    Directions are unit-norm for diffusion-weighted volumes and exactly
    zero for b0 volumes (b-value at or below ``b0_threshold``).
    """

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = 50.0

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).ravel()
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if self.bvecs.ndim != 2 or self.bvecs.shape[1] != 3:
            raise ValueError(f"bvecs must have shape (V, 3), got {self.bvecs.shape}")
        if self.bvecs.shape[0] != self.bvals.shape[0]:
            raise GradientError(
                f"gradient count mismatch: {self.bvals.shape[0]} b-values but "
                f"{self.bvecs.shape[0]} directions"
            )
        if not np.all(np.isfinite(self.bvals)) or not np.all(np.isfinite(self.bvecs)):
            raise GradientError("gradient table contains non-finite values")
        if np.any(self.bvals < 0):
            raise GradientError("b-values must be nonnegative")
        norms = np.linalg.norm(self.bvecs, axis=1)
        b0 = self.bvals <= self.b0_threshold
        if not b0.any():
            raise GradientError(
                f"no b0 volume found (threshold {self.b0_threshold}); one is required"
            )
        bad = ~b0 & (np.abs(norms - 1.0) > 1e-6)
        if bad.any():
            raise GradientError(
                f"{int(bad.sum())} diffusion-weighted directions are not unit-norm; "
                "use read_gradients to normalize on load"
            )
        self.bvecs = self.bvecs.copy()
        self.bvecs[b0] = 0.0

    @property
    def n_volumes(self) -> int:
        return self.bvals.shape[0]

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= self.b0_threshold

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.b0_mask)

    @property
    def dwi_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.b0_mask)


def _read_header(raw: bytes, path: str) -> np.ndarray:
    if len(raw) < HEADER_SIZE:
        raise HeaderError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        # a big-endian file would show 348 byte-swapped here
        swapped = int(np.int32(hdr["sizeof_hdr"]).byteswap())
        if swapped == HEADER_SIZE:
            raise HeaderError(f"{path}: big-endian files are not supported")
        raise HeaderError(f"{path}: bad sizeof_hdr {int(hdr['sizeof_hdr'])}")
    magic = bytes(hdr["magic"])
    if magic[:3] != MAGIC_SINGLE[:3]:
        raise HeaderError(f"{path}: bad magic {magic!r}, expected single-file 'n+1'")
    return hdr


def read_volume(path: str) -> Volume4D:
    """Read a 3D or 4D image from a single-file NIfTI-1 volume.

    Voxel values are scaled by scl_slope / scl_inter when scl_slope is
    set, negative intensities are clamped to zero (with a logged count),
    and the result is always float64 with a 4th axis (V = 1 for 3D input).

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    HeaderError, UnsupportedDatatypeError, TruncatedDataError
        For the corresponding file format problems.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"volume file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    hdr = _read_header(raw, path)

    ndim = int(hdr["dim"][0])
    if ndim not in (3, 4):
        raise HeaderError(f"{path}: only 3D or 4D images supported, got dim[0]={ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    if any(d <= 0 for d in shape):
        raise HeaderError(f"{path}: non-positive image dimensions {shape}")
    if ndim == 3:
        shape = shape + (1,)

    code = int(hdr["datatype"])
    if code not in _DTYPE_FOR_CODE:
        raise UnsupportedDatatypeError(
            f"{path}: datatype code {code} not supported "
            f"(supported: int16={DT_INT16}, float32={DT_FLOAT32}, float64={DT_FLOAT64})"
        )
    dtype = _DTYPE_FOR_CODE[code]

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise HeaderError(f"{path}: vox_offset {offset} overlaps the header")
    n_vals = int(np.prod(shape))
    n_bytes = n_vals * dtype.itemsize
    if len(raw) < offset + n_bytes:
        raise TruncatedDataError(
            f"{path}: expected {n_bytes} bytes of voxel data at offset {offset}, "
            f"file has {max(len(raw) - offset, 0)}"
        )

    flat = np.frombuffer(raw, dtype=dtype, count=n_vals, offset=offset)
    data = flat.reshape(shape, order="F").astype(np.float64)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0.0:
        data = data * slope + (inter if np.isfinite(inter) else 0.0)

    n_neg = int(np.count_nonzero(data < 0))
    if n_neg:
        log.warning("%s: clamped %d negative intensities to 0", path, n_neg)
        data = np.maximum(data, 0.0)

    if not np.all(np.isfinite(data)):
        raise VolumeIOError(f"{path}: volume contains non-finite values")

    pixdim = hdr["pixdim"]
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    return Volume4D(data, spacing, header=hdr.copy())


def write_volume(vol: Volume4D, path: str, dtype: str = "float32") -> None:
    """Write a volume as single-file little-endian NIfTI-1.

    Images with a single volume are written with dim[0] = 3.  Orientation
    and annotation header fields of ``vol.header`` (when the volume came
    from a file) are copied verbatim.

    Parameters
    ----------
    vol : Volume4D
    path : str
    dtype : {'float32', 'float64', 'int16'}
        On-disk voxel type.  No slope/intercept scaling is applied on
        write; int16 output is rounded and clipped to the int16 range.
    """
    if dtype not in _CODE_FOR_NAME:
        raise ValueError(f"unsupported output dtype {dtype!r}")
    code = _CODE_FOR_NAME[dtype]
    out_dtype = _DTYPE_FOR_CODE[code]

    hdr = np.zeros((), dtype=HEADER_DTYPE)
    if vol.header is not None:
        for name in _PASSTHROUGH_FIELDS:
            hdr[name] = vol.header[name]
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    shape = vol.data.shape
    ndim = 3 if shape[3] == 1 else 4
    dim = np.ones(8, dtype=np.int16)
    dim[0] = ndim
    dim[1 : ndim + 1] = shape[:ndim]
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = out_dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = vol.spacing
    if vol.header is not None:
        pixdim[0] = vol.header["pixdim"][0] if vol.header["pixdim"][0] != 0 else 1.0
        pixdim[4:] = vol.header["pixdim"][4:]
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = DEFAULT_VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["magic"] = MAGIC_SINGLE

    data = vol.data
    if code == DT_INT16:
        data = np.clip(np.rint(data), -32768, 32767)
    flat = np.asfortranarray(data).astype(out_dtype).ravel(order="F")

    try:
        f = open(path, "wb")
    except OSError as e:
        raise VolumeIOError(f"cannot write volume to {path}: {e}") from e
    with f:
        f.write(hdr.tobytes())
        f.write(b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE))
        f.write(flat.tobytes())


def read_mask(path: str) -> Mask3D:
    """Read a mask volume; every nonzero voxel is selected."""
    vol = read_volume(path)
    if vol.n_volumes != 1:
        raise VolumeIOError(f"{path}: mask must be a single 3D volume")
    return Mask3D(vol.data[..., 0] != 0)


def write_mask(mask: Mask3D, path: str, spacing=(1.0, 1.0, 1.0)) -> None:
    write_volume(Volume4D(mask.data.astype(np.float64), spacing), path, dtype="int16")


def _parse_numeric_table(path: str, label: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{label} file not found: {path}")
    rows = []
    with open(path) as f:
        for line in f:
            tokens = line.replace(",", " ").split()
            if not tokens:
                continue
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as e:
                raise GradientError(f"{path}: non-numeric token in {label} file: {e}") from e
    if not rows:
        raise GradientError(f"{path}: empty {label} file")
    n = len(rows[0])
    if any(len(r) != n for r in rows):
        raise GradientError(f"{path}: ragged rows in {label} file")
    return np.array(rows, dtype=np.float64)


def read_gradients(bval_path: str, bvec_path: str, b0_threshold: float = 50.0) -> GradientTable:
    """Read FSL-style bval / bvec files into a GradientTable.

    The bval file holds V values; the bvec file holds 3 rows of V
    components (a V x 3 layout is transposed automatically).  Nonzero
    directions are unit-normalized on load.

    Raises
    ------
    GradientError
        On count mismatch, zero direction for a diffusion-weighted
        volume, or malformed numeric content.
    """
    bvals = _parse_numeric_table(bval_path, "bval").ravel()
    vecs = _parse_numeric_table(bvec_path, "bvec")

    if vecs.shape[0] == 3 and vecs.shape[1] != 3:
        vecs = vecs.T
    elif vecs.shape[1] == 3 and vecs.shape[0] != 3:
        pass
    elif vecs.shape == (3, 3):
        vecs = vecs.T  # ambiguous; FSL layout (3 rows of V) assumed
    else:
        raise GradientError(
            f"{bvec_path}: expected 3 rows of V components or V rows of 3, got {vecs.shape}"
        )

    if vecs.shape[0] != bvals.shape[0]:
        raise GradientError(
            f"gradient count mismatch: {bvals.shape[0]} b-values in {bval_path} but "
            f"{vecs.shape[0]} directions in {bvec_path}"
        )

    norms = np.linalg.norm(vecs, axis=1)
    b0 = bvals <= b0_threshold
    zero_dwi = ~b0 & (norms < 1e-12)
    if zero_dwi.any():
        raise GradientError(
            f"{bvec_path}: zero direction for diffusion-weighted volume(s) "
            f"{np.flatnonzero(zero_dwi).tolist()}"
        )
    out = np.zeros_like(vecs)
    nz = norms > 1e-12
    out[nz] = vecs[nz] / norms[nz, None]
    out[b0] = 0.0
    return GradientTable(bvals, out, b0_threshold)
