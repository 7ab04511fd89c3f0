"""Volumetric data model, intensity preprocessing and NIfTI-1 ingestion.

Conventions used across the package:

* volume data is a numpy array indexed ``[x, y, z]``; flat serializations
  (NIfTI, field files) are x-fastest.
* ``spacing`` is mm per voxel, ``origin`` is the physical position (mm) of
  the center of voxel (0, 0, 0).
* intensities are raw HU before :func:`window_normalize` and lie in
  ``[-1, 1]`` afterwards.

``Volume3`` and ``Mask3`` are immutable after construction and safe to
share between workers; every operation here is a pure function.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np


class NiftiFormatError(ValueError):
    """Raised for files this reader's NIfTI-1 subset cannot ingest."""


def _own(data, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 3:
        raise ValueError(f"expected 3-D data, got shape {arr.shape}")
    arr = arr.copy() if arr.flags.writeable is False else arr
    arr.setflags(write=False)
    return arr


def _check_grid(spacing, origin) -> tuple[tuple, tuple]:
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if len(spacing) != 3 or len(origin) != 3:
        raise ValueError("spacing and origin must have 3 components")
    if any(s <= 0 or not math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing components must be positive, got {spacing}")
    return spacing, origin


@dataclasses.dataclass(frozen=True)
class Volume3:
    """Scalar 3D image with voxel spacing (mm) and physical origin (mm)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        spacing, origin = _check_grid(self.spacing, self.origin)
        object.__setattr__(self, "data", _own(self.data, np.float32))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def like(self, data) -> "Volume3":
        """New volume on this grid with replaced voxel data."""
        return Volume3(data, self.spacing, self.origin)


@dataclasses.dataclass(frozen=True)
class Mask3:
    """Binary segmentation volume; voxel values are exactly 0 or 1."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        spacing, origin = _check_grid(self.spacing, self.origin)
        arr = np.asarray(self.data)
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask voxels must be exactly 0 or 1")
        object.__setattr__(self, "data", _own(arr, np.uint8))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def like(self, data) -> "Mask3":
        return Mask3(data, self.spacing, self.origin)

    def volume_view(self) -> Volume3:
        """The mask as a float volume (for warping and loss evaluation)."""
        return Volume3(self.data.astype(np.float32), self.spacing, self.origin)


def window_normalize(v: Volume3, lo: float = -200.0, hi: float = 200.0) -> Volume3:
    """Clamp raw HU to ``[lo, hi]`` and map affinely to ``[-1, 1]``.

    Monotone and idempotent on already-windowed data re-expressed in HU.
    """
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got ({lo}, {hi})")
    raw = v.data
    if not np.isfinite(raw).all():
        idx = np.argwhere(~np.isfinite(raw))[0]
        raise ValueError(f"non-finite intensity at voxel {tuple(int(i) for i in idx)}")
    out = (np.clip(raw, lo, hi) - lo) * (2.0 / (hi - lo)) - 1.0
    return v.like(out.astype(np.float32))


def resample_axial(v: Volume3, target_sz: float) -> Volume3:
    """Linearly resample along z to ``target_sz`` mm spacing.

    The x/y grid is untouched; the physical z extent is preserved to
    within one voxel (new count is rounded from the old extent).
    """
    if target_sz <= 0:
        raise ValueError(f"target z spacing must be positive, got {target_sz}")
    nx, ny, nz = v.shape
    sz = v.spacing[2]
    new_nz = int(round(nz * sz / target_sz))
    if new_nz < 2:
        raise ValueError(
            f"resampling {nz} slices of {sz}mm to {target_sz}mm leaves {new_nz} < 2 slices"
        )
    # new voxel centers in old index coordinates, edge-aligned extents
    t = (np.arange(new_nz, dtype=np.float64) + 0.5) * (target_sz / sz) - 0.5
    t = np.clip(t, 0.0, nz - 1.0)
    i0 = np.minimum(t.astype(np.int64), nz - 2)
    w = (t - i0).astype(np.float32)
    data = v.data[:, :, i0] * (1.0 - w) + v.data[:, :, i0 + 1] * w
    origin = (v.origin[0], v.origin[1], v.origin[2] + 0.5 * (target_sz - sz))
    return Volume3(data.astype(np.float32), (v.spacing[0], v.spacing[1], target_sz), origin)


def _extent(v) -> tuple[np.ndarray, np.ndarray]:
    sp = np.asarray(v.spacing)
    lo = np.asarray(v.origin) - 0.5 * sp
    return lo, lo + np.asarray(v.shape) * sp


def crop_common_extent(vs: list) -> list:
    """Crop volumes to the intersection of their physical extents.

    Each grid is cropped inward to whole voxels, then unified to the first
    volume's voxel count by nearest-voxel alignment, so all outputs share
    one shape. Raises if the extents do not intersect or the grids cannot
    be unified within one voxel.
    """
    if len(vs) < 2:
        raise ValueError("need at least 2 volumes to crop to a common extent")
    los, his = zip(*(_extent(v) for v in vs))
    ilo = np.max(los, axis=0)
    ihi = np.min(his, axis=0)
    if (ihi - ilo <= 0).any():
        raise ValueError("volumes have no common physical extent")

    anchor = vs[0]
    sp_a = np.asarray(anchor.spacing)
    lo_a, _ = _extent(anchor)
    start_a = np.ceil((ilo - lo_a) / sp_a - 1e-9).astype(int)
    stop_a = np.floor((ihi - lo_a) / sp_a + 1e-9).astype(int)
    count = stop_a - start_a
    if (count < 1).any():
        raise ValueError("common extent is smaller than one anchor voxel")
    crop_lo_phys = lo_a + start_a * sp_a

    out = []
    for v in vs:
        sp = np.asarray(v.spacing)
        lo_v, _ = _extent(v)
        start = np.rint((crop_lo_phys - lo_v) / sp).astype(int)
        stop = start + count
        if (start < 0).any() or (stop > np.asarray(v.shape)).any():
            raise ValueError("grids cannot be unified to the anchor within one voxel")
        sl = tuple(slice(a, b) for a, b in zip(start, stop))
        origin = tuple(np.asarray(v.origin) + start * sp)
        out.append(type(v)(np.ascontiguousarray(v.data[sl]), v.spacing, origin))
    return out


def translate_voxels(v, shift: tuple):
    """Shift volume content by whole voxels with edge-clamped fill."""
    data = v.data
    for ax, s in enumerate(shift):
        s = int(s)
        if s == 0:
            continue
        pad = [(0, 0)] * 3
        # content moves by +s: output(v) = input(v - s)
        pad[ax] = (s, 0) if s > 0 else (0, -s)
        padded = np.pad(data, pad, mode="edge")
        sl = [slice(None)] * 3
        sl[ax] = slice(0, data.shape[ax]) if s > 0 else slice(-s, padded.shape[ax])
        data = padded[tuple(sl)]
    return v.like(data)


def prealign_translation(moving: Volume3, fixed: Volume3, max_shift: int = 4,
                         downsample: int = 2) -> tuple:
    """Integer-voxel translation pre-alignment by exhaustive search.

    Scans shifts in ``[-max_shift, max_shift]^3`` on in-plane-downsampled
    copies, minimising mean absolute intensity difference, and applies the
    best shift to the moving volume. Stands in for external rigid
    pre-registration; phantom experiments normally skip it.
    """
    if moving.shape != fixed.shape:
        raise ValueError(f"shape mismatch {moving.shape} vs {fixed.shape}")
    d = max(1, int(downsample))
    a = moving.data[::d, ::d, :].astype(np.float32)
    b = fixed.data[::d, ::d, :].astype(np.float32)
    step = max(1, max_shift // 2) if d > 1 else 1
    shifts = range(-max_shift, max_shift + 1)
    best, best_cost = (0, 0, 0), np.inf
    for sx in shifts:
        for sy in shifts:
            for sz in shifts:
                # compare over the overlap of the shifted grids
                ax = slice(max(0, sx // d), a.shape[0] + min(0, sx // d))
                # integer shift on the downsampled grid only approximates
                # sub-step shifts; evaluate only multiples of the decimation
                if sx % d or sy % d:
                    continue
                del ax, step
                sandbox = (sx // d, sy // d, sz)
                cost = _shift_cost(a, b, sandbox)
                if cost < best_cost:
                    best_cost, best = cost, (sx, sy, sz)
    return best, translate_voxels(moving, best)


def _shift_cost(a, b, shift):
    sl_a, sl_b = [], []
    for ax, s in enumerate(shift):
        n = a.shape[ax]
        if abs(s) >= n:
            return np.inf
        if s >= 0:
            sl_a.append(slice(s, n))
            sl_b.append(slice(0, n - s))
        else:
            sl_a.append(slice(0, n + s))
            sl_b.append(slice(-s, n))
    diff = a[tuple(sl_a)] - b[tuple(sl_b)]
    return float(np.mean(np.abs(diff))) if diff.size else np.inf


# ---------------------------------------------------------------------------
# NIfTI-1 subset: single-file uncompressed .nii, int16/float32, axis-aligned.

_HEADER = np.dtype([
    ("sizeof_hdr", "<i4"), ("data_type", "S10"), ("db_name", "S18"),
    ("extents", "<i4"), ("session_error", "<i2"), ("regular", "S1"),
    ("dim_info", "S1"), ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"), ("intent_p2", "<f4"), ("intent_p3", "<f4"),
    ("intent_code", "<i2"), ("datatype", "<i2"), ("bitpix", "<i2"),
    ("slice_start", "<i2"), ("pixdim", "<f4", (8,)), ("vox_offset", "<f4"),
    ("scl_slope", "<f4"), ("scl_inter", "<f4"), ("slice_end", "<i2"),
    ("slice_code", "S1"), ("xyzt_units", "S1"), ("cal_max", "<f4"),
    ("cal_min", "<f4"), ("slice_duration", "<f4"), ("toffset", "<f4"),
    ("glmax", "<i4"), ("glmin", "<i4"), ("descrip", "S80"),
    ("aux_file", "S24"), ("qform_code", "<i2"), ("sform_code", "<i2"),
    ("quatern_b", "<f4"), ("quatern_c", "<f4"), ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"), ("qoffset_y", "<f4"), ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)), ("srow_y", "<f4", (4,)), ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
])
assert _HEADER.itemsize == 348

_DT_INT16 = 4
_DT_FLOAT32 = 16


def save_nifti(v, path) -> None:
    """Write a Volume3 (float32) or Mask3 (int16) as uncompressed NIfTI-1."""
    if isinstance(v, Mask3):
        arr, code, bits = v.data.astype("<i2"), _DT_INT16, 16
    elif isinstance(v, Volume3):
        arr, code, bits = v.data.astype("<f4"), _DT_FLOAT32, 32
    else:
        raise TypeError(f"cannot save {type(v).__name__} as NIfTI")
    hdr = np.zeros((), dtype=_HEADER)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *v.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = bits
    hdr["pixdim"] = [1.0, *v.spacing, 0, 0, 0, 0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = bytes([2])  # NIFTI_UNITS_MM
    hdr["sform_code"] = 1
    hdr["srow_x"] = [v.spacing[0], 0, 0, v.origin[0]]
    hdr["srow_y"] = [0, v.spacing[1], 0, v.origin[1]]
    hdr["srow_z"] = [0, 0, v.spacing[2], v.origin[2]]
    hdr["magic"] = b"n+1\0"
    with open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\0\0\0\0")  # no extensations flag
        f.write(arr.tobytes(order="F"))


def _parse_nifti(path) -> tuple[np.ndarray, tuple, tuple]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) >= 2 and buf[:2] == b"\x1f\x8b":
        raise NiftiFormatError(f"{path}: gzip-compressed NIfTI is not supported")
    if len(buf) < 352:
        raise NiftiFormatError(f"{path}: file too short for a NIfTI-1 header")
    hdr = np.frombuffer(buf[:348], dtype=_HEADER)[0]
    if int(hdr["sizeof_hdr"]) != 348:
        raise NiftiFormatError(f"{path}: bad sizeof_hdr (not little-endian NIfTI-1?)")
    magic = bytes(hdr["magic"])
    if magic[:3] == b"ni1":
        raise NiftiFormatError(f"{path}: detached .hdr/.img pairs are not supported")
    if magic[:3] != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise NiftiFormatError(f"{path}: expected 3 dimensions, header says {ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1:4])
    if any(d < 1 for d in shape):
        raise NiftiFormatError(f"{path}: non-positive dimensions {shape}")
    code = int(hdr["datatype"])
    if code == _DT_INT16:
        dt = np.dtype("<i2")
    elif code == _DT_FLOAT32:
        dt = np.dtype("<f4")
    else:
        raise NiftiFormatError(
            f"{path}: datatype code {code} unsupported (int16 and float32 only)"
        )
    offset = int(hdr["vox_offset"])
    n = shape[0] * shape[1] * shape[2]
    if len(buf) < offset + n * dt.itemsize:
        raise NiftiFormatError(f"{path}: truncated voxel data")
    raw = np.frombuffer(buf, dtype=dt, count=n, offset=offset)
    data = raw.reshape(shape, order="F").astype(np.float32)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter

    if int(hdr["sform_code"]) > 0:
        srow = np.stack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]])
        off_diag = srow[:, :3] - np.diag(np.diag(srow[:, :3]))
        if np.abs(off_diag).max() > 1e-5:
            raise NiftiFormatError(f"{path}: oblique orientation is not supported")
        diag = np.diag(srow[:, :3])
        if (diag <= 0).any():
            raise NiftiFormatError(f"{path}: flipped/degenerate axes are not supported")
        spacing = tuple(float(s) for s in diag)
        origin = tuple(float(o) for o in srow[:, 3])
    else:
        spacing = tuple(float(s) for s in hdr["pixdim"][1:4])
        origin = (0.0, 0.0, 0.0)
    return data, spacing, origin


def load_nifti(path) -> Volume3:
    """Load an uncompressed NIfTI-1 scalar volume."""
    data, spacing, origin = _parse_nifti(path)
    return Volume3(data, spacing, origin)


def load_nifti_mask(path) -> Mask3:
    """Load a NIfTI-1 file as a binary mask; values must be 0/1."""
    data, spacing, origin = _parse_nifti(path)
    if not np.isin(data, (0.0, 1.0)).all():
        raise NiftiFormatError(f"{path}: mask file contains values other than 0/1")
    return Mask3(data.astype(np.uint8), spacing, origin)
