"""NIfTI-1 volumes, FSL gradient tables and the in-memory dataset types.

Only single-file, uncompressed NIfTI-1 (``n+1\\0``) is handled. The header is
read and written through a numpy structured dtype so every field sits at its
format-defined offset.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    DegenerateGeometryError,
    FormatError,
    ParseError,
    UnsupportedError,
    UsageError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
DEFAULT_SHELL_TOLERANCE = 50.0
UNIT_TOLERANCE = 1e-12

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def header_dtype(byteorder: str = "<") -> np.dtype:
    dt = np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)
    assert dt.itemsize == HEADER_SIZE
    return dt


# NIfTI datatype code -> (numpy dtype char, bitpix)
_DATATYPES = {4: ("i2", 16), 16: ("f4", 32), 64: ("f8", 64)}
_CODE_FOR_DTYPE = {np.dtype("int16"): 4, np.dtype("float32"): 16, np.dtype("float64"): 64}


@dataclass(frozen=True)
class VolumeGrid:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vox = tuple(float(v) for v in self.voxel_size)
        if len(dims) != 3 or min(dims) < 1:
            raise UsageError(f"grid dims must be 3 positive integers, got {self.dims}")
        if len(vox) != 3 or min(vox) <= 0:
            raise UsageError(f"voxel sizes must be positive, got {self.voxel_size}")
        aff = np.array(self.affine, dtype=np.float64)
        if aff.shape != (4, 4) or not np.all(np.isfinite(aff)):
            raise UsageError("affine must be a finite 4x4 matrix")
        if abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise UsageError("affine 3x3 block is singular")
        aff.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vox)
        object.__setattr__(self, "affine", aff)

    @classmethod
    def isotropic(cls, dims, voxel_mm: float) -> "VolumeGrid":
        aff = np.diag([voxel_mm, voxel_mm, voxel_mm, 1.0])
        return cls(tuple(dims), (voxel_mm,) * 3, aff)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def resized(self, dims, voxel_size) -> "VolumeGrid":
        """Grid covering the same field of view with a new sampling.

        Voxel centres are placed so the outer voxel edges coincide with the
        source grid's edges.
        """
        dims = tuple(int(d) for d in dims)
        voxel_size = tuple(float(v) for v in voxel_size)
        aff = self.affine.copy()
        scale = np.array(voxel_size) / np.array(self.voxel_size)
        aff[:3, :3] = self.affine[:3, :3] * scale[None, :]
        # world position of the new voxel 0 centre, expressed in old index units
        start = -0.5 + 0.5 * scale
        aff[:3, 3] = self.affine[:3, :3] @ start + self.affine[:3, 3]
        return VolumeGrid(dims, voxel_size, aff)

    def same_as(self, other: "VolumeGrid", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_size, other.voxel_size, atol=atol)
            and np.allclose(self.affine, other.affine, atol=atol)
        )


@dataclass(frozen=True)
class Volume:
    """Multi-channel image. ``data`` has shape ``dims + (channels,)``."""

    grid: VolumeGrid
    data: np.ndarray = field(repr=False)
    description: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.shape[:3] != self.grid.dims or data.ndim != 4 or data.shape[3] < 1:
            raise UsageError(f"data shape {data.shape} does not match grid {self.grid.dims}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise UsageError("volume data must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class GradientTable:
    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.array(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.array(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(bvals) != len(bvecs):
            raise UsageError(f"{len(bvals)} b-values but {len(bvecs)} b-vectors")
        if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
            raise UsageError("b-values must be finite and non-negative")
        norms = np.linalg.norm(bvecs, axis=1)
        bad = (bvals > 0) & (np.abs(norms - 1.0) > 1e-6)
        if np.any(bad):
            raise UsageError(f"non-unit b-vectors at indices {np.flatnonzero(bad).tolist()}")
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self) -> int:
        return len(self.bvals)

    def b0_mask(self, threshold: float = DEFAULT_SHELL_TOLERANCE) -> np.ndarray:
        return self.bvals <= threshold

    def subset(self, indices) -> "GradientTable":
        idx = np.asarray(indices, dtype=int)
        return GradientTable(self.bvals[idx], self.bvecs[idx])


@dataclass(frozen=True)
class DwiDataset:
    volume: Volume
    gradients: GradientTable

    def __post_init__(self):
        if self.volume.channels != len(self.gradients):
            raise UsageError(
                f"volume has {self.volume.channels} channels but the gradient table has "
                f"{len(self.gradients)} entries"
            )
        b0 = self.gradients.b0_mask()
        if not np.any(b0):
            raise UsageError("dataset needs at least one b=0 volume")
        dw = self.gradients.bvecs[~b0]
        if len(dw) < 6 or np.linalg.matrix_rank(_quadratic_rows(dw), tol=1e-8) < 6:
            raise DegenerateGeometryError(
                "dataset needs at least six non-collinear diffusion-weighted directions"
            )

    @property
    def grid(self) -> VolumeGrid:
        return self.volume.grid

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    def mean_b0(self) -> np.ndarray:
        return self.volume.data[..., self.gradients.b0_mask()].astype(np.float64).mean(axis=-1)


def _quadratic_rows(u: np.ndarray) -> np.ndarray:
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.stack([x * x, y * y, z * z, x * y, x * z, y * z], axis=1)


# ---------------------------------------------------------------- NIfTI-1

def _affine_from_qform(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    if a == 0.0:
        n = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / n, c / n, d / n
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    pix = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    qfac = -1.0 if float(hdr["pixdim"][0]) < 0 else 1.0
    pix = pix * np.array([1.0, 1.0, qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * pix[None, :]
    aff[:3, 3] = [float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])]
    return aff


def _qform_from_affine(affine: np.ndarray):
    """Quaternion (b, c, d), qfac and offsets for the rotation part of ``affine``."""
    m = affine[:3, :3]
    zooms = np.linalg.norm(m, axis=0)
    r = m / zooms[None, :]
    # nearest orthogonal matrix
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] *= -1
    a = 1.0 + r[0, 0] + r[1, 1] + r[2, 2]
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (r[2, 1] - r[1, 2]) / a
        c = 0.25 * (r[0, 2] - r[2, 0]) / a
        d = 0.25 * (r[1, 0] - r[0, 1]) / a
    else:
        xd = 1.0 + r[0, 0] - (r[1, 1] + r[2, 2])
        yd = 1.0 + r[1, 1] - (r[0, 0] + r[2, 2])
        zd = 1.0 + r[2, 2] - (r[0, 0] + r[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r[0, 1] + r[1, 0]) / b
            d = 0.25 * (r[0, 2] + r[2, 0]) / b
            a = 0.25 * (r[2, 1] - r[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r[0, 1] + r[1, 0]) / c
            d = 0.25 * (r[1, 2] + r[2, 1]) / c
            a = 0.25 * (r[0, 2] - r[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r[0, 2] + r[2, 0]) / d
            c = 0.25 * (r[1, 2] + r[2, 1]) / d
            a = 0.25 * (r[1, 0] - r[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), qfac, zooms, affine[:3, 3]


def read_nifti(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise CorruptionError(f"{path}: file shorter than a NIfTI-1 header")
    size_le = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    size_be = int(np.frombuffer(raw[:4], dtype=">i4")[0])
    if size_le == HEADER_SIZE:
        order = "<"
    elif size_be == HEADER_SIZE:
        order = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is {size_le}, not {HEADER_SIZE}")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(order))[0]
    magic = bytes(raw[344:348])
    if magic == MAGIC_PAIR:
        raise UnsupportedError(f"{path}: two-file NIfTI (ni1) is not supported")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"{path}: bad magic {magic!r}")

    dim = [int(v) for v in hdr["dim"]]
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedError(f"{path}: dim[0]={ndim}; only 3-D and 4-D images are supported")
    dims = tuple(dim[1:4])
    nchan = dim[4] if ndim == 4 else 1
    if min(dims) < 1 or nchan < 1:
        raise FormatError(f"{path}: non-positive dimension in {dim}")
    code = int(hdr["datatype"])
    if code not in _DATATYPES:
        raise UnsupportedError(f"{path}: datatype code {code} not in int16/float32/float64")
    dchar, _ = _DATATYPES[code]
    dtype = np.dtype(order + dchar)

    offset = int(round(float(hdr["vox_offset"])))
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET
    count = int(np.prod(dims)) * nchan
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise CorruptionError(
            f"{path}: expected {nbytes} bytes of voxel data, found {max(len(raw) - offset, 0)}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(dims + (nchan,), order="F").astype(dtype.newbyteorder("="))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data.astype(np.float64) * slope + (inter if np.isfinite(inter) else 0.0)

    pix = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    pix = np.where(pix > 0, pix, 1.0)
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        affine = _affine_from_qform(hdr)
    else:
        affine = np.diag(list(pix) + [1.0])
    grid = VolumeGrid(dims, tuple(pix), affine)
    descrip = bytes(hdr["descrip"]).split(b"\x00", 1)[0].decode("latin-1")
    return Volume(grid, data, descrip)


def write_nifti(volume: Volume, path) -> None:
    data = volume.data
    dtype = np.dtype(data.dtype)
    if dtype not in _CODE_FOR_DTYPE:
        if data.dtype.kind in "iub":
            data = data.astype(np.int16) if np.abs(data).max(initial=0) < 2**15 else data.astype(np.float64)
        else:
            data = data.astype(np.float64)
        dtype = data.dtype
    code = _CODE_FOR_DTYPE[dtype]
    nchan = volume.channels
    grid = volume.grid

    hdr = np.zeros((), dtype=header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = [4 if nchan > 1 else 3, *grid.dims, nchan, 1, 1, 1]
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = _DATATYPES[code][1]
    (qb, qc, qd), qfac, zooms, offset = _qform_from_affine(grid.affine)
    hdr["pixdim"] = [qfac, *grid.voxel_size, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = volume.description.encode("latin-1", "replace")[:79]
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = qb, qc, qd
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = offset
    hdr["srow_x"] = grid.affine[0]
    hdr["srow_y"] = grid.affine[1]
    hdr["srow_z"] = grid.affine[2]
    hdr["magic"] = MAGIC_SINGLE

    payload = np.asarray(data, dtype=dtype.newbyteorder("<")).reshape(-1, order="F")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00\x00\x00\x00")  # extension flag: none
        fh.write(payload.tobytes())


# ---------------------------------------------------------------- gradients

def _read_numeric_rows(path) -> list[list[float]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric token ({exc})") from None
    return rows


def parse_gradient_table(bval_path, bvec_path) -> GradientTable:
    """Read FSL-style ``bvals`` (one row) and ``bvecs`` (three rows).

    A bvecs file stored as N rows of 3 columns is transposed on the fly.
    B-vectors with b > 0 are renormalised to unit length unless already unit
    to within ``UNIT_TOLERANCE``, which keeps written tables bit-exact.
    """
    brows = _read_numeric_rows(bval_path)
    if not brows:
        raise FormatError(f"{bval_path}: empty b-value file")
    bvals = np.array([v for row in brows for v in row]) if all(len(r) == 1 for r in brows) else None
    if bvals is None:
        if len(brows) != 1:
            raise FormatError(f"{bval_path}: expected a single row of b-values, got {len(brows)}")
        bvals = np.array(brows[0])
    n = len(bvals)

    vrows = _read_numeric_rows(bvec_path)
    lengths = {len(r) for r in vrows}
    if len(vrows) == 3 and lengths == {n}:
        bvecs = np.array(vrows).T
    elif len(vrows) == n and lengths == {3}:
        bvecs = np.array(vrows)
    else:
        raise FormatError(
            f"{bvec_path}: expected 3 rows of {n} values, got rows of lengths "
            f"{[len(r) for r in vrows]}"
        )
    if np.any(bvals < 0):
        raise FormatError(f"{bval_path}: negative b-value")
    norms = np.linalg.norm(bvecs, axis=1)
    dw = bvals > 0
    if np.any(dw & (norms == 0)):
        raise FormatError("zero b-vector paired with a non-zero b-value")
    bvecs = bvecs.copy()
    fix = dw & (np.abs(norms - 1.0) > UNIT_TOLERANCE)
    bvecs[fix] /= norms[fix, None]
    return GradientTable(bvals, bvecs)


def write_gradient_table(gradients: GradientTable, bval_path, bvec_path) -> None:
    fmt = "%.17g"
    with open(bval_path, "w") as fh:
        fh.write(" ".join(fmt % v for v in gradients.bvals) + "\n")
    with open(bvec_path, "w") as fh:
        for axis in range(3):
            fh.write(" ".join(fmt % v for v in gradients.bvecs[:, axis]) + "\n")


def split_shells(gradients: GradientTable, tolerance: float = DEFAULT_SHELL_TOLERANCE) -> dict:
    """Group gradient indices by b-value.

    Entries with b <= ``tolerance`` form the b=0 group (key 0). Remaining
    b-values are clustered in sorted order: a value joins the current shell
    when it lies within ``tolerance`` of the shell's running mean. Keys are
    the rounded shell means.
    """
    if tolerance < 0:
        raise UsageError("tolerance must be non-negative")
    bvals = gradients.bvals
    shells: dict[float, list[int]] = {}
    low = np.flatnonzero(bvals <= tolerance) if tolerance > 0 else np.flatnonzero(bvals == 0)
    if len(low):
        shells[0.0] = low.tolist()
    taken = set(low.tolist())
    rest = [i for i in np.argsort(bvals, kind="stable") if i not in taken]
    clusters: list[list[int]] = []
    for i in rest:
        if clusters and abs(bvals[i] - np.mean(bvals[clusters[-1]])) <= tolerance:
            clusters[-1].append(int(i))
        else:
            clusters.append([int(i)])
    for members in clusters:
        key = float(np.round(np.mean(bvals[members])))
        shells.setdefault(key, []).extend(sorted(members))
    return {k: sorted(v) for k, v in sorted(shells.items())}


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
