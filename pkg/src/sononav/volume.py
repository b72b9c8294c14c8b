"""3D intensity volumes: procedural phantoms, surface maps, oblique slice
sampling, and the USV1 on-disk format.

A volume is an (nx, ny, nz) uint8 array with isotropic spacing and a world
origin at voxel (0, 0, 0). Memory and disk ordering is x-fastest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .pose import BASE_ORIENTATION, Pose, tilt_angle


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume / pose file."""


class OutsideFootprintError(ValueError):
    """A surface query fell outside the volume's xy footprint."""


@dataclass(frozen=True)
class Volume:
    """Immutable 3D grayscale volume.

    data: (nx, ny, nz) uint8, Fortran-ordered so x varies fastest in memory.
    spacing: voxel edge length in mm (isotropic).
    origin: world position of voxel (0, 0, 0), mm.
    """

    data: np.ndarray
    spacing: float = 0.5
    origin: np.ndarray = None

    def __post_init__(self):
        data = np.asfortranarray(np.asarray(self.data, dtype=np.uint8))
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        origin = (
            np.zeros(3) if self.origin is None else np.asarray(self.origin, dtype=float)
        )
        if origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def extent_mm(self) -> np.ndarray:
        """Span of the voxel-center lattice along each axis (W, L, H)."""
        return (np.array(self.dims) - 1) * self.spacing

    @property
    def diagonal_mm(self) -> float:
        return float(np.linalg.norm(self.extent_mm))


@dataclass(frozen=True)
class SurfaceMap:
    """Per-column skin height: world z of the topmost nonzero voxel.

    z_mm / valid are (nx, ny); columns that are all zero are invalid and
    fall back to the nearest valid column on lookup.
    """

    z_mm: np.ndarray
    valid: np.ndarray
    spacing: float
    origin: np.ndarray
    nearest_valid: np.ndarray  # (2, nx, ny) indices of the closest valid column


def extract_surface(volume: Volume) -> SurfaceMap:
    """Build the z = surface(x, y) map from voxel intensities.

    The surface point of each (x, y) column is the highest-z voxel with
    nonzero gray value. Raises on an entirely zero volume.
    """
    mask = volume.data > 0
    if not mask.any():
        raise ValueError("cannot extract a surface from an all-zero volume")
    valid = mask.any(axis=2)
    nz = volume.dims[2]
    top_idx = nz - 1 - np.argmax(mask[:, :, ::-1], axis=2)
    z_mm = volume.origin[2] + top_idx * volume.spacing
    z_mm = np.where(valid, z_mm, np.nan)
    # Precomputed nearest-valid-column indices for lookups in invalid regions.
    _, nearest = ndimage.distance_transform_edt(~valid, return_indices=True)
    return SurfaceMap(
        z_mm=z_mm,
        valid=valid,
        spacing=volume.spacing,
        origin=volume.origin.copy(),
        nearest_valid=nearest,
    )


def surface_lookup(surface: SurfaceMap, x_mm: float, y_mm: float) -> float:
    """Interpolated surface height at a world (x, y), in mm.

    Bilinear over the valid neighboring columns (weights renormalized when
    some corners are invalid); if all four are invalid, the nearest valid
    column's height is returned. Outside the footprint raises
    OutsideFootprintError.
    """
    nx, ny = surface.z_mm.shape
    gx = (x_mm - surface.origin[0]) / surface.spacing
    gy = (y_mm - surface.origin[1]) / surface.spacing
    if not (0.0 <= gx <= nx - 1 and 0.0 <= gy <= ny - 1):
        raise OutsideFootprintError(
            f"({x_mm}, {y_mm}) mm is outside the volume footprint"
        )
    ix = min(int(math.floor(gx)), nx - 2) if nx > 1 else 0
    iy = min(int(math.floor(gy)), ny - 2) if ny > 1 else 0
    fx = gx - ix
    fy = gy - iy
    corners = (
        (ix, iy, (1 - fx) * (1 - fy)),
        (min(ix + 1, nx - 1), iy, fx * (1 - fy)),
        (ix, min(iy + 1, ny - 1), (1 - fx) * fy),
        (min(ix + 1, nx - 1), min(iy + 1, ny - 1), fx * fy),
    )
    acc = 0.0
    wsum = 0.0
    for cx, cy, w in corners:
        if surface.valid[cx, cy]:
            acc += w * surface.z_mm[cx, cy]
            wsum += w
    if wsum > 0.0:
        return acc / wsum
    # All four corners invalid: snap to the nearest valid column.
    qx = int(round(gx))
    qy = int(round(gy))
    vx = surface.nearest_valid[0][qx, qy]
    vy = surface.nearest_valid[1][qx, qy]
    return float(surface.z_mm[vx, vy])


def sample_slice(
    volume: Volume,
    pose: Pose,
    height: int,
    width: int,
    pixel_spacing: float,
) -> np.ndarray:
    """Resample the oblique image plane seen by the probe at `pose`.

    Pixel (r, u) sits at position + (u - w/2 + 0.5)*s*y_probe +
    (r + 0.5)*s*z_probe, so the transducer footprint is the image's
    top-center and depth grows along the probe z-axis. Trilinear
    interpolation, rounded to the nearest integer; points outside the
    voxel-center lattice blend to 0.
    """
    rot = pose.rotation_matrix()
    y_axis = rot[:, 1]
    z_axis = rot[:, 2]
    u = (np.arange(width) - width / 2 + 0.5) * pixel_spacing
    r = (np.arange(height) + 0.5) * pixel_spacing
    # (h, w, 3) world points, then voxel-lattice coordinates.
    points = (
        pose.position[None, None, :]
        + u[None, :, None] * y_axis[None, None, :]
        + r[:, None, None] * z_axis[None, None, :]
    )
    coords = (points - volume.origin[None, None, :]) / volume.spacing
    return _trilinear_u8(volume.data, coords)


def _trilinear_u8(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear sampling of a uint8 grid at fractional voxel coords;
    missing neighbors contribute zero."""
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    dims = np.array(data.shape)
    acc = np.zeros(coords.shape[:-1], dtype=np.float64)
    for corner in range(8):
        offset = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + offset
        weight = np.prod(
            np.where(offset[None, None, :] == 1, frac, 1.0 - frac), axis=-1
        )
        inside = np.all((idx >= 0) & (idx < dims[None, None, :]), axis=-1)
        safe = np.where(inside[..., None], idx, 0)
        values = data[safe[..., 0], safe[..., 1], safe[..., 2]].astype(np.float64)
        acc += weight * values * inside
    return np.clip(np.rint(acc), 0, 255).astype(np.uint8)


def nonzero_fraction(image: np.ndarray) -> float:
    """Fraction of image pixels with nonzero gray value, in [0, 1]."""
    return float(np.count_nonzero(image)) / image.size


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the procedural scan phantom family.

    The phantom is a convex soft-tissue body with a curved top surface and
    a paramedian row of bright bony ridges at known depth; the goal plane
    is the vertical plane through the ridge crest line. Speckle, depth
    attenuation and sub-ridge shadowing give it an ultrasound-like texture.
    """

    dims: tuple[int, int, int] = (160, 160, 96)
    spacing_mm: float = 0.5
    body_half_axes_mm: tuple[float, float, float] = (36.0, 38.0, 26.0)
    body_center_frac_z: float = 0.12  # body center depth as fraction of height
    tissue_intensity: float = 120.0
    ridge_count: int = 5
    ridge_pitch_mm: float = 12.0
    ridge_half_axes_mm: tuple[float, float, float] = (3.5, 4.5, 3.0)
    ridge_depth_mm: float = 18.0  # crest depth below the skin surface
    ridge_offset_mm: float = 6.0  # lateral offset of the ridge row from midline
    ridge_size_gradient: float = 0.06  # per-ridge size growth along +y
    ridge_intensity: float = 230.0
    speckle_variance: float = 0.05
    speckle_correlation_vox: float = 1.0  # gaussian blur of the speckle field
    attenuation_per_mm: float = 0.015
    shadow_strength: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        positive = {
            "spacing_mm": self.spacing_mm,
            "tissue_intensity": self.tissue_intensity,
            "ridge_pitch_mm": self.ridge_pitch_mm,
            "ridge_intensity": self.ridge_intensity,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if min(self.dims) < 2:
            raise ValueError(f"dims must be at least 2 voxels per axis: {self.dims}")
        if min(self.body_half_axes_mm) <= 0 or min(self.ridge_half_axes_mm) <= 0:
            raise ValueError("half-axes must be positive")
        if self.speckle_variance < 0 or not 0 <= self.shadow_strength <= 1:
            raise ValueError("speckle_variance >= 0 and shadow_strength in [0,1]")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Pose]:
    """Build a phantom volume plus the analytically known goal pose.

    Deterministic for a fixed seed. The goal sits on the skin surface above
    the ridge row, probe pointing straight down with the image plane
    containing the ridge line, so its tilt is 0 and it is reachable under
    the environment's restrictions.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    s = spec.spacing_mm
    ax, ay, az = spec.body_half_axes_mm

    extent = (np.array(spec.dims) - 1) * s
    cx, cy = extent[0] / 2, extent[1] / 2
    cz = extent[2] * spec.body_center_frac_z

    x = np.arange(nx)[:, None, None] * s
    y = np.arange(ny)[None, :, None] * s
    z = np.arange(nz)[None, None, :] * s

    body = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0
    if not body.any():
        raise ValueError("body ellipsoid does not intersect the volume")

    # Skin height per column (analytic ellipsoid top), used for ridge
    # placement and depth attenuation.
    disc = 1.0 - ((x[:, :, 0] - cx) / ax) ** 2 - ((y[:, :, 0] - cy) / ay) ** 2
    surf_z = np.where(disc > 0, cz + az * np.sqrt(np.maximum(disc, 0.0)), np.nan)

    intensity = np.where(body, spec.tissue_intensity, 0.0)

    # Periodic hyperechoic ridges (vertebra analogs) along y at a fixed
    # lateral offset; a mild monotonic size gradient breaks the 180 degree
    # yaw symmetry of the goal plane.
    rx0 = cx + spec.ridge_offset_mm
    span = (spec.ridge_count - 1) * spec.ridge_pitch_mm
    ridge_mask = np.zeros(spec.dims, dtype=bool)
    hx, hy, hz = spec.ridge_half_axes_mm
    for k in range(spec.ridge_count):
        ry = cy - span / 2 + k * spec.ridge_pitch_mm
        scale = 1.0 + spec.ridge_size_gradient * (k - (spec.ridge_count - 1) / 2)
        col = int(round((rx0 - 0.0) / s))
        col = min(max(col, 0), nx - 1)
        local_surf = surf_z[col, min(max(int(round(ry / s)), 0), ny - 1)]
        if math.isnan(local_surf):
            raise ValueError("ridge row lies outside the body surface")
        rz = local_surf - spec.ridge_depth_mm - hz * scale
        blob = (
            ((x - rx0) / (hx * scale)) ** 2
            + ((y - ry) / (hy * scale)) ** 2
            + ((z - (rz + hz * scale)) / (hz * scale)) ** 2
            <= 1.0
        )
        if np.any(blob & ~body):
            raise ValueError(f"ridge {k} extends outside the body")
        ridge_mask |= blob
    intensity = np.where(ridge_mask, spec.ridge_intensity, intensity)

    # Depth attenuation below the skin surface.
    depth = np.maximum(surf_z[:, :, None] - z, 0.0)
    depth = np.where(np.isnan(depth), 0.0, depth)
    intensity *= np.exp(-spec.attenuation_per_mm * depth)

    # Acoustic shadows: everything below a ridge voxel in the same column
    # is darkened.
    below_ridge = (
        np.maximum.accumulate(ridge_mask[:, :, ::-1], axis=2)[:, :, ::-1] & ~ridge_mask
    )
    intensity = np.where(below_ridge, intensity * (1.0 - spec.shadow_strength), intensity)

    # Multiplicative speckle with unit mean; blurring correlates it like
    # the resolution-cell texture of a real scan.
    if spec.speckle_variance > 0:
        shape = 1.0 / spec.speckle_variance
        noise = rng.gamma(shape, spec.speckle_variance, size=spec.dims)
        if spec.speckle_correlation_vox > 0:
            noise = ndimage.gaussian_filter(noise, spec.speckle_correlation_vox)
            noise /= noise.mean()
        intensity *= noise

    # Keep the body strictly nonzero so the intensity-based surface is the
    # true skin boundary, then quantize.
    intensity = np.clip(np.rint(intensity), 0, 255)
    intensity[body & (intensity < 1)] = 1
    volume = Volume(intensity.astype(np.uint8), spacing=s, origin=np.zeros(3))

    goal_xy = np.array([rx0, cy])
    surface = extract_surface(volume)
    goal_z = surface_lookup(surface, goal_xy[0], goal_xy[1])
    goal = Pose(np.array([goal_xy[0], goal_xy[1], goal_z]), BASE_ORIENTATION)
    if tilt_angle(goal) > 30.0:
        raise ValueError("goal tilt exceeds the environment's 30 degree limit")
    return volume, goal


# ---------------------------------------------------------------------------
# File formats: USV1 volumes, pose sidecars, PGM images.

def save_volume(volume: Volume, path) -> None:
    header = (
        "format=USV1\n"
        f"dims={volume.dims[0]} {volume.dims[1]} {volume.dims[2]}\n"
        f"spacing_mm={volume.spacing!r}\n"
        f"origin_mm={volume.origin[0]!r} {volume.origin[1]!r} {volume.origin[2]!r}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(volume.data.tobytes(order="F"))


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        fields = {}
        while True:
            line = fh.readline()
            if line in (b"\n", b"\r\n"):
                break
            if not line:
                raise VolumeFormatError("unterminated header")
            try:
                key, value = line.decode("ascii").strip().split("=", 1)
            except ValueError as exc:
                raise VolumeFormatError(f"bad header line {line!r}") from exc
            fields[key] = value
        blob = fh.read()
    if fields.get("format") != "USV1":
        raise VolumeFormatError(f"unsupported format {fields.get('format')!r}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = float(fields["spacing_mm"])
        origin = np.array([float(v) for v in fields["origin_mm"].split()])
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"invalid header: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"bad dims {dims}")
    if spacing <= 0:
        raise VolumeFormatError(f"spacing must be positive, got {spacing}")
    expected = dims[0] * dims[1] * dims[2]
    if len(blob) != expected:
        raise VolumeFormatError(
            f"data section has {len(blob)} bytes, expected {expected}"
        )
    data = np.frombuffer(blob, dtype=np.uint8).reshape(dims, order="F")
    return Volume(data, spacing=spacing, origin=origin)


def save_pose(pose: Pose, path) -> None:
    p = pose.position
    q = pose.orientation
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"position_mm={p[0]!r} {p[1]!r} {p[2]!r}\n")
        fh.write(f"quaternion_xyzw={q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}\n")


def load_pose(path) -> Pose:
    fields = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, value = line.split("=", 1)
            fields[key] = value
    try:
        position = np.array([float(v) for v in fields["position_mm"].split()])
        quat = np.array([float(v) for v in fields["quaternion_xyzw"].split()])
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"invalid pose file {path}: {exc}") from exc
    if position.shape != (3,) or quat.shape != (4,):
        raise VolumeFormatError(f"invalid pose file {path}")
    return Pose(position, quat)


def save_pgm(image: np.ndarray, path) -> None:
    """Write a 2D uint8 image as binary PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise VolumeFormatError(f"not a binary PGM file: {magic!r}")
        tokens = []
        while len(tokens) < 3:
            line = fh.readline()
            if not line:
                raise VolumeFormatError("truncated PGM header")
            line = line.split(b"#", 1)[0]
            tokens.extend(line.split())
        w, h, maxval = (int(t) for t in tokens[:3])
        if maxval != 255:
            raise VolumeFormatError(f"only 8-bit PGM supported, maxval={maxval}")
        blob = fh.read(w * h)
    if len(blob) != w * h:
        raise VolumeFormatError("truncated PGM data")
    return np.frombuffer(blob, dtype=np.uint8).reshape(h, w)
