"""Procedural rock-testbed terrain and a quasi-static ground-vehicle oracle.

The vehicle moves by planar unicycle kinematics; its height and attitude are
set by a least-squares plane through the terrain heights under the four
wheels. Patches are yaw-aligned, bilinear-sampled crops of the heightmap
centred on the vehicle and expressed relative to its height.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, OutOfBoundsError, ShapeError

PATCH_SIZE = 40

OK = "ok"
STUCK = "stuck"
ROLLOVER = "rollover"


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a == -math.pi:
        a = math.pi
    return a


@dataclass
class TerrainConfig:
    length: float = 6.0  # x extent, m
    width: float = 4.0  # y extent, m
    resolution: float = 0.025  # m per cell
    max_height: float = 0.6
    roughness: float = 1.0  # 0 gives a flat plane
    feature_size: float = 1.6  # coarsest noise wavelength, m
    octaves: int = 3
    persistence: float = 0.45
    sharpness: float = 1.6  # >1 turns smooth hills into isolated rocks
    apron: float = 0.8  # flat border width, m
    taper: float = 0.4  # blend distance from apron into rocks, m

    def validate(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ConfigError(f"terrain dims must be positive, got {self.length} x {self.width}")
        if self.resolution <= 0:
            raise ConfigError(f"terrain resolution must be positive, got {self.resolution}")
        if self.max_height <= 0:
            raise ConfigError("max_height must be positive")
        if self.roughness < 0:
            raise ConfigError("roughness must be non-negative")
        if self.feature_size <= 0 or self.octaves < 1:
            raise ConfigError("feature_size must be positive and octaves >= 1")
        if self.apron < 0 or self.taper < 0:
            raise ConfigError("apron and taper must be non-negative")


@dataclass
class VehicleConfig:
    wheelbase: float = 0.32
    track: float = 0.26
    wheel_radius: float = 0.06
    body_length: float = 0.5
    body_width: float = 0.3
    v_max: float = 1.0
    w_max: float = 1.57
    tip_threshold: float = 0.52
    patch_scale: float = 1.5  # patch side = scale * longest body dimension

    @property
    def patch_side(self) -> float:
        return self.patch_scale * max(self.body_length, self.body_width)

    @property
    def patch_cell(self) -> float:
        return self.patch_side / PATCH_SIZE

    def validate(self) -> None:
        for name in ("wheelbase", "track", "wheel_radius", "body_length", "body_width",
                     "v_max", "w_max", "tip_threshold", "patch_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"vehicle.{name} must be positive")


@dataclass
class HeightMap:
    elevations: np.ndarray  # (rows along y, cols along x), metres
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    max_height: float = 0.6

    def __post_init__(self):
        self.elevations = np.ascontiguousarray(self.elevations, dtype=np.float64)
        if self.elevations.ndim != 2 or min(self.elevations.shape) < 2:
            raise ShapeError(f"elevations must be a 2D grid, got shape {self.elevations.shape}")
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        if not np.all(np.isfinite(self.elevations)):
            raise ValueError("elevations must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.elevations.shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the sampled area."""
        nr, nc = self.elevations.shape
        ox, oy = self.origin
        return ox, ox + (nc - 1) * self.resolution, oy, oy + (nr - 1) * self.resolution

    def to_cells(self, x, y):
        ox, oy = self.origin
        return (np.asarray(y, dtype=np.float64) - oy) / self.resolution, \
            (np.asarray(x, dtype=np.float64) - ox) / self.resolution

    def contains(self, x, y) -> bool:
        rows, cols = self.to_cells(x, y)
        nr, nc = self.elevations.shape
        return bool(np.all((rows >= 0) & (rows <= nr - 1) & (cols >= 0) & (cols <= nc - 1)))

    def height_at(self, x, y):
        if not self.contains(x, y):
            raise OutOfBoundsError(f"query point outside map extent {self.extent}")
        rows, cols = self.to_cells(x, y)
        return kernels.bilinear_sample(self.elevations, rows, cols)


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = [float(v) for v in a]
        if len(a) != 6:
            raise ShapeError(f"pose needs 6 values, got {len(a)}")
        return cls(*a)

    def rounded32(self) -> "Pose":
        """Round-trip through float32, the storage precision of datasets."""
        return Pose.from_array(self.as_array().astype(np.float32))


@dataclass(frozen=True)
class Action:
    linear: float = 0.0
    angular: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.linear, self.angular], dtype=np.float64)

    def clipped(self, vehicle: VehicleConfig) -> "Action":
        return Action(float(np.clip(self.linear, -vehicle.v_max, vehicle.v_max)),
                      float(np.clip(self.angular, -vehicle.w_max, vehicle.w_max)))


def generate_terrain(seed: int, config: TerrainConfig | None = None) -> HeightMap:
    """Seeded value-noise rock field surrounded by a flat apron."""
    config = config or TerrainConfig()
    config.validate()
    res = config.resolution
    ncols = int(round(config.length / res)) + 1
    nrows = int(round(config.width / res)) + 1
    if config.roughness == 0:
        return HeightMap(np.zeros((nrows, ncols)), res, seed=seed, max_height=config.max_height)

    rng = np.random.default_rng(seed)
    noise = np.zeros((nrows, ncols))
    amp = 1.0
    for k in range(config.octaves):
        period = config.feature_size / res / (2 ** k)
        lattice = rng.random((int(math.ceil(nrows / period)) + 2, int(math.ceil(ncols / period)) + 2))
        noise += amp * kernels.lattice_upsample(lattice, nrows, ncols, period)
        amp *= config.persistence

    # distance (m) to the nearest border, then a smoothstep ramp out of the apron
    ys = np.arange(nrows)[:, None] * res
    xs = np.arange(ncols)[None, :] * res
    border = np.minimum(np.minimum(xs, (ncols - 1) * res - xs), np.minimum(ys, (nrows - 1) * res - ys))
    if config.taper > 0:
        t = np.clip((border - config.apron) / config.taper, 0.0, 1.0)
    else:
        t = (border >= config.apron).astype(np.float64)
    mask = t * t * (3.0 - 2.0 * t)

    # the tallest rock of the fully-raised interior reaches max_height * roughness
    interior = mask >= 1.0
    lo = noise.min()
    hi = noise[interior].max() if interior.any() else noise.max()
    noise = np.clip((noise - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(noise)
    rocks = noise ** config.sharpness

    elev = config.max_height * config.roughness * rocks * mask
    np.clip(elev, 0.0, config.max_height, out=elev)
    return HeightMap(elev, res, seed=seed, max_height=config.max_height)


def contact_offsets(vehicle: VehicleConfig) -> np.ndarray:
    """Wheel contact points in the body frame: FL, FR, RL, RR as (forward, left)."""
    hl, hw = vehicle.wheelbase / 2.0, vehicle.track / 2.0
    return np.array([[hl, hw], [hl, -hw], [-hl, hw], [-hl, -hw]])


def contact_heights(hmap: HeightMap, x: float, y: float, yaw: float, vehicle: VehicleConfig) -> np.ndarray:
    off = contact_offsets(vehicle)
    c, s = math.cos(yaw), math.sin(yaw)
    wx = x + c * off[:, 0] - s * off[:, 1]
    wy = y + s * off[:, 0] + c * off[:, 1]
    if not hmap.contains(wx, wy):
        raise OutOfBoundsError(f"wheel contacts at ({x:.3f}, {y:.3f}) leave map extent {hmap.extent}")
    return hmap.height_at(wx, wy)


def fit_contact_plane(heights: np.ndarray, vehicle: VehicleConfig) -> tuple[float, float, float]:
    """Least-squares plane through the four wheel heights -> (z, roll, pitch).

    The contacts form a centred rectangle, so the normal equations decouple
    and each coefficient is a single weighted sum. Pitch is positive nose-up,
    roll positive left-side-up.
    """
    h = np.asarray(heights, dtype=np.float64)
    hl, hw = vehicle.wheelbase / 2.0, vehicle.track / 2.0
    z = ((h[0] + h[1]) + (h[2] + h[3])) / 4.0
    slope_fwd = (hl * h[0] + hl * h[1] - hl * h[2] - hl * h[3]) / (4.0 * hl * hl)
    slope_left = (hw * h[0] - hw * h[1] + hw * h[2] - hw * h[3]) / (4.0 * hw * hw)
    return float(z), math.atan(slope_left), math.atan(slope_fwd)


def settle(hmap: HeightMap, x: float, y: float, yaw: float, vehicle: VehicleConfig | None = None) -> Pose:
    """Place the vehicle on the terrain at planar pose (x, y, yaw)."""
    vehicle = vehicle or VehicleConfig()
    z, roll, pitch = fit_contact_plane(contact_heights(hmap, x, y, yaw, vehicle), vehicle)
    return Pose(x, y, z, roll, pitch, wrap_angle(yaw))


def step_vehicle(hmap: HeightMap, pose: Pose, action: Action, dt: float,
                 vehicle: VehicleConfig | None = None) -> tuple[Pose, str]:
    """Advance the quasi-static oracle by one timestep.

    Returns the new pose and a status: ``stuck`` leaves the vehicle in
    place, ``rollover`` returns the tipped pose.
    """
    vehicle = vehicle or VehicleConfig()
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    v, w = action.linear, action.angular
    x = pose.x + v * math.cos(pose.yaw) * dt
    y = pose.y + v * math.sin(pose.yaw) * dt
    yaw = wrap_angle(pose.yaw + w * dt)

    before = contact_heights(hmap, pose.x, pose.y, pose.yaw, vehicle)
    after = contact_heights(hmap, x, y, yaw, vehicle)
    if np.any(after - before > vehicle.wheel_radius):
        return pose, STUCK
    z, roll, pitch = fit_contact_plane(after, vehicle)
    new = Pose(x, y, z, roll, pitch, yaw)
    if abs(roll) > vehicle.tip_threshold or abs(pitch) > vehicle.tip_threshold:
        return new, ROLLOVER
    return new, OK


def patch_corner_cells(hmap: HeightMap, pose: Pose, vehicle: VehicleConfig):
    cell = vehicle.patch_cell
    half = (PATCH_SIZE - 1) / 2.0 * cell
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    lx = np.array([-half, half, -half, half])
    ly = np.array([-half, -half, half, half])
    return pose.x + c * lx - s * ly, pose.y + s * lx + c * ly


def patch_in_bounds(hmap: HeightMap, pose: Pose, vehicle: VehicleConfig | None = None) -> bool:
    vehicle = vehicle or VehicleConfig()
    return hmap.contains(*patch_corner_cells(hmap, pose, vehicle))


def extract_patch(hmap: HeightMap, pose: Pose, vehicle: VehicleConfig | None = None) -> np.ndarray:
    """40x40 yaw-aligned elevation patch under the vehicle, in [-1, 1].

    Row index runs along the body's left axis, column index along its
    forward axis, matching the map's (y, x) layout at yaw 0.
    """
    vehicle = vehicle or VehicleConfig()
    if not patch_in_bounds(hmap, pose, vehicle):
        raise OutOfBoundsError(f"patch footprint at ({pose.x:.3f}, {pose.y:.3f}) leaves map extent {hmap.extent}")
    ox, oy = hmap.origin
    raw = kernels.sample_patch(hmap.elevations, ox, oy, hmap.resolution, pose.x, pose.y,
                               math.cos(pose.yaw), math.sin(pose.yaw), PATCH_SIZE, vehicle.patch_cell)
    return np.clip((raw - pose.z) / hmap.max_height, -1.0, 1.0)


@dataclass
class SafeRegion:
    """Axis-aligned box where a vehicle centre keeps its whole patch on the map."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_map(cls, hmap: HeightMap, vehicle: VehicleConfig, margin: float = 0.0) -> "SafeRegion":
        # patch half-diagonal bounds the footprint for any yaw
        r = math.sqrt(2.0) * (PATCH_SIZE - 1) / 2.0 * vehicle.patch_cell + margin
        xmin, xmax, ymin, ymax = hmap.extent
        return cls(xmin + r, xmax - r, ymin + r, ymax - r)

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax
