"""Episode datasets: scripted teleoperation, the ``.vtb`` container, manifests and windows."""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DatasetError, OutOfBoundsError
from .terrain import (OK, PATCH_SIZE, ROLLOVER, STUCK, Action, HeightMap, Pose, SafeRegion,
                      TerrainConfig, VehicleConfig, extract_patch, generate_terrain, patch_in_bounds,
                      settle, step_vehicle, wrap_angle)

FORMAT_VERSION = 1
VTB_MAGIC = b"VTB1"
VTB_HEADER = struct.Struct("<4sIII")  # magic, frame count, two reserved words: 16 bytes
FRAME_FLOATS = PATCH_SIZE * PATCH_SIZE + 2 + 6
WINDOW = 20


@dataclass
class DataConfig:
    seeds: int = 10
    first_seed: int = 0
    split: str = "9:1"
    episodes_per_seed: int = 20
    steps_per_episode: int = 120
    flat_fraction: float = 0.3
    dt: float = 0.1
    v_min: float = 0.3
    v_cruise_max: float = 1.0
    pause_prob: float = 0.2
    turn_gain: float = 2.0
    waypoint_radius: float = 0.3
    waypoint_margin: float = 0.6
    max_stuck_steps: int = 10
    workers: int = 1

    def split_counts(self) -> tuple[int, int]:
        try:
            a, b = (int(p) for p in self.split.split(":"))
        except ValueError:
            raise ConfigError(f"split must look like '9:1', got {self.split!r}") from None
        if a <= 0 or b <= 0:
            raise ConfigError(f"split ratio terms must be positive, got {self.split!r}")
        n_test = max(1, int(round(self.seeds * b / (a + b))))
        if n_test >= self.seeds:
            raise ConfigError(f"{self.seeds} seeds cannot be split {self.split}")
        return self.seeds - n_test, n_test

    def validate(self) -> None:
        if self.seeds < 2:
            raise ConfigError("need at least 2 terrain seeds (train and test)")
        if self.steps_per_episode < WINDOW + 1:
            raise ConfigError(f"steps_per_episode must be >= {WINDOW + 1} (one window plus its target), "
                              f"got {self.steps_per_episode}")
        if self.episodes_per_seed < 1:
            raise ConfigError("episodes_per_seed must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not 0 <= self.flat_fraction <= 1:
            raise ConfigError("flat_fraction must be in [0, 1]")
        self.split_counts()


def split_seeds(config: DataConfig) -> dict:
    """Terrain seeds per split; the leading ``flat_fraction`` of each split is flat."""
    n_train, n_test = config.split_counts()
    seeds = list(range(config.first_seed, config.first_seed + config.seeds))
    train, test = seeds[:n_train], seeds[n_train:]
    flat = train[:int(round(config.flat_fraction * n_train))] + test[:int(round(config.flat_fraction * n_test))]
    return {"train": train, "test": test, "flat": flat}


# ---------------------------------------------------------------------------
# .vtb container


def write_vtb(path, patches, actions, poses) -> None:
    patches = np.asarray(patches, dtype="<f4").reshape(-1, PATCH_SIZE * PATCH_SIZE)
    actions = np.asarray(actions, dtype="<f4").reshape(-1, 2)
    poses = np.asarray(poses, dtype="<f4").reshape(-1, 6)
    n = patches.shape[0]
    if actions.shape[0] != n or poses.shape[0] != n:
        raise DataError("patches, actions and poses must have the same frame count")
    body = np.concatenate([patches, actions, poses], axis=1)
    try:
        with open(path, "wb") as fh:
            fh.write(VTB_HEADER.pack(VTB_MAGIC, n, 0, 0))
            fh.write(body.tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write episode ({exc.strerror})", path) from exc


def read_vtb(path):
    """-> (patches (n,40,40), actions (n,2), poses (n,6)), all float32."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read episode ({exc.strerror})", path) from exc
    if len(raw) < VTB_HEADER.size:
        raise DatasetError("truncated .vtb header", path)
    magic, n, _, _ = VTB_HEADER.unpack_from(raw)
    if magic != VTB_MAGIC:
        raise DatasetError(f"bad .vtb magic {magic!r}", path)
    expected = VTB_HEADER.size + n * FRAME_FLOATS * 4
    if len(raw) != expected:
        raise DatasetError(f".vtb size {len(raw)} does not match {n} frames", path)
    body = np.frombuffer(raw, dtype="<f4", offset=VTB_HEADER.size).reshape(n, FRAME_FLOATS)
    patches = body[:, :PATCH_SIZE * PATCH_SIZE].reshape(n, PATCH_SIZE, PATCH_SIZE).astype(np.float32)
    actions = body[:, PATCH_SIZE * PATCH_SIZE:PATCH_SIZE * PATCH_SIZE + 2].astype(np.float32)
    poses = body[:, -6:].astype(np.float32)
    return patches, actions, poses


# ---------------------------------------------------------------------------
# scripted teleoperation


class TeleopPolicy:
    """Waypoint-seeking driver with multiplicative speed noise and additive turn noise.

    Occasionally pauses (exact zero action) when a new waypoint is chosen.
    """

    def __init__(self, rng: np.random.Generator, region: SafeRegion, vehicle: VehicleConfig,
                 config: DataConfig):
        self.rng = rng
        self.region = region
        self.vehicle = vehicle
        self.config = config
        self.waypoint = None
        self.v_cruise = config.v_min
        self.pause = 0

    def new_waypoint(self) -> None:
        r, c = self.region, self.config
        self.waypoint = (float(self.rng.uniform(r.xmin, r.xmax)), float(self.rng.uniform(r.ymin, r.ymax)))
        self.v_cruise = float(self.rng.uniform(c.v_min, c.v_cruise_max))
        if self.rng.random() < c.pause_prob:
            self.pause = int(self.rng.integers(5, 16))

    def __call__(self, pose: Pose) -> Action:
        c = self.config
        if self.waypoint is None or math.hypot(self.waypoint[0] - pose.x,
                                               self.waypoint[1] - pose.y) < c.waypoint_radius:
            self.new_waypoint()
        if self.pause > 0:
            self.pause -= 1
            return Action(0.0, 0.0)
        err = wrap_angle(math.atan2(self.waypoint[1] - pose.y, self.waypoint[0] - pose.x) - pose.yaw)
        w = c.turn_gain * err + float(self.rng.uniform(-0.1, 0.1))
        v = self.v_cruise * max(0.25, math.cos(err)) * float(self.rng.uniform(0.9, 1.1))
        a = Action(v, w).clipped(self.vehicle)
        # actions are stored as float32; the oracle must consume exactly what is stored
        return Action(float(np.float32(a.linear)), float(np.float32(a.angular)))


def _episode_rng(terrain_seed: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([terrain_seed, index, attempt, 0x7E1E]))


def simulate_episode(hmap: HeightMap, terrain_seed: int, index: int, attempt: int,
                     config: DataConfig, vehicle: VehicleConfig):
    """Drive one teleoperated episode; returns (patches, actions, poses, end_status)."""
    rng = _episode_rng(terrain_seed, index, attempt)
    safe = SafeRegion.for_map(hmap, vehicle, margin=0.05)
    m = config.waypoint_margin
    wp_region = SafeRegion(safe.xmin + m, safe.xmax - m, safe.ymin + m, safe.ymax - m)
    policy = TeleopPolicy(rng, wp_region, vehicle, config)
    x0 = float(rng.uniform(wp_region.xmin, wp_region.xmax))
    y0 = float(rng.uniform(wp_region.ymin, wp_region.ymax))
    pose = settle(hmap, x0, y0, float(rng.uniform(-math.pi, math.pi)), vehicle).rounded32()

    patches, actions, poses = [], [], []
    status, stuck_run = OK, 0
    while True:
        action = policy(pose)
        patches.append(extract_patch(hmap, pose, vehicle))
        actions.append(action.as_array())
        poses.append(pose.as_array())
        if len(poses) >= config.steps_per_episode or status == ROLLOVER:
            break
        try:
            nxt, status = step_vehicle(hmap, pose, action, config.dt, vehicle)
        except OutOfBoundsError:  # drove off the map: truncate here
            status = "out_of_bounds"
            break
        nxt = nxt.rounded32()
        if not patch_in_bounds(hmap, nxt, vehicle):
            status = "out_of_bounds"
            break
        if status == STUCK:
            stuck_run += 1
            policy.new_waypoint()
            if stuck_run > config.max_stuck_steps:
                break
        else:
            stuck_run = 0
        pose = nxt
    return (np.stack(patches).astype(np.float32), np.stack(actions).astype(np.float32),
            np.stack(poses).astype(np.float32), status)


def _collect_seed(args):
    seed, flat, out, terrain_cfg, vehicle_cfg, config = args
    tcfg = TerrainConfig(**{**asdict(terrain_cfg), "roughness": 0.0}) if flat else terrain_cfg
    hmap = generate_terrain(seed, tcfg)
    records = []
    attempt = 0
    for index in range(config.episodes_per_seed):
        for _ in range(20):
            patches, actions, poses, status = simulate_episode(hmap, seed, index, attempt, config, vehicle_cfg)
            attempt += 1
            if len(poses) >= WINDOW + 1:
                break
        else:
            raise DatasetError(f"could not simulate a {WINDOW + 1}-frame episode on terrain seed {seed}", out)
        name = f"ep_{seed}_{index}.vtb"
        write_vtb(Path(out) / name, patches, actions, poses)
        records.append({"file": name, "seed": seed, "index": index, "frames": int(len(poses)),
                        "end_status": status, "flat": bool(flat)})
    return records


def collect_dataset(config: DataConfig, out, terrain: TerrainConfig | None = None,
                    vehicle: VehicleConfig | None = None) -> Path:
    """Write a dataset directory (manifest + one ``.vtb`` per episode)."""
    config.validate()
    terrain = terrain or TerrainConfig()
    vehicle = vehicle or VehicleConfig()
    terrain.validate()
    vehicle.validate()
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory ({exc.strerror})", out) from exc
    seeds = split_seeds(config)
    jobs = [(s, s in seeds["flat"], str(out), terrain, vehicle, config)
            for s in seeds["train"] + seeds["test"]]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_collect_seed, jobs))
    else:
        results = [_collect_seed(j) for j in jobs]

    episodes = []
    for recs in results:
        for r in recs:
            r["split"] = "train" if r["seed"] in seeds["train"] else "test"
            episodes.append(r)
    counts = {split: {"episodes": sum(1 for e in episodes if e["split"] == split),
                      "frames": sum(e["frames"] for e in episodes if e["split"] == split),
                      "windows": sum(e["frames"] - WINDOW for e in episodes if e["split"] == split)}
              for split in ("train", "test")}
    manifest = {
        "format_version": FORMAT_VERSION,
        "dt": config.dt,
        "window": WINDOW,
        "seeds": seeds,
        "split": config.split,
        "counts": counts,
        "episodes": episodes,
        "data": asdict(config),
        "terrain": asdict(terrain),
        "vehicle": asdict(vehicle),
    }
    write_json(out / "manifest.json", manifest)
    return out


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write ({exc.strerror})", path) from exc


# ---------------------------------------------------------------------------
# loading and windows


def relative_poses(poses: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Express poses in the gravity-aligned yaw frame of ``ref``.

    Translation is rotated by -yaw(ref); roll/pitch become differences and
    yaw a wrapped difference, so ``ref`` itself maps to zeros. ``poses`` may
    carry one extra leading axis relative to ``ref`` (a window of poses).
    """
    poses = np.asarray(poses, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if poses.ndim == ref.ndim + 1:
        ref = ref[..., None, :]
    d = poses[..., :3] - ref[..., :3]
    c, s = np.cos(ref[..., 5]), np.sin(ref[..., 5])
    out = np.empty(np.broadcast_shapes(poses.shape, ref.shape), dtype=np.float64)
    out[..., 0] = c * d[..., 0] + s * d[..., 1]
    out[..., 1] = -s * d[..., 0] + c * d[..., 1]
    out[..., 2] = d[..., 2]
    out[..., 3] = poses[..., 3] - ref[..., 3]
    out[..., 4] = poses[..., 4] - ref[..., 4]
    dyaw = np.remainder(poses[..., 5] - ref[..., 5] + np.pi, 2.0 * np.pi) - np.pi
    out[..., 5] = np.where(dyaw == -np.pi, np.pi, dyaw)
    return out


@dataclass
class Episode:
    patches: np.ndarray
    actions: np.ndarray
    poses: np.ndarray
    seed: int
    index: int
    split: str
    flat: bool = False


@dataclass
class Dataset:
    """A loaded dataset directory: manifest plus all episodes in manifest order."""

    path: Path
    manifest: dict
    episodes: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {name!r}")
        return [e for e in self.episodes if e.split == name]


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest ({exc})", mpath) from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')}", mpath)
    overlap = set(manifest["seeds"]["train"]) & set(manifest["seeds"]["test"])
    if overlap:
        raise DatasetError(f"train/test terrain seeds overlap: {sorted(overlap)}", mpath)
    episodes = []
    for rec in manifest["episodes"]:
        patches, actions, poses = read_vtb(path / rec["file"])
        episodes.append(Episode(patches, actions, poses, rec["seed"], rec["index"], rec["split"],
                                rec.get("flat", False)))
    return Dataset(path, manifest, episodes)


@dataclass
class WindowSet:
    """Every 20-frame window with a next frame, flattened for batched training.

    ``frame_idx[w]`` indexes the 21 frames t-19..t+1 of window ``w`` into the
    concatenated frame arrays. Pose-derived arrays are already expressed in
    the frame of pose t.
    """

    patches: np.ndarray  # (F, 40, 40) all frames
    actions: np.ndarray  # (F, 2)
    poses: np.ndarray  # (F, 6) world poses
    frame_idx: np.ndarray  # (W, 21)
    rel_poses: np.ndarray  # (W, 20, 6) window poses in frame t
    next_delta: np.ndarray  # (W, 6) pose t+1 in frame t
    goal: np.ndarray  # (W, 3) hindsight goal position in frame t
    flat: np.ndarray  # (W,) bool

    def __len__(self) -> int:
        return self.frame_idx.shape[0]

    @property
    def current(self) -> np.ndarray:
        return self.frame_idx[:, WINDOW - 1]

    @property
    def following(self) -> np.ndarray:
        return self.frame_idx[:, WINDOW]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.patches, self.actions, self.poses, self.frame_idx[idx], self.rel_poses[idx],
                         self.next_delta[idx], self.goal[idx], self.flat[idx])


def build_windows(episodes, goal_horizon: int = 20) -> WindowSet:
    """Slide a 20-frame window (plus target frame) over each episode."""
    if not episodes:
        raise DataError("no episodes to window")
    patches, actions, poses, idx, flat = [], [], [], [], []
    offset = 0
    for ep in episodes:
        n = len(ep.poses)
        for t in range(WINDOW - 1, n - 1):
            idx.append(np.arange(t - WINDOW + 1, t + 2) + offset)
            flat.append(ep.flat)
        patches.append(ep.patches)
        actions.append(ep.actions)
        poses.append(ep.poses)
        offset += n
    if not idx:
        raise DataError(f"episodes are shorter than {WINDOW + 1} frames")
    patches = np.concatenate(patches)
    actions = np.concatenate(actions)
    poses = np.concatenate(poses)
    frame_idx = np.stack(idx)

    # episode end index for every frame, to clamp hindsight goals
    ends = np.concatenate([np.full(len(ep.poses), 0) for ep in episodes])
    o = 0
    for ep in episodes:
        ends[o:o + len(ep.poses)] = o + len(ep.poses) - 1
        o += len(ep.poses)

    cur = frame_idx[:, WINDOW - 1]
    ref = poses[cur].astype(np.float64)
    rel = relative_poses(poses[frame_idx[:, :WINDOW]], ref)
    nxt = relative_poses(poses[frame_idx[:, WINDOW]], ref)
    goal_frame = np.minimum(cur + goal_horizon, ends[cur])
    goal = relative_poses(poses[goal_frame], ref)[:, :3]
    return WindowSet(patches, actions, poses, frame_idx, rel, nxt, goal, np.asarray(flat, dtype=bool))


def dataset_fingerprint(path) -> str:
    """sha256 over the manifest bytes, recorded by every checkpoint trained on it."""
    import hashlib

    try:
        return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()
    except OSError as exc:
        raise DatasetError(f"cannot fingerprint dataset ({exc.strerror})", path) from exc
