"""Tracks, gates, and procedurally generated obstacle scenes.

A track is a closed loop of rectangular gates plus one start point per
gate (the start used when that gate is the first target).  A scene pairs
a track with obstacles sampled inside the corridor sections between
consecutive gates.  Generated scenes guarantee three properties: every
obstacle center stays inside its section cuboid, every obstacle surface
keeps a margin from all start points, and the whole layout remains
traversable for a sphere of the required clearance, checked on a voxel
grid.
"""

import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml
from scipy import ndimage

from .geometry import PrimitiveSoup, aabb_inner_distance

SECTION_MARGIN_XY = 1.5
SECTION_MARGIN_Z = 1.0
START_POINT_MARGIN = 0.5
CLEARANCE = 0.4
VOXEL = 0.1
BOUNDS_MARGIN = 3.0
MAX_PLACEMENT_REJECTIONS = 1000
MAX_LAYOUT_ATTEMPTS = 50


class InfeasibleDensityError(RuntimeError):
    """Raised when obstacle sampling cannot satisfy the scene guarantees."""


class TrackFormatError(ValueError):
    """Raised when a track or scene file fails validation."""


@dataclass
class Gate:
    """Rectangular gate: center, yaw of the crossing direction, aperture
    half extents (width, height), and frame bar thickness."""

    center: np.ndarray
    yaw: float
    aperture: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    frame_thickness: float = 0.1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.aperture = np.asarray(self.aperture, dtype=float)

    @property
    def normal(self):
        return np.array([np.cos(self.yaw), np.sin(self.yaw), 0.0])

    @property
    def lateral(self):
        return np.array([-np.sin(self.yaw), np.cos(self.yaw), 0.0])

    def frame_boxes(self):
        """Four bars hugging the aperture, as (center, yaw, half_extents).

        Box-local x is the crossing direction.  Vertical bars run past the
        corners so the frame closes without overlap.
        """
        aw, ah = self.aperture
        t = self.frame_thickness
        lat = self.lateral
        up = np.array([0.0, 0.0, 1.0])
        half_depth = t / 2
        bars = []
        for side in (-1.0, 1.0):
            bars.append(
                (
                    self.center + side * (aw + t / 2) * lat,
                    self.yaw,
                    np.array([half_depth, t / 2, ah + t]),
                )
            )
            bars.append(
                (
                    self.center + side * (ah + t / 2) * up,
                    self.yaw,
                    np.array([half_depth, aw, t / 2]),
                )
            )
        return bars


@dataclass
class Track:
    """Closed loop of gates with one start point per target gate."""

    name: str
    gates: list
    start_points: np.ndarray

    def __post_init__(self):
        self.start_points = np.asarray(self.start_points, dtype=float)
        if len(self.start_points) != len(self.gates):
            raise TrackFormatError("need one start point per gate")
        if len(self.gates) < 2:
            raise TrackFormatError("a track needs at least two gates")

    @property
    def n_gates(self):
        return len(self.gates)

    def gate_centers(self):
        return np.stack([g.center for g in self.gates])

    def section(self, i):
        """Gate pair bounding section i (from gates[i] to the next gate)."""
        return self.gates[i], self.gates[(i + 1) % self.n_gates]


def default_start_points(gate_centers):
    """Midpoint of the section ending at each gate."""
    centers = np.asarray(gate_centers, dtype=float)
    prev = np.roll(centers, 1, axis=0)
    return 0.5 * (prev + centers)


def track_from_dict(data):
    """Build a track from parsed YAML.  ``yaw: auto`` points a gate at the
    next gate center; omitted start points default to section midpoints."""
    try:
        name = data.get("name", "unnamed")
        raw_gates = data["gates"]
        centers = np.array([g["center"] for g in raw_gates], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise TrackFormatError(f"malformed track data: {exc}") from exc
    if len(centers) < 2:
        raise TrackFormatError("a track needs at least two gates")
    gates = []
    for i, g in enumerate(raw_gates):
        yaw = g.get("yaw", "auto")
        if yaw == "auto":
            nxt = centers[(i + 1) % len(centers)]
            d = nxt - centers[i]
            yaw = float(np.arctan2(d[1], d[0]))
        aperture = np.asarray(g.get("aperture", [0.5, 0.5]), dtype=float)
        gates.append(
            Gate(
                center=centers[i],
                yaw=float(yaw),
                aperture=aperture,
                frame_thickness=float(g.get("frame_thickness", 0.1)),
            )
        )
    starts = data.get("start_points")
    if starts is None:
        starts = default_start_points(centers)
    return Track(name=name, gates=gates, start_points=np.asarray(starts, dtype=float))


def track_to_dict(track):
    return {
        "name": track.name,
        "gates": [
            {
                "center": [float(x) for x in g.center],
                "yaw": float(g.yaw),
                "aperture": [float(x) for x in g.aperture],
                "frame_thickness": float(g.frame_thickness),
            }
            for g in track.gates
        ],
        "start_points": [[float(x) for x in p] for p in track.start_points],
    }


def load_track(source):
    """Load a track from a YAML path or a builtin track name."""
    path = str(source)
    if not path.endswith((".yaml", ".yml")):
        ref = resources.files("droneracing") / "tracks" / f"{path}.yaml"
        if not ref.is_file():
            raise TrackFormatError(f"unknown builtin track: {source!r}")
        return track_from_dict(yaml.safe_load(ref.read_text()))
    with open(path) as f:
        return track_from_dict(yaml.safe_load(f))


def builtin_track_names():
    folder = resources.files("droneracing") / "tracks"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


@dataclass
class Obstacle:
    """shape is one of box, cylinder, sphere.  half_extents is per-axis for
    boxes, (radius, radius, half_height) for cylinders, and a uniform
    radius triple for spheres."""

    shape: str
    position: np.ndarray
    yaw: float
    half_extents: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        if self.shape not in ("box", "cylinder", "sphere"):
            raise TrackFormatError(f"unknown obstacle shape: {self.shape!r}")


@dataclass
class ShapeSpec:
    """Sampling ranges for generated obstacles."""

    shapes: tuple = ("box", "cylinder", "sphere")
    box_half_range: tuple = (0.15, 0.5)
    cylinder_radius_range: tuple = (0.1, 0.3)
    sphere_radius_range: tuple = (0.15, 0.4)


def obstacle_soup(obstacles):
    boxes, cylinders, spheres = [], [], []
    for ob in obstacles:
        if ob.shape == "box":
            boxes.append((ob.position, ob.yaw, ob.half_extents))
        elif ob.shape == "cylinder":
            cylinders.append((ob.position, ob.half_extents[0], ob.half_extents[2]))
        else:
            spheres.append((ob.position, ob.half_extents[0]))
    return PrimitiveSoup.build(boxes, cylinders, spheres)


def gate_soup(track):
    boxes = []
    for gate in track.gates:
        boxes.extend(gate.frame_boxes())
    return PrimitiveSoup.build(boxes=boxes)


def section_cuboid(gate_a, gate_b):
    """Axis-aligned corridor region between two gates, with margins."""
    lo = np.minimum(gate_a.center, gate_b.center)
    hi = np.maximum(gate_a.center, gate_b.center)
    margin = np.array([SECTION_MARGIN_XY, SECTION_MARGIN_XY, SECTION_MARGIN_Z])
    return lo - margin, hi + margin


def track_bounds(track):
    """World AABB enclosing all section cuboids; floor pinned at z = 0."""
    los, his = [], []
    for i in range(track.n_gates):
        lo, hi = section_cuboid(*track.section(i))
        los.append(lo)
        his.append(hi)
    lo = np.min(los, axis=0) - BOUNDS_MARGIN
    hi = np.max(his, axis=0) + BOUNDS_MARGIN
    lo[2] = 0.0
    return lo, hi


class Scene:
    """A track plus obstacles, with cached geometry for fast queries."""

    def __init__(self, track, obstacles, seed=None, density=None, bounded=True):
        self.track = track
        self.obstacles = list(obstacles)
        self.seed = seed
        self.density = density
        self.soup = obstacle_soup(self.obstacles).merged(gate_soup(track))
        self.bounds = track_bounds(track) if bounded else None
        self._gate_arrays = None

    def gate_arrays(self):
        """Packed per-gate centers, normals, laterals, and apertures."""
        if self._gate_arrays is None:
            gates = self.track.gates
            self._gate_arrays = (
                np.stack([g.center for g in gates]),
                np.stack([g.normal for g in gates]),
                np.stack([g.lateral for g in gates]),
                np.stack([g.aperture for g in gates]),
            )
        return self._gate_arrays

    def collision_distance(self, points, radius=0.0):
        """Distance from each point to the nearest collision surface.

        Counts obstacles, gate frames, and (when bounded) the world box
        including the ground.  radius shrinks the free space; the result
        is floored at zero.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d = self.soup.distance(points)
        if self.bounds is not None:
            d = np.minimum(d, aabb_inner_distance(points, *self.bounds))
        d = np.minimum(d, 1e6)
        return np.maximum(d - radius, 0.0)

    def raycast(self, origins, dirs):
        """Nearest hit among obstacles, gate frames, and the ground plane."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        t = self.soup.raycast(origins, dirs)
        return np.minimum(t, _ground_hit(origins, dirs))

    def raycast_visible(self, origins, dirs, forward, max_range):
        """raycast for rays sharing one origin, pre-culled to primitives a
        camera looking along forward could reach within max_range."""
        soup = self.soup.subset_visible(origins[0], forward, max_range)
        t = soup.raycast(origins, dirs)
        return np.minimum(t, _ground_hit(origins, dirs))

    def scene_hash(self):
        """Stable digest of the scene identity: geometry plus provenance.

        Two scenes sampled from different seeds hash differently even if
        their geometry coincides (e.g. zero-density stages).
        """
        h = hashlib.sha256()
        h.update(repr((self.seed, self.density)).encode())
        for arr in (
            self.soup.box_center,
            self.soup.box_yaw,
            self.soup.box_half,
            self.soup.cyl_center,
            self.soup.cyl_radius,
            self.soup.cyl_half_height,
            self.soup.sph_center,
            self.soup.sph_radius,
            self.track.gate_centers(),
            np.array([g.yaw for g in self.track.gates]),
            self.track.start_points,
        ):
            h.update(np.round(np.asarray(arr, dtype=float), 9).tobytes())
        return h.hexdigest()[:16]


def _ground_hit(origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = origins[:, 2] / -dirs[:, 2]
    return np.where((dirs[:, 2] < 0) & (t >= 0), t, np.inf)


def _obstacle_surface_distance(obstacle, points):
    from .geometry import box_distance, cylinder_distance, sphere_distance

    if obstacle.shape == "box":
        return box_distance(points, obstacle.position, obstacle.yaw, obstacle.half_extents)
    if obstacle.shape == "cylinder":
        return cylinder_distance(
            points, obstacle.position, obstacle.half_extents[0], obstacle.half_extents[2]
        )
    return sphere_distance(points, obstacle.position, obstacle.half_extents[0])


def _sample_obstacle(rng, lo, hi, spec):
    shape = spec.shapes[rng.integers(len(spec.shapes))]
    if shape == "cylinder":
        # Cylinders span the full section height, like pillars.
        xy = rng.uniform(lo[:2], hi[:2])
        half_h = 0.5 * (hi[2] - lo[2])
        center = np.array([xy[0], xy[1], 0.5 * (lo[2] + hi[2])])
        radius = rng.uniform(*spec.cylinder_radius_range)
        return Obstacle("cylinder", center, 0.0, np.array([radius, radius, half_h]))
    pos = rng.uniform(lo, hi)
    if shape == "sphere":
        r = rng.uniform(*spec.sphere_radius_range)
        return Obstacle("sphere", pos, 0.0, np.array([r, r, r]))
    half = rng.uniform(spec.box_half_range[0], spec.box_half_range[1], size=3)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    return Obstacle("box", pos, yaw, half)


def generate_obstacles(track, density, shape_spec=None, seed=0):
    """Sample a scene with ``density`` obstacles per gate section.

    Rejection sampling enforces the start-point margin per obstacle; the
    completed layout must pass the traversability check or is resampled.
    Exceeding the rejection caps raises ``InfeasibleDensityError``.  The
    same seed always produces the same scene.
    """
    spec = shape_spec or ShapeSpec()
    rng = np.random.default_rng(seed)
    density = int(density)
    if density < 0:
        raise ValueError("density must be non-negative")
    if density == 0:
        # Nothing to place; tracks are authored with open gate sections.
        return Scene(track, [], seed=seed, density=0)
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        obstacles = []
        for i in range(track.n_gates):
            lo, hi = section_cuboid(*track.section(i))
            for _ in range(density):
                rejections = 0
                while True:
                    candidate = _sample_obstacle(rng, lo, hi, spec)
                    d_start = _obstacle_surface_distance(
                        candidate, track.start_points
                    )
                    if np.all(d_start >= START_POINT_MARGIN):
                        obstacles.append(candidate)
                        break
                    rejections += 1
                    if rejections > MAX_PLACEMENT_REJECTIONS:
                        raise InfeasibleDensityError(
                            f"{rejections} consecutive rejections placing an "
                            f"obstacle at density {density}"
                        )
        scene = Scene(track, obstacles, seed=seed, density=density)
        if traversable(scene):
            return scene
    raise InfeasibleDensityError(
        f"no traversable layout found in {MAX_LAYOUT_ATTEMPTS} attempts "
        f"at density {density}"
    )


def traversable(scene, clearance=CLEARANCE, voxel=VOXEL):
    """Whether every gate section admits a collision-free path.

    For each section, occupancy is rasterized on a voxel grid over the
    section cuboid and connectivity from the section start point to the
    target gate center is checked with a 6-connected component search.
    """
    track = scene.track
    for i in range(track.n_gates):
        target = (i + 1) % track.n_gates
        lo, hi = section_cuboid(*track.section(i))
        if scene.bounds is not None:
            lo = np.maximum(lo, scene.bounds[0])
            hi = np.minimum(hi, scene.bounds[1])
        start = track.start_points[target]
        goal = track.gates[target].center
        if not _section_connected(scene, lo, hi, start, goal, clearance, voxel):
            return False
    return True


def _section_connected(scene, lo, hi, start, goal, clearance, voxel):
    shape = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 1)
    local = scene.soup.subset_near_aabb(lo, hi, margin=clearance + voxel)
    free = ~local.occupancy(lo, voxel, shape, clearance)
    if scene.bounds is not None:
        # Bound margins separate per axis, so shave each axis with a
        # broadcast 1-d mask instead of evaluating the full grid.
        for axis in range(3):
            centers = lo[axis] + (np.arange(shape[axis]) + 0.5) * voxel
            inside = (centers - scene.bounds[0][axis] >= clearance) & (
                scene.bounds[1][axis] - centers >= clearance
            )
            view = [1, 1, 1]
            view[axis] = shape[axis]
            free &= inside.reshape(view)
    labels, _ = ndimage.label(free)

    def voxel_of(p):
        idx = np.floor((p - lo) / voxel).astype(int)
        return tuple(np.clip(idx, 0, shape - 1))

    a, b = voxel_of(start), voxel_of(goal)
    return labels[a] != 0 and labels[a] == labels[b]


def randomize_track(track, xy_range, z_range, rng):
    """Displace every gate center uniformly within the given ranges.

    Yaws and start points are left unchanged.
    """
    gates = []
    for g in track.gates:
        delta = np.array(
            [
                rng.uniform(-xy_range, xy_range),
                rng.uniform(-xy_range, xy_range),
                rng.uniform(-z_range, z_range),
            ]
        )
        gates.append(
            Gate(
                center=g.center + delta,
                yaw=g.yaw,
                aperture=g.aperture.copy(),
                frame_thickness=g.frame_thickness,
            )
        )
    return Track(name=track.name, gates=gates, start_points=track.start_points.copy())


def gate_passed(p_prev, p_curr, gate):
    """Whether the segment from p_prev to p_curr crosses the gate aperture
    front to back.  Touching the plane counts as crossing; the crossing
    point must lie inside the aperture."""
    n = gate.normal
    s0 = float(np.dot(p_prev - gate.center, n))
    s1 = float(np.dot(p_curr - gate.center, n))
    if not (s0 < 0.0 <= s1):
        return False
    alpha = s0 / (s0 - s1)
    hit = p_prev + alpha * (p_curr - p_prev) - gate.center
    aw, ah = gate.aperture
    return bool(abs(np.dot(hit, gate.lateral)) <= aw and abs(hit[2]) <= ah)


def gate_crossings(p_prev, p_curr, centers, normals, laterals, apertures):
    """Vectorized gate passage test for per-row gates.

    All arguments are batched row-wise: point pairs (N, 3) against each
    row's own gate arrays.
    """
    s0 = np.sum((p_prev - centers) * normals, axis=-1)
    s1 = np.sum((p_curr - centers) * normals, axis=-1)
    crossing = (s0 < 0.0) & (s1 >= 0.0)
    denom = np.where(crossing, s0 - s1, 1.0)
    alpha = np.where(crossing, s0 / denom, 0.0)
    hit = p_prev + alpha[:, None] * (p_curr - p_prev) - centers
    lat = np.abs(np.sum(hit * laterals, axis=-1))
    up = np.abs(hit[..., 2])
    return crossing & (lat <= apertures[:, 0]) & (up <= apertures[:, 1])


def scene_to_dict(scene):
    return {
        "track": track_to_dict(scene.track),
        "seed": scene.seed,
        "density": scene.density,
        "scene_hash": scene.scene_hash(),
        "obstacles": [
            {
                "shape": ob.shape,
                "position": [float(x) for x in ob.position],
                "yaw": float(ob.yaw),
                "half_extents": [float(x) for x in ob.half_extents],
            }
            for ob in scene.obstacles
        ],
    }


def scene_from_dict(data):
    track = track_from_dict(data["track"])
    obstacles = [
        Obstacle(
            shape=ob["shape"],
            position=np.asarray(ob["position"], dtype=float),
            yaw=float(ob.get("yaw", 0.0)),
            half_extents=np.asarray(ob["half_extents"], dtype=float),
        )
        for ob in data.get("obstacles", [])
    ]
    return Scene(track, obstacles, seed=data.get("seed"), density=data.get("density"))


def save_scene(scene, path):
    with open(path, "w") as f:
        yaml.safe_dump(scene_to_dict(scene), f, sort_keys=False)


def load_scene(path):
    with open(path) as f:
        return scene_from_dict(yaml.safe_load(f))
