"""Depth camera rendered by ray casting against scene geometry.

The camera is rigidly mounted looking along body x, with image right
along -y and image up along +z.  The principal axis passes exactly
through the integer pixel (height/2, width/2), so that pixel's ray is
the body x axis.  Depth is range along the ray, clamped to max_range,
with max_range reported where nothing is hit.  The network observation
is inverse depth normalized by the minimum range, with additive Gaussian
noise, clipped to [0, 1].
"""

from dataclasses import dataclass, field

import numpy as np

from . import quat


@dataclass
class CameraModel:
    width: int = 64
    height: int = 64
    fov_deg: float = 87.0
    max_range: float = 10.0
    min_range: float = 0.3
    noise_std: float = 0.02
    # Mount position in the body frame; orientation is identity.
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        self._rays = None

    def ray_directions(self):
        """Unit ray directions in the body frame, shape (height*width, 3)."""
        if self._rays is None:
            half_tan = np.tan(0.5 * np.radians(self.fov_deg))
            cols = np.arange(self.width)
            rows = np.arange(self.height)
            u = (cols - self.width / 2) / (self.width / 2) * half_tan
            v = (self.height / 2 - rows) / (self.height / 2) * half_tan
            uu, vv = np.meshgrid(u, v)
            dirs = np.stack(
                [np.ones_like(uu), -uu, vv], axis=-1
            ).reshape(-1, 3)
            self._rays = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        return self._rays


def render_depth(position, orientation, scene, camera):
    """Depth image (height, width) in meters for a single pose."""
    img = render_depth_batch(
        np.asarray(position, dtype=float)[None],
        np.asarray(orientation, dtype=float)[None],
        scene,
        camera,
    )
    return img[0]


def render_depth_batch(positions, orientations, scene, camera):
    """Depth images (n, height, width) for poses sharing one scene.

    Each pose casts only against primitives within camera range and not
    entirely behind the camera, which cuts most of the work in large
    scenes.
    """
    rays = camera.ray_directions()
    n, p = positions.shape[0], rays.shape[0]
    dirs = quat.rotate(orientations[:, None, :], rays[None, :, :])
    origin = positions + quat.rotate(orientations, camera.offset)
    depth = np.empty((n, p))
    for i in range(n):
        forward = quat.rotate(orientations[i], np.array([1.0, 0.0, 0.0]))
        t = scene.raycast_visible(
            np.broadcast_to(origin[i], (p, 3)), dirs[i], forward, camera.max_range
        )
        depth[i] = np.minimum(t, camera.max_range)
    return depth.reshape(n, camera.height, camera.width)


def to_observation(depth, camera, rng=None):
    """Noisy inverse-depth image in [0, 1].

    Values are min_range / depth; surfaces at or inside min_range
    saturate at 1, empty space at max_range approaches min_range /
    max_range.  Pass rng=None for the noise-free image.
    """
    inv = camera.min_range / np.maximum(depth, 1e-6)
    if rng is not None and camera.noise_std > 0:
        inv = inv + rng.normal(0.0, camera.noise_std, size=inv.shape)
    return np.clip(inv, 0.0, 1.0)


def write_pgm(depth, path, max_range=None):
    """Save a depth image as a binary 8-bit PGM, near = dark."""
    depth = np.asarray(depth, dtype=float)
    scale = max_range or depth.max() or 1.0
    gray = np.clip(depth / scale * 255.0, 0, 255).astype(np.uint8)
    header = f"P5\n{depth.shape[1]} {depth.shape[0]}\n255\n".encode()
    with open(path, "wb") as f:
        f.write(header + gray.tobytes())
