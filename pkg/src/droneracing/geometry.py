"""Signed distance and ray casting against packed primitive sets.

Scenes are collections of three primitive kinds: yaw-rotated boxes,
vertical capped cylinders, and spheres.  ``PrimitiveSoup`` stores each
kind as packed arrays so point-distance and ray queries vectorize over
query x primitive pairs.  Pair counts are chunked to bound memory.
"""

from dataclasses import dataclass

import numpy as np

_MAX_PAIRS = 4_000_000
_EPS = 1e-12


def box_distance(points, center, yaw, half):
    """Signed distance from points to a yaw-rotated box (negative inside)."""
    d = np.asarray(points, dtype=float) - center
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.stack(
        [c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]],
        axis=-1,
    )
    q = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def cylinder_distance(points, center, radius, half_height):
    """Signed distance to a vertical capped cylinder (negative inside)."""
    d = np.asarray(points, dtype=float) - center
    d_radial = np.hypot(d[..., 0], d[..., 1]) - radius
    d_axial = np.abs(d[..., 2]) - half_height
    outside = np.hypot(np.maximum(d_radial, 0.0), np.maximum(d_axial, 0.0))
    inside = np.minimum(np.maximum(d_radial, d_axial), 0.0)
    return outside + inside


def sphere_distance(points, center, radius):
    d = np.asarray(points, dtype=float) - center
    return np.linalg.norm(d, axis=-1) - radius


def aabb_inner_distance(points, lo, hi):
    """Distance to the nearest face of an axis-aligned region, from inside.

    Positive inside the region, negative outside.
    """
    points = np.asarray(points, dtype=float)
    margins = np.minimum(points - lo, hi - points)
    return np.min(margins, axis=-1)


def ray_aabb(origins, dirs, lo, hi):
    """Entry distance of rays into an axis-aligned box; inf where missed.

    Origins inside the box report 0.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo - origins) * inv
        t_hi = (hi - origins) * inv
    t_near = np.fmin(t_lo, t_hi).max(axis=-1)
    t_far = np.fmax(t_lo, t_hi).min(axis=-1)
    hit = (t_near <= t_far) & (t_far >= 0.0)
    t = np.where(hit, np.maximum(t_near, 0.0), np.inf)
    return t


@dataclass
class PrimitiveSoup:
    """Packed primitive arrays with vectorized distance and ray queries."""

    box_center: np.ndarray
    box_yaw: np.ndarray
    box_half: np.ndarray
    cyl_center: np.ndarray
    cyl_radius: np.ndarray
    cyl_half_height: np.ndarray
    sph_center: np.ndarray
    sph_radius: np.ndarray

    @classmethod
    def empty(cls):
        return cls(
            box_center=np.zeros((0, 3)),
            box_yaw=np.zeros(0),
            box_half=np.zeros((0, 3)),
            cyl_center=np.zeros((0, 3)),
            cyl_radius=np.zeros(0),
            cyl_half_height=np.zeros(0),
            sph_center=np.zeros((0, 3)),
            sph_radius=np.zeros(0),
        )

    @classmethod
    def build(cls, boxes=(), cylinders=(), spheres=()):
        """boxes: (center, yaw, half); cylinders: (center, radius, half_height);
        spheres: (center, radius)."""
        soup = cls.empty()
        if boxes:
            soup.box_center = np.array([b[0] for b in boxes], dtype=float)
            soup.box_yaw = np.array([b[1] for b in boxes], dtype=float)
            soup.box_half = np.array([b[2] for b in boxes], dtype=float)
        if cylinders:
            soup.cyl_center = np.array([c[0] for c in cylinders], dtype=float)
            soup.cyl_radius = np.array([c[1] for c in cylinders], dtype=float)
            soup.cyl_half_height = np.array([c[2] for c in cylinders], dtype=float)
        if spheres:
            soup.sph_center = np.array([s[0] for s in spheres], dtype=float)
            soup.sph_radius = np.array([s[1] for s in spheres], dtype=float)
        return soup

    @property
    def size(self):
        return len(self.box_yaw) + len(self.cyl_radius) + len(self.sph_radius)

    def merged(self, other):
        return PrimitiveSoup(
            box_center=np.concatenate([self.box_center, other.box_center]),
            box_yaw=np.concatenate([self.box_yaw, other.box_yaw]),
            box_half=np.concatenate([self.box_half, other.box_half]),
            cyl_center=np.concatenate([self.cyl_center, other.cyl_center]),
            cyl_radius=np.concatenate([self.cyl_radius, other.cyl_radius]),
            cyl_half_height=np.concatenate(
                [self.cyl_half_height, other.cyl_half_height]
            ),
            sph_center=np.concatenate([self.sph_center, other.sph_center]),
            sph_radius=np.concatenate([self.sph_radius, other.sph_radius]),
        )

    def aabbs(self):
        """Per-primitive bounds, boxes first, then cylinders, then spheres."""
        c, s = np.cos(self.box_yaw), np.sin(self.box_yaw)
        bx = np.abs(c) * self.box_half[:, 0] + np.abs(s) * self.box_half[:, 1]
        by = np.abs(s) * self.box_half[:, 0] + np.abs(c) * self.box_half[:, 1]
        box_ext = np.stack([bx, by, self.box_half[:, 2]], axis=-1)
        cyl_ext = np.stack(
            [self.cyl_radius, self.cyl_radius, self.cyl_half_height], axis=-1
        )
        sph_ext = np.repeat(self.sph_radius[:, None], 3, axis=1)
        centers = np.concatenate([self.box_center, self.cyl_center, self.sph_center])
        exts = np.concatenate([box_ext, cyl_ext, sph_ext])
        return centers - exts, centers + exts

    def subset(self, keep):
        """Primitives selected by a mask over (boxes, cylinders, spheres)."""
        nb = len(self.box_yaw)
        nc = len(self.cyl_radius)
        kb, kc, ks = keep[:nb], keep[nb : nb + nc], keep[nb + nc :]
        return PrimitiveSoup(
            box_center=self.box_center[kb],
            box_yaw=self.box_yaw[kb],
            box_half=self.box_half[kb],
            cyl_center=self.cyl_center[kc],
            cyl_radius=self.cyl_radius[kc],
            cyl_half_height=self.cyl_half_height[kc],
            sph_center=self.sph_center[ks],
            sph_radius=self.sph_radius[ks],
        )

    def subset_near_aabb(self, lo, hi, margin):
        """Primitives whose bounds come within margin of the region [lo, hi]."""
        p_lo, p_hi = self.aabbs()
        keep = ((p_hi >= lo - margin) & (p_lo <= hi + margin)).all(axis=-1)
        return self.subset(keep)

    def subset_visible(self, origin, forward, max_range):
        """Primitives a camera at origin looking along forward can reach:
        within max_range of the origin and not entirely behind it."""
        p_lo, p_hi = self.aabbs()
        near = np.maximum(p_lo - origin, 0.0) + np.maximum(origin - p_hi, 0.0)
        within = np.linalg.norm(near, axis=-1) <= max_range
        # Largest projection of any AABB corner onto the view direction.
        proj = np.sum(
            np.maximum(p_lo * forward, p_hi * forward), axis=-1
        ) - np.dot(origin, forward)
        return self.subset(within & (proj >= 0.0))

    def occupancy(self, lo, voxel, shape, threshold):
        """Boolean grid marking voxel centers within threshold of a primitive.

        Voxel centers sit at ``lo + (index + 0.5) * voxel``.  Any point
        closer than ``threshold`` to a primitive lies inside that
        primitive's bounds inflated by ``threshold``, so only voxels in
        the inflated bounds are tested; cost scales with primitive
        volume instead of grid volume.  The result equals thresholding
        ``distance`` over the full grid.
        """
        lo = np.asarray(lo, dtype=float)
        shape = np.asarray(shape, dtype=int)
        occupied = np.zeros(tuple(shape), dtype=bool)
        if self.size == 0:
            return occupied
        p_lo, p_hi = self.aabbs()
        nb = len(self.box_yaw)
        nc = len(self.cyl_radius)
        for k in range(self.size):
            i_lo = np.floor((p_lo[k] - threshold - lo) / voxel - 0.5).astype(int)
            i_hi = np.ceil((p_hi[k] + threshold - lo) / voxel - 0.5).astype(int)
            i_lo = np.maximum(i_lo, 0)
            i_hi = np.minimum(i_hi, shape - 1)
            if np.any(i_hi < i_lo):
                continue
            axes = [
                lo[a] + (np.arange(i_lo[a], i_hi[a] + 1) + 0.5) * voxel
                for a in range(3)
            ]
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            if k < nb:
                d = box_distance(
                    pts, self.box_center[k], self.box_yaw[k], self.box_half[k]
                )
            elif k < nb + nc:
                j = k - nb
                d = cylinder_distance(
                    pts, self.cyl_center[j], self.cyl_radius[j],
                    self.cyl_half_height[j],
                )
            else:
                j = k - nb - nc
                d = sphere_distance(pts, self.sph_center[j], self.sph_radius[j])
            window = tuple(slice(i_lo[a], i_hi[a] + 1) for a in range(3))
            occupied[window] |= d < threshold
        return occupied

    def distance(self, points):
        """Minimum signed distance from each point to any primitive.

        Returns inf for an empty soup.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        best = np.full(n, np.inf)
        if self.size == 0:
            return best
        chunk = max(1, _MAX_PAIRS // max(self.size, 1))
        for start in range(0, n, chunk):
            pts = points[start : start + chunk, None, :]
            dists = []
            if len(self.box_yaw):
                dists.append(
                    box_distance(pts, self.box_center, self.box_yaw, self.box_half)
                )
            if len(self.cyl_radius):
                dists.append(
                    cylinder_distance(
                        pts, self.cyl_center, self.cyl_radius, self.cyl_half_height
                    )
                )
            if len(self.sph_radius):
                dists.append(
                    sphere_distance(pts, self.sph_center, self.sph_radius)
                )
            best[start : start + chunk] = np.concatenate(dists, axis=1).min(axis=1)
        return best

    def raycast(self, origins, dirs):
        """Nearest hit distance along each ray; inf where nothing is hit.

        Directions must be unit length.  Origins inside a primitive
        report distance 0.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = origins.shape[0]
        best = np.full(n, np.inf)
        if self.size == 0:
            return best
        chunk = max(1, _MAX_PAIRS // max(self.size, 1))
        for start in range(0, n, chunk):
            o = origins[start : start + chunk]
            d = dirs[start : start + chunk]
            hits = []
            if len(self.box_yaw):
                hits.append(self._ray_boxes(o, d))
            if len(self.cyl_radius):
                hits.append(self._ray_cylinders(o, d))
            if len(self.sph_radius):
                hits.append(self._ray_spheres(o, d))
            best[start : start + chunk] = np.concatenate(hits, axis=1).min(axis=1)
        return best

    def _ray_boxes(self, o, d):
        c, s = np.cos(self.box_yaw), np.sin(self.box_yaw)
        # Rotate rays into each box frame: (rays, boxes, 3).
        od = o[:, None, :] - self.box_center[None, :, :]
        ox = c * od[..., 0] + s * od[..., 1]
        oy = -s * od[..., 0] + c * od[..., 1]
        dx = c * d[:, None, 0] + s * d[:, None, 1]
        dy = -s * d[:, None, 0] + c * d[:, None, 1]
        o_local = np.stack([ox, oy, od[..., 2]], axis=-1)
        d_local = np.stack(
            [dx, dy, np.broadcast_to(d[:, None, 2], dx.shape)], axis=-1
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_local
            t_lo = (-self.box_half - o_local) * inv
            t_hi = (self.box_half - o_local) * inv
        t_near = np.fmin(t_lo, t_hi).max(axis=-1)
        t_far = np.fmax(t_lo, t_hi).min(axis=-1)
        hit = (t_near <= t_far) & (t_far >= 0.0)
        return np.where(hit, np.maximum(t_near, 0.0), np.inf)

    def _ray_cylinders(self, o, d):
        od = o[:, None, :] - self.cyl_center[None, :, :]
        ox, oy, oz = od[..., 0], od[..., 1], od[..., 2]
        dx = np.broadcast_to(d[:, None, 0], ox.shape)
        dy = np.broadcast_to(d[:, None, 1], ox.shape)
        dz = np.broadcast_to(d[:, None, 2], ox.shape)
        r = self.cyl_radius[None, :]
        hh = self.cyl_half_height[None, :]
        t_best = np.full(ox.shape, np.inf)

        # Side wall: quadratic in the horizontal plane.
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        cc = ox * ox + oy * oy - r * r
        disc = b * b - 4.0 * a * cc
        ok = (disc >= 0.0) & (a > _EPS)
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / (2.0 * a)
                z = oz + t * dz
                valid = ok & (t >= 0.0) & (np.abs(z) <= hh)
                t_best = np.where(valid & (t < t_best), t, t_best)
            # End caps.
            for cap in (-1.0, 1.0):
                t = (cap * hh - oz) / dz
                px = ox + t * dx
                py = oy + t * dy
                valid = (
                    (np.abs(dz) > _EPS)
                    & (t >= 0.0)
                    & (px * px + py * py <= r * r)
                )
                t_best = np.where(valid & (t < t_best), t, t_best)
        inside = (cc <= 0.0) & (np.abs(oz) <= hh)
        return np.where(inside, 0.0, t_best)

    def _ray_spheres(self, o, d):
        oc = o[:, None, :] - self.sph_center[None, :, :]
        b = 2.0 * np.sum(oc * d[:, None, :], axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.sph_radius[None, :] ** 2
        disc = b * b - 4.0 * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / 2.0
        t1 = (-b + sq) / 2.0
        t = np.where(t0 >= 0.0, t0, t1)
        hit = (disc >= 0.0) & (t >= 0.0)
        out = np.where(hit, t, np.inf)
        return np.where(c <= 0.0, 0.0, out)
