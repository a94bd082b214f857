"""CPU rasterization of posed meshes: depth, masks and correspondence maps.

Pixel (i, j) is sampled at its center (j + 0.5, i + 0.5); there is no
antialiasing and no back-face culling.  Depth resolves overlaps: the
nearest surface owns a pixel, with earlier meshes winning exact ties.
Attribute interpolation is perspective-correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import BBox, CameraIntrinsics, Pose
from .errors import EmptyRender
from .meshes import TriMesh

# Triangles with any vertex at or closer than this depth are dropped
# rather than clipped; scene content lives far from the camera plane.
NEAR_PLANE = 1e-6
# Screen-space triangles below this area (in squared pixels) are skipped.
MIN_SCREEN_AREA = 1e-12


@dataclass(frozen=True)
class MaskImage:
    """Binary raster, row-major uint8 with values 0 or 1."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.shape != (self.height, self.width):
            raise ValueError(
                f"mask data shape {data.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if data.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data: np.ndarray) -> "MaskImage":
        data = np.asarray(data)
        return cls(width=data.shape[1], height=data.shape[0], data=data != 0)

    def pixel_count(self) -> int:
        return int(self.data.sum())

    def bbox(self) -> BBox | None:
        """Tight pixel box around the set pixels; None for an empty mask."""
        rows = np.flatnonzero(self.data.any(axis=1))
        cols = np.flatnonzero(self.data.any(axis=0))
        if rows.size == 0:
            return None
        y0, y1 = int(rows[0]), int(rows[-1])
        x0, x1 = int(cols[0]), int(cols[-1])
        w = float(x1 - x0 + 1)
        h = float(y1 - y0 + 1)
        return BBox(cx=x0 + 0.5 * w, cy=y0 + 0.5 * h, w=w, h=h)


@dataclass(frozen=True)
class DepthMap:
    """Depth raster in meters, float32; zero marks pixels with no hit."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != (self.height, self.width):
            raise ValueError("depth data shape does not match size")
        if not np.isfinite(data).all() or data.min(initial=0.0) < 0.0:
            raise ValueError("depth values must be finite and non-negative")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class CorrespondenceMap:
    """Per-pixel normalized model coordinates over a crop window.

    ``data`` is (out, out, 3) float32 in [0, 1]; ``valid`` marks pixels
    where the target mesh is the visible surface; ``crop`` locates the
    window in full-image pixel coordinates.
    """

    width: int
    height: int
    data: np.ndarray
    valid: MaskImage
    crop: BBox

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != (self.height, self.width, 3):
            raise ValueError("correspondence data must be (h, w, 3)")
        if self.valid.width != self.width or self.valid.height != self.height:
            raise ValueError("validity mask size mismatch")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class _Grid:
    """Sampling lattice: pixel (i, j) sits at (x0 + (j+.5)sx, y0 + (i+.5)sy)."""

    x0: float
    y0: float
    sx: float
    sy: float
    width: int
    height: int

    @classmethod
    def full_image(cls, width: int, height: int) -> "_Grid":
        return cls(0.0, 0.0, 1.0, 1.0, width, height)

    @classmethod
    def from_crop(cls, crop: BBox, out_size: int) -> "_Grid":
        return cls(
            crop.x0, crop.y0, crop.w / out_size, crop.h / out_size, out_size, out_size
        )


def _raster_core(
    meshes: Sequence[tuple[TriMesh, Pose]],
    camera: CameraIntrinsics,
    grid: _Grid,
    attributes: np.ndarray | None = None,
    attr_mesh: int = 0,
):
    """Depth-buffered rasterization over an arbitrary sampling grid.

    Returns (depth, owner, attr) where ``owner`` holds the index of the
    front-most mesh per pixel (-1 for none) and ``attr`` the interpolated
    per-vertex attributes of mesh ``attr_mesh`` (None when ``attributes``
    is None).
    """
    h, w = grid.height, grid.width
    depth = np.full((h, w), np.inf)
    owner = np.full((h, w), -1, dtype=np.int32)
    attr = None
    if attributes is not None:
        attr = np.zeros((h, w, attributes.shape[1]))

    for mesh_idx, (mesh, pose) in enumerate(meshes):
        cam_pts = mesh.vertices @ pose.R.T + pose.t
        z = cam_pts[:, 2]
        # grid-space vertex coordinates
        gx = (camera.f * cam_pts[:, 0] / z + camera.px - grid.x0) / grid.sx
        gy = (camera.f * cam_pts[:, 1] / z + camera.py - grid.y0) / grid.sy
        vert_attr = attributes if (attributes is not None and mesh_idx == attr_mesh) else None
        for face in mesh.faces:
            if z[face[0]] <= NEAR_PLANE or z[face[1]] <= NEAR_PLANE or z[face[2]] <= NEAR_PLANE:
                continue
            _fill_triangle(
                depth,
                owner,
                attr,
                mesh_idx,
                gx[face],
                gy[face],
                z[face],
                vert_attr[face] if vert_attr is not None else None,
            )

    return depth, owner, attr


def _fill_triangle(depth, owner, attr, mesh_idx, tx, ty, tz, tri_attr):
    h, w = depth.shape
    x_lo = max(int(math.ceil(tx.min() - 0.5)), 0)
    x_hi = min(int(math.floor(tx.max() - 0.5)), w - 1)
    y_lo = max(int(math.ceil(ty.min() - 0.5)), 0)
    y_hi = min(int(math.floor(ty.max() - 0.5)), h - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return
    ax, ay = tx[0], ty[0]
    bx, by = tx[1], ty[1]
    cx, cy = tx[2], ty[2]
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(area2) < MIN_SCREEN_AREA:
        return
    px = np.arange(x_lo, x_hi + 1) + 0.5
    py = (np.arange(y_lo, y_hi + 1) + 0.5)[:, None]
    # normalized edge functions; dividing by the signed area makes the
    # inside test winding-independent
    w0 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / area2
    w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / area2
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
    if not inside.any():
        return
    inv_z = w0 / tz[0] + w1 / tz[1] + w2 / tz[2]
    z_pix = 1.0 / inv_z
    window = np.s_[y_lo : y_hi + 1, x_lo : x_hi + 1]
    closer = inside & (z_pix < depth[window])
    if not closer.any():
        return
    depth[window][closer] = z_pix[closer]
    owner[window][closer] = mesh_idx
    if tri_attr is not None:
        num = (
            w0[..., None] * (tri_attr[0] / tz[0])
            + w1[..., None] * (tri_attr[1] / tz[1])
            + w2[..., None] * (tri_attr[2] / tz[2])
        )
        attr[window][closer] = num[closer] * z_pix[closer][:, None]
    elif attr is not None:
        attr[window][closer] = 0.0


def rasterize_scene(
    meshes: Sequence[tuple[TriMesh, Pose]],
    camera: CameraIntrinsics,
    width: int | None = None,
    height: int | None = None,
) -> tuple[DepthMap, list[MaskImage]]:
    """Render all meshes into a shared depth buffer.

    Returns the depth map (0 where nothing is hit) and one visibility mask
    per input mesh, marking pixels that mesh owns.

    Raises:
        EmptyRender: no mesh covered any pixel.
    """
    width = camera.width if width is None else width
    height = camera.height if height is None else height
    grid = _Grid.full_image(width, height)
    depth, owner, _ = _raster_core(meshes, camera, grid)
    if owner.max(initial=-1) < 0:
        raise EmptyRender("no mesh covered any pixel")
    depth[owner < 0] = 0.0
    masks = [
        MaskImage(width, height, (owner == i).astype(np.uint8))
        for i in range(len(meshes))
    ]
    return DepthMap(width, height, depth.astype(np.float32)), masks


def render_amodal(
    mesh: TriMesh,
    pose: Pose,
    camera: CameraIntrinsics,
    width: int | None = None,
    height: int | None = None,
) -> MaskImage:
    """Full silhouette of a single mesh, ignoring any other scene content.

    Raises:
        EmptyRender: the mesh covers no pixel.
    """
    _, masks = rasterize_scene([(mesh, pose)], camera, width, height)
    return masks[0]


def rasterize_crop(
    meshes: Sequence[tuple[TriMesh, Pose]],
    camera: CameraIntrinsics,
    crop: BBox,
    out_size: int,
) -> tuple[DepthMap, list[MaskImage]]:
    """Like :func:`rasterize_scene`, sampled over a resampled crop window."""
    grid = _Grid.from_crop(crop, out_size)
    depth, owner, _ = _raster_core(meshes, camera, grid)
    depth[owner < 0] = 0.0
    masks = [
        MaskImage(out_size, out_size, (owner == i).astype(np.uint8))
        for i in range(len(meshes))
    ]
    return DepthMap(out_size, out_size, depth.astype(np.float32)), masks


def render_correspondence(
    mesh: TriMesh,
    normalized_coords: np.ndarray,
    pose: Pose,
    camera: CameraIntrinsics,
    crop: BBox,
    out_size: int = 64,
) -> CorrespondenceMap:
    """Rasterize per-vertex normalized coordinates over a crop window.

    ``normalized_coords`` must come from normalizing this mesh's vertices;
    each covered pixel receives the perspective-correct interpolation of
    the front-most triangle, clipped to [0, 1].

    Raises:
        EmptyRender: the crop misses the image or the mesh covers no pixel.
    """
    if crop.x1 <= 0 or crop.y1 <= 0 or crop.x0 >= camera.width or crop.y0 >= camera.height:
        raise EmptyRender("crop window does not intersect the image")
    coords = np.asarray(normalized_coords, dtype=float)
    if coords.shape != mesh.vertices.shape:
        raise ValueError("one normalized coordinate triple per vertex required")
    grid = _Grid.from_crop(crop, out_size)
    _, owner, attr = _raster_core([(mesh, pose)], camera, grid, attributes=coords)
    valid = owner == 0
    if not valid.any():
        raise EmptyRender("mesh covers no pixel of the crop")
    data = np.clip(attr, 0.0, 1.0)
    data[~valid] = 0.0
    return CorrespondenceMap(
        width=out_size,
        height=out_size,
        data=data.astype(np.float32),
        valid=MaskImage(out_size, out_size, valid.astype(np.uint8)),
        crop=crop,
    )
