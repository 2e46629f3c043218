"""Camera models, perspective projection, inverse perspective mapping.

Frames are explicit everywhere: ego coordinates are meters on the ground
plane (z = 0), image coordinates are pixels.  Mixing them silently is the
dominant bug class in this pipeline, so ``Polyline2D`` carries a frame tag
and the transfer functions check it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .validation import (
    ContractViolation,
    DegenerateGeometryError,
    as_float_array,
    check_shape,
)

FRAME_EGO = "ego"
FRAME_PIXEL = "pixel"

DEPTH_MIN = 0.1  # meters; closer points project with explosive magnification


@dataclass(frozen=True)
class Polyline2D:
    """Ordered (x, y) points in a declared coordinate frame."""

    points: np.ndarray
    frame: str

    def __post_init__(self):
        pts = as_float_array("points", self.points)
        check_shape("points", pts, (-1, 2))
        if pts.shape[0] < 2:
            raise ContractViolation(
                f"polyline needs >= 2 points, got {pts.shape[0]}"
            )
        if self.frame not in (FRAME_EGO, FRAME_PIXEL):
            raise ContractViolation(f"unknown frame {self.frame!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics, ego-to-camera rigid transform, image size."""

    name: str
    K: np.ndarray
    T_ego2cam: np.ndarray
    width: int
    height: int
    center_ego: np.ndarray = field(init=False)

    def __post_init__(self):
        K = as_float_array("K", self.K)
        T = as_float_array("T_ego2cam", self.T_ego2cam)
        check_shape("K", K, (3, 3))
        check_shape("T_ego2cam", T, (4, 4))
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ContractViolation("K: focal entries must be positive")
        if abs(K[2, 2] - 1.0) > 1e-12 or np.any(np.abs(K[[1, 2, 2], [0, 0, 1]]) > 1e-12):
            raise ContractViolation("K must be upper-triangular with K[2,2] = 1")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ContractViolation("T_ego2cam rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ContractViolation("T_ego2cam rotation has determinant -1")
        if np.any(np.abs(T[3] - [0, 0, 0, 1]) > 1e-12):
            raise ContractViolation("T_ego2cam bottom row must be [0,0,0,1]")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation("image size must be positive")
        center = -R.T @ T[:3, 3]
        if center[2] <= 0:
            raise ContractViolation(
                f"camera center must sit above the ground plane, z={center[2]:.4f}"
            )
        K.setflags(write=False)
        T.setflags(write=False)
        center.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T_ego2cam", T)
        object.__setattr__(self, "center_ego", center)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "K": self.K.tolist(),
            "T_ego2cam": self.T_ego2cam.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(name=d["name"], K=np.asarray(d["K"]),
                   T_ego2cam=np.asarray(d["T_ego2cam"]),
                   width=int(d["width"]), height=int(d["height"]))


def project_ego_to_pv(line: Polyline2D, cam: CameraModel,
                      depth_min: float = DEPTH_MIN) -> Tuple[Polyline2D, np.ndarray]:
    """Project ego ground points into the image.

    Points are lifted to z = 0, pushed through T_ego2cam, perspective-divided
    by camera depth, and scaled by K.  Returns pixel coordinates for every
    input point (order preserved) plus a validity mask: valid means depth
    above ``depth_min`` and pixel inside image bounds.  Invalid points keep
    their (meaningless) computed coordinates rather than being dropped.
    """
    if line.frame != FRAME_EGO:
        raise ContractViolation(f"expected ego-frame polyline, got {line.frame!r}")
    n = len(line)
    homo = np.column_stack([line.points, np.zeros(n), np.ones(n)])
    cam_pts = (cam.T_ego2cam @ homo.T)[:3]
    z = cam_pts[2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    pix_h = cam.K @ (cam_pts / safe_z)
    pixels = pix_h[:2].T
    valid = (
        (z > depth_min)
        & (pixels[:, 0] >= 0) & (pixels[:, 0] <= cam.width - 1)
        & (pixels[:, 1] >= 0) & (pixels[:, 1] <= cam.height - 1)
    )
    return Polyline2D(pixels, FRAME_PIXEL), valid


def ipm_pv_to_ego(line: Polyline2D, cam: CameraModel) -> Tuple[Polyline2D, np.ndarray]:
    """Back-project pixels to the ground plane by ray-plane intersection.

    Each pixel is unprojected to a ray from the camera center in ego frame;
    the returned point is where that ray meets z = 0.  A ray parallel to the
    ground, or one whose intersection lies behind the camera, is flagged in
    the returned horizon mask (True = unusable) and its output coordinates
    are set to the ray direction's ground trace at unit depth, never trusted.
    """
    if line.frame != FRAME_PIXEL:
        raise ContractViolation(f"expected pixel-frame polyline, got {line.frame!r}")
    K_inv = np.linalg.inv(cam.K)
    R = cam.T_ego2cam[:3, :3]
    center = cam.center_ego
    n = len(line)
    pix_h = np.column_stack([line.points, np.ones(n)])
    dirs_cam = (K_inv @ pix_h.T)
    dirs_ego = (R.T @ dirs_cam).T  # rays from the camera center, ego frame

    dz = dirs_ego[:, 2]
    horizon = dz >= -1e-12  # ray must descend toward the ground
    safe_dz = np.where(horizon, -1.0, dz)
    t = -center[2] / safe_dz
    bad_t = t <= 0
    horizon = horizon | bad_t
    ground = center[None, :2] + t[:, None] * dirs_ego[:, :2]
    ground = np.where(horizon[:, None], center[None, :2] + dirs_ego[:, :2], ground)
    return Polyline2D(ground, FRAME_EGO), horizon


def resample_polyline(line: Polyline2D, n: int) -> Polyline2D:
    """Resample to ``n`` points at equal arc-length spacing.

    First and last original points are preserved exactly.
    """
    if n < 2:
        raise ContractViolation(f"resample needs n >= 2, got {n}")
    pts = line.points
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    total = seg_len.sum()
    if total <= 0:
        raise DegenerateGeometryError("cannot resample a zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 2))
    out[:, 0] = np.interp(targets, cum, pts[:, 0])
    out[:, 1] = np.interp(targets, cum, pts[:, 1])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return Polyline2D(out, line.frame)


def polyline_arc_length(line: Polyline2D) -> float:
    seg = np.diff(line.points, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def make_camera(name: str, yaw: float, pitch: float, height: float,
                focal: float = 120.0, width: int = 200, height_px: int = 120,
                position: Tuple[float, float] = (0.0, 0.0)) -> CameraModel:
    """Build a forward-pitched pinhole camera from pose angles.

    ``yaw`` rotates the view direction in the ground plane (0 = ego +x);
    ``pitch`` tilts it downward (radians, positive = toward the ground);
    ``height`` is the optical-center height in meters.  The camera frame
    follows the usual convention: +z forward (viewing), +x right, +y down.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    fwd = np.array([cy * cp, sy * cp, -sp])        # viewing direction, ego
    right = np.array([sy, -cy, 0.0])               # fwd x world-up, normalized
    down = np.cross(fwd, right)
    R_cam2ego = np.column_stack([right, down, fwd])
    center = np.array([position[0], position[1], height])
    T = np.eye(4)
    T[:3, :3] = R_cam2ego.T
    T[:3, 3] = -R_cam2ego.T @ center
    K = np.array([
        [focal, 0.0, width / 2.0],
        [0.0, focal, height_px / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return CameraModel(name=name, K=K, T_ego2cam=T, width=width, height=height_px)
