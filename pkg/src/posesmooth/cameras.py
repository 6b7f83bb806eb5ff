"""Camera models, projection with lens distortion, undistortion, triangulation.

Coordinate conventions
----------------------
World frame: right-handed, arbitrary origin, world units.
Camera frame: X right, Y down, Z forward (optical axis); obtained from the
world frame by ``p_cam = R @ p_world + t``.
Image frame: pixels, origin at the top-left, u right, v down.

A projection runs: extrinsics -> perspective divide -> radial + tangential
distortion -> intrinsics.  Missing 2D observations are represented by NaN
coordinates throughout the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    DataError,
    DegenerateGeometry,
    InsufficientViews,
    NonPositiveDepth,
    NoConvergence,
)

DEPTH_EPSILON = 1e-8
UNDISTORT_TOL = 1e-10
UNDISTORT_MAX_ITER = 50


def is_missing(q) -> bool:
    """True if a 2D observation carries the missing-marker (any NaN)."""
    return not np.all(np.isfinite(np.asarray(q, dtype=float)))


@dataclass(frozen=True)
class CameraModel:
    """One camera's extrinsics, intrinsics, and distortion coefficients."""

    rotation: np.ndarray            # (3, 3) orthonormal, det +1
    translation: np.ndarray         # (3,) world units
    focal: tuple[float, float]      # (f_x, f_y) pixels
    center: tuple[float, float]     # (c_x, c_y) pixels
    radial: tuple[float, float] = (0.0, 0.0)      # (k_1, k_2)
    tangential: tuple[float, float] = (0.0, 0.0)  # (p_1, p_2)
    name: str = "cam"

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise DataError(f"camera {self.name!r}: rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise DataError(f"camera {self.name!r}: rotation determinant is not +1")
        if self.focal[0] <= 0 or self.focal[1] <= 0:
            raise DataError(f"camera {self.name!r}: focal lengths must be positive")


@dataclass(frozen=True)
class Rig:
    """Ordered collection of >= 2 cameras observing the same scene."""

    cameras: tuple[CameraModel, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        object.__setattr__(self, "cameras", cams)
        if len(cams) < 2:
            raise DataError("a rig needs at least 2 cameras")
        names = [c.name for c in cams]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate camera names in rig: {names}")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def view_names(self) -> list[str]:
        return [c.name for c in self.cameras]


def rotation_from_rodrigues(rvec) -> np.ndarray:
    """Convert a Rodrigues rotation vector to a 3x3 rotation matrix."""
    return Rotation.from_rotvec(np.asarray(rvec, dtype=float)).as_matrix()


# ---------------------------------------------------------------------------
# forward projection


def _distort(cam: CameraModel, x, y):
    """Apply radial + tangential distortion to normalized coordinates."""
    k1, k2 = cam.radial
    p1, p2 = cam.tangential
    r2 = x * x + y * y
    dr = 1.0 + k1 * r2 + k2 * r2 * r2
    xt = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yt = 2.0 * p2 * x * y + p1 * (r2 + 2.0 * y * y)
    return x * dr + xt, y * dr + yt


def project(cam: CameraModel, point) -> np.ndarray:
    """Project a world point to pixel coordinates through one camera.

    Raises NonPositiveDepth if the point is on or behind the camera plane.
    """
    p = np.asarray(point, dtype=float).reshape(3)
    pc = cam.rotation @ p + cam.translation
    if pc[2] <= DEPTH_EPSILON:
        raise NonPositiveDepth(
            f"camera {cam.name!r}: depth {pc[2]:.3g} <= {DEPTH_EPSILON}"
        )
    x, y = pc[0] / pc[2], pc[1] / pc[2]
    xd, yd = _distort(cam, x, y)
    fx, fy = cam.focal
    cx, cy = cam.center
    return np.array([fx * xd + cx, fy * yd + cy])


def project_points(cam: CameraModel, points) -> np.ndarray:
    """Vectorized projection of (N, 3) world points; rows with depth <=
    epsilon (or non-finite input) come back as NaN instead of raising."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = pts @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    bad = ~np.isfinite(z) | (z <= DEPTH_EPSILON)
    zsafe = np.where(bad, 1.0, z)
    x, y = pc[:, 0] / zsafe, pc[:, 1] / zsafe
    xd, yd = _distort(cam, x, y)
    fx, fy = cam.focal
    cx, cy = cam.center
    uv = np.stack([fx * xd + cx, fy * yd + cy], axis=1)
    uv[bad] = np.nan
    return uv


def _distortion_jacobian(cam: CameraModel, x, y):
    """Jacobian of the distortion map (x, y) -> (x_d, y_d); supports arrays."""
    k1, k2 = cam.radial
    p1, p2 = cam.tangential
    r2 = x * x + y * y
    dr = 1.0 + k1 * r2 + k2 * r2 * r2
    # d(dr)/dx = 2x (k1 + 2 k2 r^2), similarly for y
    g = 2.0 * (k1 + 2.0 * k2 * r2)
    dxd_dx = dr + x * x * g + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = x * y * g + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = x * y * g + 2.0 * p2 * y + 2.0 * p1 * x
    dyd_dy = dr + y * y * g + 2.0 * p2 * x + 6.0 * p1 * y
    return dxd_dx, dxd_dy, dyd_dx, dyd_dy


def projection_jacobian(cam: CameraModel, point) -> np.ndarray:
    """Analytic 2x3 Jacobian of project() w.r.t. the world point."""
    p = np.asarray(point, dtype=float).reshape(3)
    pc = cam.rotation @ p + cam.translation
    if pc[2] <= DEPTH_EPSILON:
        raise NonPositiveDepth(
            f"camera {cam.name!r}: depth {pc[2]:.3g} <= {DEPTH_EPSILON}"
        )
    X, Y, Z = pc
    x, y = X / Z, Y / Z
    # perspective divide: d(x, y)/d(X, Y, Z)
    Jp = np.array([[1.0 / Z, 0.0, -X / Z**2],
                   [0.0, 1.0 / Z, -Y / Z**2]])
    a, b, c, d = _distortion_jacobian(cam, x, y)
    Jd = np.array([[a, b], [c, d]])
    fx, fy = cam.focal
    return np.diag([fx, fy]) @ Jd @ Jp @ cam.rotation


def projection_jacobian_points(cam: CameraModel, points) -> np.ndarray:
    """Vectorized (N, 2, 3) Jacobians; NaN rows where depth <= epsilon."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = pts @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    bad = ~np.isfinite(z) | (z <= DEPTH_EPSILON)
    zs = np.where(bad, 1.0, z)
    x, y = pc[:, 0] / zs, pc[:, 1] / zs
    n = len(pts)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = 1.0 / zs
    Jp[:, 0, 2] = -x / zs
    Jp[:, 1, 1] = 1.0 / zs
    Jp[:, 1, 2] = -y / zs
    a, b, c, d = _distortion_jacobian(cam, x, y)
    Jd = np.empty((n, 2, 2))
    Jd[:, 0, 0], Jd[:, 0, 1], Jd[:, 1, 0], Jd[:, 1, 1] = a, b, c, d
    fx, fy = cam.focal
    F = np.diag([fx, fy])
    J = np.einsum('ij,njk,nkl->nil', F, Jd, Jp) @ cam.rotation
    J[bad] = np.nan
    return J


# ---------------------------------------------------------------------------
# undistortion


def undistort(cam: CameraModel, q) -> np.ndarray:
    """Invert intrinsics + distortion: pixel (u, v) -> normalized (x, y).

    Fixed-point iteration x <- (x_obs - tangential(x, y)) / radial(x, y),
    started from the distorted normalized coordinates.  Raises NoConvergence
    if the distortion residual stays above UNDISTORT_TOL after
    UNDISTORT_MAX_ITER iterations.
    """
    q = np.asarray(q, dtype=float).reshape(2)
    if is_missing(q):
        raise DataError("cannot undistort a missing observation")
    fx, fy = cam.focal
    cx, cy = cam.center
    xq = (q[0] - cx) / fx
    yq = (q[1] - cy) / fy
    k1, k2 = cam.radial
    p1, p2 = cam.tangential
    if k1 == 0.0 and k2 == 0.0 and p1 == 0.0 and p2 == 0.0:
        return np.array([xq, yq])
    x, y = xq, yq
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = x * x + y * y
        dr = 1.0 + k1 * r2 + k2 * r2 * r2
        xt = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        yt = 2.0 * p2 * x * y + p1 * (r2 + 2.0 * y * y)
        x_new = (xq - xt) / dr
        y_new = (yq - yt) / dr
        x, y = x_new, y_new
        xd, yd = _distort(cam, x, y)
        if max(abs(xd - xq), abs(yd - yq)) < UNDISTORT_TOL:
            return np.array([x, y])
    raise NoConvergence(
        f"camera {cam.name!r}: undistortion of {q} did not reach "
        f"{UNDISTORT_TOL} in {UNDISTORT_MAX_ITER} iterations"
    )


# ---------------------------------------------------------------------------
# triangulation

# relative singular-value threshold below which a pair is considered
# rank-deficient (parallel / coincident rays)
_DLT_RANK_TOL = 1e-10


def triangulate_pair(cam_a: CameraModel, cam_b: CameraModel, q_a, q_b) -> np.ndarray:
    """DLT triangulation of one point from two views.

    Observations are undistorted to normalized coordinates first, so the
    projection matrices are plain [R | t].  Raises DegenerateGeometry when
    the homogeneous system is rank-deficient (parallel rays) or the solution
    lands at infinity.
    """
    if is_missing(q_a) or is_missing(q_b):
        raise DataError("triangulate_pair requires two non-missing observations")
    A = np.empty((4, 4))
    for row, (cam, q) in enumerate(((cam_a, q_a), (cam_b, q_b))):
        x, y = undistort(cam, q)
        P = np.hstack([cam.rotation, cam.translation.reshape(3, 1)])
        A[2 * row] = x * P[2] - P[0]
        A[2 * row + 1] = y * P[2] - P[1]
    _, s, Vt = np.linalg.svd(A)
    if s[2] <= _DLT_RANK_TOL * s[0]:
        raise DegenerateGeometry(
            f"cameras {cam_a.name!r}/{cam_b.name!r}: triangulation system is "
            "rank-deficient (parallel rays)"
        )
    X = Vt[-1]
    if abs(X[3]) <= _DLT_RANK_TOL * np.linalg.norm(X[:3]):
        raise DegenerateGeometry(
            f"cameras {cam_a.name!r}/{cam_b.name!r}: triangulated point at infinity"
        )
    return X[:3] / X[3]


def triangulate_median(rig: Rig, points) -> np.ndarray:
    """Component-wise median of all valid pairwise triangulations.

    ``points`` is a length-V sequence of (u, v) observations (NaN = missing).
    Pairs with a missing view or degenerate geometry are skipped.
    """
    pts = [np.asarray(q, dtype=float).reshape(2) for q in points]
    if len(pts) != rig.n_views:
        raise DataError(
            f"expected {rig.n_views} observations, got {len(pts)}"
        )
    valid = [v for v in range(rig.n_views) if not is_missing(pts[v])]
    if len(valid) < 2:
        raise InsufficientViews(
            f"triangulation needs >= 2 non-missing views, got {len(valid)}"
        )
    estimates = []
    for i_idx in range(len(valid)):
        for j_idx in range(i_idx + 1, len(valid)):
            a, b = valid[i_idx], valid[j_idx]
            try:
                estimates.append(
                    triangulate_pair(rig.cameras[a], rig.cameras[b], pts[a], pts[b])
                )
            except DegenerateGeometry:
                continue
    if not estimates:
        raise DegenerateGeometry("all camera pairs were degenerate")
    return np.median(np.stack(estimates), axis=0)


def reprojection_residual(rig: Rig, point, points) -> float:
    """Mean pixel distance between observations and the reprojected point,
    over non-missing views (behind-camera views are skipped)."""
    residuals = []
    for cam, q in zip(rig.cameras, points):
        q = np.asarray(q, dtype=float).reshape(2)
        if is_missing(q):
            continue
        try:
            uv = project(cam, point)
        except NonPositiveDepth:
            continue
        residuals.append(float(np.linalg.norm(uv - q)))
    if not residuals:
        raise InsufficientViews("no views available for reprojection residual")
    return float(np.mean(residuals))


# ---------------------------------------------------------------------------
# calibration file I/O

_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy")
_DISTORTION_KEYS = ("k1", "k2", "p1", "p2")


def _camera_from_dict(entry: dict) -> CameraModel:
    try:
        name = entry["name"]
        rot_raw = entry["rotation"]
        trans = entry["translation"]
        intr = entry["intrinsics"]
        dist = entry.get("distortion", {})
    except KeyError as exc:
        raise DataError(f"calibration entry missing field {exc}") from exc

    fmt = entry.get("rotation_format", "matrix")
    rot_raw = np.asarray(rot_raw, dtype=float).ravel()
    if fmt == "matrix":
        if rot_raw.size != 9:
            raise DataError(
                f"camera {name!r}: rotation_format 'matrix' needs 9 numbers, "
                f"got {rot_raw.size}"
            )
        R = rot_raw.reshape(3, 3)
    elif fmt == "rodrigues":
        if rot_raw.size != 3:
            raise DataError(
                f"camera {name!r}: rotation_format 'rodrigues' needs 3 numbers, "
                f"got {rot_raw.size}"
            )
        R = rotation_from_rodrigues(rot_raw)
    else:
        raise DataError(f"camera {name!r}: unknown rotation_format {fmt!r}")

    unknown = set(dist) - set(_DISTORTION_KEYS)
    if unknown:
        raise DataError(
            f"camera {name!r}: unsupported distortion parameters {sorted(unknown)}; "
            f"only {list(_DISTORTION_KEYS)} are modeled"
        )
    missing = set(_INTRINSIC_KEYS) - set(intr)
    if missing:
        raise DataError(f"camera {name!r}: intrinsics missing {sorted(missing)}")

    return CameraModel(
        rotation=R,
        translation=np.asarray(trans, dtype=float),
        focal=(float(intr["fx"]), float(intr["fy"])),
        center=(float(intr["cx"]), float(intr["cy"])),
        radial=(float(dist.get("k1", 0.0)), float(dist.get("k2", 0.0))),
        tangential=(float(dist.get("p1", 0.0)), float(dist.get("p2", 0.0))),
        name=str(name),
    )


def load_calibration(path) -> Rig:
    """Load a rig from a JSON calibration file.

    Schema: {"cameras": [{"name", "rotation" (9 row-major, or 3 with
    "rotation_format": "rodrigues"), "translation" (3),
    "intrinsics": {fx, fy, cx, cy}, "distortion": {k1, k2, p1, p2}}, ...]}
    """
    with open(path) as fh:
        doc = json.load(fh)
    if "cameras" not in doc or not isinstance(doc["cameras"], list):
        raise DataError(f"{path}: calibration file needs a 'cameras' list")
    return Rig(cameras=tuple(_camera_from_dict(e) for e in doc["cameras"]))


def save_calibration(rig: Rig, path) -> None:
    """Write a rig to the JSON calibration schema (matrix rotation form)."""
    doc = {
        "cameras": [
            {
                "name": cam.name,
                "rotation_format": "matrix",
                "rotation": [float(v) for v in cam.rotation.ravel()],
                "translation": [float(v) for v in cam.translation],
                "intrinsics": {
                    "fx": cam.focal[0], "fy": cam.focal[1],
                    "cx": cam.center[0], "cy": cam.center[1],
                },
                "distortion": {
                    "k1": cam.radial[0], "k2": cam.radial[1],
                    "p1": cam.tangential[0], "p2": cam.tangential[1],
                },
            }
            for cam in rig.cameras
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
