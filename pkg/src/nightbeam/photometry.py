"""Headlight photometry and projector-camera geometry.

The headlight is modelled as a pinhole projector: camera pixels with
valid depth are lifted to 3D, moved into the headlight frame by a rigid
transform, and projected through the projector intrinsics.  Beam
patterns are angular intensity tables sampled at
(atan2(x, z), atan2(y, z)) in degrees, the goniometer convention; the
vertical angle is positive downward, matching image row direction.

Extrinsics convention: X_hl = R @ X_cam + t, so the headlight origin
expressed in camera coordinates is -R.T @ t.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ModelError, ShapeError
from .images import LightField


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ModelError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ModelError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} frame"
            )

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinate arrays of shape (height, width)."""
        u, v = np.meshgrid(
            np.arange(self.width, dtype=np.float64),
            np.arange(self.height, dtype=np.float64),
        )
        return u, v


@dataclass(frozen=True)
class AngularIntensityTable:
    """Relative beam intensity over a regular (horizontal, vertical) angle grid.

    Angles in degrees, strictly increasing along both axes; values are
    nonnegative with the peak normalized to 1.  Queries outside the grid
    return 0 (no light outside the measured pattern).
    """

    h_deg: np.ndarray
    v_deg: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h_deg, dtype=np.float64)
        v = np.asarray(self.v_deg, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if h.ndim != 1 or v.ndim != 1:
            raise ModelError("angle axes must be 1-dimensional")
        if np.any(np.diff(h) <= 0) or np.any(np.diff(v) <= 0):
            raise ModelError("angle axes must be strictly increasing")
        if vals.shape != (v.size, h.size):
            raise ModelError(f"table shape {vals.shape} does not match axes ({v.size}, {h.size})")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ModelError("intensities must be finite and nonnegative")
        for name, arr in (("h_deg", h), ("v_deg", v), ("values", vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def scaled(self, s: float) -> "AngularIntensityTable":
        return AngularIntensityTable(self.h_deg, self.v_deg, self.values * s)

    def sample(self, h: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Bilinear interpolation at (h, v) degrees; zero outside the grid."""
        h = np.asarray(h, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        out = np.zeros(np.broadcast(h, v).shape, dtype=np.float64)
        inside = (
            (h >= self.h_deg[0]) & (h <= self.h_deg[-1])
            & (v >= self.v_deg[0]) & (v <= self.v_deg[-1])
        )
        if not np.any(inside):
            return out
        hh = np.broadcast_to(h, out.shape)[inside]
        vv = np.broadcast_to(v, out.shape)[inside]
        ih = np.clip(np.searchsorted(self.h_deg, hh, side="right") - 1, 0, self.h_deg.size - 2)
        iv = np.clip(np.searchsorted(self.v_deg, vv, side="right") - 1, 0, self.v_deg.size - 2)
        th = (hh - self.h_deg[ih]) / (self.h_deg[ih + 1] - self.h_deg[ih])
        tv = (vv - self.v_deg[iv]) / (self.v_deg[iv + 1] - self.v_deg[iv])
        v00 = self.values[iv, ih]
        v01 = self.values[iv, ih + 1]
        v10 = self.values[iv + 1, ih]
        v11 = self.values[iv + 1, ih + 1]
        out[inside] = (
            v00 * (1 - tv) * (1 - th)
            + v01 * (1 - tv) * th
            + v10 * tv * (1 - th)
            + v11 * tv * th
        )
        return out

    def integrated_power(self) -> float:
        """Trapezoidal integral of the table over its angular support."""
        inner = np.trapezoid(self.values, self.h_deg, axis=1)
        return float(np.trapezoid(inner, self.v_deg))


@dataclass(frozen=True)
class HeadlightModel:
    """Projector intrinsics, rigid camera-to-headlight transform, beam table."""

    intrinsics: CameraModel
    rotation: np.ndarray
    translation: np.ndarray
    phi: AngularIntensityTable

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ModelError(f"extrinsics shapes invalid: R {r.shape}, t {t.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ModelError("rotation is not orthonormal")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def origin_in_camera(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @staticmethod
    def from_pose(
        intrinsics: CameraModel,
        position_in_camera,
        phi: AngularIntensityTable,
        rotation: np.ndarray | None = None,
    ) -> "HeadlightModel":
        """Build from the device position expressed in the camera frame."""
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        p = np.asarray(position_in_camera, dtype=np.float64)
        return HeadlightModel(intrinsics, r, -r @ p, phi)


@dataclass(frozen=True)
class WarpMap:
    """Per-headlight-pixel source coordinate (x, y) in the camera image.

    Invalid entries carry the sentinel -1 in both coordinates.
    """

    coords: np.ndarray
    cam_width: int
    cam_height: int

    INVALID = -1.0

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float32)
        if c.ndim != 3 or c.shape[2] != 2:
            raise ShapeError(f"warp coords must be (H, W, 2), got {c.shape}")
        valid = c[:, :, 0] >= 0
        xs, ys = c[:, :, 0][valid], c[:, :, 1][valid]
        if xs.size and (
            xs.min() < 0 or xs.max() > self.cam_width - 1
            or ys.min() < 0 or ys.max() > self.cam_height - 1
        ):
            raise ValueError("valid warp coordinates fall outside the camera frame")
        c = np.ascontiguousarray(c)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def valid(self) -> np.ndarray:
        return self.coords[:, :, 0] >= 0


def project_beam(cam: CameraModel, hl: HeadlightModel, depth: np.ndarray) -> LightField:
    """Render the headlight beam pattern into the camera image.

    Each camera pixel with valid depth is lifted to 3D, moved into the
    headlight frame, and tested against the projector frustum; pixels the
    projector can reach receive the beam table intensity at their angular
    position.  Pixels with non-positive depth, behind the projector, or
    outside its frame get 0.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[:, :, 0]
    if d.shape != (cam.height, cam.width):
        raise ShapeError(f"depth shape {d.shape} does not match camera {cam.height}x{cam.width}")

    u, v = cam.pixel_grid()
    valid = d > 0
    z = np.where(valid, d, 1.0)
    x = (u - cam.cx) / cam.fx * z
    y = (v - cam.cy) / cam.fy * z
    pts = np.stack([x, y, z], axis=-1)

    hp = pts @ hl.rotation.T + hl.translation
    xh, yh, zh = hp[..., 0], hp[..., 1], hp[..., 2]
    front = zh > 1e-9
    zs = np.where(front, zh, 1.0)

    pin = hl.intrinsics
    up = pin.fx * xh / zs + pin.cx
    vp = pin.fy * yh / zs + pin.cy
    eps = 1e-9
    inside = (up >= -eps) & (up <= pin.width - 1 + eps) & (vp >= -eps) & (vp <= pin.height - 1 + eps)

    h_ang = np.degrees(np.arctan2(xh, zs))
    v_ang = np.degrees(np.arctan2(yh, zs))
    vals = hl.phi.sample(h_ang, v_ang)

    field = np.where(valid & front & inside, vals, 0.0)
    return LightField(np.clip(field, 0.0, 1.0).astype(np.float32))


def build_warp(cam: CameraModel, hl: HeadlightModel, reference) -> WarpMap:
    """Precompute the camera coordinate feeding each headlight pixel.

    `reference` is either a fronto-parallel plane distance in meters
    (scalar) or a per-camera-pixel depth map.  With a plane, each
    headlight pixel ray is intersected with the plane z = Z in the camera
    frame and reprojected into the camera.  With a depth map, the forward
    camera-to-headlight mapping is inverted by nearest-sample scatter.
    """
    pin = hl.intrinsics
    if np.isscalar(reference):
        z_plane = float(reference)
        if z_plane <= 0:
            raise CalibrationError(f"reference plane distance must be positive, got {z_plane}")
        uh, vh = pin.pixel_grid()
        d_h = np.stack(
            [(uh - pin.cx) / pin.fx, (vh - pin.cy) / pin.fy, np.ones_like(uh)], axis=-1
        )
        origin = hl.origin_in_camera()
        d_c = d_h @ hl.rotation  # R.T applied to each ray direction
        dz = d_c[..., 2]
        ok = dz > 1e-12
        s = np.where(ok, (z_plane - origin[2]) / np.where(ok, dz, 1.0), -1.0)
        ok &= s > 0
        pts = origin + s[..., None] * d_c
        xc = cam.fx * pts[..., 0] / z_plane + cam.cx
        yc = cam.fy * pts[..., 1] / z_plane + cam.cy
        eps = 1e-9
        ok &= (xc >= -eps) & (xc <= cam.width - 1 + eps) & (yc >= -eps) & (yc <= cam.height - 1 + eps)
        xc = np.clip(xc, 0.0, cam.width - 1)
        yc = np.clip(yc, 0.0, cam.height - 1)
        coords = np.full((pin.height, pin.width, 2), WarpMap.INVALID, dtype=np.float32)
        coords[..., 0] = np.where(ok, xc, WarpMap.INVALID)
        coords[..., 1] = np.where(ok, yc, WarpMap.INVALID)
        if not np.any(ok):
            raise CalibrationError("no headlight ray meets the reference plane in front of both devices")
        return WarpMap(coords, cam.width, cam.height)

    # Depth-map route: forward-project every camera pixel, then keep the
    # nearest (smallest headlight-frame z) sample landing on each
    # headlight pixel.  Unhit pixels stay invalid.
    d = np.asarray(reference, dtype=np.float64)
    if d.ndim == 3:
        d = d[:, :, 0]
    if d.shape != (cam.height, cam.width):
        raise ShapeError(f"reference depth shape {d.shape} does not match camera")
    u, v = cam.pixel_grid()
    valid = d > 0
    z = np.where(valid, d, 1.0)
    pts = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=-1)
    hp = pts @ hl.rotation.T + hl.translation
    zh = hp[..., 2]
    front = valid & (zh > 1e-9)
    zs = np.where(front, zh, 1.0)
    up = np.round(pin.fx * hp[..., 0] / zs + pin.cx).astype(np.int64)
    vp = np.round(pin.fy * hp[..., 1] / zs + pin.cy).astype(np.int64)
    front &= (up >= 0) & (up < pin.width) & (vp >= 0) & (vp < pin.height)
    if not np.any(front):
        raise CalibrationError("no camera pixel projects into the headlight frame")
    coords = np.full((pin.height, pin.width, 2), WarpMap.INVALID, dtype=np.float32)
    src_u = u[front]
    src_v = v[front]
    tgt = (vp[front], up[front])
    depth_h = zh[front]
    order = np.argsort(depth_h, kind="stable")[::-1]  # far first, near overwrites
    coords[tgt[0][order], tgt[1][order], 0] = src_u[order]
    coords[tgt[0][order], tgt[1][order], 1] = src_v[order]
    return WarpMap(coords, cam.width, cam.height)


def bilinear_sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a (H, W) array at sub-pixel (x, y), clamping to the border."""
    h, w = arr.shape
    x = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(x, np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(y, np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = x - x0
    ty = y - y0
    a = arr.astype(np.float64)
    return (
        a[y0, x0] * (1 - ty) * (1 - tx)
        + a[y0, x1] * (1 - ty) * tx
        + a[y1, x0] * ty * (1 - tx)
        + a[y1, x1] * ty * tx
    )


def field_to_headlight(m: LightField, warp: WarpMap) -> LightField:
    """Resample a camera-space field onto the headlight pixel grid."""
    if (warp.cam_height, warp.cam_width) != (m.height, m.width):
        raise ShapeError(
            f"warp was built for {warp.cam_width}x{warp.cam_height}, field is {m.width}x{m.height}"
        )
    valid = warp.valid
    out = np.zeros(valid.shape, dtype=np.float64)
    if np.any(valid):
        out[valid] = bilinear_sample(
            m.data, warp.coords[:, :, 0][valid], warp.coords[:, :, 1][valid]
        )
    return LightField(np.clip(out, 0.0, 1.0).astype(np.float32))


def low_beam_table(n_h: int = 81, n_v: int = 41) -> AngularIntensityTable:
    """Synthetic low-beam pattern: asymmetric lobe biased below the
    horizon with a sharp cutoff against upward glare.

    Vertical angle is positive downward; the lobe peaks a few degrees
    below the horizon and intensity collapses fast for upward angles.
    """
    h = np.linspace(-30.0, 30.0, n_h)
    v = np.linspace(-10.0, 14.0, n_v)
    hh, vv = np.meshgrid(h, v)
    lobe = np.exp(-((hh / 14.0) ** 2) - (((vv - 2.5) / 3.5) ** 2))
    # kerb-side asymmetry: wider reach on the right
    lobe *= 1.0 + 0.25 * np.clip(hh / 30.0, 0.0, 1.0)
    # cutoff: collapse quickly above the horizon against upward glare
    cut = 1.0 / (1.0 + np.exp(-(vv + 1.0) / 0.5))
    vals = lobe * cut
    return AngularIntensityTable(h, v, vals / vals.max())


def high_beam_table(n_h: int = 81, n_v: int = 41) -> AngularIntensityTable:
    """Synthetic high-beam pattern: wide lobe centered on the horizon.

    The lobe widths are chosen so the table integrates to about 1.8x the
    low-beam table, mirroring the usual power ratio between the modes.
    """
    h = np.linspace(-30.0, 30.0, n_h)
    v = np.linspace(-10.0, 14.0, n_v)
    hh, vv = np.meshgrid(h, v)
    vals = np.exp(-((hh / 17.2) ** 2) - ((vv / 4.85) ** 2))
    return AngularIntensityTable(h, v, vals / vals.max())


def default_rig(
    mount_below_camera_m: float = 0.45,
) -> tuple[CameraModel, "HeadlightModel", "HeadlightModel"]:
    """HD projector intrinsics on a 320x80 grid covering the beam tables'
    angular span, mounted below the camera, with LB and HB variants."""
    # 320 px across +-30 deg, 80 px across -10..14 deg
    intr = CameraModel(fx=160.0 / np.tan(np.radians(30.0)), fy=40.0 / np.tan(np.radians(12.0)),
                       cx=160.0, cy=40.0, width=320, height=80)
    pos = np.array([0.0, mount_below_camera_m, 0.0])
    lb = HeadlightModel.from_pose(intr, pos, low_beam_table())
    hb = HeadlightModel.from_pose(intr, pos, high_beam_table())
    return intr, lb, hb


def write_table_csv(path, table: AngularIntensityTable) -> None:
    """CSV layout: header row of horizontal angles, first column vertical
    angles, body intensities."""
    lines = ["," + ",".join(f"{a:.6g}" for a in table.h_deg)]
    for i, va in enumerate(table.v_deg):
        row = ",".join(f"{x:.9g}" for x in table.values[i])
        lines.append(f"{va:.6g},{row}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_table_csv(path) -> AngularIntensityTable:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if len(text) < 2:
        raise ValueError(f"{path}: table CSV needs a header and at least one row")
    h = np.array([float(x) for x in text[0].split(",")[1:]])
    v, rows = [], []
    for line in text[1:]:
        cells = line.split(",")
        v.append(float(cells[0]))
        rows.append([float(x) for x in cells[1:]])
    return AngularIntensityTable(h, np.array(v), np.array(rows))


def read_calibration(path) -> tuple[CameraModel, HeadlightModel, float]:
    """Load a calibration file: camera intrinsics, headlight intrinsics
    and extrinsics (row-major rotation), beam table, reference plane."""
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    cam = CameraModel(**cfg["camera"])
    hcfg = cfg["headlight"]
    phi_spec = hcfg.get("phi", "low_beam")
    if phi_spec == "low_beam":
        phi = low_beam_table()
    elif phi_spec == "high_beam":
        phi = high_beam_table()
    else:
        phi = read_table_csv(Path(path).parent / phi_spec)
    hl = HeadlightModel(
        intrinsics=CameraModel(**hcfg["intrinsics"]),
        rotation=np.asarray(hcfg["rotation"], dtype=np.float64).reshape(3, 3),
        translation=np.asarray(hcfg["translation"], dtype=np.float64),
        phi=phi,
    )
    return cam, hl, float(cfg.get("reference_plane_m", 15.0))


def write_warp(path, warp: WarpMap) -> None:
    from .io import write_raw

    write_raw(path, warp.coords)


def read_warp(path, cam_width: int, cam_height: int) -> WarpMap:
    from .io import read_raw

    return WarpMap(read_raw(path), cam_width, cam_height)
