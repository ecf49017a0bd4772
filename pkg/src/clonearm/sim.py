"""Deterministic 2-D planar arm + tabletop world with a raster renderer.

Top-down view of a 1 m x 1 m table. A 3-link arm is anchored at the
bottom-center; commands are absolute normalized joint targets that the
arm tracks under a rate limit. Object interaction is quasi-static: an
overlap between the end-effector and a free object is resolved by
translating (and, for boxes, rotating) the object out of penetration, so
replays are bit-exact and nothing moves without contact.

Gripper mechanics (the paper-scale rig is abstracted to 2-D): an open
gripper straddles small discs (no pushing), which is what makes top-down
grasping possible; a closed gripper acts as a fist that pushes anything.
Grasping latches when the aperture crosses below 0.3 with an object
center within reach; release happens on crossing above 0.7.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import DTYPE

LINKS = (0.30, 0.25, 0.15)
BASE = (0.5, 0.0)
JOINT_LIMIT = 2.4           # rad, symmetric for all three joints
OMEGA_MAX = 1.5             # rad/s joint speed; aperture units/s for gripper
DT = 1.0 / 32.0             # simulation tick (recording rate)
FRAME_HW = 64

GRASP_CLOSE = 0.3
GRASP_OPEN = 0.7
GRASP_RADIUS = 0.02
EE_RADIUS = 0.03            # contact radius of the fist / closed gripper
STRADDLE_RADIUS = 0.045     # open jaws pass around discs smaller than this
BOX_ROT_GAIN = 0.25

HOME_THETA = np.array([1.3, -2.0, 0.5])
HOME_GRIPPER = 1.0

# palette: exact multiples of 1/255 so rendered frames survive the u8
# round trip in the dataset store bit-for-bit
_C = lambda r, g, b: np.array([r, g, b], dtype=DTYPE) / 255.0
COLOR_BG = _C(20, 20, 26)
COLOR_TARGET = _C(36, 96, 36)
COLOR_DISC = _C(230, 38, 38)
COLOR_BOX = _C(38, 88, 230)
COLOR_ARM = _C(190, 190, 190)
COLOR_JAW = _C(242, 216, 50)


@dataclass
class ArmState:
    theta: np.ndarray            # (3,) rad in [-JOINT_LIMIT, JOINT_LIMIT]
    gripper: float               # aperture in [0, 1]

    def copy(self) -> "ArmState":
        return ArmState(self.theta.copy(), self.gripper)


@dataclass
class SimObject:
    kind: str                    # "disc" | "box"
    x: float
    y: float
    phi: float = 0.0
    radius: float = 0.05         # disc
    w: float = 0.16              # box
    h: float = 0.10
    attached: bool = False

    def copy(self) -> "SimObject":
        return replace(self)


@dataclass
class TargetZone:
    kind: str                    # "circle" | "box"
    x: float
    y: float
    radius: float = 0.06
    phi: float = 0.0
    w: float = 0.16
    h: float = 0.10


@dataclass
class SceneState:
    objects: list[SimObject] = field(default_factory=list)
    target: TargetZone | None = None

    def copy(self) -> "SceneState":
        return SceneState([o.copy() for o in self.objects], self.target)


def home_arm() -> ArmState:
    return ArmState(HOME_THETA.copy(), HOME_GRIPPER)


# ---------------------------------------------------------------------------
# kinematics


def joint_points(arm: ArmState) -> np.ndarray:
    """(4,2) positions: base, elbow joints, end-effector."""
    pts = np.empty((4, 2))
    pts[0] = BASE
    a = 0.0
    for i, L in enumerate(LINKS):
        a += arm.theta[i]
        pts[i + 1, 0] = pts[i, 0] + L * np.cos(a)
        pts[i + 1, 1] = pts[i, 1] + L * np.sin(a)
    return pts


def forward_kinematics(arm: ArmState) -> tuple[float, float, float]:
    """End-effector pose (x, y, heading)."""
    pts = joint_points(arm)
    heading = float(np.sum(arm.theta))
    return float(pts[3, 0]), float(pts[3, 1]), heading


def jacobian(arm: ArmState) -> np.ndarray:
    """(2,3) positional Jacobian of the end-effector."""
    pts = joint_points(arm)
    ee = pts[3]
    jac = np.empty((2, 3))
    for j in range(3):
        r = ee - pts[j]
        jac[0, j] = -r[1]
        jac[1, j] = r[0]
    return jac


def ik_dls(arm: ArmState, target_xy, iters: int = 5, damping: float = 0.05) -> np.ndarray:
    """Damped-least-squares joint step toward target_xy.

    Tracks unreachable targets to the closest pose the iteration settles
    on, but can stall against joint limits; ik_target is the robust
    entry point.
    """
    work = ArmState(arm.theta.copy(), arm.gripper)
    tgt = np.asarray(target_xy, dtype=DTYPE)
    for _ in range(iters):
        pts = joint_points(work)
        err = tgt - pts[3]
        if float(np.hypot(err[0], err[1])) < 1e-9:
            break
        jac = jacobian(work)
        a = jac @ jac.T + (damping**2) * np.eye(2)
        dtheta = jac.T @ np.linalg.solve(a, err)
        work.theta = np.clip(work.theta + dtheta, -JOINT_LIMIT, JOINT_LIMIT)
    return work.theta


_PSI_GRID = np.linspace(-2.3, 2.3, 29)


def ik_target(arm: ArmState, target_xy, ref: np.ndarray | None = None) -> np.ndarray:
    """Joint target reaching target_xy, continuous w.r.t. a reference pose.

    Scans analytic 3-link solutions over a grid of wrist headings and
    both elbow branches, keeping the in-limits solution closest to ref
    (the current configuration by default). Callers tracking a moving
    target should pass their previous solution as ref: scoring against
    the rate-limited live pose lets two branches tie, and a controller
    alternating between them stalls the arm at their midpoint. Falls
    back to damped least squares when the target is out of reach.
    """
    tx = float(target_xy[0]) - BASE[0]
    ty = float(target_xy[1]) - BASE[1]
    if ref is None:
        ref = arm.theta
    l1, l2, l3 = LINKS
    ray = np.arctan2(ty, tx)
    best = None
    best_score = np.inf
    for dpsi in _PSI_GRID:
        psi = ray + dpsi
        wx = tx - l3 * np.cos(psi)
        wy = ty - l3 * np.sin(psi)
        d2 = wx * wx + wy * wy
        c2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
        if not -1.0 <= c2 <= 1.0:
            continue
        base_t2 = float(np.arccos(c2))
        for t2 in (base_t2, -base_t2):
            t1 = np.arctan2(wy, wx) - np.arctan2(l2 * np.sin(t2), l1 + l2 * np.cos(t2))
            t1 = (t1 + np.pi) % (2.0 * np.pi) - np.pi
            t3 = (psi - t1 - t2 + np.pi) % (2.0 * np.pi) - np.pi
            cand = (t1, t2, t3)
            if any(abs(c) > JOINT_LIMIT for c in cand):
                continue
            score = (abs(t1 - ref[0]) + abs(t2 - ref[1])
                     + 0.5 * abs(t3 - ref[2]) + 0.05 * abs(dpsi))
            if score < best_score:
                best_score = score
                best = cand
    if best is None:
        return ik_dls(arm, target_xy, iters=8)
    return np.array(best, dtype=DTYPE)


def clamp_reachable(xy, lo: float = 0.14, hi: float = 0.66) -> np.ndarray:
    """Project a point into the annulus the arm covers comfortably."""
    p = np.asarray(xy, dtype=DTYPE)
    rel = p - np.array(BASE)
    r = float(np.hypot(rel[0], rel[1]))
    if r < 1e-9:
        return np.array([BASE[0] + lo, BASE[1]])
    if r > hi:
        return np.array(BASE) + rel * (hi / r)
    if r < lo:
        return np.array(BASE) + rel * (lo / r)
    return p


# ---------------------------------------------------------------------------
# command normalization


def normalize_command(theta: np.ndarray, gripper: float) -> np.ndarray:
    """Affine map of (joint angles, aperture) onto [-1, 1]^4."""
    out = np.empty(4, dtype=DTYPE)
    out[:3] = theta / JOINT_LIMIT
    out[3] = 2.0 * gripper - 1.0
    return out


def denormalize_command(cmd: np.ndarray) -> tuple[np.ndarray, float]:
    cmd = np.asarray(cmd, dtype=DTYPE)
    theta = cmd[:3] * JOINT_LIMIT
    gripper = (cmd[3] + 1.0) / 2.0
    return theta, float(gripper)


def arm_command(arm: ArmState) -> np.ndarray:
    """The normalized command equal to the current arm state."""
    return normalize_command(arm.theta, arm.gripper)


# ---------------------------------------------------------------------------
# stepping


def _move_toward(cur: float, tgt: float, max_step: float) -> float:
    d = tgt - cur
    if d > max_step:
        d = max_step
    elif d < -max_step:
        d = -max_step
    return cur + d


def _push_disc(obj: SimObject, ee: np.ndarray, contact: float) -> None:
    d = np.array([obj.x, obj.y]) - ee
    dist = float(np.hypot(d[0], d[1]))
    if dist >= contact:
        return
    if dist < 1e-12:
        n = np.array([1.0, 0.0])
    else:
        n = d / dist
    obj.x = float(ee[0] + n[0] * contact)
    obj.y = float(ee[1] + n[1] * contact)


def _push_box(obj: SimObject, ee: np.ndarray, r_ee: float) -> None:
    cphi, sphi = np.cos(obj.phi), np.sin(obj.phi)
    rel = ee - np.array([obj.x, obj.y])
    # into box frame
    lx = cphi * rel[0] + sphi * rel[1]
    ly = -sphi * rel[0] + cphi * rel[1]
    hx, hy = obj.w / 2.0, obj.h / 2.0
    qx = min(max(lx, -hx), hx)
    qy = min(max(ly, -hy), hy)
    dx, dy = lx - qx, ly - qy
    dist = float(np.hypot(dx, dy))
    if dist >= r_ee:
        return
    if dist < 1e-12:
        # EE center inside the box: eject along the axis of least depth
        depths = (hx - abs(lx), hy - abs(ly))
        if depths[0] < depths[1]:
            nx, ny = (1.0 if lx >= 0 else -1.0), 0.0
            pen = r_ee + depths[0]
            qx, qy = hx * nx, ly
        else:
            nx, ny = 0.0, (1.0 if ly >= 0 else -1.0)
            pen = r_ee + depths[1]
            qx, qy = lx, hy * ny
    else:
        nx, ny = dx / dist, dy / dist
        pen = r_ee - dist
    # translate away from the EE
    wx = cphi * nx - sphi * ny
    wy = sphi * nx + cphi * ny
    obj.x -= wx * pen
    obj.y -= wy * pen
    # torque from an off-center contact rotates the box
    lever = qx * (-ny * pen) - qy * (-nx * pen)
    inertia = (obj.w**2 + obj.h**2) / 12.0
    obj.phi += BOX_ROT_GAIN * lever / inertia


def _clamp_to_table(obj: SimObject) -> None:
    if obj.kind == "disc":
        m = obj.radius
    else:
        m = float(np.hypot(obj.w, obj.h)) / 2.0
    obj.x = min(max(obj.x, m), 1.0 - m)
    obj.y = min(max(obj.y, m), 1.0 - m)


def step(arm: ArmState, scene: SceneState, command: np.ndarray, dt: float = DT
         ) -> tuple[ArmState, SceneState]:
    """One simulation tick under an absolute rate-limited command."""
    cmd = np.clip(np.asarray(command, dtype=DTYPE), -1.0, 1.0)
    tgt_theta, tgt_grip = denormalize_command(cmd)
    new_arm = arm.copy()
    max_step = OMEGA_MAX * dt
    for i in range(3):
        new_arm.theta[i] = _move_toward(arm.theta[i], tgt_theta[i], max_step)
    new_arm.theta = np.clip(new_arm.theta, -JOINT_LIMIT, JOINT_LIMIT)
    prev_grip = arm.gripper
    new_arm.gripper = min(max(_move_toward(prev_grip, tgt_grip, max_step), 0.0), 1.0)

    new_scene = scene.copy()
    ex, ey, _ = forward_kinematics(new_arm)
    ee = np.array([ex, ey])

    # release before grasp so one crossing cannot do both
    if prev_grip <= GRASP_OPEN < new_arm.gripper:
        for obj in new_scene.objects:
            obj.attached = False
    if prev_grip >= GRASP_CLOSE > new_arm.gripper:
        if not any(o.attached for o in new_scene.objects):
            best = None
            best_d = GRASP_RADIUS
            for obj in new_scene.objects:
                if obj.kind != "disc" or obj.radius > STRADDLE_RADIUS:
                    continue
                d = float(np.hypot(obj.x - ee[0], obj.y - ee[1]))
                if d <= best_d:
                    best, best_d = obj, d
            if best is not None:
                best.attached = True

    # jaws straddle small discs until the aperture passes the grasp
    # threshold, otherwise closing over a disc would shove it away before
    # the latch can fire
    straddling = new_arm.gripper >= GRASP_CLOSE
    for obj in new_scene.objects:
        if obj.attached:
            obj.x, obj.y = float(ee[0]), float(ee[1])
            continue
        if obj.kind == "disc":
            if straddling and obj.radius <= STRADDLE_RADIUS:
                continue
            _push_disc(obj, ee, EE_RADIUS + obj.radius)
        else:
            _push_box(obj, ee, EE_RADIUS)
        _clamp_to_table(obj)
    return new_arm, new_scene


# ---------------------------------------------------------------------------
# rendering

_AXIS = (np.arange(FRAME_HW) + 0.5) / FRAME_HW
_GX = np.tile(_AXIS, (FRAME_HW, 1))                  # world x per pixel
_GY = np.tile((1.0 - _AXIS)[:, None], (1, FRAME_HW))  # world y per pixel (row 0 = top)


def _fill_circle(frame, cx, cy, r, color):
    mask = (_GX - cx) ** 2 + (_GY - cy) ** 2 <= r * r
    frame[mask] = color


def _fill_box(frame, cx, cy, phi, w, h, color):
    c, s = np.cos(phi), np.sin(phi)
    rx = _GX - cx
    ry = _GY - cy
    lx = c * rx + s * ry
    ly = -s * rx + c * ry
    mask = (np.abs(lx) <= w / 2.0) & (np.abs(ly) <= h / 2.0)
    frame[mask] = color


def _fill_segment(frame, p0, p1, halfwidth, color):
    d = p1 - p0
    len2 = float(d @ d)
    rx = _GX - p0[0]
    ry = _GY - p0[1]
    if len2 < 1e-12:
        dist2 = rx * rx + ry * ry
    else:
        t = np.clip((rx * d[0] + ry * d[1]) / len2, 0.0, 1.0)
        dist2 = (rx - t * d[0]) ** 2 + (ry - t * d[1]) ** 2
    frame[dist2 <= halfwidth * halfwidth] = color


def render(arm: ArmState, scene: SceneState) -> np.ndarray:
    """(64,64,3) float64 frame in [0,1]; values lie on the 1/255 grid."""
    frame = np.empty((FRAME_HW, FRAME_HW, 3), dtype=DTYPE)
    frame[:] = COLOR_BG
    tz = scene.target
    if tz is not None:
        if tz.kind == "circle":
            _fill_circle(frame, tz.x, tz.y, tz.radius, COLOR_TARGET)
        else:
            _fill_box(frame, tz.x, tz.y, tz.phi, tz.w, tz.h, COLOR_TARGET)
    for obj in scene.objects:
        if obj.kind == "disc":
            _fill_circle(frame, obj.x, obj.y, obj.radius, COLOR_DISC)
        else:
            _fill_box(frame, obj.x, obj.y, obj.phi, obj.w, obj.h, COLOR_BOX)
    pts = joint_points(arm)
    for i in range(3):
        _fill_segment(frame, pts[i], pts[i + 1], 0.018, COLOR_ARM)
    # jaws: two pads perpendicular to the heading, separation follows aperture
    heading = float(np.sum(arm.theta))
    perp = np.array([-np.sin(heading), np.cos(heading)])
    gap = 0.012 + 0.03 * arm.gripper
    for side in (-1.0, 1.0):
        c = pts[3] + side * gap * perp
        _fill_circle(frame, c[0], c[1], 0.014, COLOR_JAW)
    return frame


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    return np.round(frame * 255.0).astype(np.uint8)


def u8_to_frame(img: np.ndarray) -> np.ndarray:
    return img.astype(DTYPE) / 255.0


def save_frame_png(frame: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(frame_to_u8(frame), mode="RGB").save(path, format="PNG")


def save_episode_gif(frames, path, fps: int = 8, scale: int = 4) -> None:
    from PIL import Image

    imgs = []
    for f in frames:
        im = Image.fromarray(frame_to_u8(f), mode="RGB")
        imgs.append(im.resize((im.width * scale, im.height * scale), Image.NEAREST))
    imgs[0].save(path, save_all=True, append_images=imgs[1:],
                 duration=int(1000 / fps), loop=0)
