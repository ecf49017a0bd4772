"""Task definitions and scripted expert demonstrators.

Three tabletop tasks on the planar arm: pick-and-place a small disc into
a circular zone, push a larger disc into a goal region, and push a box to
a target pose. Each task carries a seeded scene initializer and a pure
success predicate.

The scripted experts stand in for human teleoperators. Two properties of
human demonstrations matter for the learning problem and are reproduced
deliberately: commands carry zero-mean noise, and geometric decisions
(which side to approach or orbit from) are randomized per episode, so
the demonstration distribution is genuinely multimodal. After finishing
a task the expert returns the arm to its home pose, mirroring how a
demonstrator parks the arm between trials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import sim
from .sim import ArmState, SceneState, SimObject, TargetZone

TASK_COUNT = 3
JOINTS = 4

T1_DISC_RADIUS = 0.035
T1_TARGET_RADIUS = 0.06
T2_DISC_RADIUS = 0.06
T2_MARGIN = 0.02
BOX_W, BOX_H = 0.16, 0.10
T3_POS_MARGIN = 0.02
T3_ANGLE_TOL = np.deg2rad(20.0)

EXPERT_NOISE = 0.02
HOME_CMD = sim.normalize_command(sim.HOME_THETA, sim.HOME_GRIPPER)


@dataclass
class TaskSpec:
    task_id: int
    name: str
    time_limit: float
    init: Callable[[int], tuple[ArmState, SceneState]]
    success: Callable[[ArmState, SceneState], bool]


def task_selector(task_id: int, count: int = TASK_COUNT) -> np.ndarray:
    if not 0 <= task_id < count:
        raise ValueError(f"task id {task_id} outside 0..{count - 1}")
    v = np.zeros(count)
    v[task_id] = 1.0
    return v


def _wrap_pi(a: float) -> float:
    return float((a + np.pi) % (2.0 * np.pi) - np.pi)


def _wrap_halfpi(a: float) -> float:
    """Angle difference of a rectangle, which is symmetric under pi."""
    return float((a + np.pi / 2.0) % np.pi - np.pi / 2.0)


def _sample_point(rng: np.random.Generator) -> np.ndarray:
    """A point on the table that the arm reaches comfortably."""
    base = np.array(sim.BASE)
    while True:
        p = rng.uniform((0.16, 0.20), (0.84, 0.72))
        d = float(np.hypot(*(p - base)))
        if 0.28 <= d <= 0.52:
            return p


def _t1_success(arm: ArmState, scene: SceneState) -> bool:
    disc = scene.objects[0]
    tz = scene.target
    if disc.attached or arm.gripper < sim.GRASP_OPEN:
        return False
    return float(np.hypot(disc.x - tz.x, disc.y - tz.y)) <= tz.radius


def _t2_success(arm: ArmState, scene: SceneState) -> bool:
    disc = scene.objects[0]
    tz = scene.target
    return float(np.hypot(disc.x - tz.x, disc.y - tz.y)) <= disc.radius + T2_MARGIN


def _t3_success(arm: ArmState, scene: SceneState) -> bool:
    box = scene.objects[0]
    tz = scene.target
    c, s = np.cos(tz.phi), np.sin(tz.phi)
    rx, ry = box.x - tz.x, box.y - tz.y
    lx = c * rx + s * ry
    ly = -s * rx + c * ry
    if abs(lx) > tz.w / 2.0 + T3_POS_MARGIN or abs(ly) > tz.h / 2.0 + T3_POS_MARGIN:
        return False
    return abs(_wrap_halfpi(box.phi - tz.phi)) <= T3_ANGLE_TOL


def _init_with_rejection(build, success, seed: int) -> tuple[ArmState, SceneState]:
    rng = np.random.default_rng(seed)
    for _ in range(200):
        arm, scene = build(rng)
        if not success(arm, scene):
            return arm, scene
    raise RuntimeError("scene initializer failed to produce a fresh scene")


def _t1_build(rng) -> tuple[ArmState, SceneState]:
    p = _sample_point(rng)
    while True:
        q = _sample_point(rng)
        if float(np.hypot(*(q - p))) > 0.22:
            break
    scene = SceneState(
        objects=[SimObject("disc", p[0], p[1], radius=T1_DISC_RADIUS)],
        target=TargetZone("circle", q[0], q[1], radius=T1_TARGET_RADIUS),
    )
    return sim.home_arm(), scene


def _t2_build(rng) -> tuple[ArmState, SceneState]:
    p = _sample_point(rng)
    while True:
        q = _sample_point(rng)
        if 0.18 < float(np.hypot(*(q - p))) < 0.45:
            break
    scene = SceneState(
        objects=[SimObject("disc", p[0], p[1], radius=T2_DISC_RADIUS)],
        target=TargetZone("circle", q[0], q[1], radius=T2_DISC_RADIUS + T2_MARGIN),
    )
    return sim.home_arm(), scene


def _t3_build(rng) -> tuple[ArmState, SceneState]:
    p = _sample_point(rng)
    phi = float(rng.uniform(-np.pi, np.pi))
    while True:
        q = _sample_point(rng)
        if 0.16 < float(np.hypot(*(q - p))) < 0.40:
            break
    phi_t = float(rng.uniform(-0.5, 0.5))
    scene = SceneState(
        objects=[SimObject("box", p[0], p[1], phi=phi, w=BOX_W, h=BOX_H)],
        target=TargetZone("box", q[0], q[1], phi=phi_t, w=BOX_W, h=BOX_H),
    )
    return sim.home_arm(), scene


def make_tasks() -> list[TaskSpec]:
    return [
        TaskSpec(0, "pick-place-disc", 45.0,
                 lambda seed: _init_with_rejection(_t1_build, _t1_success, seed),
                 _t1_success),
        TaskSpec(1, "push-disc", 60.0,
                 lambda seed: _init_with_rejection(_t2_build, _t2_success, seed),
                 _t2_success),
        TaskSpec(2, "push-box", 60.0,
                 lambda seed: _init_with_rejection(_t3_build, _t3_success, seed),
                 _t3_success),
    ]


# ---------------------------------------------------------------------------
# scripted experts


def _rot(v: np.ndarray, a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.hypot(v[0], v[1]))
    if n < 1e-9:
        return np.array([1.0, 0.0])
    return v / n


class ScriptedExpert:
    """Closed-loop waypoint controller demonstrating one episode.

    act() returns a normalized command each simulation tick. The side
    used to approach (T1) or orbit around (T2/T3) the object is drawn
    once per episode, so repeated demonstrations of one scene split into
    mirrored strategies.
    """

    def __init__(self, task: TaskSpec, seed: int):
        self.task = task
        self.rng = np.random.default_rng(np.random.SeedSequence([task.task_id, seed, 77]))
        self.side = 1.0 if self.rng.random() < 0.5 else -1.0
        self.phase = "start"
        self._ik_ref = None
        self._rot_end = None
        self._last_ee = None
        self._stuck_ticks = 0
        self._orbit_dir = None
        self._last_step_sign = 1.0

    # -- helpers

    def _goto(self, arm: ArmState, xy, grip: float) -> np.ndarray:
        theta = sim.ik_target(arm, sim.clamp_reachable(xy), ref=self._ik_ref)
        self._ik_ref = theta
        cmd = sim.normalize_command(theta, grip)
        cmd = cmd + self.rng.normal(0.0, EXPERT_NOISE, size=4)
        return np.clip(cmd, -1.0, 1.0)

    def _home(self) -> np.ndarray:
        cmd = HOME_CMD + self.rng.normal(0.0, EXPERT_NOISE, size=4)
        return np.clip(cmd, -1.0, 1.0)

    def _ee(self, arm: ArmState) -> np.ndarray:
        x, y, _ = sim.forward_kinematics(arm)
        return np.array([x, y])

    # -- per-task controllers

    def act(self, arm: ArmState, scene: SceneState) -> np.ndarray:
        if self.phase == "home" or self.task.success(arm, scene):
            self.phase = "home"
            return self._home()
        if self.task.task_id == 0:
            return self._act_pick(arm, scene)
        if self.task.task_id == 1:
            return self._act_push_disc(arm, scene)
        return self._act_push_box(arm, scene)

    def _act_pick(self, arm: ArmState, scene: SceneState) -> np.ndarray:
        disc = scene.objects[0]
        tz = scene.target
        obj = np.array([disc.x, disc.y])
        goal = np.array([tz.x, tz.y])
        ee = self._ee(arm)
        if self.phase == "start":
            away = _unit(obj - goal)
            waypoint = obj + 0.085 * _rot(away, self.side * 0.9)
            if float(np.hypot(*(ee - waypoint))) < 0.025:
                self.phase = "center"
            return self._goto(arm, waypoint, 1.0)
        if self.phase == "center":
            if disc.attached:
                self.phase = "carry"
            elif float(np.hypot(*(ee - obj))) < 0.014:
                self.phase = "grasp"
            return self._goto(arm, obj, 1.0)
        if self.phase == "grasp":
            if disc.attached:
                self.phase = "carry"
            elif arm.gripper <= 0.25:
                # closed on nothing: open up and line up again
                self.phase = "reopen"
            return self._goto(arm, obj, 0.0)
        if self.phase == "reopen":
            if arm.gripper >= 0.75:
                self.phase = "center"
            return self._goto(arm, obj, 1.0)
        if self.phase == "carry":
            if not disc.attached and arm.gripper < sim.GRASP_CLOSE:
                # lost the disc: try again
                self.phase = "center"
                return self._goto(arm, obj, 1.0)
            if float(np.hypot(*(ee - goal))) < 0.035:
                self.phase = "release"
            return self._goto(arm, goal, 0.0)
        # release
        if not disc.attached and arm.gripper >= 0.75:
            self.phase = "home"
            return self._home()
        return self._goto(arm, goal, 1.0)

    def _approach_then_push(self, arm: ArmState, anchor: np.ndarray,
                            push_dir: np.ndarray, push_reach: float,
                            orbit_center: np.ndarray, orbit_reach: float,
                            grip: float, pen: float = 0.012) -> np.ndarray:
        """Navigate around the object to a standoff behind the push line,
        then drive the end-effector through the contact point."""
        ee = self._ee(arm)
        # stalled against a reachability boundary: orbit the other way around
        if self._last_ee is not None and float(np.hypot(*(ee - self._last_ee))) < 0.004:
            self._stuck_ticks += 1
            if self._stuck_ticks > 24:
                self._orbit_dir = -self._last_step_sign
                self.phase = "orbit"
                self._stuck_ticks = 0
        else:
            self._stuck_ticks = 0
        self._last_ee = ee
        standoff = anchor - push_dir * (push_reach + 0.02)
        if self.phase in ("start", "orbit"):
            if float(np.hypot(*(ee - standoff))) < 0.035:
                self.phase = "push"
                self._orbit_dir = None
            else:
                self.phase = "orbit"
                rel = ee - orbit_center
                rd = float(np.hypot(*rel))
                tang = standoff - orbit_center
                mis = _wrap_pi(float(np.arctan2(rel[1], rel[0]))
                               - float(np.arctan2(tang[1], tang[0])))
                if rd < orbit_reach - 0.005 and abs(mis) > 0.25:
                    # inside the safety ring: back straight out first
                    waypoint = orbit_center + _unit(rel) * orbit_reach
                elif abs(mis) < 0.25 and self._orbit_dir is None:
                    waypoint = standoff
                else:
                    if self._orbit_dir is not None:
                        step = 0.5 * self._orbit_dir
                        if abs(mis) < 0.25:
                            self._orbit_dir = None
                    elif abs(mis) > 2.7:  # opposite side: honor the episode's side draw
                        step = 0.5 * self.side
                    else:
                        step = min(0.5, abs(mis)) * -float(np.sign(mis))
                    self._last_step_sign = float(np.sign(step)) or 1.0
                    waypoint = orbit_center + orbit_reach * _unit(_rot(rel, step))
                return self._goto(arm, waypoint, grip)
        # push phase: retreat to orbiting when the contact geometry is lost
        along = float((ee - anchor) @ push_dir)
        lateral = abs(float((ee - anchor)[0] * push_dir[1] - (ee - anchor)[1] * push_dir[0]))
        if along > 0.015 or lateral > 0.07:
            self.phase = "orbit"
        waypoint = anchor - push_dir * (push_reach - pen)
        return self._goto(arm, waypoint, grip)

    def _act_push_disc(self, arm: ArmState, scene: SceneState) -> np.ndarray:
        disc = scene.objects[0]
        tz = scene.target
        obj = np.array([disc.x, disc.y])
        goal = np.array([tz.x, tz.y])
        reach = disc.radius + sim.EE_RADIUS
        return self._approach_then_push(arm, obj, _unit(goal - obj), reach,
                                        obj, reach + 0.05, 0.0)

    @staticmethod
    def _box_support(box: SimObject, d: np.ndarray) -> float:
        """Center-to-surface distance of the box along -d (contact reach)."""
        e = _rot(-d, -box.phi)
        tx = abs(box.w / 2.0 / e[0]) if abs(e[0]) > 1e-9 else np.inf
        ty = abs(box.h / 2.0 / e[1]) if abs(e[1]) > 1e-9 else np.inf
        return float(min(tx, ty))

    def _act_push_box(self, arm: ArmState, scene: SceneState) -> np.ndarray:
        box = scene.objects[0]
        tz = scene.target
        obj = np.array([box.x, box.y])
        goal = np.array([tz.x, tz.y])
        err_pos = goal - obj
        err_phi = _wrap_halfpi(box.phi - tz.phi)
        orbit_reach = float(np.hypot(box.w, box.h)) / 2.0 + sim.EE_RADIUS + 0.04
        if float(np.hypot(*err_pos)) > 0.03:
            # position first; a center push leaves whatever angle it leaves
            self._rot_end = None
            push_dir = _unit(err_pos)
            reach = self._box_support(box, push_dir) + sim.EE_RADIUS
            return self._approach_then_push(arm, obj, push_dir, reach, obj,
                                            orbit_reach, 0.0)
        if abs(err_phi) > T3_ANGLE_TOL * 0.45:
            # rotate in place: push near a box end, perpendicular to the long
            # axis; both ends give the same torque sign, so take the one
            # whose standoff stays reachable, breaking ties by whether the
            # translation drift points back toward the goal
            u_long = _rot(np.array([1.0, 0.0]), box.phi)
            sgn_rot = -float(np.sign(err_phi)) if err_phi != 0 else 1.0
            perp = np.array([-u_long[1], u_long[0]])
            reach = box.h / 2.0 + sim.EE_RADIUS
            if self._rot_end is None:
                best, best_score = 1.0, -np.inf
                for end in (1.0, -1.0):
                    anchor = obj + u_long * (end * box.w * 0.38)
                    pdir = perp * sgn_rot * end
                    standoff = anchor - pdir * (reach + 0.02)
                    r = float(np.hypot(standoff[0] - sim.BASE[0],
                                       standoff[1] - sim.BASE[1]))
                    feasible = 0.16 <= r <= 0.63 and \
                        0.03 <= standoff[0] <= 0.97 and 0.03 <= standoff[1] <= 0.97
                    drift = float(pdir @ _unit(err_pos)) if \
                        float(np.hypot(*err_pos)) > 1e-6 else 0.0
                    score = (2.0 if feasible else 0.0) + 0.3 * drift
                    if score > best_score:
                        best, best_score = end, score
                self._rot_end = best
            end = self._rot_end
            anchor = obj + u_long * (end * box.w * 0.38)
            push_dir = perp * sgn_rot * end
            return self._approach_then_push(arm, anchor, push_dir, reach, obj,
                                            orbit_reach, 0.0)
        # inside both tolerances but the predicate has not latched yet
        # (noise): nudge through the center toward the goal
        push_dir = _unit(err_pos) if float(np.hypot(*err_pos)) > 1e-6 else \
            np.array([1.0, 0.0])
        reach = self._box_support(box, push_dir) + sim.EE_RADIUS
        return self._approach_then_push(arm, obj, push_dir, reach, obj,
                                        orbit_reach, 0.0)


def run_expert_episode(task: TaskSpec, seed: int, max_extra: float = 2.0):
    """Roll one expert episode at the recording rate.

    Returns (frames_u8, commands, success, success_time). Frames pair
    with the command issued while observing them. The episode continues
    for up to max_extra seconds after success so the homing behavior is
    part of the demonstration; failed episodes return success=False.
    """
    arm, scene = task.init(seed)
    expert = ScriptedExpert(task, seed)
    frames: list[np.ndarray] = []
    commands: list[np.ndarray] = []
    t = 0.0
    success_t = None
    max_steps = int((task.time_limit + max_extra) / sim.DT)
    for _ in range(max_steps):
        frame = sim.render(arm, scene)
        cmd = expert.act(arm, scene)
        frames.append(sim.frame_to_u8(frame))
        commands.append(cmd)
        arm, scene = sim.step(arm, scene, cmd)
        t += sim.DT
        if success_t is None and task.success(arm, scene):
            success_t = t
            if success_t > task.time_limit:
                return frames, commands, False, None
        if success_t is not None:
            homed = np.all(np.abs(arm.theta - sim.HOME_THETA) < 0.1) and \
                arm.gripper > 0.85
            if homed or t - success_t >= max_extra:
                return frames, commands, True, success_t
    return frames, commands, success_t is not None, success_t