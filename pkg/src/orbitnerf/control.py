"""Simulated drone kinematics and PID visual servoing on detected regions.

The simulated drone is a first-order velocity plant: commanded velocities are
approached with time constant tau, position and yaw integrate the velocities.
Commands are the four normalized channels (roll R, pitch P, throttle T,
yaw Y) in [-1, 1]:

* R moves the drone along camera-right, correcting horizontal centroid error.
* P moves it along its forward axis, holding the apparent object size
  (detected box height as a fraction of image height).
* T moves it vertically, correcting vertical centroid error.
* Y is the yaw rate (positive = counterclockwise seen from above).

The servo loop closes perception around the region detector: render the view,
detect the largest region, box it, and drive the box centroid to the image
center.  The yaw channel uses the positional-alignment machinery: the 2D box
centroid is lifted to 3D by intersecting its pixel ray with the scene's
bounding box, the entry-face normal gives the alignment score

    O = ((C - P) / ||C - P||) . n     in [-1, 1]

(logged as telemetry; 1 means the camera sits on the face normal), and the
actionable yaw error is the horizontal bearing from the drone heading to the
lifted point.

The drone's camera may carry a fixed gimbal pitch (set per planned pose);
yaw is the only controlled rotation, matching a forward-camera quadrotor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace, asdict

import numpy as np

from .blobs import detect_blobs, largest_region_bbox, geometric_sigmas
from .geometry import (Box3, CameraRig, Intrinsics, TriangleMesh, render_rgb,
                       render_shaded)

CHANNELS = ("R", "P", "T", "Y")


class TargetLostError(RuntimeError):
    """The object left the field of view for too many consecutive frames."""


@dataclass(frozen=True)
class DroneState:
    position: np.ndarray          # (3,) meters
    yaw: float                    # radians, CCW about +z, 0 = +x
    velocity: np.ndarray = None   # (3,) m/s
    yaw_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))
        v = np.zeros(3) if self.velocity is None else \
            np.asarray(self.velocity, dtype=np.float64).reshape(3)
        object.__setattr__(self, "velocity", v)
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(v))
                and math.isfinite(self.yaw) and math.isfinite(self.yaw_rate)):
            raise ValueError("drone state must be finite")


@dataclass(frozen=True)
class PidGains:
    """Per-channel PID gains, ordered (R, P, T, Y), plus the integral clamp."""

    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    integral_clamp: float = 0.5

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(4)
            if np.any(arr < 0):
                raise ValueError(f"{name} gains must be non-negative")
            object.__setattr__(self, name, arr)
        if self.integral_clamp <= 0:
            raise ValueError("integral clamp must be positive")


@dataclass(frozen=True)
class PidState:
    integral: np.ndarray = None
    prev_error: np.ndarray = None  # None until the first step

    def __post_init__(self):
        i = np.zeros(4) if self.integral is None else \
            np.asarray(self.integral, dtype=np.float64).reshape(4)
        object.__setattr__(self, "integral", i)


@dataclass(frozen=True)
class ControlOutput:
    roll: float
    pitch: float
    throttle: float
    yaw: float

    def as_array(self):
        return np.array([self.roll, self.pitch, self.throttle, self.yaw])


@dataclass(frozen=True)
class CaptureSchedule:
    """How many servo/capture/advance rounds to fly.

    Five iterations with four drones is the stock 20-image schedule; six
    iterations gives the 24-image variant.
    """

    iterations: int = 5
    delta_angle: float = 2.0 * math.pi / 20.0
    images_per_drone: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("schedule needs at least one iteration")
        if self.delta_angle <= 0:
            raise ValueError("circular step must be positive")
        if self.images_per_drone < 1:
            raise ValueError("images_per_drone must be at least 1")


@dataclass(frozen=True)
class PlantConfig:
    """First-order response of the simulated drone."""

    tau: float = 0.2           # s, velocity time constant
    max_speed: float = 1.0     # m/s per channel
    max_yaw_rate: float = 1.0  # rad/s
    dt: float = 0.05           # s, control period


@dataclass(frozen=True)
class ServoConfig:
    """Perception and convergence settings for the servo loop."""

    plant: PlantConfig = PlantConfig()
    # the grid must extend past the largest expected region scale (a region
    # filling ~60% of a 64 px frame peaks near sigma 16)
    sigmas: tuple = tuple(geometric_sigmas(2.0, 28.0, per_octave=4))
    blob_threshold: float = 0.01
    target_height_frac: float = 0.6
    yaw_tol: float = 0.05      # rad
    lost_after: int = 5        # consecutive empty frames before giving up


@dataclass(frozen=True)
class ServoResult:
    state: DroneState
    converged: bool
    steps: int
    centroid_err_px: float
    yaw_err: float
    alignment: float  # last positional-alignment score O, nan if unavailable


DEFAULT_GAINS = PidGains(
    kp=np.array([1.6, 0.8, 1.6, 1.2]),
    ki=np.array([0.05, 0.02, 0.05, 0.0]),
    kd=np.array([0.6, 0.3, 0.6, 0.2]),
    integral_clamp=0.5,
)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def yaw_orientation_error(camera_pos, box_centroid, box_normal) -> float:
    """Positional alignment of the camera with the region's surface normal.

    Returns ``((C - P)/||C - P||) . n`` in [-1, 1]: 1 when the camera sits on
    the outward normal through the centroid, 0 when orthogonal to it.
    """
    c = np.asarray(camera_pos, dtype=np.float64)
    p = np.asarray(box_centroid, dtype=np.float64)
    n = np.asarray(box_normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("box normal must be unit length")
    d = c - p
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        raise ValueError("camera position coincides with the box centroid")
    return float((d / dist) @ n)


def pid_step(error, state: PidState, gains: PidGains, dt: float):
    """One PID update over the four channels; outputs clamped to [-1, 1]."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.asarray(error, dtype=np.float64).reshape(4)
    integral = np.clip(state.integral + e * dt,
                       -gains.integral_clamp, gains.integral_clamp)
    deriv = np.zeros(4) if state.prev_error is None else (e - state.prev_error) / dt
    raw = gains.kp * e + gains.ki * integral + gains.kd * deriv
    out = np.clip(raw, -1.0, 1.0)
    new_state = PidState(integral=integral, prev_error=e)
    return ControlOutput(*out), new_state


def heading_axes(yaw: float):
    """Forward / right / up unit vectors for a drone heading ``yaw``."""
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    return fwd, right, up


def apply_control(state: DroneState, cmd: ControlOutput, dt: float,
                  plant: PlantConfig = PlantConfig()) -> DroneState:
    """Integrate the first-order plant for one step.  Deterministic."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    fwd, right, up = heading_axes(state.yaw)
    v_cmd = plant.max_speed * (cmd.roll * right + cmd.pitch * fwd
                               + cmd.throttle * up)
    decay = math.exp(-dt / plant.tau)
    v = v_cmd + (state.velocity - v_cmd) * decay
    speed = np.linalg.norm(v)
    if speed > plant.max_speed:
        v = v * (plant.max_speed / speed)
    yr_cmd = cmd.yaw * plant.max_yaw_rate
    yr = yr_cmd + (state.yaw_rate - yr_cmd) * decay
    yr = max(-plant.max_yaw_rate, min(plant.max_yaw_rate, yr))
    return DroneState(position=state.position + v * dt,
                      yaw=wrap_angle(state.yaw + yr * dt),
                      velocity=v, yaw_rate=yr)


def circular_advance(drone: DroneState, orbit_center, delta_angle: float) -> DroneState:
    """Rotate the drone about the vertical axis through ``orbit_center``.

    Radius and height are preserved; yaw is re-aimed at the center; velocities
    reset (the advance is a discrete repositioning, not a flown trajectory).
    """
    center = np.asarray(orbit_center, dtype=np.float64)
    rel = drone.position - center
    if np.hypot(rel[0], rel[1]) < 1e-12:
        raise ValueError("drone is on the orbit axis; circular advance undefined")
    ca, sa = math.cos(delta_angle), math.sin(delta_angle)
    x = ca * rel[0] - sa * rel[1]
    y = sa * rel[0] + ca * rel[1]
    pos = np.array([center[0] + x, center[1] + y, drone.position[2]])
    yaw = math.atan2(center[1] - pos[1], center[0] - pos[0])
    return DroneState(position=pos, yaw=yaw)


def rig_from_drone(drone: DroneState, intrinsics: Intrinsics,
                   camera_pitch: float = 0.0) -> CameraRig:
    """Camera rig at the drone pose; ``camera_pitch`` is the fixed gimbal
    elevation of the look direction (negative looks down)."""
    cp, sp = math.cos(camera_pitch), math.sin(camera_pitch)
    cy, sy = math.cos(drone.yaw), math.sin(drone.yaw)
    fwd = np.array([cy * cp, sy * cp, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return CameraRig(intrinsics, drone.position.copy(), rot)


def pitch_to_aim(position, target) -> float:
    """Gimbal pitch that points the camera at ``target`` from ``position``."""
    d = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    return math.atan2(d[2], math.hypot(d[0], d[1]))


def _lift_centroid(rig: CameraRig, uv, box: Box3):
    """Intersect the pixel ray through ``uv`` with ``box``.

    Returns ``(point, outward_normal)`` of the entry face, or ``None``.
    """
    i = rig.intrinsics
    d_cam = np.array([(uv[0] - i.cx) / i.fx, (uv[1] - i.cy) / i.fy, 1.0])
    d = d_cam @ rig.rotation
    d = d / np.linalg.norm(d)
    hit = box.intersect_ray(rig.position, d)
    if hit is None or hit[0] <= 0:
        return None
    t, _, axis, sign = hit
    n = np.zeros(3)
    n[axis] = sign
    return rig.position + t * d, n


def servo_errors(rig: CameraRig, bbox, drone_yaw: float, lift_box: Box3,
                 target_height_frac: float):
    """Channel errors (R, P, T, Y) from one detection, plus diagnostics."""
    i = rig.intrinsics
    u, v = bbox.centroid
    e_r = (u - i.cx) / i.width
    e_t = -(v - i.cy) / i.height
    e_p = target_height_frac - bbox.h / i.height
    lifted = _lift_centroid(rig, (u, v), lift_box)
    if lifted is None:
        aim = lift_box.center
        alignment = float("nan")
    else:
        aim, face_n = lifted
        alignment = yaw_orientation_error(rig.position, aim, face_n)
    e_y = wrap_angle(math.atan2(aim[1] - rig.position[1],
                                aim[0] - rig.position[0]) - drone_yaw)
    err_px = math.hypot(u - i.cx, v - i.cy)
    return np.array([e_r, e_p, e_t, e_y]), err_px, alignment


def servo_to_object(drone: DroneState, mesh: TriangleMesh,
                    intrinsics: Intrinsics, gains: PidGains = DEFAULT_GAINS,
                    max_steps: int = 300, tol_px: float = 2.0, *,
                    cfg: ServoConfig = ServoConfig(), lift_box: Box3 = None,
                    camera_pitch: float = 0.0,
                    target_height_frac: float = None,
                    telemetry_path=None) -> ServoResult:
    """Close the perception loop until the region centroid sits at the image
    center and the heading points at the object.

    Renders the drone view, detects the largest region, and feeds the box
    centroid / size errors to the PID channels each step.  Converges when the
    centroid error drops below ``tol_px`` and the bearing error below
    ``cfg.yaw_tol`` (checked before actuation, so an already-centered drone
    does not move).  Raises :class:`TargetLostError` after
    ``cfg.lost_after`` consecutive frames without a detection.

    ``lift_box`` is the 3D box used to lift the 2D centroid for the yaw
    channel (defaults to the mesh bounds; the pipeline passes the same box to
    both arms).  ``target_height_frac`` overrides the apparent-size setpoint,
    letting a caller hold a planned standoff distance.
    """
    if lift_box is None:
        lift_box = mesh.bounds()
    frac = cfg.target_height_frac if target_height_frac is None else target_height_frac
    pid = PidState()
    lost = 0
    log = open(telemetry_path, "w", encoding="utf-8") if telemetry_path else None
    try:
        last_err_px, last_yaw_err, last_align = float("inf"), float("inf"), float("nan")
        for step in range(max_steps):
            rig = rig_from_drone(drone, intrinsics, camera_pitch)
            img = render_shaded(mesh, rig)
            blobs = detect_blobs(img, cfg.sigmas, cfg.blob_threshold)
            if not blobs:
                lost += 1
                if lost >= cfg.lost_after:
                    raise TargetLostError(
                        f"target lost for {lost} consecutive frames at step {step}")
                drone = apply_control(drone, ControlOutput(0, 0, 0, 0),
                                      cfg.plant.dt, cfg.plant)
                continue
            lost = 0
            bbox = largest_region_bbox(img, blobs)
            err, err_px, align = servo_errors(rig, bbox, drone.yaw, lift_box, frac)
            last_err_px, last_yaw_err, last_align = err_px, abs(err[3]), align
            if log:
                log.write(json.dumps({"step": step, "err_px": err_px,
                                      "yaw_err": err[3], "alignment": align,
                                      "bbox": bbox.to_dict(),
                                      "position": drone.position.tolist(),
                                      "yaw": drone.yaw}) + "\n")
            if err_px < tol_px and abs(err[3]) < cfg.yaw_tol:
                return ServoResult(drone, True, step, err_px, err[3], align)
            cmd, pid = pid_step(err, pid, gains, cfg.plant.dt)
            drone = apply_control(drone, cmd, cfg.plant.dt, cfg.plant)
        return ServoResult(drone, False, max_steps, last_err_px,
                           last_yaw_err, last_align)
    finally:
        if log:
            log.close()


def run_capture(drones, schedule: CaptureSchedule, mesh: TriangleMesh,
                gains: PidGains, capture_intrinsics: Intrinsics, *,
                perception_intrinsics: Intrinsics = None,
                orbit_center=None, camera_pitches=None,
                cfg: ServoConfig = ServoConfig(), lift_box: Box3 = None,
                tol_px: float = 2.0, max_steps: int = 300,
                target_height_fracs=None):
    """Fly the full capture schedule: servo, shoot, advance, repeat.

    Per iteration every drone servos onto the object, captures
    ``images_per_drone`` RGB frames with its exact converged pose recorded as
    ground truth, then advances along its orbit.  Returns a list of
    ``(image, rig)`` pairs of length iterations x drones x images_per_drone.
    """
    drones = list(drones)
    n = len(drones)
    if n < 1:
        raise ValueError("need at least one drone")
    center = np.asarray(orbit_center, dtype=np.float64) if orbit_center is not None \
        else mesh.bounds().center
    pitches = list(camera_pitches) if camera_pitches is not None else [0.0] * n
    fracs = list(target_height_fracs) if target_height_fracs is not None \
        else [None] * n
    perc = perception_intrinsics or capture_intrinsics
    pairs = []
    for _ in range(schedule.iterations):
        for i in range(n):
            res = servo_to_object(drones[i], mesh, perc, gains,
                                  max_steps=max_steps, tol_px=tol_px, cfg=cfg,
                                  lift_box=lift_box, camera_pitch=pitches[i],
                                  target_height_frac=fracs[i])
            rig = rig_from_drone(res.state, capture_intrinsics, pitches[i])
            img = render_rgb(mesh, rig)
            for _ in range(schedule.images_per_drone):
                pairs.append((img, rig))
            drones[i] = circular_advance(res.state, center, schedule.delta_angle)
    return pairs
