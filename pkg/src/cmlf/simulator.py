"""Synthetic visuo-tactile interaction simulator.

Objects carry extrinsic properties (shape, height, visual texture) and intrinsic
ones (stiffness, mass, friction). In the aligned catalog the intrinsic values are
tied to the extrinsic ones: stiffness follows shape, friction follows visual
texture, mass follows height. A prehensile primitive (palpate, grasp, lift,
rotate, place) excites the object; a camera sees silhouettes and a tactile pad
reports pressure, shear, slip and vibration channels at a 3 Hz frame clock.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .core import PropertyVector
from .errors import ConfigError, ContractViolation

SHAPES = ("cylinder", "ellipsoid", "cube", "cuboid", "hexagonal_prism")
HEIGHTS = (0.12, 0.15, 0.175)
STIFFNESS_KPA = (3.0, 9.0, 15.0, 20.0, 25.0)
FRICTION = (0.1, 0.15, 0.35, 0.47, 0.8)
BASE_MASS = (0.4, 0.6, 0.8)
MASS_JITTER = 0.1

FRAME_RATE = 3.0
DT = 1.0 / FRAME_RATE
GRAVITY = 9.81
SPEED_MAX_LINEAR = 0.025  # m/s
SPEED_MAX_ANGULAR = 0.5  # rad/s

D_OPEN = 0.10
D_REF = 0.068  # finger distance at which contact force starts
GRIP_GAIN = 1000.0  # N per m of commanded closure past D_REF
FRICTION_PADS = 3.0  # effective contact multiplier in the Coulomb capacity
SENSOR_NOISE_VISUAL = 0.02
SENSOR_NOISE_TACTILE = 0.02

PHASE_FRACTIONS = (0.15, 0.2, 0.25, 0.25, 0.15)


class Phase(enum.IntEnum):
    PALPATE = 0
    GRASP = 1
    LIFT = 2
    ROTATE = 3
    PLACE = 4


@dataclass(frozen=True)
class ObjectSpec:
    object_index: int
    shape_code: int
    height: float
    stiffness: float
    friction_coeff: float
    visual_texture_code: int
    mass: float
    surprise_flag: bool = False

    @property
    def properties(self) -> PropertyVector:
        return PropertyVector(
            (self.shape_code, self.height, self.visual_texture_code),
            (self.stiffness, self.mass, self.friction_coeff),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Action:
    d: float
    v_z: float
    v_beta: float
    phase: Phase

    def __post_init__(self):
        if self.d < 0:
            raise ContractViolation(f"finger distance must be >= 0, got {self.d}")
        if abs(self.v_z) > SPEED_MAX_LINEAR + 1e-12 or abs(self.v_beta) > SPEED_MAX_ANGULAR + 1e-12:
            raise ContractViolation(f"velocity exceeds SPEED_MAX: {self}")


@dataclass
class Trajectory:
    """One interaction. Arrays are indexed by time along axis 0."""

    object: ObjectSpec
    actions: np.ndarray  # (H, 3): d, v_z, v_beta
    phases: np.ndarray  # (H,) int
    obs_visual: np.ndarray  # (H, n) or (H, r, r)
    obs_tactile: np.ndarray  # (H, n) or (H, s, n)
    pose_gt: np.ndarray  # (H, 6): translation [m], axis-angle [rad]
    seed: int
    visual_present: np.ndarray = None  # (H,) bool
    tactile_present: np.ndarray = None
    traj_id: int = 0
    config_index: int = 0
    repeat: int = 0
    grip_level: int = 0
    speed_level: int = 0

    def __post_init__(self):
        H = len(self.actions)
        if self.visual_present is None:
            self.visual_present = np.ones(H, dtype=bool)
        if self.tactile_present is None:
            self.tactile_present = np.ones(H, dtype=bool)
        lengths = {len(self.phases), len(self.obs_visual), len(self.obs_tactile), len(self.pose_gt),
                   len(self.visual_present), len(self.tactile_present)}
        if lengths != {H}:
            raise ContractViolation(f"trajectory sequences disagree in length: {lengths | {H}}")

    @property
    def H(self) -> int:
        return len(self.actions)

    def action_list(self) -> list[Action]:
        return [Action(float(a[0]), float(a[1]), float(a[2]), Phase(int(p)))
                for a, p in zip(self.actions, self.phases)]

    def replace(self, **changes) -> Trajectory:
        return dataclasses.replace(self, **changes)


class PerturbMode(str, enum.Enum):
    ZERO_FILL = "zero_fill"
    MISSING_FLAG = "missing_flag"


@dataclass(frozen=True)
class PerturbationSpec:
    sigma: float = 0.0
    c: float = 0.0
    mode: PerturbMode = PerturbMode.ZERO_FILL

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ContractViolation(f"sigma must be finite and >= 0, got {self.sigma}")
        if not (np.isfinite(self.c) and 0 <= self.c <= 1):
            raise ContractViolation(f"c must lie in [0, 1], got {self.c}")
        object.__setattr__(self, "mode", PerturbMode(self.mode))


# --------------------------------------------------------------------------- catalog


@dataclass
class CatalogConfig:
    """Which property levels enter the aligned catalog, and the causal tables.

    ``shape_codes`` / ``texture_codes`` / ``height_levels`` index into the fixed
    tables; stiffness is looked up by shape code, friction by texture code and
    base mass by height level.
    """

    shape_codes: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    height_levels: list = field(default_factory=lambda: [0, 1, 2])
    texture_codes: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    heights: list = field(default_factory=lambda: list(HEIGHTS))
    stiffness_by_shape: list = field(default_factory=lambda: list(STIFFNESS_KPA))
    friction_by_texture: list = field(default_factory=lambda: list(FRICTION))
    base_mass_by_height: list = field(default_factory=lambda: list(BASE_MASS))
    mass_jitter: float = MASS_JITTER
    include_surprise: bool = True

    def validate(self):
        for name in ("shape_codes", "height_levels", "texture_codes"):
            if not getattr(self, name):
                raise ConfigError(f"catalog config: '{name}' is empty")
        if len(self.stiffness_by_shape) != 5 or len(self.friction_by_texture) != 5:
            raise ConfigError("catalog config: stiffness and friction tables need 5 entries")
        if len(self.heights) != len(self.base_mass_by_height):
            raise ConfigError("catalog config: heights and base masses differ in length")
        if any(not 0 <= s <= 4 for s in self.shape_codes + self.texture_codes):
            raise ConfigError("catalog config: codes must lie in 0..4")
        if any(not 0 <= h < len(self.heights) for h in self.height_levels):
            raise ConfigError("catalog config: height level out of range")


@dataclass
class Catalog:
    aligned: list
    surprise: list

    @property
    def all(self) -> list:
        return list(self.aligned) + list(self.surprise)


def _jittered_mass(rng, base, jitter):
    return float(base + rng.uniform(-jitter, jitter))


def build_catalog(config: CatalogConfig | None = None, seed: int = 0) -> Catalog:
    """Aligned catalog (shapes x heights x textures) plus six surprise objects."""
    config = config or CatalogConfig()
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7331]))
    aligned = []
    L = 0
    for shape in config.shape_codes:
        for h_level in config.height_levels:
            for texture in config.texture_codes:
                aligned.append(ObjectSpec(
                    object_index=L,
                    shape_code=int(shape),
                    height=float(config.heights[h_level]),
                    stiffness=float(config.stiffness_by_shape[shape]),
                    friction_coeff=float(config.friction_by_texture[texture]),
                    visual_texture_code=int(texture),
                    mass=_jittered_mass(rng, config.base_mass_by_height[h_level], config.mass_jitter),
                ))
                L += 1
    surprise = []
    if config.include_surprise:
        surprise = _surprise_objects(config, rng, first_index=L)
    return Catalog(aligned, surprise)


def _surprise_objects(config: CatalogConfig, rng, first_index: int) -> list:
    stiff, fric, masses, heights = (config.stiffness_by_shape, config.friction_by_texture,
                                    config.base_mass_by_height, config.heights)
    mid_h = len(heights) // 2
    # (shape, height level, texture, stiffness, friction, base mass)
    rows = [
        (0, mid_h, 2, max(stiff), fric[2], masses[mid_h]),  # stiffer cylinder
        (4, mid_h, 2, min(stiff), fric[2], masses[mid_h]),  # softer hexagonal prism
        (2, mid_h, 4, stiff[2], min(fric), masses[mid_h]),  # dark texture, low friction
        (2, mid_h, 0, stiff[2], max(fric), masses[mid_h]),  # light texture, high friction
        (1, 0, 2, stiff[1], fric[2], masses[-1]),  # short but heavy
        (3, len(heights) - 1, 2, stiff[3], fric[2], masses[0]),  # tall but light
    ]
    out = []
    for i, (shape, h_level, texture, k, mu, base) in enumerate(rows):
        out.append(ObjectSpec(
            object_index=first_index + i,
            shape_code=shape,
            height=float(heights[h_level]),
            stiffness=float(k),
            friction_coeff=float(mu),
            visual_texture_code=texture,
            mass=_jittered_mass(rng, base, config.mass_jitter * 0.5),
            surprise_flag=True,
        ))
    return out


def violated_pairings(spec: ObjectSpec, config: CatalogConfig | None = None) -> list[str]:
    """Names of the causal pairings the object breaks (empty for aligned objects)."""
    config = config or CatalogConfig()
    out = []
    if not np.isclose(spec.stiffness, config.stiffness_by_shape[spec.shape_code]):
        out.append("shape-stiffness")
    if not np.isclose(spec.friction_coeff, config.friction_by_texture[spec.visual_texture_code]):
        out.append("texture-friction")
    h_level = int(np.argmin(np.abs(np.asarray(config.heights) - spec.height)))
    if abs(spec.mass - config.base_mass_by_height[h_level]) > config.mass_jitter + 1e-9:
        out.append("height-mass")
    return out


def select_subset(objects: list, n: int, seed: int) -> list:
    """Pick ``n`` objects covering every shape, height and texture level when possible."""
    if n >= len(objects):
        return list(objects)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    pool = [objects[i] for i in rng.permutation(len(objects))]
    chosen, seen = [], (set(), set(), set())

    def gain(o):
        return ((o.shape_code not in seen[0]) + (o.height not in seen[1])
                + (o.visual_texture_code not in seen[2]))

    while len(chosen) < n:
        best = max(pool, key=gain)
        if gain(best) == 0:
            best = pool[0]
        pool.remove(best)
        chosen.append(best)
        seen[0].add(best.shape_code)
        seen[1].add(best.height)
        seen[2].add(best.visual_texture_code)
    return sorted(chosen, key=lambda o: o.object_index)


# --------------------------------------------------------------------------- actions


def phase_schedule(H: int) -> np.ndarray:
    if H < len(Phase):
        raise ConfigError(f"H={H} cannot hold the {len(Phase)} interaction phases")
    bounds = np.round(np.cumsum(PHASE_FRACTIONS) * H).astype(int)
    bounds = np.maximum(bounds, np.arange(1, len(Phase) + 1))
    for i in range(len(bounds) - 2, -1, -1):
        bounds[i] = min(bounds[i], bounds[i + 1] - 1)
    bounds[-1] = H
    phases = np.zeros(H, dtype=int)
    start = 0
    for p, end in enumerate(bounds):
        phases[start:end] = p
        start = end
    return phases


def grip_distance(grip_level: int) -> float:
    """Commanded finger distance for a grip level; larger level closes further."""
    return D_REF - 0.004 * (grip_level + 1)


def lift_speed(speed_level: int) -> float:
    return 0.010 + 0.005 * speed_level


def rotate_speed(speed_level: int) -> float:
    return 0.10 + 0.05 * speed_level


def make_action_sequence(grip_level: int, speed_level: int, H: int = 90) -> list[Action]:
    if not (0 <= grip_level <= 3 and 0 <= speed_level <= 3):
        raise ConfigError(f"levels must lie in 0..3, got grip={grip_level} speed={speed_level}")
    phases = phase_schedule(H)
    d_grip = grip_distance(grip_level)
    v_z, v_b = lift_speed(speed_level), rotate_speed(speed_level)
    grasp_idx = np.flatnonzero(phases == Phase.GRASP)
    rot_idx = np.flatnonzero(phases == Phase.ROTATE)
    ramp = max(1, len(grasp_idx) // 3)
    out = []
    for t, p in enumerate(phases):
        d, vz, vb = D_OPEN, 0.0, 0.0
        if p == Phase.GRASP:
            k = t - grasp_idx[0] + 1
            d = D_OPEN + (d_grip - D_OPEN) * min(1.0, k / ramp)
        elif p == Phase.LIFT:
            d, vz = d_grip, v_z
        elif p == Phase.ROTATE:
            d = d_grip
            # swing out and back so the object ends upright
            vb = v_b if t - rot_idx[0] < len(rot_idx) / 2 else -v_b
        out.append(Action(float(d), float(vz), float(vb), Phase(int(p))))
    return out


def interaction_grid() -> list[tuple[int, int]]:
    """All 16 (grip_level, speed_level) configurations."""
    return [(g, s) for g in range(4) for s in range(4)]


def actions_to_array(actions: list[Action]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.array([[a.d, a.v_z, a.v_beta] for a in actions], dtype=float)
    phases = np.array([int(a.phase) for a in actions], dtype=int)
    return arr, phases


# --------------------------------------------------------------------------- simulation


@dataclass
class ObservationConfig:
    visual_mode: str = "grid"  # "grid" (r x r image) or "vector" (flattened)
    visual_res: int = 32
    tactile_dim: int = 64  # four channel groups of tactile_dim // 4
    tactile_subframes: int = 1  # >1 gives a (subframes, tactile_dim) frame

    def validate(self):
        if self.visual_mode not in ("vector", "grid"):
            raise ConfigError(f"visual_mode must be 'vector' or 'grid', got {self.visual_mode!r}")
        if self.visual_res < 4 or self.tactile_dim % 4 or self.tactile_dim < 8 or self.tactile_subframes < 1:
            raise ConfigError(f"invalid observation config {self}")

    @property
    def visual_shape(self) -> tuple:
        r = self.visual_res
        return (r * r,) if self.visual_mode == "vector" else (r, r)

    @property
    def tactile_shape(self) -> tuple:
        if self.tactile_subframes == 1:
            return (self.tactile_dim,)
        return (self.tactile_subframes, self.tactile_dim)


def _half_width(shape_code: int, s: np.ndarray, yaw: float) -> np.ndarray:
    """Projected silhouette half-width [m] at normalized height ``s`` in [-1, 1]."""
    c, sn = abs(np.cos(yaw)), abs(np.sin(yaw))
    if shape_code == 0:
        w = np.full_like(s, 0.035)
    elif shape_code == 1:
        w = 0.045 * np.sqrt(np.clip(1.0 - 0.85 * s * s, 0.0, None))
    elif shape_code == 2:
        w = np.full_like(s, 0.032 * (c + sn))
    elif shape_code == 3:
        w = np.full_like(s, 0.05 * c + 0.022 * sn)
    else:
        R = 0.04
        w = np.full_like(s, R * max(abs(np.cos(yaw + k * np.pi / 3)) for k in range(3)))
    return w


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def render_visual(spec: ObjectSpec, pose: np.ndarray, beta: np.ndarray, yaw: float,
                  squeeze: np.ndarray, res: int) -> np.ndarray:
    """Grayscale frames ``(T, res, res)`` of the object silhouette.

    ``pose`` holds object base translations ``(T, 3)``; ``beta`` the in-plane
    tilt, ``squeeze`` the fractional width compression from the grasp.
    """
    T = len(pose)
    px = 0.30 / res
    u = (np.arange(res) + 0.5) * px - 0.15
    v = 0.37 - (np.arange(res) + 0.5) * (0.40 / res)
    U, V = np.meshgrid(u, v)  # (res, res), row 0 is the top
    scale = 1.0 / (1.0 + pose[:, 1] / 0.5)  # depth foreshortening
    half_h = 0.5 * spec.height * scale
    cx = pose[:, 0]
    cz = pose[:, 2] + half_h
    du = U[None] - cx[:, None, None]
    dv = V[None] - cz[:, None, None]
    cb, sb = np.cos(beta)[:, None, None], np.sin(beta)[:, None, None]
    pu = cb * du + sb * dv
    pv = -sb * du + cb * dv
    s = pv / half_h[:, None, None]
    w = _half_width(spec.shape_code, np.clip(s, -1, 1), yaw) * scale[:, None, None]
    w = w * (1.0 - squeeze)[:, None, None]
    edge = 0.5 * px
    mask = _sigmoid((w - np.abs(pu)) / edge) * _sigmoid((half_h[:, None, None] - np.abs(pv)) / edge)
    code = spec.visual_texture_code
    brightness = 0.85 - 0.15 * code
    stripes = 0.12 * np.sin(2 * np.pi * (1.5 + code) * (s + 1.0) / 2.0)
    return (mask * (brightness + stripes)).reshape(T, res, res)


def _contact_state(spec: ObjectSpec, d: np.ndarray):
    """Normal force [N], compression ratio and normalized contact half-width."""
    f_cmd = np.maximum(0.0, GRIP_GAIN * (D_REF - d))
    f_n = f_cmd * (1.0 - np.exp(-spec.stiffness / 8.0))
    eps = 0.6 * np.tanh(f_n / (spec.stiffness * 3.3 * 0.6))
    a = np.clip(1.3 * np.sqrt(eps), 0.08, 1.0) * (f_n > 0)
    return f_n, eps, a


def tactile_frame(spec: ObjectSpec, f_n, a, load, vib_amp, n: int) -> np.ndarray:
    """Tactile channel vector(s) for arrays of contact quantities, shape ``(T, n)``.

    Groups of ``n // 4``: pressure profile, shear traction, slip indicator and a
    vibration spectrum excited by in-hand rotation.
    """
    k = n // 4
    x = np.linspace(-1.0, 1.0, k)[None]
    f_n, a, load, vib_amp = (np.asarray(v, dtype=float)[:, None] for v in (f_n, a, load, vib_amp))
    a_safe = np.where(a > 0, a, 1.0)
    inside = np.clip(1.0 - (x / a_safe) ** 2, 0.0, None) * (a > 0)
    pressure = 0.6 * (f_n / 16.0) * np.sqrt(inside) / np.sqrt(a_safe)

    capacity = spec.friction_coeff * FRICTION_PADS * f_n
    ratio = np.where(capacity > 0, load / np.where(capacity > 0, capacity, 1.0), 0.0) * (load > 0)
    stick = np.sqrt(np.clip(1.0 - ratio, 0.0, 1.0))
    transmitted = np.minimum(load, capacity)
    inner = np.clip(1.0 - (x / np.where(stick > 0, stick * a_safe, 1.0)) ** 2, 0.0, None) * (stick > 0)
    shear = 0.5 * (transmitted / 4.0) * (np.sqrt(inside) - stick * np.sqrt(inner))

    annulus = (np.abs(x) > stick * a) & (np.abs(x) < a) & (load > 0)
    gross = np.clip(ratio - 1.0, 0.0, 1.0)
    slip = annulus * (1.0 - stick) + gross * (0.5 + 0.5 * np.cos(3 * np.pi * x))

    bins = np.arange(k)[None] * (16.0 / k)
    center = 2.0 + 11.0 * spec.friction_coeff / 0.8
    vibration = vib_amp * np.exp(-((bins - center) ** 2) / 3.0)
    return np.concatenate([pressure, shear, slip, vibration], axis=1)


def simulate_trajectory(spec: ObjectSpec, actions, seed: int,
                        obs_config: ObservationConfig | None = None) -> Trajectory:
    """Roll the interaction forward and render both sensor streams.

    Deterministic under ``seed``: the seed fixes the object placement and the
    sensor noise. ``actions`` is a list of :class:`Action` or an ``(H, 3)`` array
    with a matching phase schedule.
    """
    obs_config = obs_config or ObservationConfig()
    obs_config.validate()
    if isinstance(actions, np.ndarray):
        act, phases = actions.astype(float), phase_schedule(len(actions))
    else:
        act, phases = actions_to_array(actions)
    H = len(act)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
    x0, y0 = rng.uniform(-0.02, 0.02, size=2)
    yaw = float(rng.uniform(-np.pi / 6, np.pi / 6))

    d, v_z, v_b = act[:, 0], act[:, 1], act[:, 2]
    f_n, eps, a = _contact_state(spec, d)
    held = (f_n > 0) & ((phases == Phase.LIFT) | (phases == Phase.ROTATE))

    z_grip = np.zeros(H)
    z_obj = np.zeros(H)
    beta = np.zeros(H)
    load = np.zeros(H)
    vib = np.zeros(H)
    zg, slip_acc, b, v_prev = 0.0, 0.0, 0.0, 0.0
    for t in range(H):
        if held[t]:
            zg += v_z[t] * DT
            b += v_b[t] * DT
            accel = (v_z[t] - v_prev) / DT
            load[t] = 0.5 * spec.mass * (GRAVITY + accel)
            capacity = spec.friction_coeff * FRICTION_PADS * f_n[t]
            if load[t] > capacity:
                slip_acc += 0.01 * min(1.0, load[t] / capacity - 1.0)
            if v_b[t] != 0.0:
                inertia = spec.mass * (spec.height / 0.175) ** 2 / 0.8
                vib[t] = abs(v_b[t]) / 0.25 * (0.3 + 0.7 * inertia)
        else:
            # released or never lifted: object rests on the table, upright
            zg, slip_acc, b = 0.0, 0.0, 0.0
        v_prev = v_z[t] if held[t] else 0.0
        z_grip[t] = zg
        z_obj[t] = max(0.0, zg - slip_acc)
        beta[t] = b

    rot = Rotation.from_euler("y", beta) * Rotation.from_euler("z", np.full(H, yaw))
    pose = np.column_stack([np.full(H, x0), np.full(H, y0), z_obj, rot.as_rotvec()])

    # compression shows once fingers close; tilt shows in the image plane
    squeeze = eps * (f_n > 0)
    frames = render_visual(spec, pose[:, :3], beta, yaw, squeeze, obs_config.visual_res)
    frames = frames + SENSOR_NOISE_VISUAL * rng.standard_normal(frames.shape)
    obs_visual = frames.reshape((H,) + obs_config.visual_shape)

    S = obs_config.tactile_subframes
    if S == 1:
        tac = tactile_frame(spec, f_n, a, load * held, vib, obs_config.tactile_dim)
    else:
        # sub-frames interpolate contact quantities between consecutive frames
        w = (np.arange(1, S + 1) / S)[None, :]

        def interp(q):
            prev = np.concatenate([[0.0], q[:-1]])
            return (prev[:, None] * (1 - w) + q[:, None] * w).reshape(-1)

        tac = tactile_frame(spec, interp(f_n), interp(a), interp(load * held), interp(vib),
                            obs_config.tactile_dim).reshape(H, S, obs_config.tactile_dim)
    tac = tac + SENSOR_NOISE_TACTILE * rng.standard_normal(tac.shape)
    return Trajectory(
        object=spec,
        actions=act,
        phases=phases,
        obs_visual=obs_visual.astype(np.float32),
        obs_tactile=tac.astype(np.float32),
        pose_gt=pose,
        seed=int(seed),
    )


# --------------------------------------------------------------------------- perturbation


def perturb(traj: Trajectory, p: PerturbationSpec, seed: int) -> Trajectory:
    """Additive N(0, sigma^2) noise on both streams, then per-frame dropout.

    Dropout is drawn independently per stream and time step. In ``zero_fill``
    mode a dropped frame becomes zeros; in ``missing_flag`` mode it is zeroed
    and flagged absent so the filter can skip the measurement update.
    """
    if p.sigma == 0 and p.c == 0:
        return traj.replace()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2024]))
    vis = traj.obs_visual.astype(np.float64)
    tac = traj.obs_tactile.astype(np.float64)
    if p.sigma > 0:
        vis = vis + p.sigma * rng.standard_normal(vis.shape)
        tac = tac + p.sigma * rng.standard_normal(tac.shape)
    vis_present = traj.visual_present.copy()
    tac_present = traj.tactile_present.copy()
    if p.c > 0:
        drop_v = rng.random(traj.H) < p.c
        drop_t = rng.random(traj.H) < p.c
        vis[drop_v] = 0.0
        tac[drop_t] = 0.0
        if p.mode == PerturbMode.MISSING_FLAG:
            vis_present &= ~drop_v
            tac_present &= ~drop_t
    return traj.replace(obs_visual=vis.astype(np.float32), obs_tactile=tac.astype(np.float32),
                        visual_present=vis_present, tactile_present=tac_present)


def dropped_frames(clean: Trajectory, perturbed: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of frames that were dropped (all-zero in the perturbed copy)."""
    def zero(obs):
        return np.all(obs.reshape(len(obs), -1) == 0.0, axis=1)
    return (zero(perturbed.obs_visual) & ~zero(clean.obs_visual),
            zero(perturbed.obs_tactile) & ~zero(clean.obs_tactile))
