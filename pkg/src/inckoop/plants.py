"""Desk-scale plants, scripted expert controllers and reference generation.

Three plants stand in for the legged robots:

* ``Pendulum``: torque-driven damped pendulum, state ``[theta, theta_dot]``.
* ``Cartpole``: force-driven cart with an inverted pole (``theta = 0`` is
  upright), state ``[x, theta, x_dot, theta_dot]``.
* ``Hopper1D``: vertical pogo hopper, a body on a springy prismatic leg with a
  point foot.  State ``[j, j_dot, y, y_dot]`` where ``j`` is leg extension and
  ``y`` body height.  The foot sits at ``y - (l0 + j)``; the plant is in
  ``Stance`` whenever that height is at or below the ground.

All plants are integrated with one semi-implicit Euler step per control
period (velocities first, then positions with the new velocities).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .errors import BadDims, NonFiniteState, RepoGenerationFailed

JOINT_POSITION = "joint_position"
JOINT_VELOCITY = "joint_velocity"
ROOT_HEIGHT = "root_height"
ROOT_LINEAR_VELOCITY = "root_linear_velocity"
ROOT_ORIENTATION = "root_orientation_scalar"
ROOT_ANGULAR_VELOCITY = "root_angular_velocity"

ROLES = (
    JOINT_POSITION,
    JOINT_VELOCITY,
    ROOT_HEIGHT,
    ROOT_LINEAR_VELOCITY,
    ROOT_ORIENTATION,
    ROOT_ANGULAR_VELOCITY,
)


class PlantId(str, enum.Enum):
    PENDULUM = "Pendulum"
    CARTPOLE = "Cartpole"
    HOPPER1D = "Hopper1D"


class Mode(str, enum.Enum):
    FLIGHT = "Flight"
    STANCE = "Stance"


@dataclass(frozen=True, eq=False)
class PlantSpec:
    id: PlantId
    state_dim: int
    control_dim: int
    dt: float
    physical_params: Mapping[str, float]
    kp: np.ndarray
    kd: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    state_layout: tuple[str, ...]
    # ranges used by the random command / initial state samplers
    command_low: np.ndarray = field(default_factory=lambda: np.zeros(1))
    command_high: np.ndarray = field(default_factory=lambda: np.zeros(1))
    command_hold: int = 25
    init_low: np.ndarray = field(default_factory=lambda: np.zeros(2))
    init_high: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for name in ("kp", "kd", "u_min", "u_max", "command_low", "command_high",
                     "init_low", "init_high"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "id", PlantId(self.id))
        object.__setattr__(self, "physical_params", dict(self.physical_params))
        object.__setattr__(self, "state_layout", tuple(self.state_layout))
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise BadDims(f"dt must be positive, got {self.dt}")
        if self.state_dim < 2 or self.control_dim < 1:
            raise BadDims("need state_dim >= 2 and control_dim >= 1")
        for name in ("kp", "kd", "u_min", "u_max"):
            if getattr(self, name).shape != (self.control_dim,):
                raise BadDims(f"{name} must have length {self.control_dim}")
        if not np.all(self.u_min < self.u_max):
            raise BadDims("u_min must be strictly below u_max")
        if len(self.state_layout) != self.state_dim:
            raise BadDims("state_layout length must equal state_dim")
        seen = []
        for role in self.state_layout:
            if role not in ROLES:
                raise BadDims(f"unknown state role {role!r}")
            if seen and role != seen[-1] and role in seen:
                raise BadDims(f"role {role!r} is not contiguous in state_layout")
            seen.append(role)
        for name in ("init_low", "init_high"):
            if getattr(self, name).shape != (self.state_dim,):
                raise BadDims(f"{name} must have length {self.state_dim}")

    def slice_of(self, role: str) -> slice | None:
        """Contiguous index range of ``role`` in the state vector, or None."""
        idx = [i for i, r in enumerate(self.state_layout) if r == role]
        if not idx:
            return None
        return slice(idx[0], idx[-1] + 1)

    def with_params(self, **changes) -> "PlantSpec":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class PlantState:
    x: np.ndarray
    t: int = 0
    mode: Mode | None = None


@dataclass(frozen=True, eq=False)
class Command:
    """Piecewise-constant target profile.

    ``targets[k]`` is held for ``hold`` steps; after the last block the final
    target stays active.  For the pendulum and cartpole the target is a joint
    position, for the hopper it is the desired apex height of the body.
    """

    targets: np.ndarray
    hold: int

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.targets, dtype=float))
        object.__setattr__(self, "targets", t)
        if self.hold < 1 or t.shape[0] < 1:
            raise BadDims("command needs hold >= 1 and at least one target")
        if not np.all(np.isfinite(t)):
            raise BadDims("command targets must be finite")

    @property
    def duration(self) -> int:
        return self.targets.shape[0] * self.hold

    def target_at(self, t: int) -> np.ndarray:
        return self.targets[min(t // self.hold, self.targets.shape[0] - 1)]


@dataclass(eq=False)
class Trajectory:
    states: np.ndarray
    controls: np.ndarray
    dt: float
    failure_flag: bool = False
    plant_id: PlantId | None = None
    modes: list = field(default_factory=list)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise BadDims("a trajectory needs exactly one more state than controls")

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]


# ---------------------------------------------------------------------------
# default plant specifications


def pendulum_spec(**overrides) -> PlantSpec:
    kw = dict(
        id=PlantId.PENDULUM,
        state_dim=2,
        control_dim=1,
        dt=0.02,
        physical_params={"mass": 1.0, "length": 1.0, "gravity": 9.81, "damping": 0.1},
        kp=[20.0],
        kd=[4.0],
        u_min=[-12.0],
        u_max=[12.0],
        state_layout=(JOINT_POSITION, JOINT_VELOCITY),
        command_low=[-1.2],
        command_high=[1.2],
        command_hold=40,
        init_low=[-1.0, -1.0],
        init_high=[1.0, 1.0],
    )
    kw.update(overrides)
    return PlantSpec(**kw)


def cartpole_spec(**overrides) -> PlantSpec:
    # balance gains from a discrete LQR on the upright linearisation
    kw = dict(
        id=PlantId.CARTPOLE,
        state_dim=4,
        control_dim=1,
        dt=0.02,
        physical_params={
            "cart_mass": 1.0,
            "pole_mass": 0.1,
            "pole_half_length": 0.5,
            "gravity": 9.81,
            "cart_damping": 0.0,
            "k_theta": 46.47,
            "k_theta_dot": 12.05,
        },
        kp=[-2.784],
        kd=[-5.320],
        u_min=[-20.0],
        u_max=[20.0],
        state_layout=(JOINT_POSITION, JOINT_POSITION, JOINT_VELOCITY, JOINT_VELOCITY),
        command_low=[-1.0],
        command_high=[1.0],
        command_hold=60,
        init_low=[-0.5, -0.1, -0.2, -0.2],
        init_high=[0.5, 0.1, 0.2, 0.2],
    )
    kw.update(overrides)
    return PlantSpec(**kw)


def hopper_spec(**overrides) -> PlantSpec:
    kw = dict(
        id=PlantId.HOPPER1D,
        state_dim=4,
        control_dim=1,
        dt=0.02,
        physical_params={
            "body_mass": 1.0,
            "foot_mass": 0.5,
            "rest_length": 0.5,
            "leg_stiffness": 200.0,
            "leg_damping": 2.0,
            "ground_stiffness": 2000.0,
            "ground_damping": 20.0,
            "ground_level": 0.0,
            "restitution": 0.0,
            "gravity": 9.81,
            "k_energy": 20.0,
        },
        kp=[40.0],
        kd=[2.0],
        u_min=[-30.0],
        u_max=[30.0],
        state_layout=(JOINT_POSITION, JOINT_VELOCITY, ROOT_HEIGHT, ROOT_LINEAR_VELOCITY),
        command_low=[0.8],
        command_high=[1.1],
        command_hold=50,
        init_low=[-0.02, -0.1, 0.7, -0.2],
        init_high=[0.02, 0.1, 0.9, 0.2],
    )
    kw.update(overrides)
    return PlantSpec(**kw)


_DEFAULT_SPECS = {
    PlantId.PENDULUM: pendulum_spec,
    PlantId.CARTPOLE: cartpole_spec,
    PlantId.HOPPER1D: hopper_spec,
}


def default_spec(plant_id, **overrides) -> PlantSpec:
    return _DEFAULT_SPECS[PlantId(plant_id)](**overrides)


# ---------------------------------------------------------------------------
# dynamics


def foot_height(spec: PlantSpec, x: np.ndarray) -> float:
    p = spec.physical_params
    return float(x[2] - (p["rest_length"] + x[0]))


def contact_mode(spec: PlantSpec, x: np.ndarray) -> Mode | None:
    if spec.id is not PlantId.HOPPER1D:
        return None
    in_contact = foot_height(spec, x) <= spec.physical_params["ground_level"]
    return Mode.STANCE if in_contact else Mode.FLIGHT


def initial_state(spec: PlantSpec, x) -> PlantState:
    x = np.array(x, dtype=float).reshape(-1)
    if x.shape != (spec.state_dim,):
        raise BadDims(f"state must have length {spec.state_dim}")
    return PlantState(x=x, t=0, mode=contact_mode(spec, x))


def _pendulum_step(spec, x, u):
    p = spec.physical_params
    m, l, g, b = p["mass"], p["length"], p["gravity"], p["damping"]
    th, w = x
    acc = -g / l * np.sin(th) - b * w + u[0] / (m * l * l)
    w = w + spec.dt * acc
    th = th + spec.dt * w
    return np.array([th, w])


def _cartpole_step(spec, x, u):
    p = spec.physical_params
    mc, mp, l, g = p["cart_mass"], p["pole_mass"], p["pole_half_length"], p["gravity"]
    pos, th, v, w = x
    total = mc + mp
    s, c = np.sin(th), np.cos(th)
    force = u[0] - p.get("cart_damping", 0.0) * v
    tmp = (force + mp * l * w * w * s) / total
    th_acc = (g * s - c * tmp) / (l * (4.0 / 3.0 - mp * c * c / total))
    x_acc = tmp - mp * l * th_acc * c / total
    v = v + spec.dt * x_acc
    w = w + spec.dt * th_acc
    return np.array([pos + spec.dt * v, th + spec.dt * w, v, w])


def _hopper_step(spec, x, u, mode):
    p = spec.physical_params
    M, mf, g = p["body_mass"], p["foot_mass"], p["gravity"]
    j, jd, y, yd = x
    yf = y - (p["rest_length"] + j)
    yfd = yd - jd
    ground = p["ground_level"]
    leg = u[0] - p["leg_stiffness"] * j - p["leg_damping"] * jd
    grf = 0.0
    if yf <= ground:
        grf = max(0.0, -p["ground_stiffness"] * (yf - ground) - p["ground_damping"] * yfd)
    y_acc = leg / M - g
    yf_acc = (grf - leg) / mf - g
    yd = yd + spec.dt * y_acc
    yfd = yfd + spec.dt * yf_acc
    y = y + spec.dt * yd
    yf = yf + spec.dt * yfd
    x = np.array([y - yf - p["rest_length"], yd - yfd, y, yd])
    new_mode = contact_mode(spec, x)
    if mode is Mode.FLIGHT and new_mode is Mode.STANCE and yfd < 0.0:
        # touchdown impulse acts on the foot only: body velocity is untouched
        x[1] = yd + p["restitution"] * yfd
    return x, new_mode


def clamp_control(spec: PlantSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != (spec.control_dim,):
        raise BadDims(f"control must have length {spec.control_dim}")
    return np.minimum(np.maximum(u, spec.u_min), spec.u_max)


def plant_step(spec: PlantSpec, s: PlantState, u) -> PlantState:
    """Advance the plant by one control period ``spec.dt``.

    The control is clamped to ``[u_min, u_max]`` first.  Raises
    ``NonFiniteState`` if the integration leaves the finite reals.
    """
    u = clamp_control(spec, u)
    if not np.all(np.isfinite(s.x)):
        raise NonFiniteState(f"non-finite input state at t={s.t}")
    mode = None
    with np.errstate(all="ignore"):
        if spec.id is PlantId.PENDULUM:
            x = _pendulum_step(spec, s.x, u)
        elif spec.id is PlantId.CARTPOLE:
            x = _cartpole_step(spec, s.x, u)
        else:
            prev = s.mode if s.mode is not None else contact_mode(spec, s.x)
            x, mode = _hopper_step(spec, s.x, u, prev)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"integration produced non-finite state at t={s.t + 1}")
    return PlantState(x=x, t=s.t + 1, mode=mode)


# ---------------------------------------------------------------------------
# scripted expert


def expert_control(spec: PlantSpec, s: PlantState, cmd: Command) -> np.ndarray:
    """Deterministic scripted controller that replaces a learned data collector.

    Pendulum: PD on the joint angle.  Cartpole: PD on cart position plus LQR
    balance feedback on the pole.  Hopper: leg PD to rest length plus an
    energy-pumping thrust during stance extension (Raibert-style hop height
    regulation).
    """
    x = s.x
    target = cmd.target_at(s.t)
    if spec.id is PlantId.PENDULUM:
        u = spec.kp * (target - x[:1]) - spec.kd * x[1:]
    elif spec.id is PlantId.CARTPOLE:
        p = spec.physical_params
        u = (spec.kp * (target - x[:1]) - spec.kd * x[2:3]
             + p["k_theta"] * x[1] + p["k_theta_dot"] * x[3])
    else:
        p = spec.physical_params
        u = spec.kp * (0.0 - x[:1]) - spec.kd * x[1:2]
        mode = s.mode if s.mode is not None else contact_mode(spec, x)
        if mode is Mode.STANCE and x[1] > 0.0:
            g = p["gravity"]
            energy = 0.5 * x[3] ** 2 + g * x[2]
            u = u + p["k_energy"] * (g * target - energy)
    return np.minimum(np.maximum(np.asarray(u, dtype=float), spec.u_min), spec.u_max)


def sample_command(spec: PlantSpec, rng: np.random.Generator, length: int) -> Command:
    n_blocks = max(1, -(-length // spec.command_hold))
    targets = rng.uniform(spec.command_low, spec.command_high,
                          size=(n_blocks, spec.command_low.shape[0]))
    return Command(targets=targets, hold=spec.command_hold)


def sample_initial_state(spec: PlantSpec, rng: np.random.Generator) -> PlantState:
    x = rng.uniform(spec.init_low, spec.init_high)
    return initial_state(spec, x)


# ---------------------------------------------------------------------------
# rollouts

Policy = Union[Command, Callable[[PlantState], np.ndarray], np.ndarray, Sequence]


def rollout(spec: PlantSpec, s0: PlantState, policy: Policy, T: int) -> Trajectory:
    """Roll the plant forward ``T`` steps under ``policy``.

    ``policy`` is a ``Command`` (tracked by the scripted expert), a callable
    ``state -> u`` (e.g. an MPC closure), or a ``(T, m)`` array of fixed
    controls.  If the plant blows up, the partial trajectory is returned with
    ``failure_flag`` set.
    """
    if T < 1:
        raise BadDims("rollout needs T >= 1")
    if isinstance(policy, Command):
        def act(s):
            return expert_control(spec, s, policy)
    elif callable(policy):
        act = policy
    else:
        fixed = np.asarray(policy, dtype=float).reshape(-1, spec.control_dim)
        if fixed.shape[0] < T:
            raise BadDims(f"need {T} fixed controls, got {fixed.shape[0]}")

        def act(s):
            return fixed[s.t - s0.t]

    states = [s0.x.copy()]
    controls = []
    modes = [s0.mode]
    s = s0
    failed = False
    for _ in range(T):
        u = clamp_control(spec, act(s))
        try:
            s = plant_step(spec, s, u)
        except NonFiniteState:
            failed = True
            break
        controls.append(u)
        states.append(s.x)
        modes.append(s.mode)
    controls = np.array(controls).reshape(-1, spec.control_dim)
    return Trajectory(states=np.array(states), controls=controls, dt=spec.dt,
                      failure_flag=failed, plant_id=spec.id, modes=modes)


def expert_rollout(spec: PlantSpec, rng: np.random.Generator, length: int,
                   max_retries: int = 20) -> Trajectory:
    """Random initial state + random command, retried until the rollout is finite."""
    for _ in range(max_retries):
        s0 = sample_initial_state(spec, rng)
        cmd = sample_command(spec, rng, length)
        traj = rollout(spec, s0, cmd, length)
        if not traj.failure_flag:
            return traj
    raise RepoGenerationFailed(f"{max_retries} consecutive expert rollouts blew up")
