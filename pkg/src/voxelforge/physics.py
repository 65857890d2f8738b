"""Beam-lattice soft-body simulation for voxel robots.

Each body voxel becomes a point mass with the rotational inertia of a
solid cube; face-adjacent voxels are joined by Euler-Bernoulli beams
carrying axial, shear, bending, and torsion loads. Muscle materials
drive locomotion by modulating beam rest lengths sinusoidally. Ground
contact is a damped penalty spring with Coulomb stick/slip friction.
Integration is semi-implicit Euler at a fixed timestep; identical
inputs give bit-identical trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import Body

VOXEL_SIZE = 0.01  # m; reward is reported in voxel lengths, so scale-free
DEFAULT_DT = 0.000118  # s
ACTUATION_HZ = 4.0
GRAVITY = 9.81  # m/s^2
POSITION_LIMIT = 1e3  # m; anything farther has diverged


class DivergenceError(RuntimeError):
    """Simulation state became non-finite or left the position limit."""


@dataclass(frozen=True)
class Material:
    """Constitutive and actuation parameters for one material id."""

    young_modulus: float = 1e5  # Pa, silicone-rubber stiffness
    density: float = 1500.0  # kg/m^3
    poisson_ratio: float = 0.35
    static_friction: float = 1.0
    dynamic_friction: float = 0.5
    actuation_amplitude: float = 0.0  # fraction of rest length
    actuation_phase: float = 0.0  # rad


@dataclass(frozen=True)
class MaterialTable:
    """Materials for ids 1..len; id 0 is the empty cell and never simulated."""

    materials: tuple[Material, ...]

    def get(self, material_id: int) -> Material:
        if not 1 <= material_id <= len(self.materials):
            raise ValueError(f"material id {material_id} outside table")
        return self.materials[material_id - 1]

    @classmethod
    def defaults(cls, num_materials: int = 4) -> "MaterialTable":
        """Id 1 is passive; ids 2 and 3 are muscles in anti-phase at 4 Hz."""
        if num_materials < 2:
            raise ValueError("need at least one non-empty material")
        table = [Material()]
        if num_materials > 2:
            table.append(Material(actuation_amplitude=0.10, actuation_phase=0.0))
        if num_materials > 3:
            table.append(Material(actuation_amplitude=0.10, actuation_phase=math.pi))
        return cls(tuple(table[: num_materials - 1]))


@dataclass(frozen=True)
class SimConfig:
    """Integration and environment settings shared across episodes."""

    dt: float = DEFAULT_DT
    burn_in: float = 5.0  # s of settling before the reference snapshot
    eval_time: float = 5.0  # s of scored locomotion
    damping_ratio: float = 1.0  # per-beam relative-motion damping
    global_damping: float = 0.01  # 1/s uniform velocity decay
    ground: bool = True
    ground_stiffness: float = 1e4  # N/m penalty spring per node
    contact_radius: float | None = None  # default: half a voxel edge
    stick_speed: float = 1e-5  # m/s static/dynamic friction switch
    actuate_burn_in: bool = True  # muscles run while settling
    check_interval: int = 2000  # steps between divergence checks

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.burn_in < 0 or self.eval_time < 0:
            raise ValueError("burn_in and eval_time must be non-negative")
        if self.check_interval < 1:
            raise ValueError("check_interval must be positive")


@dataclass(frozen=True)
class SimModel:
    """Immutable node/beam arrays for one body; shareable across episodes."""

    rest_positions: np.ndarray  # (n, 3) float64
    masses: np.ndarray  # (n,)
    inertias: np.ndarray  # (n,) solid-cube moment about any center axis
    material_ids: np.ndarray  # (n,) uint8
    mu_static: np.ndarray  # (n,)
    mu_dynamic: np.ndarray  # (n,)
    beam_i: np.ndarray  # (m,) int64
    beam_j: np.ndarray  # (m,)
    beam_axis: np.ndarray  # (m,) lattice axis 0..2
    k_axial: np.ndarray  # (m,) N/m
    k_lateral: np.ndarray  # (m,) N/m
    k_couple: np.ndarray  # (m,) N/rad
    k_bend_self: np.ndarray  # (m,) N*m/rad
    k_bend_cross: np.ndarray  # (m,)
    k_torsion: np.ndarray  # (m,)
    damp_translation: np.ndarray  # (m,) critical coefficient at zeta = 1
    damp_rotation: np.ndarray  # (m,)
    amplitude: np.ndarray  # (m,) mean endpoint actuation amplitude
    phase: np.ndarray  # (m,)
    voxel_size: float = VOXEL_SIZE
    frequency: float = ACTUATION_HZ
    gravity: float = GRAVITY

    @property
    def num_nodes(self) -> int:
        return self.rest_positions.shape[0]

    @property
    def num_beams(self) -> int:
        return self.beam_i.shape[0]


@dataclass
class SimState:
    """Dynamic state of one episode; owned by a single runner."""

    positions: np.ndarray  # (n, 3)
    velocities: np.ndarray  # (n, 3)
    orientations: np.ndarray  # (n, 4) unit quaternions, scalar first
    angular_velocities: np.ndarray  # (n, 3)
    step_count: int
    time: float


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one sim episode."""

    reward: float  # max horizontal node displacement, voxel lengths
    displacements: np.ndarray  # (n,) per-node horizontal displacement / L
    frames: np.ndarray | None  # (F, n, 3) float32 positions, if recorded
    frame_dt: float | None


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def build_model(
    body: Body,
    materials: MaterialTable | None = None,
    voxel_size: float = VOXEL_SIZE,
    frequency: float = ACTUATION_HZ,
    gravity: float = GRAVITY,
    horizontal_offset: tuple[float, float] = (0.0, 0.0),
) -> SimModel:
    """Assemble nodes and beams for a connected body.

    The body is placed with its bounding box centered on the z axis and
    its lowest voxel centers half an edge above the ground plane.
    """
    if body.volume == 0:
        raise ValueError("cannot build a model for an empty body")
    if materials is None:
        materials = MaterialTable.defaults(int(body.materials.max()) + 1)

    idx = body.indices.astype(np.int64)
    mats = [materials.get(int(m)) for m in body.materials]
    n = body.volume

    lo = idx.min(axis=0)
    extent = idx.max(axis=0) - lo + 1
    pos = (idx - lo + 0.5).astype(np.float64) * voxel_size
    pos[:, 0] += horizontal_offset[0] - extent[0] * voxel_size / 2.0
    pos[:, 1] += horizontal_offset[1] - extent[1] * voxel_size / 2.0

    density = np.array([m.density for m in mats])
    masses = density * voxel_size**3
    inertias = masses * voxel_size**2 / 6.0
    mu_s = np.array([m.static_friction for m in mats])
    mu_d = np.array([m.dynamic_friction for m in mats])

    node_of = {tuple(map(int, xyz)): a for a, xyz in enumerate(idx)}
    beams: list[tuple[int, int, int]] = []
    for a, xyz in enumerate(idx):
        x, y, z = (int(v) for v in xyz)
        for axis, nb in enumerate(((x + 1, y, z), (x, y + 1, z), (x, y, z + 1))):
            other = node_of.get(nb)
            if other is not None:
                beams.append((a, other, axis))
    m = len(beams)
    beam_i = np.array([b[0] for b in beams], dtype=np.int64)
    beam_j = np.array([b[1] for b in beams], dtype=np.int64)
    beam_axis = np.array([b[2] for b in beams], dtype=np.int64)

    L = voxel_size
    e_young = np.empty(m)
    nu = np.empty(m)
    amp = np.empty(m)
    phase = np.empty(m)
    for b, (i, j, _) in enumerate(beams):
        # beams bridging two materials take the arithmetic mean of both
        e_young[b] = 0.5 * (mats[i].young_modulus + mats[j].young_modulus)
        nu[b] = 0.5 * (mats[i].poisson_ratio + mats[j].poisson_ratio)
        amp[b] = 0.5 * (mats[i].actuation_amplitude + mats[j].actuation_amplitude)
        phase[b] = 0.5 * (mats[i].actuation_phase + mats[j].actuation_phase)

    # square section: A = L^2, I = L^4/12, J = L^4/6
    shear = e_young / (2.0 * (1.0 + nu))
    k_axial = e_young * L
    k_lateral = 12.0 * e_young * (L**4 / 12.0) / L**3
    k_couple = 6.0 * e_young * (L**4 / 12.0) / L**2
    k_bend_self = 4.0 * e_young * (L**4 / 12.0) / L
    k_bend_cross = 2.0 * e_young * (L**4 / 12.0) / L
    k_torsion = shear * (L**4 / 6.0) / L

    m_red = masses[beam_i] * masses[beam_j] / (masses[beam_i] + masses[beam_j])
    i_red = inertias[beam_i] * inertias[beam_j] / (inertias[beam_i] + inertias[beam_j])
    damp_translation = 2.0 * np.sqrt(k_axial * m_red)
    damp_rotation = 2.0 * np.sqrt(k_bend_self * i_red)

    return SimModel(
        rest_positions=_freeze(pos),
        masses=_freeze(masses),
        inertias=_freeze(inertias),
        material_ids=_freeze(body.materials.copy()),
        mu_static=_freeze(mu_s),
        mu_dynamic=_freeze(mu_d),
        beam_i=_freeze(beam_i),
        beam_j=_freeze(beam_j),
        beam_axis=_freeze(beam_axis),
        k_axial=_freeze(k_axial),
        k_lateral=_freeze(k_lateral),
        k_couple=_freeze(k_couple),
        k_bend_self=_freeze(k_bend_self),
        k_bend_cross=_freeze(k_bend_cross),
        k_torsion=_freeze(k_torsion),
        damp_translation=_freeze(damp_translation),
        damp_rotation=_freeze(damp_rotation),
        amplitude=_freeze(amp),
        phase=_freeze(phase),
        voxel_size=voxel_size,
        frequency=frequency,
        gravity=gravity,
    )


def initial_state(model: SimModel) -> SimState:
    n = model.num_nodes
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    return SimState(
        positions=model.rest_positions.copy(),
        velocities=np.zeros((n, 3)),
        orientations=quat,
        angular_velocities=np.zeros((n, 3)),
        step_count=0,
        time=0.0,
    )


def set_actuation(model: SimModel, time: float) -> np.ndarray:
    """Rest length of every beam at the given time."""
    omega = 2.0 * math.pi * model.frequency
    L = model.voxel_size
    return np.array(
        [
            _kernels.rest_length(L, float(a), float(p), omega, time)
            for a, p in zip(model.amplitude, model.phase)
        ]
    )


def _check_state(pos: np.ndarray) -> None:
    if not np.isfinite(pos).all() or np.abs(pos).max() > POSITION_LIMIT:
        raise DivergenceError("simulation diverged")


def _advance(
    model: SimModel,
    state: SimState,
    config: SimConfig,
    n_steps: int,
    actuate: bool,
    scratch: tuple[np.ndarray, np.ndarray],
) -> None:
    """Run n_steps in place with periodic divergence checks."""
    force, torque = scratch
    radius = (
        config.contact_radius
        if config.contact_radius is not None
        else 0.5 * model.voxel_size
    )
    inv_mass = 1.0 / model.masses
    inv_inertia = 1.0 / model.inertias
    done = 0
    while done < n_steps:
        chunk = min(config.check_interval, n_steps - done)
        _kernels.run_steps(
            state.positions, state.velocities, state.orientations,
            state.angular_velocities, force, torque,
            model.masses, inv_mass, inv_inertia,
            model.beam_i, model.beam_j, model.beam_axis,
            model.k_axial, model.k_lateral, model.k_couple,
            model.k_bend_self, model.k_bend_cross, model.k_torsion,
            model.damp_translation, model.damp_rotation,
            model.amplitude, model.phase,
            model.mu_static, model.mu_dynamic,
            model.voxel_size, 2.0 * math.pi * model.frequency, model.gravity,
            config.damping_ratio, config.global_damping,
            config.ground, config.ground_stiffness, radius, config.stick_speed,
            config.dt, state.step_count, chunk, actuate,
        )
        done += chunk
        state.step_count += chunk
        state.time = state.step_count * config.dt
        _check_state(state.positions)


def step(
    model: SimModel, state: SimState, config: SimConfig, n_steps: int = 1
) -> SimState:
    """Advance the integrator; returns a fresh state, input untouched."""
    out = SimState(
        positions=state.positions.copy(),
        velocities=state.velocities.copy(),
        orientations=state.orientations.copy(),
        angular_velocities=state.angular_velocities.copy(),
        step_count=state.step_count,
        time=state.time,
    )
    n = model.num_nodes
    _advance(model, out, config, n_steps, True, (np.zeros((n, 3)), np.zeros((n, 3))))
    return out


def displacement_reward(
    reference: np.ndarray, final: np.ndarray, voxel_size: float
) -> tuple[float, np.ndarray]:
    """Max horizontal node displacement between snapshots, in voxel lengths."""
    delta = final[:, :2] - reference[:, :2]
    dist = np.hypot(delta[:, 0], delta[:, 1]) / voxel_size
    return float(dist.max()), dist


def run_episode(
    model: SimModel,
    config: SimConfig | None = None,
    record_every: int = 0,
) -> EpisodeResult:
    """Settle for burn_in seconds, then score eval_time seconds of motion.

    The reward is the largest horizontal displacement any node makes
    between the post-settling snapshot and the final state, in voxel
    lengths. Raises DivergenceError if the state leaves the sane range.
    """
    if config is None:
        config = SimConfig()
    state = initial_state(model)
    n = model.num_nodes
    scratch = (np.zeros((n, 3)), np.zeros((n, 3)))
    n_burn = round(config.burn_in / config.dt)
    n_eval = round(config.eval_time / config.dt)

    frames: list[np.ndarray] | None = None
    if record_every > 0:
        frames = [state.positions.astype(np.float32)]

    def run_phase(n_steps: int, actuate: bool) -> None:
        if frames is None:
            _advance(model, state, config, n_steps, actuate, scratch)
            return
        done = 0
        while done < n_steps:
            chunk = min(record_every, n_steps - done)
            _advance(model, state, config, chunk, actuate, scratch)
            frames.append(state.positions.astype(np.float32))
            done += chunk

    run_phase(n_burn, config.actuate_burn_in)
    reference = state.positions.copy()
    run_phase(n_eval, True)
    reward, dist = displacement_reward(reference, state.positions, model.voxel_size)
    return EpisodeResult(
        reward=reward,
        displacements=dist,
        frames=np.stack(frames) if frames is not None else None,
        frame_dt=record_every * config.dt if record_every > 0 else None,
    )


def evaluate_body(
    body: Body,
    config: SimConfig | None = None,
    materials: MaterialTable | None = None,
) -> EpisodeResult:
    """Convenience wrapper: build the model and run one episode."""
    return run_episode(build_model(body, materials), config)


def kinetic_energy(model: SimModel, state: SimState) -> float:
    trans = 0.5 * float(
        np.sum(model.masses * np.sum(state.velocities**2, axis=1))
    )
    rot = 0.5 * float(
        np.sum(model.inertias * np.sum(state.angular_velocities**2, axis=1))
    )
    return trans + rot


# ---------------------------------------------------------------------------
# trajectory files
# ---------------------------------------------------------------------------
# "VXT1": one ascii header line `VXT1 <node_count> <frame_count> <frame_dt>`
# followed by frame-major little-endian float32 positions in meters.

VXT_MAGIC = b"VXT1"


def save_vxt(path, frames: np.ndarray, frame_dt: float) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise ValueError("frames must have shape (frame, node, 3)")
    n_frames, n_nodes, _ = frames.shape
    header = f"VXT1 {n_nodes} {n_frames} {frame_dt:.9g}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.astype("<f4").tobytes())


def load_vxt(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    fields = header.split()
    if len(fields) != 4 or fields[0] != VXT_MAGIC:
        raise ValueError(f"{path}: not a VXT1 file")
    n_nodes, n_frames = int(fields[1]), int(fields[2])
    frame_dt = float(fields[3])
    expect = n_frames * n_nodes * 3 * 4
    if len(payload) != expect:
        raise ValueError(f"{path}: expected {expect} payload bytes, got {len(payload)}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_nodes, 3)
    return frames.copy(), frame_dt
