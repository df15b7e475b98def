"""Deterministic synthetic multi-domain driving scenes.

Ego ground truth is an exact constant-curvature arc sampled at the 6
waypoint times; agents follow their own arcs from a sampled start pose.
Observations are a fixed global linear embedding of the scene's semantic
features, distorted by a per-domain affine transform plus Gaussian noise.
Domain shift is therefore purely statistical: mirrored geometry with swapped
turn labels, shifted speed/curvature priors, a rotated or rank-deficient
observation space, and a higher noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm, qr

from .core import Command, SceneRecord, Trajectory, rng_for, save_dataset
from .evalmetrics import collision

RAW_DIM = 12
DEFAULT_OBS_DIM = 24
AGENT_FOOTPRINT = (4.5, 2.0)
MAX_AGENTS = 4
AGENT_RESAMPLE_ATTEMPTS = 20

# feature normalization constants keep raw entries O(1)
_SPEED_NORM = 10.0
_CURV_NORM = 0.08
_RELX_NORM = 20.0
_RELY_NORM = 10.0

_MIRROR_SWAP = {
    Command.TURN_LEFT: Command.TURN_RIGHT,
    Command.TURN_RIGHT: Command.TURN_LEFT,
    Command.GO_STRAIGHT: Command.GO_STRAIGHT,
}


@dataclass(frozen=True)
class DomainSpec:
    """Statistical signature of one driving domain."""

    name: str
    obs_transform: np.ndarray  # (obs_dim, obs_dim)
    obs_bias: np.ndarray  # (obs_dim,)
    obs_noise_std: float
    curvature_prior: dict[Command, tuple[float, float]]  # mean, std in 1/m
    speed_prior: tuple[float, float]  # min, max in m/s
    mirror: bool = False

    def __post_init__(self):
        if self.obs_noise_std < 0:
            raise ValueError("obs_noise_std must be >= 0")
        lo, hi = self.speed_prior
        if not (1.0 <= lo <= hi <= 20.0):
            raise ValueError(f"speed range {self.speed_prior} outside [1, 20] m/s")


def embed_matrix(obs_dim: int) -> np.ndarray:
    """Fixed global raw-feature embedding, shared by every domain."""
    rng = rng_for(0, "obs-embed", obs_dim)
    return rng.normal(0.0, 1.0 / np.sqrt(RAW_DIM), size=(obs_dim, RAW_DIM))


def build_obs_transform(desc: dict | str, obs_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Expand a compact config descriptor into an explicit (matrix, bias)."""
    if isinstance(desc, str):
        desc = {"kind": desc}
    kind = desc.get("kind", "identity")
    bias = np.zeros(obs_dim)
    if "bias_seed" in desc:
        bias = rng_for(int(desc["bias_seed"]), "obs-bias").normal(
            0.0, float(desc.get("bias_scale", 0.1)), size=obs_dim)
    if kind == "identity":
        return np.eye(obs_dim), bias
    if kind == "rotation":
        rng = rng_for(int(desc["seed"]), "obs-rotation")
        s = rng.normal(size=(obs_dim, obs_dim))
        s = s - s.T
        s /= np.linalg.norm(s, 2)
        return expm(float(desc.get("angle", 0.4)) * s), bias
    if kind == "low_rank":
        rank = int(desc["rank"])
        rng = rng_for(int(desc["seed"]), "obs-lowrank")
        q, _ = qr(rng.normal(size=(obs_dim, obs_dim)))
        v = q[:, :rank]
        return v @ v.T, bias
    if kind == "matrix":
        m = np.asarray(desc["matrix"], dtype=np.float64)
        b = np.asarray(desc.get("bias", bias), dtype=np.float64)
        if m.shape != (obs_dim, obs_dim) or b.shape != (obs_dim,):
            raise ValueError(f"explicit obs_transform shape mismatch for obs_dim={obs_dim}")
        return m, b
    raise ValueError(f"unknown obs_transform kind {kind!r}")


def arc_points(speed: float, curvature: float,
               times: np.ndarray | None = None) -> np.ndarray:
    """Constant-curvature arc from the origin heading +x, exact closed form."""
    if times is None:
        times = 0.5 * np.arange(1, 7)
    s = speed * times
    if abs(curvature) < 1e-9:
        return np.stack([s, np.zeros_like(s)], axis=1)
    th = curvature * s
    return np.stack([np.sin(th) / curvature, (1.0 - np.cos(th)) / curvature], axis=1)


@dataclass
class _AgentDraw:
    rel: np.ndarray
    heading: float
    speed: float
    curvature: float
    points: np.ndarray = field(default_factory=lambda: np.zeros((6, 2)))


def _sample_agent(rng: np.random.Generator, speed_prior) -> _AgentDraw:
    a = _AgentDraw(
        rel=np.array([rng.uniform(4.0, 28.0), rng.uniform(-8.0, 8.0)]),
        heading=rng.normal(0.0, 0.25),
        speed=rng.uniform(*speed_prior),
        curvature=rng.normal(0.0, 0.01),
    )
    c, s = np.cos(a.heading), np.sin(a.heading)
    rot = np.array([[c, -s], [s, c]])
    a.points = a.rel[None, :] + arc_points(a.speed, a.curvature) @ rot.T
    return a


def _ego_raw(speed, curvature, command, agents) -> np.ndarray:
    raw = np.zeros(RAW_DIM)
    raw[0] = 1.0
    raw[1] = speed / _SPEED_NORM
    raw[2] = curvature / _CURV_NORM
    raw[3 + [Command.TURN_LEFT, Command.GO_STRAIGHT,
             Command.TURN_RIGHT].index(command)] = 1.0
    if agents:
        rel = np.stack([a.rel for a in agents])
        raw[6] = rel[:, 0].mean() / _RELX_NORM
        raw[7] = rel[:, 1].mean() / _RELY_NORM
    raw[10] = len(agents) / MAX_AGENTS
    return raw


def _agent_raw(a: _AgentDraw) -> np.ndarray:
    raw = np.zeros(RAW_DIM)
    raw[1] = a.speed / _SPEED_NORM
    raw[2] = a.curvature / _CURV_NORM
    raw[6] = a.rel[0] / _RELX_NORM
    raw[7] = a.rel[1] / _RELY_NORM
    raw[8] = np.sin(a.heading)
    raw[9] = np.cos(a.heading)
    raw[10] = AGENT_FOOTPRINT[0] / 5.0
    return raw


def gen_scene(spec: DomainSpec, rng: np.random.Generator, scene_id: str = "scene",
              obs_dim: int = DEFAULT_OBS_DIM) -> SceneRecord:
    """One scene: ego arc, 0-4 collision-free agents, distorted observations.

    The mirror flag reflects the whole scene about the x axis after the draws
    (so mirrored and unmirrored runs of the same seed differ exactly by the
    sign of every y) and swaps the turn-left/turn-right label to keep command
    semantics truthful.
    """
    command = [Command.TURN_LEFT, Command.GO_STRAIGHT,
               Command.TURN_RIGHT][int(rng.integers(3))]
    speed = rng.uniform(*spec.speed_prior)
    mu, sd = spec.curvature_prior[command]
    curvature = rng.normal(mu, sd)
    ego_points = arc_points(speed, curvature)
    ego_traj = Trajectory(ego_points)

    agents: list[_AgentDraw] = []
    n_agents = int(rng.integers(0, MAX_AGENTS + 1))
    for _ in range(n_agents):
        for _ in range(AGENT_RESAMPLE_ATTEMPTS):
            cand = _sample_agent(rng, spec.speed_prior)
            if not collision(ego_traj, [Trajectory(cand.points)], [AGENT_FOOTPRINT]):
                agents.append(cand)
                break
        # all attempts collided: drop the agent

    if spec.mirror:
        command = _MIRROR_SWAP[command]
        curvature = -curvature
        ego_points = ego_points * np.array([1.0, -1.0])
        for a in agents:
            a.rel = a.rel * np.array([1.0, -1.0])
            a.heading = -a.heading
            a.curvature = -a.curvature
            a.points = a.points * np.array([1.0, -1.0])

    embed = embed_matrix(obs_dim)

    def observe(raw: np.ndarray) -> np.ndarray:
        clean = spec.obs_transform @ (embed @ raw) + spec.obs_bias
        return clean + rng.normal(0.0, spec.obs_noise_std, size=obs_dim)

    ego_obs = observe(_ego_raw(speed, curvature, command, agents))
    agent_obs = [observe(_agent_raw(a)) for a in agents]

    return SceneRecord(
        scene_id=scene_id,
        domain_tag=spec.name,
        command=command,
        ego_obs=ego_obs,
        agent_obs=agent_obs,
        ego_gt=Trajectory(ego_points),
        agent_gt=[Trajectory(a.points) for a in agents],
        agent_footprints=[AGENT_FOOTPRINT] * len(agents),
    )


def gen_dataset(spec: DomainSpec, n_scenes: int, seed: int, path=None,
                obs_dim: int = DEFAULT_OBS_DIM) -> list[SceneRecord]:
    """n scenes with per-scene derived RNG streams; optionally written to disk."""
    records = []
    for i in range(n_scenes):
        rng = rng_for(seed, "scene", spec.name, i)
        records.append(
            gen_scene(spec, rng, scene_id=f"{spec.name}-{seed}-{i:06d}",
                      obs_dim=obs_dim))
    if path is not None:
        save_dataset(records, Path(path))
    return records


def strip_labels(records: list[SceneRecord]) -> list[SceneRecord]:
    """Unlabeled copies of the records (target-domain adaptation input)."""
    return [
        SceneRecord(
            scene_id=r.scene_id,
            domain_tag=r.domain_tag,
            command=r.command,
            ego_obs=r.ego_obs,
            agent_obs=r.agent_obs,
            ego_gt=None,
            agent_gt=None,
            agent_footprints=r.agent_footprints,
        )
        for r in records
    ]
