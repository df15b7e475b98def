"""Planning metrics: average L2 error and oriented-rectangle collision rate.

L2 follows the cumulative-average convention: the value at k seconds is the
mean point error over all waypoints up to and including k seconds, so the
overall value equals the 3 s value. Collision uses exact separating-axis
tests between oriented footprint rectangles at each of the 6 timesteps, with
headings taken from waypoint chords (one-sided at the endpoints).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basemodel import plan as base_plan
from .basemodel import encode
from .codebook import Role
from .core import Command, SceneRecord, Trajectory
from .gpmodule import GpInference

EGO_FOOTPRINT = (4.0, 1.8)  # length, width in meters


def avg_l2(pred: Trajectory, gt: Trajectory) -> tuple[float, float, float, float]:
    """(overall, at 1 s, at 2 s, at 3 s) cumulative-average point errors."""
    err = np.linalg.norm(pred.points - gt.points, axis=1)
    at1 = float(err[:2].mean())
    at2 = float(err[:4].mean())
    at3 = float(err.mean())
    return at3, at1, at2, at3


def _headings(points: np.ndarray) -> np.ndarray:
    """Unit heading per waypoint from the (k-1 -> k+1) chord; one-sided ends."""
    n = len(points)
    out = np.zeros_like(points)
    for i in range(n):
        lo = max(i - 1, 0)
        hi = min(i + 1, n - 1)
        d = points[hi] - points[lo]
        norm = np.hypot(d[0], d[1])
        out[i] = d / norm if norm > 1e-9 else np.array([1.0, 0.0])
    return out


def rect_corners(center: np.ndarray, heading: np.ndarray,
                 length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise, shape (4, 2)."""
    fwd = heading * (length / 2.0)
    left = np.array([-heading[1], heading[0]]) * (width / 2.0)
    return np.array([
        center + fwd + left,
        center - fwd + left,
        center - fwd - left,
        center + fwd - left,
    ])


def sat_margin(a: np.ndarray, b: np.ndarray) -> float:
    """Signed overlap: min over candidate axes of projection overlap.

    Positive means the rectangles penetrate by at least that much along
    every axis; negative means some axis separates them by that much.
    """
    margin = np.inf
    for rect in (a, b):
        for i in range(2):  # two unique edge directions per rectangle
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            axis /= np.hypot(axis[0], axis[1])
            pa = a @ axis
            pb = b @ axis
            overlap = min(pa.max(), pb.max()) - max(pa.min(), pb.min())
            margin = min(margin, overlap)
    return float(margin)


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return sat_margin(a, b) > 0.0


def collision(pred_ego: Trajectory, agent_trajs: list[Trajectory],
              agent_footprints: list[tuple[float, float]],
              ego_footprint: tuple[float, float] = EGO_FOOTPRINT) -> bool:
    """True iff the ego rectangle overlaps any agent rectangle at any step."""
    if not agent_trajs:
        return False
    ego_head = _headings(pred_ego.points)
    agent_heads = [_headings(t.points) for t in agent_trajs]
    for k in range(len(pred_ego.points)):
        ego_rect = rect_corners(pred_ego.points[k], ego_head[k], *ego_footprint)
        for t, heads, fp in zip(agent_trajs, agent_heads, agent_footprints):
            if rects_overlap(ego_rect, rect_corners(t.points[k], heads[k], *fp)):
                return True
    return False


def scene_stats(rec: SceneRecord) -> tuple[float, float]:
    """(speed m/s, |curvature| 1/m) estimated from the ground-truth trajectory."""
    pts = np.vstack([[0.0, 0.0], rec.ego_gt.points])
    segs = np.diff(pts, axis=0)
    lens = np.linalg.norm(segs, axis=1)
    arclen = float(lens.sum())
    speed = arclen / 3.0
    theta = np.arctan2(segs[:, 1], segs[:, 0])
    dtheta = float(np.unwrap(theta)[-1] - np.unwrap(theta)[0])
    curv = abs(dtheta) / arclen if arclen > 1e-6 else 0.0
    return speed, curv


@dataclass
class EvalReport:
    n_scenes: int
    avg_l2_m: float
    avg_l2_at_1s: float
    avg_l2_at_2s: float
    avg_l2_at_3s: float
    collision_rate_pct: float
    subset: str
    mode: str
    rows: list[dict] = field(default_factory=list)

    def summary_text(self) -> str:
        return (
            f"mode={self.mode} subset={self.subset} n={self.n_scenes} "
            f"avg_l2_m={self.avg_l2_m:.6f} "
            f"(1s={self.avg_l2_at_1s:.6f} 2s={self.avg_l2_at_2s:.6f} "
            f"3s={self.avg_l2_at_3s:.6f}) "
            f"collision_rate_pct={self.collision_rate_pct:.6f}"
        )

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["scene_id", "command", "l2_overall", "l2_at_1s", "l2_at_2s",
                "l2_at_3s", "collision"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow([f"# {self.summary_text()} (cumulative-average L2 convention)"])
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] for c in cols])


def _subset_filter(records: list[SceneRecord], subset: str,
                   rarity_bins: dict | None) -> list[SceneRecord]:
    if subset == "full":
        return records
    if subset == "targeted":
        return [r for r in records if r.command != Command.GO_STRAIGHT]
    if rarity_bins and subset in rarity_bins:
        spec = rarity_bins[subset]
        out = []
        for r in records:
            speed, curv = scene_stats(r)
            if speed < spec.get("min_speed", -np.inf):
                continue
            if speed > spec.get("max_speed", np.inf):
                continue
            if curv < spec.get("min_abs_curvature", -np.inf):
                continue
            if curv > spec.get("max_abs_curvature", np.inf):
                continue
            out.append(r)
        return out
    raise ValueError(f"unknown eval subset {subset!r}")


def evaluate(records: list[SceneRecord], model, mode: str = "base",
             subset: str = "full", rarity_bins: dict | None = None) -> EvalReport:
    """Aggregate planning metrics over a labeled dataset.

    ``mode`` selects the trajectory source: the planner head ("base") or the
    GP module ("roca"). ``model`` provides cb/base/clf/gp attributes.
    """
    if mode not in ("base", "roca"):
        raise ValueError(f"unknown eval mode {mode!r}")
    scenes = [r for r in _subset_filter(records, subset, rarity_bins) if r.labeled]
    if not scenes:
        raise ValueError(f"no labeled scenes after subset filter {subset!r}")
    inf = GpInference(model.cb, model.clf, model.gp) if mode == "roca" else None

    rows = []
    l2s = np.zeros((len(scenes), 4))
    collisions = 0
    for i, rec in enumerate(scenes):
        ego_tok, _ = encode(rec, model.base)
        if mode == "base":
            traj, _ = base_plan(ego_tok, Role.ego(rec.command), model.base, model.cb)
        else:
            pred, _ = inf.predict_scene(ego_tok.values, [], rec.command)
            traj = pred.mean
        overall, a1, a2, a3 = avg_l2(traj, rec.ego_gt)
        hit = collision(traj, rec.agent_gt or [], rec.agent_footprints)
        collisions += int(hit)
        l2s[i] = (overall, a1, a2, a3)
        rows.append({
            "scene_id": rec.scene_id,
            "command": rec.command.value,
            "l2_overall": f"{overall:.6f}",
            "l2_at_1s": f"{a1:.6f}",
            "l2_at_2s": f"{a2:.6f}",
            "l2_at_3s": f"{a3:.6f}",
            "collision": int(hit),
        })
    means = l2s.mean(axis=0)
    return EvalReport(
        n_scenes=len(scenes),
        avg_l2_m=float(means[0]),
        avg_l2_at_1s=float(means[1]),
        avg_l2_at_2s=float(means[2]),
        avg_l2_at_3s=float(means[3]),
        collision_rate_pct=100.0 * collisions / len(scenes),
        subset=subset,
        mode=mode,
        rows=rows,
    )
