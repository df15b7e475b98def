"""Target-domain adaptation and uncertainty-driven active selection.

Adaptation never touches the GP side: both modes finetune the base model
with the frozen GP module as teacher, using ground truth additionally when
available. Active selection ranks scenes by the ego prediction's scalar GP
variance (descending) and keeps the top budget fraction; the random strategy
is the seeded baseline.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

from .core import SceneRecord, rng_for
from .gpmodule import GpInference
from .basemodel import encode
from .synthdomain import strip_labels
from .trainer import Checkpoint, TrainConfig, TrainingError, _finetune_base


@dataclass
class SelectionReport:
    """Variance ranking plus the selected subset for one strategy run."""

    rows: list[tuple[str, float]]  # (scene_id, scalar_variance), ranked
    selected: list[str]
    strategy: str
    budget: float

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        chosen = set(self.selected)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["scene_id", "variance", "selected", "strategy"])
            for sid, var in self.rows:
                w.writerow([sid, f"{var:.10g}", int(sid in chosen), self.strategy])


def adapt_unsupervised(records: list[SceneRecord], ckpt: Checkpoint,
                       cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Finetune the base model with the teacher loss only; labels are ignored."""
    if not records:
        raise TrainingError("adaptation dataset is empty")
    if any(r.labeled for r in records):
        warnings.warn("unsupervised adaptation: ground truth present, ignoring it")
        records = strip_labels(records)
    return _finetune_base(records, ckpt, cfg, use_gt=False, use_teacher=True,
                          epochs=cfg.adapt_epochs, lr=cfg.lr_stage3,
                          stage="adapt_unsup", log_path=log_path)


def adapt_supervised(records: list[SceneRecord], ckpt: Checkpoint,
                     cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Finetune with ground-truth losses plus the teacher regularization."""
    if not records:
        raise TrainingError("adaptation dataset is empty")
    missing = [r.scene_id for r in records if not r.labeled]
    if missing:
        raise TrainingError(
            f"supervised adaptation requires ground truth; missing on "
            f"{len(missing)} scenes (first: {missing[0]})")
    return _finetune_base(records, ckpt, cfg, use_gt=True, use_teacher=True,
                          epochs=cfg.adapt_epochs, lr=cfg.lr_stage3,
                          stage="adapt_sup", log_path=log_path)


def active_select(records: list[SceneRecord], ckpt: Checkpoint, budget: float,
                  strategy: str = "variance", seed: int | None = None) -> SelectionReport:
    """Rank scenes by ego predictive variance and keep the top budget fraction.

    Ties break by ascending scene_id, so the ranking is invariant to dataset
    order, and selections nest across budgets. The random strategy draws a
    seeded uniform sample without replacement.
    """
    if not records:
        raise TrainingError("active selection on an empty dataset")
    if not (0.0 < budget <= 1.0):
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    if strategy not in ("variance", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")

    inf = GpInference(ckpt.model.cb, ckpt.model.clf, ckpt.model.gp)
    scored = []
    for rec in records:
        ego_tok, _ = encode(rec, ckpt.model.base)
        pred, _ = inf.predict_scene(ego_tok.values, [], rec.command)
        scored.append((rec.scene_id, float(pred.scalar_variance)))
    scored.sort(key=lambda t: (-t[1], t[0]))

    k = math.ceil(budget * len(records))
    if strategy == "variance":
        selected = [sid for sid, _ in scored[:k]]
    else:
        ids = sorted(r.scene_id for r in records)
        rng = rng_for(seed if seed is not None else ckpt.train_config.seed,
                      "active-random")
        perm = rng.permutation(len(ids))
        selected = [ids[i] for i in perm[:k]]
    return SelectionReport(rows=scored, selected=selected, strategy=strategy,
                           budget=budget)
