"""Gradient machinery, Adam optimizer, and the three-stage source training.

Stage 1 pretrains the base encoder/planner on ground truth; stage 2 freezes
the base model and fits the GP side (basis tokens, classifier, kernel and
noise parameters) on the reconstruction and supervision losses; stage 3
freezes the GP side and finetunes the base model on ground truth plus the
teacher regularization. Determinism contract: identical (config, seed,
dataset) produce bit-identical checkpoints; batches are reduced in ascending
scene order and all RNG streams derive from the seed by purpose keys.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff, basemodel, losses
from .autodiff import Tensor
from .basemodel import BaseModelParams, encode, encode_t, planner_t
from .codebook import (Codebook, Role, admissible_groups, init_basis_tokens,
                       nearest_group, sample_and_cluster)
from .core import SceneRecord, Trajectory, rng_for
from .gpmodule import GpGraph, GpInference, GpParams, GroupClassifier
from .losses import (LossBreakdown, StudentRoleOutput, SupRoleInput,
                     TeacherRoleOutput, cross_entropy, loss_gp_teacher,
                     loss_rec, loss_sup, select_triplet_classes, traj_mse)

CHECKPOINT_MAGIC = b"GPTRAJCK"
CHECKPOINT_SCHEMA = 1

grad = autodiff.grad  # reverse-mode gradient map; the package's grad contract


class TrainingError(Exception):
    pass


@dataclass
class ModelSpec:
    """Architecture sizes captured in every checkpoint."""

    obs_dim: int = 24
    token_dim: int = 32
    n_ego: int = 48
    n_agent: int = 64
    group_size: int = 16
    encoder_hidden: int = 64
    planner_hidden: int = 64
    classifier_hidden: int = 128
    token_scale: float = basemodel.TOKEN_SCALE

    @property
    def n_code(self) -> int:
        return self.n_ego + self.n_agent


@dataclass
class TrainConfig:
    seed: int
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    epochs_stage3: int = 15
    adapt_epochs: int = 8
    batch_size: int = 32
    lr_stage12: float = 1e-3
    lr_stage3: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weights: dict[str, float] = field(default_factory=dict)
    sigma_clamp: tuple[float, float] = losses.DEFAULT_SIGMA_CLAMP
    triplet_margin: float = losses.DEFAULT_TRIPLET_MARGIN
    gp_weight: float = 1.0  # weight of the teacher-regularization total

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        for name in ("epochs_stage1", "epochs_stage2", "epochs_stage3",
                     "adapt_epochs", "batch_size"):
            if getattr(self, name) < 0 or (name == "batch_size" and self.batch_size < 1):
                raise ValueError(f"{name} must be positive")
        for name in ("lr_stage12", "lr_stage3", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.sigma_clamp
        if not (0 < lo < hi):
            raise ValueError("sigma_clamp must satisfy 0 < lo < hi")


@dataclass
class Model:
    cb: Codebook
    base: BaseModelParams
    clf: GroupClassifier
    gp: GpParams

    def clone(self) -> "Model":
        return copy.deepcopy(self)


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data[...] = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def finite_difference(loss_fn, params: dict[str, Tensor],
                      h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of ``loss_fn()`` for every parameter entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


# --- parameter registries ----------------------------------------------------


def base_param_tensors(model: Model) -> dict[str, Tensor]:
    b = model.base
    names = ("enc_w1", "enc_b1", "enc_w2", "enc_b2",
             "pln_w1", "pln_b1", "pln_w2", "pln_b2")
    out = {}
    for n in names:
        arr = np.ascontiguousarray(getattr(b, n), dtype=np.float64)
        setattr(b, n, arr)  # tensors alias the model arrays
        t = Tensor(arr)
        t.requires_grad = True
        out[f"base.{n}"] = t
    return out


def gp_param_tensors(model: Model) -> dict[str, Tensor]:
    g = model.gp
    out = {}
    for n in ("log_lengthscale", "log_outputscale", "log_noise_recon",
              "log_noise_traj"):
        t = autodiff.parameter(np.array(getattr(g, n), dtype=np.float64))
        out[f"gp.{n}"] = t
    for n in ("w1", "b1", "w2", "b2"):
        arr = np.ascontiguousarray(getattr(model.clf, n), dtype=np.float64)
        setattr(model.clf, n, arr)
        t = Tensor(arr)
        t.requires_grad = True
        out[f"clf.{n}"] = t
    for grp in model.cb.groups:
        grp.basis_tokens = np.ascontiguousarray(grp.basis_tokens, dtype=np.float64)
        t = Tensor(grp.basis_tokens)
        t.requires_grad = True
        out[f"cb.group{grp.group_id:03d}.basis"] = t
    return out


def _sync_gp_scalars(model: Model, params: dict[str, Tensor]) -> None:
    for n in ("log_lengthscale", "log_outputscale", "log_noise_recon",
              "log_noise_traj"):
        setattr(model.gp, n, float(params[f"gp.{n}"].data))


def _project_noise(params: dict[str, Tensor], sigma_clamp) -> None:
    lo, hi = np.log(sigma_clamp[0]), np.log(sigma_clamp[1])
    for n in ("gp.log_noise_recon", "gp.log_noise_traj"):
        if n in params:
            params[n].data[...] = np.clip(params[n].data, lo, hi)


# --- per-scene losses ----------------------------------------------------------


def scene_labels(scene: SceneRecord, cb: Codebook) -> tuple[int, list[int]]:
    """Ground-truth classes: nearest admissible trajectory anchors."""
    ego = nearest_group(cb, scene.ego_gt, Role.ego(scene.command))
    agents = [nearest_group(cb, t, Role.agent()) for t in (scene.agent_gt or [])]
    return ego, agents


def base_supervised_loss(scene: SceneRecord, bvars: dict[str, Tensor],
                         model: Model, labels: tuple[int, list[int]],
                         weights: dict[str, float]) -> LossBreakdown:
    """Standard base-model losses: anchored-waypoint MSE plus class CE.

    The planning trajectory is assembled from the label group's anchor
    (winner-takes-all convention); logits learn the label through CE.
    """
    spec_scale = model.base.token_scale
    n_code = model.base.n_code
    v = {k.split(".", 1)[1]: t for k, t in bvars.items()}
    ego_label, agent_labels = labels
    zero = Tensor(0.0)

    def role_terms(obs, label, admissible, gt_flat):
        tok = encode_t(obs, v, spec_scale)
        logits, residual = planner_t(tok, v, n_code)
        traj = autodiff.add(Tensor(model.cb.group(label).traj_anchor), residual)
        plan = traj_mse(traj, gt_flat)
        ce = cross_entropy(logits, admissible, label)
        return plan, ce

    plan, ce = role_terms(scene.ego_obs, ego_label,
                          admissible_groups(model.cb, Role.ego(scene.command)),
                          scene.ego_gt.flat)
    terms = {"base_plan": plan, "base_class_ce_ego": ce,
             "base_motion": zero, "base_class_ce_agent": zero}
    adm_agent = admissible_groups(model.cb, Role.agent())
    for obs, label, gt in zip(scene.agent_obs, agent_labels, scene.agent_gt or []):
        plan, ce = role_terms(obs, label, adm_agent, gt.flat)
        terms["base_motion"] = autodiff.add(terms["base_motion"], plan)
        terms["base_class_ce_agent"] = autodiff.add(terms["base_class_ce_agent"], ce)
    return LossBreakdown(terms=terms, weights=weights)


def gp_stage_loss(scene: SceneRecord, graph: GpGraph, tokens, labels,
                  triplet_lut, cfg: TrainConfig) -> LossBreakdown:
    """Stage-2 loss for one scene: reconstruction plus GP supervision.

    ``tokens`` are the frozen base model's (ego, agents) token constants;
    conditioning groups come from the classifier argmax, supervision labels
    from the ground truth.
    """
    cb = graph.cb
    ego_tok, agent_toks = tokens
    ego_label, agent_labels = labels
    zero_sup: list[SupRoleInput] = []

    def role_pass(token_arr, role, label, gt_flat):
        tok = Tensor(token_arr)
        feats = graph.kernel_features(tok)
        logits = graph.classifier_logits(feats)
        ids = admissible_groups(cb, role)
        gid = ids[int(np.argmax(logits.data[ids]))]
        recon, var_rec = graph.reconstruct(tok, gid)
        mean, var_traj = graph.predict_trajectory(tok, gid)
        pos, neg = triplet_lut[label]
        sup = SupRoleInput(
            pred_mean=mean, variance=var_traj, logits=logits, admissible=ids,
            gt_flat=gt_flat, label=label, token=tok, positives=pos, negatives=neg)
        return gid, recon, var_rec, sup

    e_gid, e_hat, e_var, e_sup = role_pass(
        ego_tok, Role.ego(scene.command), ego_label, scene.ego_gt.flat)
    agent_sups = []
    agent_hats, agent_vars, agent_bases, agent_targets = [], [], [], []
    for tok_arr, label, gt in zip(agent_toks, agent_labels, scene.agent_gt or []):
        gid, hat, var, sup = role_pass(tok_arr, Role.agent(), label, gt.flat)
        agent_sups.append(sup)
        agent_hats.append(hat)
        agent_vars.append(var)
        agent_targets.append(tok_arr)
        agent_bases.append(graph.group_cond(gid)["basis"])

    rec = loss_rec(ego_tok, e_hat, e_var, agent_targets, agent_hats, agent_vars,
                   graph.group_cond(e_gid)["basis"], agent_bases,
                   weights=cfg.loss_weights, sigma_clamp=cfg.sigma_clamp)
    sup = loss_sup(e_sup, agent_sups, anchors=graph.token_anchor,
                   weights=cfg.loss_weights, sigma_clamp=cfg.sigma_clamp,
                   margin=cfg.triplet_margin)
    return rec.merged(sup)


def finetune_scene_loss(scene: SceneRecord, bvars: dict[str, Tensor], model: Model,
                        teacher: GpInference | None, cfg: TrainConfig,
                        use_gt: bool, anchor_cache: dict[int, Tensor],
                        triplet_lut) -> LossBreakdown:
    """Stage-3 / adaptation loss: optional GT terms plus teacher regularization."""
    v = {k.split(".", 1)[1]: t for k, t in bvars.items()}
    cb = model.cb
    n_code = model.base.n_code

    def anchor_fn(gid: int) -> Tensor:
        if gid not in anchor_cache:
            anchor_cache[gid] = Tensor(cb.group(gid).token_anchor)
        return anchor_cache[gid]

    labels = scene_labels(scene, cb) if use_gt else None

    ego_tok = encode_t(scene.ego_obs, v, model.base.token_scale)
    agent_toks = [encode_t(a, v, model.base.token_scale) for a in scene.agent_obs]

    teacher_ego = teacher_agents = None
    if teacher is not None:
        t_ego, t_agents = teacher.predict_scene(
            ego_tok.data, [t.data for t in agent_toks], scene.command)
        def teacher_out(pred, role):
            pos, neg = triplet_lut[pred.group]
            return TeacherRoleOutput(
                mean_flat=pred.mean.flat, variance=pred.scalar_variance,
                logits=pred.class_logits, admissible=admissible_groups(cb, role),
                label=pred.group, positives=pos, negatives=neg)
        teacher_ego = teacher_out(t_ego, Role.ego(scene.command))
        teacher_agents = [teacher_out(p, Role.agent()) for p in t_agents]

    def student_out(tok, role, anchor_gid):
        logits, residual = planner_t(tok, v, n_code)
        traj = autodiff.add(Tensor(cb.group(anchor_gid).traj_anchor), residual)
        return StudentRoleOutput(
            traj_flat=traj, logits=logits,
            admissible=admissible_groups(cb, role), token=tok)

    # trajectory anchor: ground-truth class when supervised, else teacher class
    ego_anchor_gid = labels[0] if use_gt else teacher_ego.label
    student_ego = student_out(ego_tok, Role.ego(scene.command), ego_anchor_gid)
    student_agents = []
    for i, tok in enumerate(agent_toks):
        gid = labels[1][i] if use_gt else teacher_agents[i].label
        student_agents.append(student_out(tok, Role.agent(), gid))

    breakdown = LossBreakdown(terms={}, weights=dict(cfg.loss_weights))
    if use_gt:
        zero = Tensor(0.0)
        terms = {
            "base_plan": traj_mse(student_ego.traj_flat, scene.ego_gt.flat),
            "base_class_ce_ego": cross_entropy(student_ego.logits,
                                               student_ego.admissible, labels[0]),
            "base_motion": zero, "base_class_ce_agent": zero,
        }
        for s, label, gt in zip(student_agents, labels[1], scene.agent_gt or []):
            terms["base_motion"] = autodiff.add(
                terms["base_motion"], traj_mse(s.traj_flat, gt.flat))
            terms["base_class_ce_agent"] = autodiff.add(
                terms["base_class_ce_agent"],
                cross_entropy(s.logits, s.admissible, label))
        breakdown = LossBreakdown(terms=terms, weights=dict(cfg.loss_weights))

    if teacher is not None and cfg.gp_weight != 0.0:
        teacher_bd = loss_gp_teacher(
            student_ego, teacher_ego, student_agents, teacher_agents,
            anchors=anchor_fn, weights=cfg.loss_weights,
            sigma_clamp=cfg.sigma_clamp, margin=cfg.triplet_margin)
        scaled = {k: autodiff.mul(t, cfg.gp_weight)
                  for k, t in teacher_bd.terms.items()}
        breakdown = breakdown.merged(LossBreakdown(scaled, dict(cfg.loss_weights)))
    return breakdown


# --- training loops ------------------------------------------------------------


def _write_log(log_path, rows) -> None:
    if log_path is None or not rows:
        return
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if not exists:
            w.writerow(["step", "stage", "term", "value"])
        w.writerows(rows)


def _run_epochs(records, cfg: TrainConfig, params, scene_loss_fn, *, epochs, lr,
                stage: str, log_path=None, post_step=None) -> None:
    """Shared batched loop: shuffle, fixed-order reduce, Adam step, CSV log."""
    if not records:
        raise TrainingError("dataset is empty")
    opt = Adam(params, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rows = []
    step = 0
    for epoch in range(epochs):
        perm = rng_for(cfg.seed, "shuffle", stage, epoch).permutation(len(records))
        for start in range(0, len(records), cfg.batch_size):
            batch = sorted(perm[start:start + cfg.batch_size])
            total_bd: LossBreakdown | None = None
            for idx in batch:
                bd = scene_loss_fn(records[idx], step)
                total_bd = bd if total_bd is None else total_bd.merged(bd)
            bad = total_bd.first_nonfinite()
            if bad is not None:
                raise TrainingError(
                    f"non-finite loss term {bad!r} at {stage} step {step}")
            total = autodiff.mul(total_bd.total, 1.0 / len(batch))
            grads = grad(total, params)
            opt.step(grads)
            if post_step is not None:
                post_step()
            for term, t in total_bd.terms.items():
                rows.append([step, stage, term, f"{t.item() / len(batch):.10g}"])
            rows.append([step, stage, "total", f"{total.item():.10g}"])
            step += 1
    _write_log(log_path, rows)


def build_model(records, cfg: TrainConfig, spec: ModelSpec) -> Model:
    """Codebook skeleton from clustered GT plus seeded parameter init."""
    trajs = []
    for r in records:
        if r.ego_gt is not None:
            trajs.append((r.ego_gt, r.command, True))
        for t in r.agent_gt or []:
            trajs.append((t, r.command, False))
    cb = sample_and_cluster(trajs, spec.n_ego, spec.n_agent, spec.group_size,
                            spec.token_dim, seed=cfg.seed)
    init_basis_tokens(cb, cfg.seed)
    base = BaseModelParams.init(
        spec.obs_dim, spec.token_dim, spec.n_code, spec.encoder_hidden,
        spec.planner_hidden, rng_for(cfg.seed, "base-init"),
        token_scale=spec.token_scale)
    clf = GroupClassifier.init(spec.n_code, spec.group_size,
                               spec.classifier_hidden, rng_for(cfg.seed, "clf-init"))
    return Model(cb=cb, base=base, clf=clf, gp=GpParams())


def stage1_pretrain(records, cfg: TrainConfig, spec: ModelSpec,
                    log_path=None) -> "Checkpoint":
    """Pretrain encoder and planner on labeled source data."""
    labeled = [r for r in records if r.labeled]
    if not labeled:
        raise TrainingError("stage 1 requires a labeled dataset")
    model = build_model(labeled, cfg, spec)
    bvars = base_param_tensors(model)
    labels = [scene_labels(r, model.cb) for r in labeled]

    def loss_fn(scene, _step):
        return base_supervised_loss(scene, bvars, model,
                                    labels[scene_index[id(scene)]],
                                    cfg.loss_weights)

    scene_index = {id(r): i for i, r in enumerate(labeled)}
    _run_epochs(labeled, cfg, bvars, loss_fn, epochs=cfg.epochs_stage1,
                lr=cfg.lr_stage12, stage="stage1", log_path=log_path)
    return Checkpoint(stage="stage1", model=model, train_config=cfg, model_spec=spec)


def stage2_fit_gp(records, ckpt: "Checkpoint", cfg: TrainConfig,
                  log_path=None) -> "Checkpoint":
    """Fit basis tokens, classifier, and kernel/noise params; base frozen."""
    labeled = [r for r in records if r.labeled]
    if not labeled:
        raise TrainingError("stage 2 requires a labeled dataset")
    model = ckpt.model.clone()
    params = gp_param_tensors(model)
    # frozen encoder: tokens are fixed targets, computed once
    tokens = []
    for r in labeled:
        ego, agents = encode(r, model.base)
        tokens.append((ego.values, [a.values for a in agents]))
    labels = [scene_labels(r, model.cb) for r in labeled]
    triplet_lut = {gid: select_triplet_classes(model.cb, gid)
                   for gid in range(model.cb.n_code)}

    state = {"graph": None, "step": -1}
    scene_index = {id(r): i for i, r in enumerate(labeled)}

    def loss_fn(scene, step):
        if step != state["step"]:
            state["graph"] = GpGraph(
                model.cb,
                [params[f"cb.group{g.group_id:03d}.basis"] for g in model.cb.groups],
                {n: params[f"clf.{n}"] for n in ("w1", "b1", "w2", "b2")},
                params["gp.log_lengthscale"], params["gp.log_outputscale"],
                params["gp.log_noise_recon"], params["gp.log_noise_traj"])
            state["step"] = step
        i = scene_index[id(scene)]
        return gp_stage_loss(scene, state["graph"], tokens[i], labels[i],
                             triplet_lut, cfg)

    _run_epochs(labeled, cfg, params, loss_fn, epochs=cfg.epochs_stage2,
                lr=cfg.lr_stage12, stage="stage2", log_path=log_path,
                post_step=lambda: (_project_noise(params, cfg.sigma_clamp),
                                   _sync_gp_scalars(model, params)))
    _sync_gp_scalars(model, params)
    return Checkpoint(stage="stage2", model=model, train_config=cfg,
                      model_spec=ckpt.model_spec)


def _finetune_base(records, ckpt: "Checkpoint", cfg: TrainConfig, *, use_gt: bool,
                   use_teacher: bool, epochs: int, lr: float, stage: str,
                   log_path=None) -> "Checkpoint":
    model = ckpt.model.clone()
    bvars = base_param_tensors(model)
    teacher = GpInference(model.cb, model.clf, model.gp) if (
        use_teacher and cfg.gp_weight != 0.0) else None
    triplet_lut = {gid: select_triplet_classes(model.cb, gid)
                   for gid in range(model.cb.n_code)}
    state = {"anchors": {}, "step": -1}

    def loss_fn(scene, step):
        if step != state["step"]:
            state["anchors"] = {}
            state["step"] = step
        return finetune_scene_loss(scene, bvars, model, teacher, cfg,
                                   use_gt=use_gt, anchor_cache=state["anchors"],
                                   triplet_lut=triplet_lut)

    _run_epochs(records, cfg, bvars, loss_fn, epochs=epochs, lr=lr,
                stage=stage, log_path=log_path)
    return Checkpoint(stage=stage, model=model, train_config=cfg,
                      model_spec=ckpt.model_spec)


def stage3_finetune(records, ckpt: "Checkpoint", cfg: TrainConfig,
                    log_path=None) -> "Checkpoint":
    """Finetune the base model on GT plus teacher regularization; GP frozen."""
    labeled = [r for r in records if r.labeled]
    if not labeled:
        raise TrainingError("stage 3 requires a labeled dataset")
    return _finetune_base(labeled, ckpt, cfg, use_gt=True, use_teacher=True,
                          epochs=cfg.epochs_stage3, lr=cfg.lr_stage3,
                          stage="stage3", log_path=log_path)


# --- checkpoint container ------------------------------------------------------


@dataclass
class Checkpoint:
    """Versioned container of named tensors, codebook data, and config."""

    stage: str
    model: Model
    train_config: TrainConfig
    model_spec: ModelSpec

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        b = self.model.base
        for n in ("enc_w1", "enc_b1", "enc_w2", "enc_b2",
                  "pln_w1", "pln_b1", "pln_w2", "pln_b2"):
            out[f"base.{n}"] = getattr(b, n)
        for n in ("w1", "b1", "w2", "b2"):
            out[f"clf.{n}"] = getattr(self.model.clf, n)
        for n in ("log_lengthscale", "log_outputscale", "log_noise_recon",
                  "log_noise_traj"):
            out[f"gp.{n}"] = np.array(getattr(self.model.gp, n))
        for g in self.model.cb.groups:
            out[f"cb.group{g.group_id:03d}.basis"] = g.basis_tokens
            out[f"cb.group{g.group_id:03d}.trajs"] = g.trajectories
        return out

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = self.named_tensors()
        index = []
        offset = 0
        blobs = []
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.size
        header = {
            "schema": CHECKPOINT_SCHEMA,
            "stage": self.stage,
            "train_config": _config_dict(self.train_config),
            "model_spec": dataclasses.asdict(self.model_spec),
            "groups": [
                {"group_id": g.group_id, "kind": g.role.kind,
                 "command": g.role.command.value if g.role.command else None}
                for g in self.model.cb.groups
            ],
            "tensors": index,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for b in blobs:
                f.write(b)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from .codebook import CodebookGroup  # local: avoids wide import surface
        from .core import Command

        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a gptraj checkpoint")
        hlen = struct.unpack("<Q", raw[8:16])[0]
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(
                f"{path}: checkpoint schema {header.get('schema')!r} unsupported "
                f"(expected {CHECKPOINT_SCHEMA})")
        data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
        tensors = {}
        for e in header["tensors"]:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = data[e["offset"]: e["offset"] + size].reshape(e["shape"]).copy()
            tensors[e["name"]] = arr

        spec = ModelSpec(**header["model_spec"])
        cfg_d = dict(header["train_config"])
        cfg_d["sigma_clamp"] = tuple(cfg_d["sigma_clamp"])
        cfg = TrainConfig(**cfg_d)

        groups = []
        command_groups: dict[Command, list[int]] = {}
        for g in header["groups"]:
            cmd = Command.from_str(g["command"]) if g["command"] else None
            role = Role(g["kind"], cmd)
            trajs = tensors[f"cb.group{g['group_id']:03d}.trajs"]
            grp = CodebookGroup(
                group_id=g["group_id"], role=role, trajectories=trajs,
                traj_anchor=trajs.mean(axis=0),
                basis_tokens=tensors[f"cb.group{g['group_id']:03d}.basis"])
            groups.append(grp)
            if cmd is not None:
                command_groups.setdefault(cmd, []).append(g["group_id"])
        cb = Codebook(groups=groups, n_ego=spec.n_ego, n_agent=spec.n_agent,
                      group_size=spec.group_size, token_dim=spec.token_dim,
                      command_groups=command_groups)
        base = BaseModelParams(
            enc_w1=tensors["base.enc_w1"], enc_b1=tensors["base.enc_b1"],
            enc_w2=tensors["base.enc_w2"], enc_b2=tensors["base.enc_b2"],
            pln_w1=tensors["base.pln_w1"], pln_b1=tensors["base.pln_b1"],
            pln_w2=tensors["base.pln_w2"], pln_b2=tensors["base.pln_b2"],
            n_code=spec.n_code, token_scale=spec.token_scale)
        clf = GroupClassifier(w1=tensors["clf.w1"], b1=tensors["clf.b1"],
                              w2=tensors["clf.w2"], b2=tensors["clf.b2"])
        gp = GpParams(
            log_lengthscale=float(tensors["gp.log_lengthscale"]),
            log_outputscale=float(tensors["gp.log_outputscale"]),
            log_noise_recon=float(tensors["gp.log_noise_recon"]),
            log_noise_traj=float(tensors["gp.log_noise_traj"]))
        return cls(stage=header["stage"], model=Model(cb, base, clf, gp),
                   train_config=cfg, model_spec=spec)


def _config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["sigma_clamp"] = list(cfg.sigma_clamp)
    return d
