"""Training objectives: reconstruction, GP supervision, and teacher regularization.

All losses are built as autodiff expressions; targets (original tokens,
ground truth, teacher outputs) must be passed as constants so no gradient
flows into them. The variance-weighted form is the standard heteroscedastic
Gaussian NLL, task_loss / sigma^2 + log(sigma), with sigma clamped to a
configurable band so the total stays bounded below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor, as_tensor
from .codebook import Codebook, admissible_groups
from .core import traj_distance, Trajectory

TERM_NAMES = (
    "recon_ego", "recon_agent", "ortho_ego", "ortho_agent",
    "plan_nll", "motion_nll", "class_ce_ego", "class_ce_agent",
    "triplet_ego", "triplet_agent", "kl_ego", "kl_agent",
)

DEFAULT_SIGMA_CLAMP = (1e-3, 1e3)
DEFAULT_TRIPLET_MARGIN = 1.0
_NORM_EPS = 1e-12


@dataclass
class LossBreakdown:
    """Named loss terms plus the weights that combine them."""

    terms: dict[str, Tensor]
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> Tensor:
        out = Tensor(0.0)
        for name, t in self.terms.items():
            out = autodiff.add(out, autodiff.mul(t, self.weights.get(name, 1.0)))
        return out

    def value(self, name: str) -> float:
        return self.terms[name].item()

    def values(self) -> dict[str, float]:
        return {k: t.item() for k, t in self.terms.items()}

    def total_value(self) -> float:
        return self.total.item()

    def first_nonfinite(self) -> str | None:
        for name, t in self.terms.items():
            if not np.all(np.isfinite(t.data)):
                return name
        return None

    def merged(self, other: "LossBreakdown") -> "LossBreakdown":
        terms = dict(self.terms)
        for k, t in other.terms.items():
            terms[k] = autodiff.add(terms[k], t) if k in terms else t
        weights = dict(self.weights)
        weights.update(other.weights)
        return LossBreakdown(terms, weights)


def _logsumexp(x: Tensor) -> Tensor:
    m = float(np.max(x.data))
    return autodiff.add(autodiff.log(autodiff.tsum(autodiff.exp(autodiff.sub(x, m)))), m)


def log_softmax(x: Tensor) -> Tensor:
    return autodiff.sub(x, _logsumexp(x))


def cross_entropy(logits: Tensor, admissible: Sequence[int], label: int) -> Tensor:
    """-log softmax probability of ``label`` among the admissible groups."""
    ids = list(admissible)
    sub = autodiff.gather0(logits, np.asarray(ids, dtype=np.intp))
    ls = log_softmax(sub)
    picked = autodiff.gather0(ls, np.array([ids.index(label)], dtype=np.intp))
    return autodiff.mul(autodiff.reshape(picked, ()), -1.0)


def kl_divergence(student_logits: Tensor, teacher_logits: Tensor,
                  admissible: Sequence[int]) -> Tensor:
    """KL(softmax(student) || softmax(teacher)) over the admissible set."""
    idx = np.asarray(list(admissible), dtype=np.intp)
    ls_s = log_softmax(autodiff.gather0(student_logits, idx))
    ls_t = log_softmax(autodiff.gather0(as_tensor(teacher_logits).detach(), idx))
    p_s = autodiff.exp(ls_s)
    return autodiff.tsum(autodiff.mul(p_s, autodiff.sub(ls_s, ls_t)))


def heteroscedastic_nll(task_loss: Tensor, variance: Tensor,
                        sigma_clamp: tuple[float, float] = DEFAULT_SIGMA_CLAMP) -> Tensor:
    """task_loss / sigma^2 + log sigma, with sigma = clamp(sqrt(variance))."""
    if np.any(variance.data <= 0.0):
        raise ValueError("non-positive variance in heteroscedastic loss")
    sigma = autodiff.clamp(autodiff.sqrt(variance), *sigma_clamp)
    return autodiff.add(autodiff.div(task_loss, autodiff.square(sigma)),
                        autodiff.log(sigma))


def traj_mse(pred_flat: Tensor, gt_flat) -> Tensor:
    """Mean over the 6 waypoints of squared point error."""
    d = autodiff.sub(pred_flat, as_tensor(gt_flat).detach())
    return autodiff.div(autodiff.tsum(autodiff.square(d)), 6.0)


def sum_sq(x: Tensor) -> Tensor:
    return autodiff.tsum(autodiff.square(x))


def orthogonality(basis: Tensor) -> Tensor:
    """Squared Frobenius distance of B B^T from the identity."""
    gram = autodiff.matmul(basis, autodiff.transpose(basis))
    eye = np.eye(gram.data.shape[0])
    return sum_sq(autodiff.sub(gram, eye))


AnchorFn = Callable[[int], Tensor]


def _anchor_fn(source) -> AnchorFn:
    if isinstance(source, Codebook):
        return lambda gid: Tensor(source.group(gid).token_anchor)
    if callable(source):
        return source
    raise TypeError("anchors must be a Codebook or a gid -> Tensor callable")


def triplet_term(anchor_token, positives: Sequence[int], negatives: Sequence[int],
                 anchors, margin: float = DEFAULT_TRIPLET_MARGIN) -> Tensor:
    """Mean hinge over the 9 (positive, negative) anchor pairs.

    Distances are Euclidean between the token and each group's token anchor.
    """
    pos, neg = list(positives), list(negatives)
    if set(pos) & set(neg):
        raise ValueError(f"overlapping positive/negative sets: {sorted(set(pos) & set(neg))}")
    fn = _anchor_fn(anchors)
    tok = as_tensor(anchor_token)

    def dist(gid: int) -> Tensor:
        d = autodiff.sub(tok, fn(gid))
        return autodiff.sqrt(autodiff.add(sum_sq(d), _NORM_EPS))

    d_pos = [dist(g) for g in pos]
    d_neg = [dist(g) for g in neg]
    total = Tensor(0.0)
    for dp in d_pos:
        for dn in d_neg:
            total = autodiff.add(
                total, autodiff.relu(autodiff.add(autodiff.sub(dp, dn), margin)))
    return autodiff.div(total, float(len(d_pos) * len(d_neg)))


def select_triplet_classes(cb: Codebook, label_group: int) -> tuple[list[int], list[int]]:
    """Positive/negative class ids for the triplet terms.

    Ego: positives are the 3 same-command groups with the nearest trajectory
    anchors (excluding the label); negatives the 3 nearest groups of other
    commands. Agent: 3 nearest / 3 farthest agent groups.
    """
    g = cb.group(label_group)
    anchor = Trajectory.from_flat(g.traj_anchor)

    def by_dist(ids):
        return sorted(
            ids, key=lambda i: (traj_distance(
                anchor, Trajectory.from_flat(cb.group(i).traj_anchor)), i))

    if g.role.kind == "ego":
        same = [i for i in cb.command_groups[g.role.command] if i != label_group]
        other = [i for cmd, ids in cb.command_groups.items()
                 if cmd != g.role.command for i in ids]
        pos_pool, neg_pool = by_dist(same), by_dist(other)
        if len(pos_pool) < 3 or len(neg_pool) < 3:
            raise ValueError("not enough groups for triplet selection")
        return pos_pool[:3], neg_pool[:3]

    others = [i for i in cb.agent_group_ids if i != label_group]
    ranked = by_dist(others)
    if len(ranked) < 6:
        raise ValueError("not enough agent groups for triplet selection")
    return ranked[:3], ranked[-3:]


def loss_rec(e, e_hat: Tensor, var_e: Tensor,
             agent_tokens: Sequence, agent_hats: Sequence[Tensor],
             agent_vars: Sequence[Tensor],
             ego_basis: Tensor, agent_bases: Sequence[Tensor],
             weights: Mapping[str, float] | None = None,
             sigma_clamp: tuple[float, float] = DEFAULT_SIGMA_CLAMP) -> LossBreakdown:
    """Token reconstruction loss plus basis orthogonality.

    ``e`` and ``agent_tokens`` are the fixed targets and must be constants;
    agent terms are summed over the scene's agents and orthogonality is
    applied once per distinct involved basis.
    """
    zero = Tensor(0.0)
    recon_ego = heteroscedastic_nll(
        sum_sq(autodiff.sub(e_hat, as_tensor(e).detach())), var_e, sigma_clamp)
    recon_agent = zero
    for tok, hat, var in zip(agent_tokens, agent_hats, agent_vars):
        recon_agent = autodiff.add(
            recon_agent,
            heteroscedastic_nll(sum_sq(autodiff.sub(hat, as_tensor(tok).detach())),
                                var, sigma_clamp))
    ortho_agent = zero
    seen = {id(ego_basis)}
    for b in agent_bases:
        if id(b) in seen:
            continue
        seen.add(id(b))
        ortho_agent = autodiff.add(ortho_agent, orthogonality(b))
    return LossBreakdown(
        terms={
            "recon_ego": recon_ego,
            "recon_agent": recon_agent,
            "ortho_ego": orthogonality(ego_basis),
            "ortho_agent": ortho_agent,
        },
        weights=dict(weights or {}),
    )


@dataclass
class SupRoleInput:
    """One token's GP outputs plus supervision targets for loss_sup."""

    pred_mean: Tensor  # (12,)
    variance: Tensor  # scalar
    logits: Tensor  # full-length classifier logits (unmasked values suffice)
    admissible: Sequence[int]
    gt_flat: np.ndarray  # (12,)
    label: int
    token: Tensor | np.ndarray
    positives: Sequence[int]
    negatives: Sequence[int]


def loss_sup(ego: SupRoleInput, agents: Sequence[SupRoleInput], anchors,
             weights: Mapping[str, float] | None = None,
             sigma_clamp: tuple[float, float] = DEFAULT_SIGMA_CLAMP,
             margin: float = DEFAULT_TRIPLET_MARGIN) -> LossBreakdown:
    """Variance-weighted GP supervision: planning/motion NLL, class CE, triplets."""
    zero = Tensor(0.0)
    terms = {
        "plan_nll": heteroscedastic_nll(traj_mse(ego.pred_mean, ego.gt_flat),
                                        ego.variance, sigma_clamp),
        "class_ce_ego": cross_entropy(ego.logits, ego.admissible, ego.label),
        "triplet_ego": triplet_term(ego.token, ego.positives, ego.negatives,
                                    anchors, margin),
        "motion_nll": zero,
        "class_ce_agent": zero,
        "triplet_agent": zero,
    }
    for a in agents:
        terms["motion_nll"] = autodiff.add(
            terms["motion_nll"],
            heteroscedastic_nll(traj_mse(a.pred_mean, a.gt_flat), a.variance,
                                sigma_clamp))
        terms["class_ce_agent"] = autodiff.add(
            terms["class_ce_agent"], cross_entropy(a.logits, a.admissible, a.label))
        terms["triplet_agent"] = autodiff.add(
            terms["triplet_agent"],
            triplet_term(a.token, a.positives, a.negatives, anchors, margin))
    return LossBreakdown(terms=terms, weights=dict(weights or {}))


@dataclass
class StudentRoleOutput:
    """Base-model outputs entering the teacher-regularized loss."""

    traj_flat: Tensor  # (12,)
    logits: Tensor
    admissible: Sequence[int]
    token: Tensor


@dataclass
class TeacherRoleOutput:
    """Frozen GP-module outputs acting as targets (constants)."""

    mean_flat: np.ndarray  # (12,)
    variance: float
    logits: np.ndarray
    admissible: Sequence[int]
    label: int  # argmax of the teacher logits
    positives: Sequence[int]
    negatives: Sequence[int]


def loss_gp_teacher(student_ego: StudentRoleOutput, teacher_ego: TeacherRoleOutput,
                    student_agents: Sequence[StudentRoleOutput],
                    teacher_agents: Sequence[TeacherRoleOutput], anchors,
                    weights: Mapping[str, float] | None = None,
                    sigma_clamp: tuple[float, float] = DEFAULT_SIGMA_CLAMP,
                    margin: float = DEFAULT_TRIPLET_MARGIN) -> LossBreakdown:
    """Distillation of the base model against the GP module, no ground truth."""
    def role_terms(student: StudentRoleOutput, teacher: TeacherRoleOutput):
        if list(student.admissible) != list(teacher.admissible):
            raise ValueError("admissible-set mismatch between student and teacher")
        var = Tensor(float(teacher.variance))
        plan = heteroscedastic_nll(traj_mse(student.traj_flat, teacher.mean_flat),
                                   var, sigma_clamp)
        ce = cross_entropy(student.logits, student.admissible, teacher.label)
        trip = triplet_term(student.token, teacher.positives, teacher.negatives,
                            anchors, margin)
        kl = kl_divergence(student.logits, Tensor(teacher.logits), student.admissible)
        return plan, ce, trip, kl

    plan, ce, trip, kl = role_terms(student_ego, teacher_ego)
    terms = {
        "plan_nll": plan, "class_ce_ego": ce, "triplet_ego": trip, "kl_ego": kl,
        "motion_nll": Tensor(0.0), "class_ce_agent": Tensor(0.0),
        "triplet_agent": Tensor(0.0), "kl_agent": Tensor(0.0),
    }
    for s, t in zip(student_agents, teacher_agents):
        plan, ce, trip, kl = role_terms(s, t)
        terms["motion_nll"] = autodiff.add(terms["motion_nll"], plan)
        terms["class_ce_agent"] = autodiff.add(terms["class_ce_agent"], ce)
        terms["triplet_agent"] = autodiff.add(terms["triplet_agent"], trip)
        terms["kl_agent"] = autodiff.add(terms["kl_agent"], kl)
    return LossBreakdown(terms=terms, weights=dict(weights or {}))
