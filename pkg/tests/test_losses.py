"""Loss closed forms, the brute-force triplet oracle, and gradient checks."""

from __future__ import annotations

import numpy as np
import pytest

from gptraj import autodiff
from gptraj.autodiff import Tensor
from gptraj.codebook import init_basis_tokens, sample_and_cluster
from gptraj.losses import (DEFAULT_SIGMA_CLAMP, LossBreakdown, SupRoleInput,
                           StudentRoleOutput, TeacherRoleOutput, cross_entropy,
                           heteroscedastic_nll, kl_divergence, log_softmax,
                           loss_gp_teacher, loss_rec, loss_sup, orthogonality,
                           select_triplet_classes, sum_sq, traj_mse,
                           triplet_term)
from gptraj.trainer import Adam

from oracles import triplet_oracle

from test_codebook import corpus


@pytest.fixture(scope="module")
def cb():
    c = sample_and_cluster(corpus(), 12, 7, group_size=4, token_dim=5, seed=2)
    return init_basis_tokens(c, rng_seed=2)


def test_recon_nll_zero_at_perfect_unit_variance():
    e = np.array([0.3, -0.2, 0.5])
    bd = loss_rec(e, Tensor(e.copy()), Tensor(np.array(1.0)), [], [], [],
                  ego_basis=Tensor(np.eye(3)), agent_bases=[])
    assert bd.value("recon_ego") == pytest.approx(0.0)
    assert bd.value("ortho_ego") == pytest.approx(0.0)  # orthonormal rows


def test_recon_nll_unit_error_unit_variance():
    e = np.zeros(4)
    e_hat = np.array([1.0, 0.0, 0.0, 0.0])  # unit offset
    bd = loss_rec(e, Tensor(e_hat), Tensor(np.array(1.0)), [], [], [],
                  ego_basis=Tensor(np.eye(4)), agent_bases=[])
    assert bd.value("recon_ego") == pytest.approx(1.0)


def test_recon_rejects_nonpositive_variance():
    with pytest.raises(ValueError, match="variance"):
        heteroscedastic_nll(Tensor(np.array(1.0)), Tensor(np.array(0.0)))


def test_ortho_nonzero_for_correlated_rows():
    b = np.array([[1.0, 0.0], [1.0, 0.1]])
    assert orthogonality(Tensor(b)).item() > 0.5


def test_ortho_deduplicates_shared_groups():
    basis = Tensor(np.eye(3) * 2.0)
    single = orthogonality(basis).item()
    bd = loss_rec(np.zeros(3), Tensor(np.zeros(3)), Tensor(np.array(1.0)),
                  [np.zeros(3)] * 2, [Tensor(np.zeros(3))] * 2,
                  [Tensor(np.array(1.0))] * 2,
                  ego_basis=basis, agent_bases=[basis, basis])
    assert bd.value("ortho_ego") == pytest.approx(single)
    assert bd.value("ortho_agent") == pytest.approx(0.0)


def test_plan_nll_closed_form(cb):
    # mean squared waypoint error 4, sigma = 2 -> 4/4 + log 2
    gt = np.zeros(12)
    pred = np.full(12, np.sqrt(2.0))  # each waypoint error^2 = 2+2 = 4
    pos, neg = select_triplet_classes(cb, 0)
    ego = SupRoleInput(pred_mean=Tensor(pred), variance=Tensor(np.array(4.0)),
                       logits=Tensor(np.zeros(cb.n_code)),
                       admissible=list(range(cb.n_code)), gt_flat=gt, label=0,
                       token=np.zeros(5), positives=pos, negatives=neg)
    bd = loss_sup(ego, [], anchors=cb)
    assert bd.value("plan_nll") == pytest.approx(4.0 / 4.0 + np.log(2.0))


def test_class_ce_zero_temperature_limit(cb):
    logits = np.full(cb.n_code, -200.0)
    logits[3] = 200.0
    ce = cross_entropy(Tensor(logits), list(range(cb.n_code)), 3)
    assert ce.item() == pytest.approx(0.0, abs=1e-12)


def test_perfect_prediction_all_task_terms_zero(cb):
    gt = np.arange(12.0)
    pos, neg = select_triplet_classes(cb, 1)
    logits = np.full(cb.n_code, -50.0)
    logits[1] = 50.0
    token_far = cb.group(pos[0]).token_anchor  # at a positive anchor
    ego = SupRoleInput(pred_mean=Tensor(gt.copy()), variance=Tensor(np.array(1.0)),
                       logits=Tensor(logits), admissible=list(range(cb.n_code)),
                       gt_flat=gt, label=1, token=token_far, positives=pos,
                       negatives=neg)
    bd = loss_sup(ego, [], anchors=cb)
    assert bd.value("plan_nll") == pytest.approx(0.0, abs=1e-12)
    assert bd.value("class_ce_ego") == pytest.approx(0.0, abs=1e-12)


def test_triplet_satisfied_margin_is_zero(cb):
    pos, neg = select_triplet_classes(cb, 0)
    anchor = cb.group(pos[0]).token_anchor.copy()
    # negatives far beyond the margin
    for gid in neg:
        cbg = cb.group(gid)
        cbg.basis_tokens = cbg.basis_tokens + 50.0
    try:
        val = triplet_term(anchor, pos, neg, cb, margin=1.0).item()
        assert val == pytest.approx(0.0)
    finally:
        for gid in neg:
            cbg = cb.group(gid)
            cbg.basis_tokens = cbg.basis_tokens - 50.0


def test_triplet_equidistant_hinges_at_margin():
    anchors = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]),
               2: np.array([-1.0, 0.0]), 3: np.array([0.0, -1.0]),
               4: np.array([1.0, 0.0]) / np.sqrt(2) + np.array([0.0, 1.0]) / np.sqrt(2),
               5: -np.array([1.0, 0.0]) / np.sqrt(2) - np.array([0.0, 1.0]) / np.sqrt(2)}
    fn = lambda gid: Tensor(anchors[gid])
    val = triplet_term(np.zeros(2), [0, 1, 2], [3, 4, 5], fn, margin=0.7)
    assert val.item() == pytest.approx(0.7, abs=1e-6)


def test_triplet_matches_bruteforce_oracle(cb):
    rng = np.random.default_rng(6)
    for _ in range(20):
        label = int(rng.integers(cb.n_code))
        pos, neg = select_triplet_classes(cb, label)
        token = rng.normal(size=5)
        got = triplet_term(token, pos, neg, cb, margin=1.0).item()
        want = triplet_oracle(token, [cb.group(g).token_anchor for g in pos],
                              [cb.group(g).token_anchor for g in neg], 1.0)
        assert got == pytest.approx(want, rel=1e-10)


def test_triplet_rejects_overlap(cb):
    with pytest.raises(ValueError, match="overlapping"):
        triplet_term(np.zeros(5), [0, 1, 2], [2, 3, 4], cb)


def test_select_triplet_classes_disjoint_and_admissible(cb):
    for label in range(cb.n_code):
        pos, neg = select_triplet_classes(cb, label)
        assert len(pos) == len(neg) == 3
        assert not set(pos) & set(neg)
        assert label not in pos and label not in neg
        role = cb.group(label).role
        if role.kind == "ego":
            assert all(cb.group(p).role == role for p in pos)
            assert all(cb.group(n).role.kind == "ego"
                       and cb.group(n).role.command != role.command for n in neg)
        else:
            assert all(cb.group(g).role.kind == "agent" for g in pos + neg)


def test_kl_identity_and_uniform_cases():
    adm = [2, 5, 7, 9]
    logits = np.zeros(12)
    logits[adm] = [0.3, -0.1, 0.8, 0.2]
    assert kl_divergence(Tensor(logits), Tensor(logits.copy()), adm).item() \
        == pytest.approx(0.0, abs=1e-12)
    student = np.full(12, -300.0)
    student[adm[0]] = 300.0  # one-hot in the zero-temperature limit
    teacher = np.zeros(12)  # uniform over the 4 admissible groups
    kl = kl_divergence(Tensor(student), Tensor(teacher), adm)
    assert kl.item() == pytest.approx(np.log(4.0), abs=1e-9)


def _teacher_pair(cb, label, traj, logits, variance=1.0):
    pos, neg = select_triplet_classes(cb, label)
    adm = list(range(cb.n_code))
    teacher = TeacherRoleOutput(mean_flat=traj, variance=variance, logits=logits,
                                admissible=adm, label=label, positives=pos,
                                negatives=neg)
    token = cb.group(pos[0]).token_anchor
    student = StudentRoleOutput(traj_flat=Tensor(traj.copy()),
                                logits=Tensor(logits.copy()), admissible=adm,
                                token=Tensor(token.copy()))
    return student, teacher


def test_teacher_self_distillation_fixed_point(cb):
    # identical outputs, peaked logits, sigma = 1, token at a positive anchor
    # with negatives beyond the margin: every term vanishes
    label = 0
    pos, neg = select_triplet_classes(cb, label)
    for gid in neg:
        cb.group(gid).basis_tokens = cb.group(gid).basis_tokens + 50.0
    try:
        logits = np.full(cb.n_code, -80.0)
        logits[label] = 80.0
        traj = np.linspace(0, 5, 12)
        student, teacher = _teacher_pair(cb, label, traj, logits)
        bd = loss_gp_teacher(student, teacher, [], [], anchors=cb)
        assert bd.total_value() == pytest.approx(0.0, abs=1e-10)
    finally:
        for gid in neg:
            cb.group(gid).basis_tokens = cb.group(gid).basis_tokens - 50.0


def test_teacher_admissible_mismatch_raises(cb):
    logits = np.zeros(cb.n_code)
    traj = np.zeros(12)
    student, teacher = _teacher_pair(cb, 0, traj, logits)
    student.admissible = [0, 1]
    with pytest.raises(ValueError, match="admissible"):
        loss_gp_teacher(student, teacher, [], [], anchors=cb)


def test_total_is_weighted_sum():
    t = {"recon_ego": Tensor(np.array(2.0)), "plan_nll": Tensor(np.array(3.0))}
    bd = LossBreakdown(terms=t, weights={"recon_ego": 0.5})
    assert bd.total_value() == pytest.approx(0.5 * 2.0 + 3.0)


def test_loss_bounded_below_under_clamp():
    lo, hi = DEFAULT_SIGMA_CLAMP
    floor = np.log(lo)  # task >= 0, so log sigma bounds the term from below
    for var in (1e-12, 1e-4, 1.0, 1e8):
        val = heteroscedastic_nll(Tensor(np.array(0.0)),
                                  Tensor(np.array(var))).item()
        assert val >= floor - 1e-12


def test_optimal_sigma_squared_is_twice_task_loss():
    # analytic optimum of L/sigma^2 + log sigma at sigma^2 = 2L
    task = 2.0
    theta = autodiff.parameter(np.array(0.0))  # log sigma
    opt = Adam({"theta": theta}, lr=1e-2)
    for _ in range(500):
        sigma = autodiff.exp(theta)
        loss = autodiff.add(autodiff.div(task, autodiff.square(sigma)),
                            autodiff.log(sigma))
        grads = autodiff.grad(loss, {"theta": theta})
        opt.step(grads)
    sigma_sq = float(np.exp(2 * theta.data))
    assert abs(sigma_sq - 2 * task) / (2 * task) < 0.05


def _numeric_grad_scalar(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def test_loss_rec_gradients_match_fd(cb):
    rng = np.random.default_rng(3)
    gid = 0
    e = rng.normal(size=5)
    basis = autodiff.parameter(cb.group(gid).basis_tokens)
    log_noise = autodiff.parameter(np.array(np.log(0.3)))

    def build():
        anchor = autodiff.tmean(basis, axis=0)
        centered = autodiff.sub(basis, autodiff.reshape(anchor, (1, -1)))
        from gptraj.psdlinalg import kernel_matrix_t
        zero = Tensor(np.array(0.0))
        k_bb = kernel_matrix_t(basis, basis, zero, zero)
        k_star = autodiff.reshape(
            kernel_matrix_t(autodiff.reshape(Tensor(e), (1, -1)), basis, zero, zero),
            (-1,))
        e_hat = autodiff.add(anchor, autodiff.matmul(
            k_star, autodiff.solve_psd(k_bb, centered)))
        quad = autodiff.matmul(k_star, autodiff.solve_psd(k_bb, k_star))
        var = autodiff.add(autodiff.relu(autodiff.sub(Tensor(np.array(1.0)), quad)),
                           autodiff.exp(autodiff.mul(log_noise, 2.0)))
        return loss_rec(e, e_hat, var, [], [], [], ego_basis=basis,
                        agent_bases=[]).total

    loss = build()
    grads = autodiff.grad(loss, {"basis": basis, "log_noise": log_noise})
    for name, p in (("basis", basis), ("log_noise", log_noise)):
        fd = _numeric_grad_scalar(lambda: build().item(), p.data)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grads[name] - fd) / denom) < 1e-4
