import math

import numpy as np
import pytest

from bifair.recmodel import (Batch, EvalCounter, ProjectorParams, group_batch_eval,
                             infonce_loss, init_projector, load_model, loss_grad_theta,
                             loss_grad_z, project, save_model, score)
from conftest import make_batch, make_dataset, make_groups


def fd_theta(theta, Z, batch, hist, tau, h=1e-5, **kw):
    flat = theta.flatten()
    out = np.empty_like(flat)
    for k in range(flat.size):
        fp, fm = flat.copy(), flat.copy()
        fp[k] += h
        fm[k] -= h
        lp = infonce_loss(theta.with_flat(fp), Z, batch, hist, tau, **kw)
        lm = infonce_loss(theta.with_flat(fm), Z, batch, hist, tau, **kw)
        out[k] = (lp - lm) / (2 * h)
    return out


def fd_z(theta, Z, batch, hist, tau, rows, h=1e-5, **kw):
    out = np.zeros((len(rows), Z.shape[1]))
    for r, row in enumerate(rows):
        for col in range(Z.shape[1]):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[row, col] += h
            Zm[row, col] -= h
            lp = infonce_loss(theta, Zp, batch, hist, tau, **kw)
            lm = infonce_loss(theta, Zm, batch, hist, tau, **kw)
            out[r, col] = (lp - lm) / (2 * h)
    return out.ravel()


def rel_err(a, b):
    scale = max(np.abs(b).max(), 1e-10)
    return np.abs(a - b).max() / scale


class TestProject:
    def test_identity_map(self):
        theta = ProjectorParams("linear", {"W": np.eye(3), "b": np.zeros(3)})
        z = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(project(theta, z), z)

    def test_hand_matrix_product(self):
        theta = ProjectorParams("linear", {"W": np.array([[1.0, 0.0], [0.0, 3.0]])})
        assert np.array_equal(project(theta, np.array([1.0, 2.0])), [1.0, 6.0])

    def test_mlp2_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        theta = init_projector("mlp2", 4, 3, hidden=5, bias=True, seed=1)
        z = rng.standard_normal(4)
        t = theta.tensors
        hidden = np.empty(5)
        for j in range(5):  # naive two-loop evaluation
            hidden[j] = math.tanh(sum(z[a] * t["W1"][a, j] for a in range(4)) + t["b1"][j])
        expected = np.empty(3)
        for k in range(3):
            expected[k] = sum(hidden[j] * t["W2"][j, k] for j in range(5)) + t["b2"][k]
        assert np.allclose(project(theta, z), expected, atol=1e-12)

    def test_shape_mismatch(self):
        theta = init_projector("linear", 4, 3, seed=0)
        with pytest.raises(ValueError, match="d_sem"):
            project(theta, np.ones(5))


class TestScore:
    def test_self_cosine(self):
        v = np.array([0.3, -0.4, 1.0])
        assert score(v, v, tau=1.0) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert score(np.array([1.0, 0.0]), np.array([0.0, 2.0]), tau=0.5) == 0.0

    def test_hand_value(self):
        s = score(np.array([1.0, 0.0]), np.array([1.0, 1.0]), tau=0.1)
        assert s == pytest.approx((1 / math.sqrt(2)) / 0.1, abs=1e-4)
        assert s == pytest.approx(7.0711, abs=1e-4)

    def test_zero_vector_warns(self):
        with pytest.warns(UserWarning, match="zero vector"):
            assert score(np.zeros(3), np.ones(3), tau=1.0) == 0.0


def one_pair_batch(pos, neg):
    return Batch(users=np.array([0]), pos=np.array([pos]),
                 negs=np.array([[neg]]), pair_group=np.array([0]))


class TestInfoNCE:
    def test_symmetric_case_is_ln2(self):
        Z = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        theta = ProjectorParams("linear", {"W": np.eye(2)})
        batch = one_pair_batch(1, 2)  # identical pos and neg rows
        loss = infonce_loss(theta, Z, batch, [np.array([0])], tau=0.7)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_dominant_positive_drives_loss_to_zero(self):
        Z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        theta = ProjectorParams("linear", {"W": np.eye(2)})
        batch = one_pair_batch(1, 2)
        loss = infonce_loss(theta, Z, batch, [np.array([0])], tau=0.02)
        assert loss < 1e-10

    def test_matches_naive_oracle(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("mlp2", Z.shape[1], 4, hidden=6, seed=3)
        batch = make_batch(ds, groups, num_pairs=4, num_negs=3, seed=4)
        loss = infonce_loss(theta, Z, batch, ds.train, tau=0.2)
        total = 0.0
        for p in range(len(batch)):  # per-pair loop with scalar ops
            hist = ds.train[batch.users[p]]
            zu = Z[np.sort(hist)].mean(axis=0)
            eu = project(theta, zu)
            s_pos = score(eu, project(theta, Z[batch.pos[p]]), 0.2)
            s_negs = [score(eu, project(theta, Z[j]), 0.2) for j in batch.negs[p]]
            denom = math.exp(s_pos) + sum(math.exp(s) for s in s_negs)
            total += -math.log(math.exp(s_pos) / denom)
        assert loss == pytest.approx(total / len(batch), abs=1e-10)

    def test_negative_order_irrelevant(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=5)
        batch = make_batch(ds, groups, num_pairs=5, num_negs=4, seed=6)
        shuffled = Batch(users=batch.users, pos=batch.pos,
                         negs=batch.negs[:, ::-1], pair_group=batch.pair_group)
        a = infonce_loss(theta, Z, batch, ds.train, tau=0.3)
        b = infonce_loss(theta, Z, shuffled, ds.train, tau=0.3)
        assert a == pytest.approx(b, abs=1e-12)

    def test_cosine_scale_invariance(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, bias=False, seed=7)
        scaled = ProjectorParams("linear", {"W": 3.7 * theta.tensors["W"]})
        batch = make_batch(ds, groups, num_pairs=5, num_negs=3, seed=8)
        a = infonce_loss(theta, Z, batch, ds.train, tau=0.4)
        b = infonce_loss(scaled, Z, batch, ds.train, tau=0.4)
        assert a == pytest.approx(b, abs=1e-10)

    def test_logsumexp_stable_for_huge_scores(self):
        Z = np.array([[1e4, 0.0], [1e4, 1.0], [-1e4, 0.5]])
        theta = ProjectorParams("linear", {"W": np.eye(2)})
        batch = one_pair_batch(1, 2)
        loss = infonce_loss(theta, Z, batch, [np.array([0])], tau=1.0,
                            scoring="dot")
        assert np.isfinite(loss)

    def test_empty_batch_rejected(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=0)
        empty = Batch(users=np.empty(0, dtype=int), pos=np.empty(0, dtype=int),
                      negs=np.empty((0, 2), dtype=int), pair_group=np.empty(0, dtype=int))
        with pytest.raises(ValueError, match="empty batch"):
            infonce_loss(theta, Z, empty, ds.train, tau=0.1)


@pytest.mark.parametrize("kind,bias", [("linear", True), ("linear", False),
                                       ("mlp2", True), ("mlp2", False)])
class TestGradients:
    def test_theta_gradient_matches_fd(self, kind, bias):
        ds = make_dataset(num_users=3, num_items=7, hist_len=3, seed=10)
        groups = make_groups(7, 2, seed=11)
        rng = np.random.default_rng(12)
        Z = rng.standard_normal((7, 4))
        theta = init_projector(kind, 4, 3, hidden=4, bias=bias, seed=13)
        batch = make_batch(ds, groups, num_pairs=5, num_negs=3, seed=14)
        g = loss_grad_theta(theta, Z, batch, ds.train, tau=0.3)
        fd = fd_theta(theta, Z, batch, ds.train, 0.3)
        assert rel_err(g.values, fd) < 1e-5

    def test_z_gradient_matches_fd(self, kind, bias):
        ds = make_dataset(num_users=3, num_items=7, hist_len=3, seed=20)
        groups = make_groups(7, 2, seed=21)
        rng = np.random.default_rng(22)
        Z = rng.standard_normal((7, 4))
        theta = init_projector(kind, 4, 3, hidden=4, bias=bias, seed=23)
        batch = make_batch(ds, groups, num_pairs=4, num_negs=2, seed=24)
        g = loss_grad_z(theta, Z, batch, ds.train, tau=0.3)
        fd = fd_z(theta, Z, batch, ds.train, 0.3, rows=g.rows)
        assert rel_err(g.values, fd) < 1e-5


class TestGradientStructure:
    def test_untouched_rows_absent(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=1)
        batch = Batch(users=np.array([0]), pos=np.array([ds.train[0][0]]),
                      negs=np.array([[ds.train[0][0] ^ 1]]),
                      pair_group=np.array([0]))
        g = loss_grad_z(theta, Z, batch, ds.train, tau=0.2)
        touched = set(ds.train[0].tolist()) | {int(batch.pos[0]), int(batch.negs[0, 0])}
        assert set(g.rows.tolist()) == touched
        # rows outside the touched set carry an implicit zero: perturbing
        # them cannot change the loss
        untouched = [i for i in range(ds.num_items) if i not in touched]
        if untouched:
            Zp = Z.copy()
            Zp[untouched[0]] += 0.5
            assert infonce_loss(theta, Zp, batch, ds.train, 0.2) == \
                pytest.approx(infonce_loss(theta, Z, batch, ds.train, 0.2), abs=1e-15)

    def test_duplicated_pairs_leave_mean_gradient_unchanged(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("mlp2", Z.shape[1], 4, hidden=5, seed=2)
        batch = make_batch(ds, groups, num_pairs=4, num_negs=3, seed=3)
        doubled = Batch(users=np.tile(batch.users, 2), pos=np.tile(batch.pos, 2),
                        negs=np.tile(batch.negs, (2, 1)),
                        pair_group=np.tile(batch.pair_group, 2))
        a = loss_grad_theta(theta, Z, batch, ds.train, tau=0.25)
        b = loss_grad_theta(theta, Z, doubled, ds.train, tau=0.25)
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_pooling_factor_in_history_rows(self):
        # same pair, history of size 1 vs size 2: FD confirms the 1/k scaling
        rng = np.random.default_rng(30)
        Z = rng.standard_normal((5, 3))
        theta = init_projector("linear", 3, 3, seed=31)
        batch = one_pair_batch(2, 3)
        for hist in ([np.array([0])], [np.array([0, 1])]):
            g = loss_grad_z(theta, Z, batch, hist, tau=0.3)
            fd = fd_z(theta, Z, batch, hist, 0.3, rows=g.rows)
            assert rel_err(g.values, fd) < 1e-6


class TestGroupEval:
    def test_group_losses_match_filtered_oracle(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=40)
        batch = make_batch(ds, groups, num_pairs=8, num_negs=3, seed=41)
        losses, counts, _ = group_batch_eval(theta, Z, batch, ds.train, 0.2,
                                             groups.num_groups, wrt=None)
        for n in range(groups.num_groups):
            mask = batch.pair_group == n
            if not mask.any():
                assert np.isnan(losses[n])
                continue
            sub = Batch(users=batch.users[mask], pos=batch.pos[mask],
                        negs=batch.negs[mask], pair_group=batch.pair_group[mask])
            assert losses[n] == pytest.approx(
                infonce_loss(theta, Z, sub, ds.train, 0.2), abs=1e-12)

    def test_group_gradient_matches_filtered_gradient(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=42)
        batch = make_batch(ds, groups, num_pairs=8, num_negs=3, seed=43)
        _, _, grads = group_batch_eval(theta, Z, batch, ds.train, 0.2,
                                       groups.num_groups, wrt="theta")
        for n in range(groups.num_groups):
            mask = batch.pair_group == n
            if not mask.any():
                assert grads[n] is None
                continue
            sub = Batch(users=batch.users[mask], pos=batch.pos[mask],
                        negs=batch.negs[mask], pair_group=batch.pair_group[mask])
            direct = loss_grad_theta(theta, Z, sub, ds.train, 0.2)
            assert np.allclose(grads[n].values, direct.values, atol=1e-12)

    def test_counter_counts_passes_not_groups(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=44)
        batch = make_batch(ds, groups, num_pairs=6, num_negs=2, seed=45)
        counter = EvalCounter()
        group_batch_eval(theta, Z, batch, ds.train, 0.2, groups.num_groups,
                         wrt="theta", counter=counter)
        group_batch_eval(theta, Z, batch, ds.train, 0.2, groups.num_groups,
                         wrt="z", counter=counter)
        assert counter.theta_evals == 1 and counter.z_evals == 1


def test_model_roundtrip(tmp_path):
    theta = init_projector("mlp2", 6, 4, hidden=5, bias=True, seed=50)
    save_model(tmp_path, theta)
    back = load_model(tmp_path)
    assert back.kind == "mlp2" and back.names() == theta.names()
    for k in theta.tensors:
        assert np.allclose(back.tensors[k], theta.tensors[k], atol=1e-6)
        assert back.tensors[k].shape == theta.tensors[k].shape


class TestVariantGradients:
    def test_dot_scoring_gradients_match_fd(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("mlp2", Z.shape[1], 4, hidden=4, seed=60)
        batch = make_batch(ds, groups, num_pairs=4, num_negs=3, seed=61)
        g = loss_grad_theta(theta, Z, batch, ds.train, tau=0.5, scoring="dot")
        fd = fd_theta(theta, Z, batch, ds.train, 0.5, scoring="dot")
        assert rel_err(g.values, fd) < 1e-5
        gz = loss_grad_z(theta, Z, batch, ds.train, tau=0.5, scoring="dot")
        fz = fd_z(theta, Z, batch, ds.train, 0.5, rows=gz.rows, scoring="dot")
        assert rel_err(gz.values, fz) < 1e-5

    def test_sum_pooling_gradients_match_fd(self, tiny_world):
        ds, groups, Z = tiny_world
        theta = init_projector("linear", Z.shape[1], 4, seed=62)
        batch = make_batch(ds, groups, num_pairs=4, num_negs=2, seed=63)
        gz = loss_grad_z(theta, Z, batch, ds.train, tau=0.3, pooling="sum")
        fz = fd_z(theta, Z, batch, ds.train, 0.3, rows=gz.rows, pooling="sum")
        assert rel_err(gz.values, fz) < 1e-5
