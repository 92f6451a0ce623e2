import math

import numpy as np
import pytest

from pvit import distill
from pvit.distill import (
    HeadConfig,
    apply_head,
    dino_loss,
    ema_update,
    init_head_params,
    mim_loss,
    project,
    teacher_distribution,
    total_loss,
    update_center,
)
from pvit.errors import ConfigError, ContractViolation
from pvit.tensor import Tensor
from pvit.vit import EncodedFeatures


def scalar_softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def make_head(seed=0, in_dim=8, out_dim=6):
    cfg = HeadConfig(in_dim=in_dim, hidden_dim=12, bottleneck_dim=5, out_dim=out_dim)
    return cfg, init_head_params(cfg, np.random.default_rng(seed), "head_cls")


class TestProject:
    def test_without_patches_none(self):
        cfg, params = make_head()
        params.update(init_head_params(cfg, np.random.default_rng(1), "head_patch"))
        feats = EncodedFeatures(
            z_cls=Tensor(np.random.default_rng(2).random((3, 8), dtype=np.float32)),
            z_patches=Tensor(np.random.default_rng(3).random((3, 4, 8), dtype=np.float32)),
            grid=(2, 2),
        )
        out = project(feats, params, with_patches=False)
        assert out.y_patches is None and out.y_cls.shape == (3, 6)

    def test_identical_rows_project_identically(self):
        cfg, params = make_head()
        params.update(init_head_params(cfg, np.random.default_rng(1), "head_patch"))
        row = np.random.default_rng(4).random(8, dtype=np.float32)
        feats = EncodedFeatures(
            z_cls=Tensor(np.zeros((1, 8), dtype=np.float32)),
            z_patches=Tensor(np.tile(row, (1, 3, 1))),
            grid=(1, 3),
        )
        y = project(feats, params, with_patches=True).y_patches.data[0]
        np.testing.assert_array_equal(y[0], y[1])
        np.testing.assert_array_equal(y[0], y[2])

    def test_matches_layer_by_layer_scalar_oracle(self):
        cfg, params = make_head(seed=7)
        x = np.random.default_rng(8).standard_normal(8).astype(np.float32)

        # reference: run the head one layer at a time in plain numpy
        def gelu(v):
            from scipy.special import erf

            return 0.5 * v * (1.0 + erf(v / math.sqrt(2.0)))

        h = gelu(x @ params["head_cls.fc1.w"].data + params["head_cls.fc1.b"].data)
        h = gelu(h @ params["head_cls.fc2.w"].data + params["head_cls.fc2.b"].data)
        h = h @ params["head_cls.fc3.w"].data + params["head_cls.fc3.b"].data
        h = h / np.sqrt((h * h).sum() + 1e-12)
        v = params["head_cls.proto.v"].data
        w_eff = v / np.sqrt((v * v).sum(axis=1, keepdims=True))
        expected = h @ w_eff.T

        got = apply_head(Tensor(x[None]), params, "head_cls").data[0]
        np.testing.assert_allclose(got, expected, atol=1e-5)


class TestTeacherDistribution:
    def test_center_equal_logits_gives_uniform(self):
        logits = np.array([0.3, -1.2, 0.5, 2.0])
        p = teacher_distribution(logits, logits, 0.04)
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_zero_center_unit_temp_is_plain_softmax(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 7))
        p = teacher_distribution(logits, np.zeros(7), 1.0)
        for i in range(5):
            np.testing.assert_allclose(p[i], scalar_softmax(logits[i]), atol=1e-12)

    def test_smaller_temp_sharpens(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            logits = rng.standard_normal(9)
            if np.ptp(logits) < 1e-6:
                continue
            p_soft = teacher_distribution(logits, np.zeros(9), 0.07)
            p_sharp = teacher_distribution(logits, np.zeros(9), 0.04)
            assert p_sharp.max() > p_soft.max()

    def test_nonpositive_temp_rejected(self):
        with pytest.raises(ConfigError):
            teacher_distribution(np.ones(3), np.zeros(3), 0.0)


class TestUpdateCenter:
    def test_momentum_one_keeps_center(self):
        c = np.array([1.0, 2.0])
        out = update_center(c, np.random.default_rng(0).random((5, 2)), 1.0)
        np.testing.assert_array_equal(out, c)

    def test_momentum_zero_takes_batch_mean(self):
        batch = np.random.default_rng(1).random((6, 3))
        out = update_center(np.zeros(3), batch, 0.0)
        np.testing.assert_allclose(out, batch.mean(axis=0), atol=1e-12)

    def test_arithmetic(self):
        batch = np.full((4, 2), 3.0)
        out = update_center(np.zeros(2), batch, 0.9)
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_patch_logits_pool_positions(self):
        batch = np.arange(24, dtype=np.float64).reshape(2, 3, 4)  # (B, n, K)
        out = update_center(np.zeros(4), batch, 0.0)
        np.testing.assert_allclose(out, batch.reshape(-1, 4).mean(axis=0))

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractViolation):
            update_center(np.zeros(2), np.zeros((0, 2)), 0.5)


def dino_reference(teacher, student, tau_s, tau_t, center):
    """Brute-force pair/batch/prototype loops in plain python."""
    total, pairs = 0.0, 0
    for ti, t in enumerate(teacher):
        for si, s in enumerate(student):
            if si == ti:
                continue
            batch_terms = []
            for b in range(t.shape[0]):
                p_t = scalar_softmax((t[b] - center) / tau_t)
                log_p_s = (s[b] / tau_s) - np.log(np.exp(s[b] / tau_s - (s[b] / tau_s).max()).sum()) - (s[b] / tau_s).max()
                batch_terms.append(-(p_t * log_p_s).sum())
            total += np.mean(batch_terms)
            pairs += 1
    return total / pairs


class TestDinoLoss:
    def test_uniform_uniform_is_ln_k(self):
        k, b = 4, 3
        teacher = [np.zeros((b, k)), np.zeros((b, k))]
        student = [Tensor(np.zeros((b, k)), requires_grad=True) for _ in range(3)]
        loss = dino_loss(teacher, student, 0.1, 0.04, np.zeros(k))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(2)
        k = 8
        for _ in range(30):
            t = [rng.standard_normal((2, k)) for _ in range(2)]
            s = [Tensor(rng.standard_normal((2, k))) for _ in range(4)]
            center = rng.standard_normal(k) * 0.1
            loss = dino_loss(t, s, 0.1, 0.05, center).item()
            entropies = []
            for ti in range(2):
                p = teacher_distribution(t[ti], center, 0.05)
                entropies.append(-(p * np.log(p + 1e-300)).sum(axis=1).mean())
            assert loss >= min(entropies) - 1e-9

    def test_matches_bruteforce_pair_enumeration(self):
        rng = np.random.default_rng(3)
        b, k = 4, 10
        teacher = [rng.standard_normal((b, k)) for _ in range(2)]
        student = [Tensor(rng.standard_normal((b, k)).astype(np.float64)) for _ in range(8)]  # 2 global + 6 local
        center = rng.standard_normal(k) * 0.3
        got = dino_loss(teacher, student, 0.1, 0.04, center).item()
        want = dino_reference(teacher, [s.data for s in student], 0.1, 0.04, center)
        assert got == pytest.approx(want, abs=1e-6)

    def test_same_index_global_pair_excluded(self):
        rng = np.random.default_rng(4)
        b, k = 2, 5
        teacher = [rng.standard_normal((b, k)) for _ in range(2)]
        # only the two globals: included pairs are (t0,s1) and (t1,s0)
        student = [Tensor(rng.standard_normal((b, k))) for _ in range(2)]
        got = dino_loss(teacher, student, 0.1, 0.04, np.zeros(k)).item()
        want = dino_reference(teacher, [s.data for s in student], 0.1, 0.04, np.zeros(k))
        assert got == pytest.approx(want, abs=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            t = [rng.standard_normal((3, 6)) for _ in range(2)]
            s = [Tensor(rng.standard_normal((3, 6))) for _ in range(5)]
            assert dino_loss(t, s, 0.1, 0.04, np.zeros(6)).item() >= 0.0

    def test_teacher_count_enforced(self):
        with pytest.raises(ContractViolation):
            dino_loss([np.zeros((1, 2))], [Tensor(np.zeros((1, 2)))] * 2, 0.1, 0.04, np.zeros(2))


def mim_reference(teacher, student, masks, tau_s, tau_t, center):
    total, count = 0.0, 0
    for t, s, m in zip(teacher, student, masks):
        b, n, k = t.shape
        for bi in range(b):
            for i in range(n):
                if not m[bi, i]:
                    continue
                p_t = scalar_softmax((t[bi, i] - center) / tau_t)
                z = s[bi, i] / tau_s
                log_p_s = z - z.max() - np.log(np.exp(z - z.max()).sum())
                total += -(p_t * log_p_s).sum()
                count += 1
    return total / max(count, 1)


class TestMimLoss:
    def test_all_zero_mask_gives_zero_loss_and_zero_grads(self):
        rng = np.random.default_rng(6)
        b, n, k = 2, 5, 4
        teacher = [rng.standard_normal((b, n, k)) for _ in range(2)]
        student = [Tensor(rng.standard_normal((b, n, k)), requires_grad=True) for _ in range(2)]
        masks = [np.zeros((b, n), dtype=bool)] * 2
        with pytest.warns(UserWarning):
            loss = mim_loss(teacher, student, masks, 0.1, 0.04, np.zeros(k))
        assert loss.item() == 0.0
        loss.backward()
        for s in student:
            assert s.grad is not None
            np.testing.assert_array_equal(s.grad, np.zeros_like(s.data))

    def test_single_masked_position_uniform_k2_is_ln2(self):
        b, n, k = 1, 3, 2
        teacher = [np.zeros((b, n, k)), np.zeros((b, n, k))]
        student = [Tensor(np.zeros((b, n, k))) for _ in range(2)]
        mask0 = np.zeros((b, n), dtype=bool)
        mask0[0, 1] = True
        loss = mim_loss(teacher, student, [mask0, np.zeros((b, n), dtype=bool)], 0.1, 0.04, np.zeros(k))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_bruteforce_positional_oracle(self):
        rng = np.random.default_rng(7)
        b, n, k = 3, 8, 6
        teacher = [rng.standard_normal((b, n, k)) for _ in range(2)]
        student = [Tensor(rng.standard_normal((b, n, k)).astype(np.float64)) for _ in range(2)]
        masks = [rng.random((b, n)) < 0.3 for _ in range(2)]
        center = rng.standard_normal(k) * 0.2
        got = mim_loss(teacher, student, masks, 0.1, 0.04, center).item()
        want = mim_reference(teacher, [s.data for s in student], masks, 0.1, 0.04, center)
        assert got == pytest.approx(want, abs=1e-6)

    def test_unmasked_positions_get_zero_gradient(self):
        rng = np.random.default_rng(8)
        b, n, k = 2, 6, 4
        teacher = [rng.standard_normal((b, n, k)) for _ in range(2)]
        student = [Tensor(rng.standard_normal((b, n, k)), requires_grad=True) for _ in range(2)]
        masks = [rng.random((b, n)) < 0.4 for _ in range(2)]
        loss = mim_loss(teacher, student, masks, 0.1, 0.04, np.zeros(k))
        loss.backward()
        for s, m in zip(student, masks):
            np.testing.assert_array_equal(s.grad[~m], 0.0)
            assert np.abs(s.grad[m]).max() > 0

    def test_geometry_pairing_enforced(self):
        with pytest.raises(ContractViolation):
            mim_loss(
                [np.zeros((1, 3, 2))],
                [Tensor(np.zeros((1, 4, 2)))],
                [np.zeros((1, 4), dtype=bool)],
                0.1,
                0.04,
                np.zeros(2),
            )


class TestTotalLoss:
    def test_default_unit_weights(self):
        l1, l2 = Tensor(np.array(1.5)), Tensor(np.array(0.25))
        assert total_loss(l1, l2).item() == pytest.approx(1.75)

    def test_lambda2_zero_is_dino_only(self):
        l1, l2 = Tensor(np.array(2.0)), Tensor(np.array(5.0))
        assert total_loss(l1, l2, 1.0, 0.0).item() == pytest.approx(2.0)

    def test_weighted_arithmetic(self):
        l1, l2 = Tensor(np.array(9.0)), Tensor(np.array(0.5))
        assert total_loss(l1, l2, 0.0, 2.0).item() == pytest.approx(1.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            total_loss(Tensor(np.array(1.0)), Tensor(np.array(1.0)), -1.0, 1.0)

    def test_lambda2_zero_zero_grads_into_mim_branch(self):
        rng = np.random.default_rng(9)
        s_patch = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        s_cls = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        teacher_cls = [rng.standard_normal((2, 3)) for _ in range(2)]
        l_dino = dino_loss(teacher_cls, [s_cls, s_cls * 1.0, s_cls * 2.0], 0.1, 0.04, np.zeros(3))
        masks = [rng.random((2, 4)) < 0.5, rng.random((2, 4)) < 0.5]
        l_mim = mim_loss(
            [rng.standard_normal((2, 4, 3))] * 2, [s_patch, s_patch * 1.0], masks, 0.1, 0.04, np.zeros(3)
        )
        total_loss(l_dino, l_mim, 1.0, 0.0).backward()
        np.testing.assert_array_equal(s_patch.grad, np.zeros_like(s_patch.data))
        assert np.abs(s_cls.grad).max() > 0


class TestEmaUpdate:
    def make_pair(self, seed=0):
        rng = np.random.default_rng(seed)
        student = {k: Tensor(rng.standard_normal((3, 2)).astype(np.float64), requires_grad=True) for k in "ab"}
        teacher = {k: Tensor(rng.standard_normal((3, 2)).astype(np.float64)) for k in "ab"}
        return teacher, student

    def test_lambda_one_keeps_teacher(self):
        teacher, student = self.make_pair()
        before = {k: v.data.copy() for k, v in teacher.items()}
        ema_update(teacher, student, 1.0)
        for k in teacher:
            np.testing.assert_array_equal(teacher[k].data, before[k])

    def test_lambda_zero_copies_student(self):
        teacher, student = self.make_pair(1)
        ema_update(teacher, student, 0.0)
        for k in teacher:
            np.testing.assert_array_equal(teacher[k].data, student[k].data)

    def test_midpoint_arithmetic(self):
        teacher = {"w": Tensor(np.full((2,), 2.0))}
        student = {"w": Tensor(np.zeros(2), requires_grad=True)}
        ema_update(teacher, student, 0.5)
        np.testing.assert_allclose(teacher["w"].data, 1.0)

    def test_contraction_property(self):
        rng = np.random.default_rng(2)
        for lam in (0.3, 0.9, 0.996):
            teacher, student = self.make_pair(3)
            gap_before = {k: np.abs(teacher[k].data - student[k].data) for k in teacher}
            ema_update(teacher, student, lam)
            for k in teacher:
                gap_after = np.abs(teacher[k].data - student[k].data)
                np.testing.assert_allclose(gap_after, lam * gap_before[k], atol=1e-12)

    def test_shape_mismatch_rejected(self):
        teacher = {"w": Tensor(np.zeros((2, 2)))}
        student = {"w": Tensor(np.zeros((2, 3)), requires_grad=True)}
        with pytest.raises(ContractViolation):
            ema_update(teacher, student, 0.5)

    def test_key_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ema_update({"a": Tensor(np.zeros(1))}, {"b": Tensor(np.zeros(1))}, 0.5)
