import json

import numpy as np
import pytest

from pvit.checkpoint import load_checkpoint
from pvit.errors import ConfigError, ContractViolation
from pvit.optim import OptimState
from pvit.augment import CropParams
from pvit.distill import HeadConfig
from pvit.pretrain import (
    build_batch,
    init_state,
    pretrain_lr,
    pretrain_step,
    run_pretrain,
)

from conftest import micro_pretrain_cfg


class TestLrRule:
    def test_batch_256_gives_5e4(self):
        assert pretrain_lr(256) == pytest.approx(0.0005)

    def test_batch_4096_clamped_to_2e3(self):
        assert pretrain_lr(4096) == pytest.approx(0.002)

    def test_linear_in_batch_below_cap(self):
        assert pretrain_lr(64) == pytest.approx(0.0005 * 64 / 256)

    def test_explicit_base_lr_wins(self):
        assert pretrain_lr(4096, base_lr=0.01) == 0.01


class TestConfigValidation:
    def test_pos_grid_must_match_global_views(self):
        with pytest.raises(ConfigError, match="grid"):
            micro_pretrain_cfg(crops=CropParams(global_size=(32, 32), local_size=(16, 16)))

    def test_head_in_dim_must_match_backbone(self):
        with pytest.raises(ConfigError, match="in_dim"):
            micro_pretrain_cfg(head=HeadConfig(in_dim=32, out_dim=64))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            micro_pretrain_cfg(lambda2=-0.5)


class TestStateAndStep:
    def test_teacher_initialized_from_student(self):
        state = init_state(micro_pretrain_cfg(), seed=0)
        for k, p in state.student.items():
            np.testing.assert_array_equal(p.data, state.teacher[k].data)
            assert not state.teacher[k].requires_grad
            assert p.requires_grad or k.endswith("proto.g")

    def test_step_leaves_teacher_without_gradients(self, mini_dataset):
        cfg = micro_pretrain_cfg()
        state = init_state(cfg, seed=0)
        rng = np.random.default_rng(0)
        imgs = [rng.random((64, 32, 3)).astype(np.float32) for _ in range(cfg.batch_size)]
        batch = build_batch(imgs, list(range(len(imgs))), cfg, seed=0, epoch=0)
        m = pretrain_step(state, batch, cfg, OptimState(), 1e-4, 0.0, 0.99, 0.01)
        for k, p in state.teacher.items():
            assert p.grad is None or not p.grad.any(), k
        assert m.l_dino >= 0.0 and m.l_mim >= 0.0
        assert 0.0 < m.masked_fraction < 1.0

    def test_lambda2_zero_keeps_mim_head_unchanged(self):
        cfg = micro_pretrain_cfg(lambda2=0.0, freeze_proto_epochs=0)
        state = init_state(cfg, seed=0)
        before = {k: p.data.copy() for k, p in state.student.items() if k.startswith("head_patch.")}
        rng = np.random.default_rng(1)
        imgs = [rng.random((64, 32, 3)).astype(np.float32) for _ in range(cfg.batch_size)]
        batch = build_batch(imgs, list(range(len(imgs))), cfg, seed=0, epoch=0)
        pretrain_step(state, batch, cfg, OptimState(), 1e-3, 0.0, 0.99, 0.01)
        for k, arr in before.items():
            if k.endswith("proto.g"):
                continue
            # exactly-zero gradients + zero weight decay -> no adaptive update
            np.testing.assert_array_equal(state.student[k].data, arr)

    def test_ema_moves_teacher_toward_student(self):
        cfg = micro_pretrain_cfg()
        state = init_state(cfg, seed=0)
        rng = np.random.default_rng(2)
        imgs = [rng.random((64, 32, 3)).astype(np.float32) for _ in range(cfg.batch_size)]
        batch = build_batch(imgs, list(range(len(imgs))), cfg, seed=0, epoch=0)
        pretrain_step(state, batch, cfg, OptimState(), 1e-3, 0.0, 0.5, 0.01)
        gaps = [
            np.abs(state.teacher[k].data - state.student[k].data).max()
            for k in state.teacher
            if not k.endswith("proto.g")
        ]
        assert max(gaps) > 0  # teacher lags behind ...
        ref = init_state(cfg, seed=0)
        drift = max(np.abs(state.teacher[k].data - ref.teacher[k].data).max() for k in state.teacher)
        assert drift > 0  # ... but did move from init


class TestBuildBatch:
    def test_shapes_and_mask_grid(self):
        cfg = micro_pretrain_cfg()
        rng = np.random.default_rng(3)
        imgs = [rng.random((64, 32, 3)).astype(np.float32) for _ in range(4)]
        batch = build_batch(imgs, [0, 1, 2, 3], cfg, seed=5, epoch=0)
        assert len(batch.teacher_globals) == 2 and batch.teacher_globals[0].shape == (4, 64, 32, 3)
        assert len(batch.student_locals) == cfg.crops.n_local
        assert batch.student_locals[0].shape == (4, 32, 16, 3)
        assert batch.masks[0].shape == (4, 32)

    def test_workers_do_not_change_results(self):
        cfg = micro_pretrain_cfg()
        rng = np.random.default_rng(4)
        imgs = [rng.random((64, 32, 3)).astype(np.float32) for _ in range(6)]
        a = build_batch(imgs, list(range(6)), cfg, seed=7, epoch=3, workers=1)
        b = build_batch(imgs, list(range(6)), cfg, seed=7, epoch=3, workers=3)
        for x, y in zip(a.teacher_globals + a.student_globals + a.student_locals,
                        b.teacher_globals + b.student_globals + b.student_locals):
            np.testing.assert_array_equal(x, y)
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)


class TestRunPretrain:
    def test_two_runs_bit_identical(self, mini_manifest, tmp_path):
        cfg = micro_pretrain_cfg()
        a = run_pretrain(cfg, mini_manifest, tmp_path / "a", seed=9)
        b = run_pretrain(cfg, mini_manifest, tmp_path / "b", seed=9)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()

    def test_checkpoint_contents(self, pretrain_ckpt):
        ckpt = load_checkpoint(pretrain_ckpt)
        names = set(ckpt.tensors)
        assert any(n.startswith("student/") for n in names)
        assert any(n.startswith("teacher/head_patch.") for n in names)
        assert "center/cls" in names and "center/patch" in names
        assert ckpt.epoch == 2
        assert ckpt.rng_state["seed"] == 1

    def test_metrics_log_schema(self, pretrain_ckpt):
        lines = (pretrain_ckpt.parent / "metrics.jsonl").read_text().splitlines()
        assert lines
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"epoch", "step", "l_dino", "l_mim", "lr", "lambda_ema", "masked_fraction"}

    def test_empty_pretrain_split_rejected(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,person_id,camera_id,split\n")
        with pytest.raises(ContractViolation, match="pretrain"):
            run_pretrain(micro_pretrain_cfg(), tmp_path / "m.csv", tmp_path / "out", seed=0)

    def test_resume_with_wrong_config_fails_fast(self, mini_manifest, pretrain_ckpt, tmp_path):
        other = micro_pretrain_cfg(mask_ratio=0.5, epochs=3)
        with pytest.raises(ConfigError, match="different config"):
            run_pretrain(other, mini_manifest, tmp_path / "out", seed=1, resume_from=pretrain_ckpt)

    def test_resume_reproduces_uninterrupted_run_exactly(self, mini_manifest, tmp_path):
        cfg = micro_pretrain_cfg(epochs=2, checkpoint_interval=1)
        final = run_pretrain(cfg, mini_manifest, tmp_path / "full", seed=4)
        mid = final.parent / "ckpt_epoch0001.pvit"
        resumed = run_pretrain(cfg, mini_manifest, tmp_path / "resumed", seed=4, resume_from=mid)
        assert resumed.read_bytes() == final.read_bytes()

    def test_resume_at_completed_state_returns_checkpoint(self, mini_manifest, pretrain_ckpt, tmp_path):
        cfg = micro_pretrain_cfg()
        out = run_pretrain(cfg, mini_manifest, tmp_path / "noop", seed=1, resume_from=pretrain_ckpt)
        assert load_checkpoint(out).epoch == 2
