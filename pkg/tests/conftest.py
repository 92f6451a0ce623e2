"""Session fixtures: a miniature dataset plus pre-training and fine-tuning
checkpoints shared by the eval/viz/CLI tests."""

import numpy as np
import pytest

from pvit.augment import CropParams
from pvit.distill import HeadConfig
from pvit.finetune import FinetuneConfig, run_finetune
from pvit.pretrain import PretrainConfig, run_pretrain
from pvit.synth import SynthConfig, generate_synth_dataset
from pvit.vit import ViTConfig

MICRO_VIT = ViTConfig(patch_size=8, dim=64, depth=4, heads=4, pos_grid=(8, 4))


def micro_pretrain_cfg(**kw) -> PretrainConfig:
    base = dict(
        vit=MICRO_VIT,
        crops=CropParams(global_size=(64, 32), local_size=(32, 16), n_local=2),
        head=HeadConfig(in_dim=64, hidden_dim=96, bottleneck_dim=32, out_dim=64),
        epochs=2,
        batch_size=8,
        checkpoint_interval=2,
        warmup_epochs=1,
        teacher_temp_start=0.01,
        teacher_temp_final=0.01,
        ema_base=0.95,
        ema_final=0.999,
        freeze_proto_epochs=1,
    )
    base.update(kw)
    return PretrainConfig(**base)


def micro_finetune_cfg(**kw) -> FinetuneConfig:
    base = dict(vit=MICRO_VIT, input_size=(64, 32), p=4, k=2, epochs=2, warmup_epochs=1)
    base.update(kw)
    return FinetuneConfig(**base)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_ds")
    cfg = SynthConfig(
        n_pretrain_ids=8,
        n_train_ids=6,
        n_eval_ids=5,
        images_per_id=4,
        n_cameras=2,
        queries_per_id=1,
        seed=3,
    )
    generate_synth_dataset(cfg, root)
    return root


@pytest.fixture(scope="session")
def mini_manifest(mini_dataset):
    return mini_dataset / "manifest.csv"


@pytest.fixture(scope="session")
def pretrain_ckpt(mini_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_pt")
    return run_pretrain(micro_pretrain_cfg(), mini_manifest, out, seed=1)


@pytest.fixture(scope="session")
def finetune_ckpt(mini_manifest, pretrain_ckpt, tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_ft")
    return run_finetune(micro_finetune_cfg(), mini_manifest, out, backbone_ckpt=pretrain_ckpt, seed=1)
