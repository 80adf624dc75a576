"""Shared fixtures.

The full-size corpus and its trained checkpoints are session-scoped: the
disentanglement and conversion criteria all read from one training run,
which keeps the whole suite inside the CPU budget.
"""

import numpy as np
import pytest
import torch

from vclab import syndata, train
from vclab.nets import EncoderConfig
from vclab.tensorio import Corpus, load_manifest

torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# tiny corpus for fast unit tests


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    spec = syndata.SynthSpec(
        n_speakers=3, n_emotions=2, utterances_per_pair=6,
        frames=16, unit_channels=8, mel_channels=8, seed=100,
    )
    out = tmp_path_factory.mktemp("tiny_corpus")
    return Corpus(syndata.make_corpus(spec, out))


@pytest.fixture(scope="session")
def tiny_enc_cfg():
    return EncoderConfig(
        unit_channels=8, mel_channels=8, conv_blocks=2, kernel=3,
        dilations=(1, 2), conv_channels=8, gru_hidden=6, content_dim=4,
        prosody_dim=2, speaker_dim=6, n_style_tokens=3, n_emotions=2,
    )


@pytest.fixture(scope="session")
def tiny_train_cfg():
    return train.TrainConfig(
        batch_size=4, teacher_steps=30, main_steps=25, finetune_steps=8,
        seed=5, adv_check_interval=10,
    )


@pytest.fixture(scope="session")
def tiny_teacher_run(tiny_corpus, tiny_enc_cfg, tiny_train_cfg):
    return train.pretrain_teacher(tiny_corpus, tiny_enc_cfg, tiny_train_cfg)


@pytest.fixture(scope="session")
def tiny_main_run(tiny_corpus, tiny_teacher_run, tiny_train_cfg):
    teacher_ckpt, _ = tiny_teacher_run
    return train.train_main(tiny_corpus, teacher_ckpt, tiny_train_cfg)


@pytest.fixture(scope="session")
def tiny_finetuned_run(tiny_corpus, tiny_main_run, tiny_train_cfg):
    main_ckpt, _ = tiny_main_run
    return train.finetune(main_ckpt, tiny_corpus, tiny_train_cfg)


# ---------------------------------------------------------------------------
# full-size corpus and training runs (acceptance scale)


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_corpus")
    manifest = syndata.make_corpus(syndata.SynthSpec(n_speakers=10), out)
    return Corpus(load_manifest(out / "manifest.json"))


@pytest.fixture(scope="session")
def default_enc_cfg():
    return EncoderConfig(unit_channels=16, mel_channels=16)


@pytest.fixture(scope="session")
def default_train_cfg():
    return train.TrainConfig()


@pytest.fixture(scope="session")
def teacher_run(default_corpus, default_enc_cfg, default_train_cfg):
    return train.pretrain_teacher(default_corpus, default_enc_cfg, default_train_cfg)


@pytest.fixture(scope="session")
def main_run(default_corpus, teacher_run, default_train_cfg):
    teacher_ckpt, _ = teacher_run
    return train.train_main(default_corpus, teacher_ckpt, default_train_cfg)


@pytest.fixture(scope="session")
def main_run_no_asa(default_corpus, teacher_run, default_train_cfg):
    from dataclasses import replace

    teacher_ckpt, _ = teacher_run
    cfg = replace(default_train_cfg, asa_mode="off")
    return train.train_main(default_corpus, teacher_ckpt, cfg)


@pytest.fixture(scope="session")
def finetuned_run(default_corpus, main_run, default_train_cfg):
    main_ckpt, _ = main_run
    return train.finetune(main_ckpt, default_corpus, default_train_cfg)
