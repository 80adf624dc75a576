import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vclab.nets import (
    AttributeEncoder,
    Checkpoint,
    Decoder,
    EmotionHead,
    EncoderConfig,
    MainModel,
    ProsodyTeacher,
    SpeakerTable,
    TeacherModel,
    init_parameters,
    load_checkpoint,
    model_from_checkpoint,
    pitch_features,
    save_checkpoint,
    state_to_params,
    teacher_from_checkpoint,
)


def _cfg(**kw):
    defaults = dict(unit_channels=16, mel_channels=16)
    defaults.update(kw)
    return EncoderConfig(**defaults)


def _init(module, seed=0):
    init_parameters(module, torch.Generator().manual_seed(seed))
    return module


def test_config_validation():
    with pytest.raises(ValueError, match="odd"):
        _cfg(kernel=4)
    with pytest.raises(ValueError, match="gru_hidden"):
        _cfg(content_dim=40, prosody_dim=30)
    with pytest.raises(ValueError, match="dilation"):
        _cfg(conv_blocks=2)
    with pytest.raises(ValueError, match="positive"):
        _cfg(prosody_dim=0)


def test_encoder_shapes_default():
    enc = _init(AttributeEncoder(_cfg()))
    content, prosody = enc(torch.randn(64, 16, generator=torch.Generator().manual_seed(1)))
    assert content.shape == (64, 12)
    assert prosody.shape == (64, 4)
    batched_c, batched_p = enc(torch.zeros(3, 64, 16))
    assert batched_c.shape == (3, 64, 12) and batched_p.shape == (3, 64, 4)


def test_encoder_deterministic():
    enc = _init(AttributeEncoder(_cfg()))
    x = torch.randn(32, 16, generator=torch.Generator().manual_seed(2))
    a = enc(x)
    b = enc(x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_encoder_zero_heads_give_zero_streams():
    enc = _init(AttributeEncoder(_cfg()))
    with torch.no_grad():
        enc.content_head.weight.zero_()
        enc.content_head.bias.zero_()
        enc.prosody_head.weight.zero_()
        enc.prosody_head.bias.zero_()
    content, prosody = enc(torch.zeros(16, 16))
    assert torch.all(content == 0) and torch.all(prosody == 0)


def test_encoder_rejects_short_sequences():
    enc = _init(AttributeEncoder(_cfg()))
    with pytest.raises(ValueError, match="frames"):
        enc(torch.zeros(3, 16))


@settings(max_examples=15, deadline=None)
@given(
    w=st.integers(8, 40),
    c=st.integers(4, 12),
    m=st.integers(4, 12),
    d_c=st.integers(1, 6),
    d_p=st.integers(1, 4),
    hidden=st.integers(6, 16),
)
def test_shape_contracts_over_random_configs(w, c, m, d_c, d_p, hidden):
    cfg = EncoderConfig(
        unit_channels=c, mel_channels=m, conv_blocks=2, kernel=3,
        dilations=(1, 2), conv_channels=8, gru_hidden=hidden,
        content_dim=d_c, prosody_dim=d_p, speaker_dim=6,
    )
    enc = _init(AttributeEncoder(cfg))
    dec = _init(Decoder(cfg))
    teacher = _init(ProsodyTeacher(cfg))
    x = torch.randn(w, c, generator=torch.Generator().manual_seed(0))
    content, prosody = enc(x)
    assert content.shape == (w, d_c) and prosody.shape == (w, d_p)
    mel = dec(content, prosody, torch.zeros(6))
    assert mel.shape == (w, m)
    z = teacher(torch.randn(w, 3, generator=torch.Generator().manual_seed(1)))
    assert z.shape == (w, d_p)


# ---------------------------------------------------------------------------
# teacher


def test_pitch_features_normalization():
    f0 = np.array([0.0, 5.0, 6.0, 0.0, 7.0])
    energy = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    feats = pitch_features(f0, energy)
    assert feats.shape == (5, 3)
    voiced = feats[:, 1] == 1
    assert list(voiced) == [False, True, True, False, True]
    assert feats[~voiced, 0].tolist() == [0.0, 0.0]
    assert abs(feats[voiced, 0].mean()) < 1e-6
    assert np.allclose(feats[:, 2], energy, atol=1e-7)


def test_teacher_attention_weights_sum_to_one():
    teacher = _init(ProsodyTeacher(_cfg()))
    q = torch.randn(5, teacher.tokens.shape[1], generator=torch.Generator().manual_seed(3))
    w = teacher.attention(q)
    assert torch.allclose(w.sum(dim=-1), torch.ones(5), atol=1e-6)
    assert torch.all(w >= 0)


def test_teacher_ignores_units_and_speaker():
    # the teacher consumes only prosody contours: two different "renderings"
    # that share contours produce bit-identical streams
    teacher = _init(ProsodyTeacher(_cfg()))
    f0 = np.concatenate([np.zeros(4), 5 + 0.1 * np.arange(28)])
    energy = np.linspace(-0.5, 0.5, 32)
    feats = torch.from_numpy(pitch_features(f0, energy))
    a = teacher(feats)
    b = teacher(feats.clone())
    assert torch.equal(a, b)


def test_emotion_head_pooling_permutation_invariant():
    head = _init(EmotionHead(4, 5))
    z = torch.randn(10, 4, generator=torch.Generator().manual_seed(4))
    perm = z[torch.randperm(10, generator=torch.Generator().manual_seed(5))]
    assert torch.allclose(head(z), head(perm), atol=1e-6)
    assert head(z).shape == (5,)


def test_emotion_head_zero_stream_gives_bias():
    head = EmotionHead(4, 5)
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.copy_(torch.arange(5.0))
    out = head(torch.zeros(8, 4))
    assert torch.equal(out, torch.arange(5.0))


# ---------------------------------------------------------------------------
# speaker table


def test_speaker_table_lookup_and_errors():
    table = _init(SpeakerTable(["spk00", "spk01"], 8))
    vec = table.embed("spk01")
    assert vec.shape == (8,)
    assert torch.equal(vec, table.table[1])
    with pytest.raises(KeyError, match="unknown speaker"):
        table.embed("spk99")
    external = np.arange(8, dtype=np.float32)
    out = table.embed("spk99", external=external)
    assert torch.equal(out, torch.arange(8.0))
    with pytest.raises(ValueError, match="shape"):
        table.embed("spk99", external=np.zeros(4))


# ---------------------------------------------------------------------------
# decoder


def test_decoder_zero_output_layer():
    dec = _init(Decoder(_cfg()))
    with torch.no_grad():
        dec.output.weight.zero_()
        dec.output.bias.zero_()
    mel = dec(torch.zeros(12, 12), torch.zeros(12, 4), torch.zeros(64))
    assert torch.all(mel == 0)


def test_decoder_no_dead_input_path():
    cfg = _cfg()
    dec = _init(Decoder(cfg)).double()
    content = torch.randn(10, 12, dtype=torch.float64, requires_grad=True,
                          generator=torch.Generator().manual_seed(6))
    prosody = torch.randn(10, 4, dtype=torch.float64, requires_grad=True,
                          generator=torch.Generator().manual_seed(7))
    speaker = torch.randn(64, dtype=torch.float64, requires_grad=True,
                          generator=torch.Generator().manual_seed(8))
    out = dec(content, prosody, speaker).mean()
    out.backward()
    for name, block in (("content", content), ("prosody", prosody), ("speaker", speaker)):
        grad = block.grad
        assert grad is not None and torch.any(grad != 0), f"dead path: {name}"
        # analytic gradient agrees with a central finite difference
        idx = tuple(0 for _ in block.shape)
        h = 1e-5
        with torch.no_grad():
            block[idx] += h
            up = dec(content, prosody, speaker).mean().item()
            block[idx] -= 2 * h
            down = dec(content, prosody, speaker).mean().item()
            block[idx] += h
        fd = (up - down) / (2 * h)
        assert grad[idx].item() == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_decoder_frame_alignment_checked():
    dec = _init(Decoder(_cfg()))
    with pytest.raises(ValueError, match="frame-aligned"):
        dec(torch.zeros(10, 12), torch.zeros(9, 4), torch.zeros(64))


# ---------------------------------------------------------------------------
# checkpoints


def _toy_checkpoint(stage="teacher"):
    cfg = _cfg(conv_channels=8, gru_hidden=8, content_dim=4, prosody_dim=2,
               speaker_dim=4, n_style_tokens=3)
    model = _init(TeacherModel(cfg), seed=11)
    return Checkpoint(
        stage=stage,
        params=state_to_params(model),
        config={
            "encoder": {
                "unit_channels": 16, "mel_channels": 16, "conv_blocks": 3,
                "kernel": 5, "dilations": [1, 2, 4], "conv_channels": 8,
                "gru_hidden": 8, "content_dim": 4, "prosody_dim": 2,
                "speaker_dim": 4, "n_style_tokens": 3, "n_emotions": 5,
            },
            "train": {"asa_mode": "learned-scale", "grl_lambda": 1.0},
            "speakers": ["spk00", "spk01"],
            "emotions": [f"emo{i:02d}" for i in range(5)],
        },
        rng_state=b"\x01\x02\x03",
        step_count=7,
    )


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    ckpt = _toy_checkpoint()
    save_checkpoint(ckpt, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    assert loaded.stage == "teacher"
    assert loaded.step_count == 7
    assert loaded.rng_state == b"\x01\x02\x03"
    save_checkpoint(loaded, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_checkpoint_rejects_unknown_stage():
    with pytest.raises(ValueError, match="stage"):
        Checkpoint(stage="bogus", params={}, config={}, rng_state=b"", step_count=0)


def test_teacher_from_checkpoint_round_trip(tmp_path):
    ckpt = _toy_checkpoint()
    teacher = teacher_from_checkpoint(ckpt)
    again = state_to_params(teacher)
    for name, arr in ckpt.params.items():
        assert np.array_equal(again[name], arr)
    with pytest.raises(ValueError, match="teacher"):
        teacher_from_checkpoint(_toy_checkpoint(stage="main"))


def test_model_from_checkpoint_requires_main_stage():
    with pytest.raises(ValueError, match="main or finetuned"):
        model_from_checkpoint(_toy_checkpoint(stage="teacher"))


def test_main_model_codebook_quantizes():
    cfg = _cfg(conv_channels=8, gru_hidden=8, content_dim=4, prosody_dim=2)
    codebook = np.array([[0.0] * 16, [1.0] * 16], dtype=np.float32)
    model = MainModel(cfg, speakers=["a", "b"], unit_codebook=codebook)
    units = torch.full((4, 16), 0.9)
    q = model.prepare_units(units)
    assert torch.all(q == 1.0)
    plain = MainModel(cfg, speakers=["a", "b"])
    assert torch.equal(plain.prepare_units(units), units)
