import filecmp

import numpy as np
import pytest

from vclab import evaluation, syndata
from vclab.tensorio import Corpus, ManifestError, read_tensor


def _factors(seed=0, w=16, c=6, mu=None, sigma=None):
    spec = syndata.SynthSpec(
        n_speakers=2, n_emotions=2, utterances_per_pair=1,
        frames=w, unit_channels=c, mel_channels=4, seed=seed,
    )
    f = syndata.sample_factors(spec, 0, 1, 0)
    if mu is not None or sigma is not None:
        f = syndata.FactorSet(
            content=f.content,
            speaker_mu=np.asarray(mu, dtype=np.float64),
            speaker_sigma=np.asarray(sigma, dtype=np.float64),
            f0=f.f0, voicing=f.voicing, energy=f.energy,
            emotion_id=f.emotion_id,
        )
    return f


def test_identity_style_renders_base():
    c = 6
    f_id = _factors(mu=np.zeros(c), sigma=np.ones(c))
    f_styled = _factors(mu=np.full(c, 0.7), sigma=np.full(c, 1.9))
    base, *_ = syndata.render_utterance(f_id, mel_channels=4)
    styled, *_ = syndata.render_utterance(f_styled, mel_channels=4)
    # speaker style is exactly the per-channel affine map over the base
    assert np.allclose(styled, 1.9 * base.astype(np.float64) + 0.7, atol=1e-5)


def test_render_deterministic():
    f = _factors()
    a = syndata.render_utterance(f, mel_channels=4)
    b = syndata.render_utterance(f, mel_channels=4)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_instance_normalized_units_speaker_invariant():
    c = 6
    rng = np.random.default_rng(3)
    f1 = _factors(mu=rng.uniform(-1, 1, c), sigma=rng.uniform(0.5, 2, c))
    f2 = _factors(mu=rng.uniform(-1, 1, c), sigma=rng.uniform(0.5, 2, c))
    u1, *_ = syndata.render_utterance(f1, mel_channels=4)
    u2, *_ = syndata.render_utterance(f2, mel_channels=4)

    def norm(u):
        u = u.astype(np.float64)
        return (u - u.mean(0)) / u.std(0)

    assert np.max(np.abs(norm(u1) - norm(u2))) <= 1e-5


def test_rejects_non_positive_sigma():
    c = 6
    with pytest.raises(ValueError, match="positive"):
        _factors(mu=np.zeros(c), sigma=np.zeros(c))


def test_make_corpus_counts_and_validation(tmp_path):
    spec = syndata.SynthSpec(
        n_speakers=2, n_emotions=1, utterances_per_pair=1,
        frames=8, unit_channels=4, mel_channels=4, seed=1,
    )
    manifest = syndata.make_corpus(spec, tmp_path / "c")
    assert len(manifest.utterances) == 2
    speakers = {r.speaker for r in manifest.utterances}
    assert speakers == {"spk00", "spk01"}


def test_make_corpus_byte_reproducible(tmp_path):
    spec = syndata.SynthSpec(
        n_speakers=2, n_emotions=2, utterances_per_pair=2,
        frames=8, unit_channels=4, mel_channels=4, seed=9,
    )
    syndata.make_corpus(spec, tmp_path / "a")
    syndata.make_corpus(spec, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "a", tmp_path / "b", names, shallow=False
    )
    assert not mismatch and not errors


def test_ground_truth_round_trip(tmp_path):
    spec = syndata.SynthSpec(
        n_speakers=2, n_emotions=2, utterances_per_pair=1,
        frames=12, unit_channels=5, mel_channels=4, seed=4,
    )
    manifest = syndata.make_corpus(spec, tmp_path / "c")
    rec = manifest.utterances[0]
    factors = syndata.ground_truth(manifest, rec)
    assert factors.content.shape == (12, 5)
    units, mel, f0, energy = syndata.render_utterance(factors, mel_channels=4)
    assert units.tobytes() == read_tensor(manifest.resolve(rec.units_path)).tobytes()
    assert mel.tobytes() == read_tensor(manifest.resolve(rec.mel_path)).tobytes()


def test_ground_truth_missing_factors(tmp_path):
    spec = syndata.SynthSpec(
        n_speakers=2, n_emotions=1, utterances_per_pair=1,
        frames=8, unit_channels=4, mel_channels=4, seed=2,
    )
    manifest = syndata.make_corpus(spec, tmp_path / "c")
    rec = manifest.utterances[0]
    rec.factors_path = None
    with pytest.raises(ManifestError, match="no ground truth"):
        syndata.ground_truth(manifest, rec)


def test_emotion_profiles_distinct():
    profs = [syndata.emotion_profile(e, 5) for e in range(5)]
    slopes = [p["slope_f0"] for p in profs]
    assert len(set(slopes)) == 5
    with pytest.raises(ValueError):
        syndata.emotion_profile(5, 5)


def test_prosody_proxies_recover_contours():
    f = _factors(w=32)
    _, mel, f0, energy = syndata.render_utterance(f, mel_channels=4)
    pf0, pen = syndata.prosody_proxies(mel)
    voiced = f0 != 0
    r = evaluation.pearson(pf0, f0.astype(np.float64) - syndata.F0_LEVEL, mask=voiced)
    assert r is not None and r > 0.9
    r_en = evaluation.pearson(pen, energy)
    assert r_en is not None and r_en > 0.9


# probes over the shared full-size corpus (session fixture)


def test_speaker_probe_on_raw_stats(default_corpus):
    corpus = default_corpus
    feats = np.stack([evaluation.stats_vector(u) for u in corpus.units])
    speakers = np.array([r.speaker for r in corpus.records])
    acc = evaluation.leakage_probe(feats, speakers, seed=0)
    assert acc >= 0.9


def test_emotion_probe_on_contours(default_corpus):
    corpus = default_corpus
    feats = np.stack(
        [np.concatenate([f, e]) for f, e in zip(corpus.f0, corpus.energy)]
    )
    emotions = np.array([r.emotion for r in corpus.records])
    acc = evaluation.leakage_probe(feats, emotions, seed=0)
    assert acc >= 0.9
