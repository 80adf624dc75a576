"""Synthetic unit corpora with known content, speaker, and prosody factors.

The generative recipe is fixed so that every disentanglement claim can be
checked against ground truth:

*   content: per-channel smooth random walks, standardized per channel to
    zero mean / unit population std within the utterance;
*   prosody: a log-pitch contour (voiced frames around a level of 5.0,
    exact 0.0 at unvoiced frames) and a log-energy contour, whose slope,
    walk scale, and level families are a deterministic function of the
    emotion id;
*   speaker: a per-channel affine map, ``units = sigma_spk * base + mu_spk``
    with ``base = content + a*f0c + b*energy`` (f0c is the centered voiced
    pitch), so speaker identity lives entirely in per-channel statistics;
*   mel: ``tanh(units @ G / sqrt(C)) + outer(f0c, h1) + outer(energy, h2)
    + color(mu_spk)``, i.e. a nonlinear content mixture, two fixed linear
    prosody directions, and a constant per-speaker coloring offset.

The mixing constants ``a, b, G, h1, h2`` depend only on the tensor sizes and
a fixed internal key, so rendering is a pure function of a
:class:`FactorSet`. All per-utterance randomness comes from a counter-based
generator keyed by (seed, speaker, emotion, index), which makes corpus
generation order-independent and byte-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensorio import (
    Manifest,
    ManifestError,
    UtteranceRecord,
    load_manifest,
    save_manifest,
    write_tensor,
)

F0_LEVEL = 5.0  # voiced log-pitch values sit around this anchor

# fixed keys for size-dependent mixing constants (arbitrary literals)
_UNIT_MIX_KEY = 271828182
_MEL_MIX_KEY = 314159265
_INJECT_KEY = 141421356
_COLOR_KEY = 173205080
_SPEAKER_KEY = 466920160


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic corpus; ``seed`` fixes it completely."""

    n_speakers: int
    n_emotions: int = 5
    utterances_per_pair: int = 40
    frames: int = 64
    unit_channels: int = 16
    mel_channels: int = 16
    seed: int = 0
    speaker_scale_range: tuple[float, float] = (0.5, 2.0)
    speaker_shift_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.n_emotions < 1:
            raise ValueError("need at least 1 emotion")
        if self.frames < 8:
            raise ValueError("frames must be >= 8")
        if self.unit_channels < 4 or self.mel_channels < 4:
            raise ValueError("unit/mel channels must be >= 4")
        lo, hi = self.speaker_scale_range
        if not (0 < lo < hi):
            raise ValueError("speaker_scale_range must satisfy 0 < lo < hi")
        lo, hi = self.speaker_shift_range
        if not lo < hi:
            raise ValueError("speaker_shift_range must satisfy lo < hi")


@dataclass
class FactorSet:
    """Exact latent factors behind one rendered utterance."""

    content: np.ndarray        # (W, C) float64
    speaker_mu: np.ndarray     # (C,) float64
    speaker_sigma: np.ndarray  # (C,) float64, strictly positive
    f0: np.ndarray             # (W,) float64, log scale, 0.0 at unvoiced
    voicing: np.ndarray        # (W,) float64 in {0.0, 1.0}
    energy: np.ndarray         # (W,) float64, log scale
    emotion_id: int

    def __post_init__(self):
        if np.any(self.speaker_sigma <= 0):
            raise ValueError("speaker_sigma must be strictly positive")
        if np.any(~np.isfinite(self.f0[self.voicing > 0])):
            raise ValueError("voiced frames must have finite log-f0")

    def to_json(self) -> dict:
        return {
            "content": self.content.tolist(),
            "speaker_mu": self.speaker_mu.tolist(),
            "speaker_sigma": self.speaker_sigma.tolist(),
            "f0": self.f0.tolist(),
            "voicing": self.voicing.tolist(),
            "energy": self.energy.tolist(),
            "emotion_id": int(self.emotion_id),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FactorSet":
        return cls(
            content=np.asarray(doc["content"], dtype=np.float64),
            speaker_mu=np.asarray(doc["speaker_mu"], dtype=np.float64),
            speaker_sigma=np.asarray(doc["speaker_sigma"], dtype=np.float64),
            f0=np.asarray(doc["f0"], dtype=np.float64),
            voicing=np.asarray(doc["voicing"], dtype=np.float64),
            energy=np.asarray(doc["energy"], dtype=np.float64),
            emotion_id=int(doc["emotion_id"]),
        )


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.random.SeedSequence(list(key)).generate_state(2, np.uint64)))


@lru_cache(maxsize=None)
def _unit_mixers(channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel injection gains (a, b) for pitch and energy."""
    rng = _rng(_UNIT_MIX_KEY, channels)
    a = rng.uniform(0.3, 0.8, size=channels)
    b = rng.uniform(0.3, 0.8, size=channels)
    return a, b


@lru_cache(maxsize=None)
def _mel_mixer(unit_channels: int, mel_channels: int) -> np.ndarray:
    rng = _rng(_MEL_MIX_KEY, unit_channels, mel_channels)
    return rng.standard_normal((unit_channels, mel_channels))


@lru_cache(maxsize=None)
def _mel_injectors(mel_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Pitch/energy directions added linearly onto the mel rendering.

    Orthonormal pair scaled so the prosody content of a mel dominates the
    nonlinear content term along these directions; keeps the least-squares
    readout in :func:`prosody_proxies` faithful.
    """
    rng = _rng(_INJECT_KEY, mel_channels)
    raw = rng.standard_normal((2, mel_channels))
    q1 = raw[0] / np.linalg.norm(raw[0])
    q2 = raw[1] - (raw[1] @ q1) * q1
    q2 /= np.linalg.norm(q2)
    scale = 2.0 * np.sqrt(mel_channels)
    return scale * q1, scale * q2


@lru_cache(maxsize=None)
def _mel_coloring(unit_channels: int, mel_channels: int) -> np.ndarray:
    """Fixed map from speaker shift parameters to a constant mel offset."""
    rng = _rng(_COLOR_KEY, unit_channels, mel_channels)
    return rng.standard_normal((unit_channels, mel_channels))


def emotion_profile(emotion_id: int, n_emotions: int) -> dict[str, float]:
    """Deterministic contour family for one emotion class.

    Classes differ in pitch slope (sign and magnitude), pitch walk scale,
    energy slope, and energy level, so they are linearly recoverable from
    the raw contours.
    """
    if not 0 <= emotion_id < n_emotions:
        raise ValueError(f"emotion_id {emotion_id} out of range [0, {n_emotions})")
    span = max(n_emotions - 1, 1)
    s = (emotion_id - (n_emotions - 1) / 2) / span  # in [-0.5, 0.5]
    return {
        "slope_f0": 2.0 * s,
        "sig_f0": 0.10 + 0.12 * (emotion_id % 2),
        "slope_energy": -1.5 * s,
        "level_energy": 0.8 * float(np.cos(np.pi * emotion_id / span)),
    }


def speaker_style(spec: SynthSpec, speaker_idx: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-speaker channel affine parameters (mu, sigma)."""
    rng = _rng(_SPEAKER_KEY, spec.seed, speaker_idx)
    lo, hi = spec.speaker_shift_range
    mu = rng.uniform(lo, hi, size=spec.unit_channels)
    lo, hi = spec.speaker_scale_range
    sigma = rng.uniform(lo, hi, size=spec.unit_channels)
    return mu, sigma


def _smooth_walk(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.cumsum(rng.standard_normal(n)) / np.sqrt(n)


def sample_factors(
    spec: SynthSpec, speaker_idx: int, emotion_id: int, utt_idx: int
) -> FactorSet:
    """Draw one utterance's factors; pure function of its (seed, ids) key."""
    rng = _rng(spec.seed, speaker_idx, emotion_id, utt_idx)
    w, c = spec.frames, spec.unit_channels
    prof = emotion_profile(emotion_id, spec.n_emotions)

    walks = np.cumsum(rng.standard_normal((w, c)), axis=0)
    mean = walks.mean(axis=0)
    std = walks.std(axis=0)
    content = (walks - mean) / np.maximum(std, 1e-8)

    tau = (np.arange(w) + 0.5) / w - 0.5
    f0 = (
        F0_LEVEL
        + rng.normal(0.0, 0.2)
        + prof["slope_f0"] * tau
        + prof["sig_f0"] * _smooth_walk(rng, w)
    )
    voicing = np.ones(w)
    for _ in range(2):
        start = int(rng.integers(0, w))
        length = int(rng.uniform(0.05, 0.15) * w)
        voicing[start : start + length] = 0.0
    f0 = np.where(voicing > 0, f0, 0.0)

    energy = (
        prof["level_energy"]
        + rng.normal(0.0, 0.1)
        + prof["slope_energy"] * tau
        + 0.12 * _smooth_walk(rng, w)
    )

    mu, sigma = speaker_style(spec, speaker_idx)
    return FactorSet(
        content=content,
        speaker_mu=mu,
        speaker_sigma=sigma,
        f0=f0,
        voicing=voicing,
        energy=energy,
        emotion_id=emotion_id,
    )


def render_utterance(
    f: FactorSet,
    mel_channels: int = 16,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Render (units, mel, f0, energy) float32 tensors from factors.

    Pure and deterministic: re-rendering the stored factors reproduces the
    corpus files bit-exactly.
    """
    c = f.content.shape[1]
    a, b = _unit_mixers(c)
    f0c = np.where(f.voicing > 0, f.f0 - F0_LEVEL, 0.0)
    base = f.content + np.outer(f0c, a) + np.outer(f.energy, b)
    units = f.speaker_sigma * base + f.speaker_mu

    g = _mel_mixer(c, mel_channels)
    h1, h2 = _mel_injectors(mel_channels)
    coloring = (f.speaker_mu @ _mel_coloring(c, mel_channels)) / np.sqrt(c)
    mel = (
        np.tanh(units @ g / np.sqrt(c))
        + np.outer(f0c, h1)
        + np.outer(f.energy, h2)
        + coloring
    )

    return (
        units.astype(np.float32),
        mel.astype(np.float32),
        f.f0.astype(np.float32),
        f.energy.astype(np.float32),
    )


def render_as_speaker(
    f: FactorSet, mu: np.ndarray, sigma: np.ndarray, mel_channels: int = 16
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ground-truth conversion target: same factors, another speaker's affine."""
    g = FactorSet(
        content=f.content,
        speaker_mu=np.asarray(mu, dtype=np.float64),
        speaker_sigma=np.asarray(sigma, dtype=np.float64),
        f0=f.f0,
        voicing=f.voicing,
        energy=f.energy,
        emotion_id=f.emotion_id,
    )
    return render_utterance(g, mel_channels=mel_channels)


def prosody_proxies(mel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares pitch/energy readouts from a rendered or model mel.

    Projects each frame onto the renderer's fixed injection directions;
    used as the objective prosody measurement for Pearson correlation.
    """
    m = mel.shape[1]
    h1, h2 = _mel_injectors(m)
    h = np.stack([h1, h2], axis=1)  # (M, 2)
    sol, *_ = np.linalg.lstsq(h, np.asarray(mel, dtype=np.float64).T, rcond=None)
    return sol[0], sol[1]


def speaker_label(i: int) -> str:
    return f"spk{i:02d}"


def emotion_label(i: int) -> str:
    return f"emo{i:02d}"


def make_corpus(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Write a full corpus (tensor files, factor files, manifest).

    Generates ``n_speakers * n_emotions * utterances_per_pair`` records.
    The output is a pure function of ``spec``: identical specs produce
    byte-identical corpora.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for si in range(spec.n_speakers):
        for ei in range(spec.n_emotions):
            for ui in range(spec.utterances_per_pair):
                factors = sample_factors(spec, si, ei, ui)
                units, mel, f0, energy = render_utterance(
                    factors, mel_channels=spec.mel_channels
                )
                utt_id = f"{speaker_label(si)}_{emotion_label(ei)}_u{ui:03d}"
                paths = {
                    "units_path": f"{utt_id}.units.savt",
                    "mel_path": f"{utt_id}.mel.savt",
                    "f0_path": f"{utt_id}.f0.savt",
                    "energy_path": f"{utt_id}.energy.savt",
                    "factors_path": f"{utt_id}.factors.json",
                }
                write_tensor(out / paths["units_path"], units)
                write_tensor(out / paths["mel_path"], mel)
                write_tensor(out / paths["f0_path"], f0)
                write_tensor(out / paths["energy_path"], energy)
                with open(out / paths["factors_path"], "w") as fh:
                    json.dump(factors.to_json(), fh, sort_keys=True)
                    fh.write("\n")
                records.append(
                    UtteranceRecord(
                        id=utt_id,
                        speaker=speaker_label(si),
                        emotion=emotion_label(ei),
                        **paths,
                    )
                )
    manifest = Manifest(utterances=records, root=out)
    save_manifest(manifest, out / "manifest.json")
    return load_manifest(out / "manifest.json", strict=True)


def ground_truth(manifest: Manifest, rec: UtteranceRecord) -> FactorSet:
    """Recover the exact FactorSet of a synthetic record.

    Raises:
        ManifestError: the record has no factors file (real-data import).
    """
    if rec.factors_path is None:
        raise ManifestError(f"{rec.id}: no ground truth (record has no factors file)")
    with open(manifest.resolve(rec.factors_path)) as fh:
        return FactorSet.from_json(json.load(fh))
