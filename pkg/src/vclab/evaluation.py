"""Objective metrics, leakage probes, and report emission.

Implements mel-cepstral distortion (with optional DTW alignment for
unequal lengths), Pearson prosody correlation, speaker-embedding cosine
similarity, and a linear leakage probe, plus a report builder that runs
conversions over (source utterance, target speaker) pairs and mirrors the
structure of objective VC result tables.

With synthetic parallel data the MCD reference is the ground-truth
rendering of the source's factors under the target speaker's style, and
the similarity score (SES) is computed against the target speaker's
corpus-mean mel statistics vector, since speaker identity is
statistics-coded by construction.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import syndata
from .convert import convert_units, load_model
from .nets import Checkpoint
from .tensorio import Corpus

MCD_FACTOR = 10.0 * np.sqrt(2.0) / np.log(10.0)


def dtw_align(x: np.ndarray, y: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimal-cost monotone alignment between two frame sequences.

    Steps are (1,0), (0,1), (1,1) over Euclidean frame distances; the path
    runs from (0,0) to (len(x)-1, len(y)-1).

    Returns:
        (path, total cost along the path).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("inputs must be (W, D) with equal D")
    if len(x) == 0 or len(y) == 0:
        raise ValueError("empty input sequence")
    diff = x[:, None, :] - y[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    nx, ny = dist.shape
    acc = np.full((nx, ny), np.inf)
    acc[0, 0] = dist[0, 0]
    for i in range(nx):
        for j in range(ny):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = dist[i, j] + best
    path = [(nx - 1, ny - 1)]
    i, j = nx - 1, ny - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        _, (i, j) = min(candidates, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return path, float(acc[nx - 1, ny - 1])


def mcd(x: np.ndarray, y: np.ndarray, exclude_first_channel: bool = False) -> float:
    """Mel-cepstral distortion in dB between equal-length frame sequences.

    (10*sqrt(2)/ln 10) * mean over frames of the Euclidean frame distance.
    Callers align unequal lengths with :func:`dtw_align` first.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if exclude_first_channel:
        x, y = x[:, 1:], y[:, 1:]
    frame_dist = np.sqrt(((x - y) ** 2).sum(axis=1))
    return float(MCD_FACTOR * frame_dist.mean())


def mcd_dtw(x: np.ndarray, y: np.ndarray, exclude_first_channel: bool = False) -> float:
    """MCD over the DTW-aligned frame pairs (for unequal lengths)."""
    path, _ = dtw_align(x, y)
    xa = np.stack([np.asarray(x)[i] for i, _ in path])
    ya = np.stack([np.asarray(y)[j] for _, j in path])
    return mcd(xa, ya, exclude_first_channel)


def pearson(
    a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None
) -> float | None:
    """Sample Pearson correlation; None when undefined (constant input)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        a, b = a[keep], b[keep]
    if len(a) < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da**2).sum() * (db**2).sum())
    if denom == 0:
        return None
    return float((da * db).sum() / denom)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity between two nonzero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(u @ v / (nu * nv))


def stats_vector(x: np.ndarray) -> np.ndarray:
    """Concatenated per-channel mean and std over frames (style signature)."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def leakage_probe(embeddings: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial linear probe.

    Full-batch gradient descent on softmax cross-entropy, 200 epochs at
    lr 0.1, over a seed-fixed 80/20 split; features are standardized with
    train-split statistics. Deterministic given the seed.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if len(x) != len(y):
        raise ValueError("embeddings and labels disagree in length")
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        warnings.warn("leakage probe got a single class; trivially separable")
        return 1.0
    counts = np.bincount(y_idx)
    if counts.min() < 2:
        raise ValueError("every class needs at least 2 samples")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_train = int(round(0.8 * len(x)))
    tr, te = order[:n_train], order[n_train:]
    if len(te) == 0:
        raise ValueError("not enough samples for a held-out split")

    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std
    xs = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)

    k = len(classes)
    w = np.zeros((xs.shape[1], k))
    onehot = np.eye(k)[y_idx[tr]]
    xt = xs[tr]
    for _ in range(200):
        logits = xt @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = xt.T @ (p - onehot) / len(xt)
        w -= 0.1 * grad
    pred = (xs[te] @ w).argmax(axis=1)
    return float((pred == y_idx[te]).mean())


# ---------------------------------------------------------------------------
# report


@dataclass
class PairResult:
    utterance: str
    source_speaker: str
    target_speaker: str
    mcd: float | None
    pearson_f0: float | None
    pearson_energy: float | None
    ses: float


@dataclass
class EvalReport:
    pairs: list[PairResult]
    mcd_mean: float | None
    mcd_std: float | None
    pearson_f0_mean: float | None
    pearson_energy_mean: float | None
    ses_mean: float | None
    target_closer_fraction: float | None
    probe_speaker_raw: float
    probe_speaker_content: float
    probe_emotion_prosody: float
    n_skipped_mcd: int
    seed: int
    config: dict = field(default_factory=dict)
    external_cer: float | None = None  # reserved for offline ASR results

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        doc["pairs"] = [PairResult(**p) for p in doc["pairs"]]
        return cls(**doc)

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(
                    ["utterance", "source_speaker", "target_speaker",
                     "mcd", "pearson_f0", "pearson_energy", "ses"]
                )
                for p in self.pairs:
                    writer.writerow(
                        [p.utterance, p.source_speaker, p.target_speaker,
                         _fmt(p.mcd), _fmt(p.pearson_f0),
                         _fmt(p.pearson_energy), _fmt(p.ses)]
                    )


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def encode_corpus(
    model, corpus: Corpus, batch: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (mean|std) signatures of the content and prosody streams."""
    units = torch.from_numpy(np.stack(corpus.units))
    contents, prosodies = [], []
    with torch.no_grad():
        for i in range(0, len(units), batch):
            x = model.prepare_units(units[i : i + batch])
            c, p = model.encoder(x)
            contents.append(c.numpy())
            prosodies.append(p.numpy())
    content = np.concatenate(contents)
    prosody = np.concatenate(prosodies)

    def pooled(z: np.ndarray) -> np.ndarray:
        return np.concatenate([z.mean(axis=1), z.std(axis=1)], axis=1)

    return pooled(content), pooled(prosody)


def speaker_mean_mel_stats(corpus: Corpus) -> dict[str, np.ndarray]:
    """Per-speaker mean of mel statistics vectors over the corpus."""
    sums: dict[str, list[np.ndarray]] = {}
    for rec, mel in zip(corpus.records, corpus.mel):
        sums.setdefault(rec.speaker, []).append(stats_vector(mel))
    return {spk: np.mean(vecs, axis=0) for spk, vecs in sums.items()}


def sample_pairs(
    corpus: Corpus, n_pairs: int, seed: int, indices: list[int] | None = None
) -> list[tuple[str, str]]:
    """Seeded random (utterance, different-speaker target) pairs."""
    rng = np.random.default_rng(seed)
    pool = indices if indices is not None else list(range(len(corpus)))
    pairs = []
    for _ in range(n_pairs):
        i = int(rng.choice(pool))
        rec = corpus.records[i]
        others = [s for s in corpus.speakers if s != rec.speaker]
        pairs.append((rec.id, str(rng.choice(others))))
    return pairs


def build_report(
    corpus: Corpus,
    ckpt: Checkpoint,
    pairs: list[tuple[str, str]],
    seed: int = 0,
    use_dtw: bool = False,
    exclude_first_channel: bool = False,
) -> EvalReport:
    """Convert each pair and compute the objective metric table.

    Pairs without ground-truth factors cannot be scored for MCD (no
    parallel reference) and are skipped with a warning, but still counted.
    """
    model = load_model(ckpt)
    mel_fn = mcd_dtw if use_dtw else mcd
    spk_stats = speaker_mean_mel_stats(corpus)
    mel_channels = corpus.mel[0].shape[1]

    results: list[PairResult] = []
    n_skipped = 0
    closer = []
    for utt_id, target in pairs:
        i = corpus.index_of(utt_id)
        rec = corpus.records[i]
        mel_conv = convert_units(model, corpus.units[i], target)

        value_mcd = None
        if rec.factors_path is None:
            n_skipped += 1
            warnings.warn(f"{utt_id}: no parallel reference, skipping MCD")
        else:
            factors = syndata.ground_truth(corpus.manifest, rec)
            target_idx = corpus.speakers.index(target)
            t_rec = next(
                r for r in corpus.records if r.speaker == target
            )
            t_factors = syndata.ground_truth(corpus.manifest, t_rec)
            _, mel_ref, _, _ = syndata.render_as_speaker(
                factors, t_factors.speaker_mu, t_factors.speaker_sigma,
                mel_channels=mel_channels,
            )
            value_mcd = mel_fn(mel_conv, mel_ref, exclude_first_channel)

        src_f0, src_en = syndata.prosody_proxies(corpus.mel[i])
        conv_f0, conv_en = syndata.prosody_proxies(mel_conv)
        voiced = corpus.f0[i] != 0.0
        r_f0 = pearson(src_f0, conv_f0, mask=voiced)
        r_en = pearson(src_en, conv_en)

        conv_stats = stats_vector(mel_conv)
        ses = cosine_sim(conv_stats, spk_stats[target])
        d_target = float(np.linalg.norm(conv_stats - spk_stats[target]))
        d_source = float(np.linalg.norm(conv_stats - spk_stats[rec.speaker]))
        if rec.speaker != target:
            closer.append(d_target < d_source)

        results.append(
            PairResult(utt_id, rec.speaker, target, value_mcd, r_f0, r_en, ses)
        )

    raw_feats = np.stack([stats_vector(u) for u in corpus.units])
    content_feats, prosody_feats = encode_corpus(model, corpus)
    speakers = np.array([r.speaker for r in corpus.records])
    emotions = np.array([r.emotion for r in corpus.records])

    return EvalReport(
        pairs=results,
        mcd_mean=_mean_or_none([p.mcd for p in results if p.mcd is not None]),
        mcd_std=(
            float(np.std([p.mcd for p in results if p.mcd is not None]))
            if any(p.mcd is not None for p in results)
            else None
        ),
        pearson_f0_mean=_mean_or_none(
            [p.pearson_f0 for p in results if p.pearson_f0 is not None]
        ),
        pearson_energy_mean=_mean_or_none(
            [p.pearson_energy for p in results if p.pearson_energy is not None]
        ),
        ses_mean=_mean_or_none([p.ses for p in results]),
        target_closer_fraction=(
            float(np.mean(closer)) if closer else None
        ),
        probe_speaker_raw=leakage_probe(raw_feats, speakers, seed),
        probe_speaker_content=leakage_probe(content_feats, speakers, seed),
        probe_emotion_prosody=leakage_probe(prosody_feats, emotions, seed),
        n_skipped_mcd=n_skipped,
        seed=seed,
        config={"use_dtw": use_dtw, "exclude_first_channel": exclude_first_channel,
                "stage": ckpt.stage, "n_pairs": len(pairs)},
    )


def write_curves_svg(csv_path: str | Path, svg_path: str | Path) -> None:
    """Render the per-step metrics log as a simple deterministic SVG plot."""
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{csv_path}: empty metrics log")
    series = {
        key: [float(r[key]) for r in rows]
        for key in ("L_rec", "L_dis", "L_pred", "L_total")
    }
    steps = [float(r["step"]) for r in rows]
    width, height, pad = 640, 360, 40
    x0, x1 = min(steps), max(steps) or 1.0
    all_vals = [v for vs in series.values() for v in vs]
    y0, y1 = min(all_vals), max(all_vals)
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x: float) -> float:
        return pad + (x - x0) / (x1 - x0 or 1.0) * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = {"L_rec": "#1f77b4", "L_dis": "#ff7f0e",
              "L_pred": "#2ca02c", "L_total": "#111111"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for li, (name, vals) in enumerate(series.items()):
        pts = " ".join(f"{sx(s):.2f},{sy(v):.2f}" for s, v in zip(steps, vals))
        parts.append(
            f'<polyline fill="none" stroke="{colors[name]}" points="{pts}"/>'
        )
        parts.append(
            f'<text x="{width - pad - 70}" y="{pad + 14 * li}" '
            f'fill="{colors[name]}" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    Path(svg_path).write_text("\n".join(parts) + "\n")
