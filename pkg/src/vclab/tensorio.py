"""Bit-exact tensor files, corpus manifests, and in-memory corpora.

Every array that crosses a process or language boundary in this project is
stored in one fixed binary layout (all integers little-endian):

    magic    4 bytes   b"SAVT"
    version  uint32    1
    dtype    uint8     0 (32-bit float; the only defined code)
    ndim     uint8     1..3
    dims     ndim * uint32
    payload  prod(dims) float32 values, row-major

The payload length must equal ``prod(dims) * 4`` exactly; trailing bytes are
format errors, never ignored. A corpus is described by a JSON manifest that
lists utterance records; record tensor paths are resolved relative to the
manifest's directory.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SAVT"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIBB")


class TensorFormatError(ValueError):
    """Raised for malformed tensor files or unrepresentable arrays."""


class ManifestError(ValueError):
    """Raised for malformed or inconsistent corpus manifests."""


def write_tensor(path: str | Path, t: np.ndarray) -> None:
    """Write ``t`` as a float32 tensor file.

    Args:
        path: destination file path.
        t: array with 1..3 dimensions, every dim >= 1, all values finite.

    Raises:
        TensorFormatError: non-finite values, bad rank, or zero-size dims.
    """
    arr = np.asarray(t)
    if arr.ndim < 1 or arr.ndim > 3:
        raise TensorFormatError(f"tensor rank must be 1..3, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"all dims must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("tensor contains NaN or Inf")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise TensorFormatError("tensor overflows float32")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(payload.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file written by :func:`write_tensor`.

    Returns:
        float32 array with the shape declared in the header.

    Raises:
        TensorFormatError: wrong magic/version/dtype, bad dims, or a payload
            whose byte length does not match the header exactly.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TensorFormatError(f"{path}: file shorter than header")
    magic, version, dtype, ndim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    if not 1 <= ndim <= 3:
        raise TensorFormatError(f"{path}: ndim must be 1..3, got {ndim}")
    dims_end = _HEADER.size + 4 * ndim
    if len(data) < dims_end:
        raise TensorFormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", data, _HEADER.size)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"{path}: zero-size dim in {dims}")
    n = int(np.prod(dims))
    expected = dims_end + 4 * n
    if len(data) != expected:
        raise TensorFormatError(
            f"{path}: payload size mismatch, expected {expected - dims_end} "
            f"bytes, found {len(data) - dims_end}"
        )
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=dims_end)
    return arr.reshape(dims).astype(np.float32)


@dataclass
class UtteranceRecord:
    """One corpus entry; tensor paths are relative to the manifest dir."""

    id: str
    speaker: str
    emotion: str
    units_path: str
    mel_path: str
    f0_path: str
    energy_path: str
    factors_path: str | None = None

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "speaker": self.speaker,
            "emotion": self.emotion,
            "units_path": self.units_path,
            "mel_path": self.mel_path,
            "f0_path": self.f0_path,
            "energy_path": self.energy_path,
        }
        if self.factors_path is not None:
            d["factors_path"] = self.factors_path
        return d


@dataclass
class Manifest:
    """Ordered utterance list plus corpus-level metadata."""

    utterances: list[UtteranceRecord]
    sample_rate_hz: int = 16000
    format_version: int = 1
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def record(self, utt_id: str) -> UtteranceRecord:
        for rec in self.utterances:
            if rec.id == utt_id:
                return rec
        raise ManifestError(f"unknown utterance id {utt_id!r}")


_RECORD_FIELDS = {
    "id", "speaker", "emotion",
    "units_path", "mel_path", "f0_path", "energy_path", "factors_path",
}
_REQUIRED_RECORD_FIELDS = _RECORD_FIELDS - {"factors_path"}
_MANIFEST_FIELDS = {"format_version", "sample_rate_hz", "utterances"}


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "format_version": manifest.format_version,
        "sample_rate_hz": manifest.sample_rate_hz,
        "utterances": [rec.to_json() for rec in manifest.utterances],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(
    path: str | Path,
    emotion_labels: list[str] | None = None,
    strict: bool = False,
) -> Manifest:
    """Load and validate a corpus manifest.

    Validation is eager for record-level invariants (unique ids, required
    fields, non-empty labels, resolvable file paths). Tensor shapes are
    verified lazily on first load unless ``strict`` is set, in which case
    every record's tensors are read and shape-checked up front.

    Args:
        path: manifest JSON file.
        emotion_labels: if given, every record's emotion must be in this set.
        strict: check all per-record shape invariants immediately.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    for key in doc:
        if key not in _MANIFEST_FIELDS:
            warnings.warn(f"{path}: ignoring unknown manifest field {key!r}")
    for key in ("format_version", "sample_rate_hz", "utterances"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")

    records: list[UtteranceRecord] = []
    seen_ids: set[str] = set()
    root = path.parent
    for i, entry in enumerate(doc["utterances"]):
        if not isinstance(entry, dict):
            raise ManifestError(f"{path}: utterance #{i} is not an object")
        missing = _REQUIRED_RECORD_FIELDS - set(entry)
        if missing:
            raise ManifestError(
                f"{path}: utterance #{i} missing fields {sorted(missing)}"
            )
        for key in entry:
            if key not in _RECORD_FIELDS:
                warnings.warn(
                    f"{path}: utterance #{i}: ignoring unknown field {key!r}"
                )
        rec = UtteranceRecord(
            id=entry["id"],
            speaker=entry["speaker"],
            emotion=entry["emotion"],
            units_path=entry["units_path"],
            mel_path=entry["mel_path"],
            f0_path=entry["f0_path"],
            energy_path=entry["energy_path"],
            factors_path=entry.get("factors_path"),
        )
        if rec.id in seen_ids:
            raise ManifestError(f"{path}: duplicate utterance id {rec.id!r}")
        seen_ids.add(rec.id)
        if not rec.speaker or not rec.emotion:
            raise ManifestError(f"{path}: {rec.id}: empty speaker/emotion label")
        if emotion_labels is not None and rec.emotion not in emotion_labels:
            raise ManifestError(
                f"{path}: {rec.id}: unknown emotion label {rec.emotion!r}"
            )
        for attr in ("units_path", "mel_path", "f0_path", "energy_path"):
            p = root / getattr(rec, attr)
            if not p.is_file():
                raise ManifestError(f"{path}: {rec.id}: missing file {p}")
        if rec.factors_path is not None and not (root / rec.factors_path).is_file():
            raise ManifestError(f"{path}: {rec.id}: missing factors file")
        records.append(rec)

    manifest = Manifest(
        utterances=records,
        sample_rate_hz=int(doc["sample_rate_hz"]),
        format_version=int(doc["format_version"]),
        root=root,
    )
    if strict:
        for rec in records:
            load_record_tensors(manifest, rec)
    return manifest


def load_record_tensors(
    manifest: Manifest, rec: UtteranceRecord
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Load one record's tensors and enforce the shared-length invariant.

    Returns ``(units, mel, f0, energy)`` with shapes (W,C), (W,M), (W,), (W,).
    Any shape mismatch is an error, never a silent truncation.
    """
    units = read_tensor(manifest.resolve(rec.units_path))
    mel = read_tensor(manifest.resolve(rec.mel_path))
    f0 = read_tensor(manifest.resolve(rec.f0_path))
    energy = read_tensor(manifest.resolve(rec.energy_path))
    if units.ndim != 2:
        raise ManifestError(f"{rec.id}: units must be rank 2, got {units.shape}")
    if mel.ndim != 2:
        raise ManifestError(f"{rec.id}: mel must be rank 2, got {mel.shape}")
    w = units.shape[0]
    if mel.shape[0] != w:
        raise ManifestError(
            f"{rec.id}: mel has {mel.shape[0]} frames, units have {w}"
        )
    for name, arr in (("f0", f0), ("energy", energy)):
        if arr.ndim != 1 or arr.shape[0] != w:
            raise ManifestError(
                f"{rec.id}: {name} has shape {arr.shape}, expected ({w},)"
            )
    return units, mel, f0, energy


class Corpus:
    """All tensors of a manifest loaded into memory, frame counts verified.

    Attributes:
        manifest: the source manifest.
        units, mel, f0, energy: per-record arrays, manifest order.
        speakers, emotions: sorted unique label lists.
        speaker_ids, emotion_ids: per-record integer labels.
    """

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.units: list[np.ndarray] = []
        self.mel: list[np.ndarray] = []
        self.f0: list[np.ndarray] = []
        self.energy: list[np.ndarray] = []
        for rec in manifest.utterances:
            u, m, f, e = load_record_tensors(manifest, rec)
            self.units.append(u)
            self.mel.append(m)
            self.f0.append(f)
            self.energy.append(e)
        self.speakers = sorted({r.speaker for r in manifest.utterances})
        self.emotions = sorted({r.emotion for r in manifest.utterances})
        spk_index = {s: i for i, s in enumerate(self.speakers)}
        emo_index = {e: i for i, e in enumerate(self.emotions)}
        self.speaker_ids = np.array(
            [spk_index[r.speaker] for r in manifest.utterances], dtype=np.int64
        )
        self.emotion_ids = np.array(
            [emo_index[r.emotion] for r in manifest.utterances], dtype=np.int64
        )

    def __len__(self) -> int:
        return len(self.manifest.utterances)

    @property
    def records(self) -> list[UtteranceRecord]:
        return self.manifest.utterances

    def uniform_frames(self) -> int:
        """Common frame count W, or raise if records disagree."""
        ws = {u.shape[0] for u in self.units}
        if len(ws) != 1:
            raise ManifestError(f"corpus mixes frame counts {sorted(ws)}")
        return ws.pop()

    def index_of(self, utt_id: str) -> int:
        for i, rec in enumerate(self.manifest.utterances):
            if rec.id == utt_id:
                return i
        raise ManifestError(f"unknown utterance id {utt_id!r}")


def load_corpus(path: str | Path, emotion_labels: list[str] | None = None) -> Corpus:
    """Load a manifest and all of its tensors (strict shape validation)."""
    return Corpus(load_manifest(path, emotion_labels=emotion_labels))


def split_holdout(corpus: Corpus, fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/holdout split of record indices.

    Within every (speaker, emotion) group, in manifest order, the last
    ``ceil(fraction * n)`` records are held out. Independent of any RNG so
    that train and evaluation code agree on the split for a given manifest.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"holdout fraction must be in [0, 1), got {fraction}")
    groups: dict[tuple[str, str], list[int]] = {}
    for i, rec in enumerate(corpus.records):
        groups.setdefault((rec.speaker, rec.emotion), []).append(i)
    train: list[int] = []
    held: list[int] = []
    for key in sorted(groups):
        idx = groups[key]
        n_held = int(np.ceil(fraction * len(idx))) if fraction > 0 else 0
        if n_held >= len(idx):
            n_held = len(idx) - 1
        cut = len(idx) - n_held
        train.extend(idx[:cut])
        held.extend(idx[cut:])
    return sorted(train), sorted(held)
