import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vclab.tensorio import (
    Corpus,
    Manifest,
    ManifestError,
    TensorFormatError,
    UtteranceRecord,
    load_manifest,
    read_tensor,
    save_manifest,
    split_holdout,
    write_tensor,
)


def test_smallest_legal_tensor_bytes(tmp_path):
    path = tmp_path / "t.savt"
    write_tensor(path, np.array([0.0], dtype=np.float32))
    data = path.read_bytes()
    assert len(data) == 18
    assert data == b"SAVT" + struct.pack("<I", 1) + b"\x00\x01" + struct.pack(
        "<I", 1
    ) + struct.pack("<f", 0.0)


def test_constant_payload_bytes(tmp_path):
    path = tmp_path / "t.savt"
    write_tensor(path, np.ones((2, 3), dtype=np.float32))
    data = path.read_bytes()
    assert struct.unpack_from("<2I", data, 10) == (2, 3)
    payload = data[18:]
    assert len(payload) == 24
    assert payload == struct.pack("<I", 0x3F800000) * 6


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.standard_normal((4, 8)).astype(np.float32)
    path = tmp_path / "t.savt"
    write_tensor(path, t)
    back = read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, t)
    assert back.tobytes() == t.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(tmp_path_factory, shape, seed):
    rng = np.random.default_rng(seed)
    t = (rng.standard_normal(shape) * 10.0 ** rng.integers(-3, 4)).astype(np.float32)
    path = tmp_path_factory.mktemp("rt") / "t.savt"
    write_tensor(path, t)
    assert read_tensor(path).tobytes() == t.tobytes()


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "t.savt", np.array([np.nan]))
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "t.savt", np.array([np.inf, 0.0]))


def test_write_rejects_bad_rank_and_unwritable(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "t.savt", np.zeros((2, 2, 2, 2)))
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "t.savt", np.zeros((0, 3)))
    with pytest.raises(OSError):
        write_tensor(tmp_path / "no" / "dir" / "t.savt", np.zeros(3))


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "t.savt"
    write_tensor(path, np.zeros(2))
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(path)


def test_read_rejects_truncated_payload(tmp_path):
    path = tmp_path / "t.savt"
    write_tensor(path, np.ones((2, 3)))
    data = path.read_bytes()
    path.write_bytes(data[:-4])  # 20 payload bytes instead of 24
    with pytest.raises(TensorFormatError, match="payload"):
        read_tensor(path)
    path.write_bytes(data + b"\x00\x00\x00\x00")  # trailing junk
    with pytest.raises(TensorFormatError, match="payload"):
        read_tensor(path)


def test_read_rejects_wrong_dtype_and_version(tmp_path):
    path = tmp_path / "t.savt"
    write_tensor(path, np.zeros(1))
    data = bytearray(path.read_bytes())
    data[8] = 1  # dtype code
    path.write_bytes(bytes(data))
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(path)
    data[8] = 0
    data[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(data))
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(path)


# ---------------------------------------------------------------------------
# manifests


def _write_corpus_files(root, w=6, c=3, m=2, ids=("u1",), speakers=None):
    records = []
    rng = np.random.default_rng(1)
    for i, utt_id in enumerate(ids):
        speaker = speakers[i] if speakers else "spkA"
        write_tensor(root / f"{utt_id}.units.savt", rng.standard_normal((w, c)))
        write_tensor(root / f"{utt_id}.mel.savt", rng.standard_normal((w, m)))
        write_tensor(root / f"{utt_id}.f0.savt", rng.standard_normal(w))
        write_tensor(root / f"{utt_id}.energy.savt", rng.standard_normal(w))
        records.append(
            UtteranceRecord(
                id=utt_id, speaker=speaker, emotion="emo00",
                units_path=f"{utt_id}.units.savt", mel_path=f"{utt_id}.mel.savt",
                f0_path=f"{utt_id}.f0.savt", energy_path=f"{utt_id}.energy.savt",
            )
        )
    return records


def test_manifest_round_trip(tmp_path):
    records = _write_corpus_files(tmp_path)
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    manifest = load_manifest(tmp_path / "manifest.json", strict=True)
    assert len(manifest.utterances) == 1
    assert manifest.utterances[0].id == "u1"
    assert manifest.sample_rate_hz == 16000


def test_manifest_duplicate_id_rejected(tmp_path):
    records = _write_corpus_files(tmp_path)
    records.append(records[0])
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_missing_field_rejected(tmp_path):
    _write_corpus_files(tmp_path)
    doc = {
        "format_version": 1,
        "sample_rate_hz": 16000,
        "utterances": [{"id": "u1", "speaker": "spkA", "emotion": "emo00"}],
    }
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="missing fields"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_unknown_emotion_with_label_set(tmp_path):
    records = _write_corpus_files(tmp_path)
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    with pytest.raises(ManifestError, match="unknown emotion"):
        load_manifest(tmp_path / "manifest.json", emotion_labels=["happy", "sad"])
    load_manifest(tmp_path / "manifest.json", emotion_labels=["emo00"])


def test_manifest_unknown_fields_warn(tmp_path):
    records = _write_corpus_files(tmp_path)
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["extra_top"] = 1
    doc["utterances"][0]["extra_rec"] = "x"
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.warns(UserWarning):
        manifest = load_manifest(tmp_path / "manifest.json")
    assert len(manifest.utterances) == 1


def test_strict_mode_catches_shape_mismatch(tmp_path):
    records = _write_corpus_files(tmp_path, w=64, c=16)
    # overwrite f0 with one frame too few
    write_tensor(tmp_path / "u1.f0.savt", np.zeros(63))
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    load_manifest(tmp_path / "manifest.json")  # lazy load passes
    with pytest.raises(ManifestError, match="f0"):
        load_manifest(tmp_path / "manifest.json", strict=True)


def test_manifest_order_preserved(tmp_path):
    ids = tuple(f"u{i}" for i in range(7))
    records = _write_corpus_files(tmp_path, ids=ids, speakers=["s"] * 7)
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    manifest = load_manifest(tmp_path / "manifest.json")
    assert [r.id for r in manifest.utterances] == list(ids)


def test_split_holdout_deterministic_and_grouped(tmp_path):
    ids = tuple(f"u{i}" for i in range(10))
    speakers = ["a"] * 5 + ["b"] * 5
    records = _write_corpus_files(tmp_path, ids=ids, speakers=speakers)
    save_manifest(Manifest(utterances=records), tmp_path / "manifest.json")
    corpus = Corpus(load_manifest(tmp_path / "manifest.json"))
    train, held = split_holdout(corpus, 0.2)
    assert train == [0, 1, 2, 3, 5, 6, 7, 8]
    assert held == [4, 9]
    assert split_holdout(corpus, 0.2) == (train, held)
    full, empty = split_holdout(corpus, 0.0)
    assert full == list(range(10)) and empty == []
