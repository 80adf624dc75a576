"""Inference-time voice conversion.

Re-synthesizes an utterance's mel features with a target speaker's
embedding while keeping the source's content and prosody streams. The
statistic perturbation is a training-only transform and is never applied
here; the encoder sees the raw (or, under the discrete-unit ablation,
quantized) units.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .nets import Checkpoint, MainModel, model_from_checkpoint
from .tensorio import (
    Manifest,
    ManifestError,
    UtteranceRecord,
    load_record_tensors,
    write_tensor,
)


@dataclass
class ConversionRequest:
    source: UtteranceRecord
    target_speaker: str | None = None
    target_embedding: np.ndarray | None = None
    output_path: str | Path | None = None

    def __post_init__(self):
        if self.target_speaker is None and self.target_embedding is None:
            raise ValueError("request needs a target speaker or an embedding")


def load_model(ckpt: Checkpoint) -> MainModel:
    """Checkpoint -> frozen inference model (main or finetuned stage only)."""
    model = model_from_checkpoint(ckpt)
    model.eval()
    model.requires_grad_(False)
    return model


def convert_units(
    model: MainModel,
    units: np.ndarray,
    target_speaker: str | None = None,
    target_embedding: np.ndarray | None = None,
) -> np.ndarray:
    """Convert one units tensor (W, C) to a mel (W, M) for the target."""
    if model.training:
        raise RuntimeError("conversion requires an inference-mode model")
    torch.set_num_threads(1)
    with torch.no_grad():
        x = model.prepare_units(torch.from_numpy(np.asarray(units, dtype=np.float32)))
        content, prosody = model.encoder(x)
        spk = model.speaker_table.embed(target_speaker, target_embedding)
        mel = model.decoder(content, prosody, spk)
    return mel.numpy().astype(np.float32)


def convert(
    req: ConversionRequest, ckpt_or_model: Checkpoint | MainModel, manifest: Manifest
) -> np.ndarray:
    """Run one conversion request; writes the mel if an output path is set."""
    model = (
        ckpt_or_model
        if isinstance(ckpt_or_model, MainModel)
        else load_model(ckpt_or_model)
    )
    units, _, _, _ = load_record_tensors(manifest, req.source)
    mel = convert_units(model, units, req.target_speaker, req.target_embedding)
    if req.output_path is not None:
        write_tensor(req.output_path, mel)
    return mel


def batch_convert(
    manifest: Manifest,
    pairs: list[tuple[str, str]],
    ckpt: Checkpoint,
    out_dir: str | Path,
    jobs: int = 1,
) -> Path:
    """Convert (utterance id, target speaker) pairs; all-or-nothing validation.

    Writes one mel tensor per pair plus a results manifest JSON; conversions
    are independent, so parallel and serial runs produce identical bytes.

    Returns:
        path of the results manifest.
    """
    model = load_model(ckpt)
    requests = []
    for utt_id, target in pairs:
        rec = manifest.record(utt_id)  # raises on unknown id
        if target not in model.speaker_table.index:
            raise ManifestError(f"unknown target speaker {target!r}")
        requests.append((rec, target))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(item: tuple[UtteranceRecord, str]) -> dict:
        rec, target = item
        units, _, _, _ = load_record_tensors(manifest, rec)
        mel = convert_units(model, units, target)
        name = f"{rec.id}__to__{target}.mel.savt"
        write_tensor(out / name, mel)
        return {
            "id": rec.id,
            "source_speaker": rec.speaker,
            "target_speaker": target,
            "mel_path": name,
        }

    if jobs > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, requests))
    else:
        results = [run(item) for item in requests]

    doc = {"format_version": 1, "pairs": results}
    result_path = out / "conversions.json"
    with open(result_path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return result_path
