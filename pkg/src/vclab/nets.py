"""Small differentiable networks: attribute encoder, prosody teacher,
decoder, speaker table, emotion head, plus checkpoint persistence.

All trunks are dilated 1-D convolutions followed by a Bi-GRU; sequence
length is preserved throughout (same-padding), so content and prosody
streams stay frame-aligned into the decoder. Layer sizes are configurable
and sized for minutes-scale CPU training.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .perturb import StylePerturb
from .tensorio import read_tensor, write_tensor

STAGES = ("teacher", "main", "finetuned")


@dataclass(frozen=True)
class EncoderConfig:
    unit_channels: int
    mel_channels: int
    conv_blocks: int = 3
    kernel: int = 5
    dilations: tuple[int, ...] = (1, 2, 4)
    conv_channels: int = 64
    gru_hidden: int = 32
    content_dim: int = 12
    prosody_dim: int = 4
    speaker_dim: int = 64
    n_style_tokens: int = 8
    n_emotions: int = 5

    def __post_init__(self):
        dims = (
            self.unit_channels, self.mel_channels, self.conv_blocks,
            self.kernel, self.conv_channels, self.gru_hidden,
            self.content_dim, self.prosody_dim, self.speaker_dim,
            self.n_style_tokens, self.n_emotions,
        )
        if any(d < 1 for d in dims):
            raise ValueError("all encoder dimensions must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.content_dim + self.prosody_dim >= 2 * self.gru_hidden:
            raise ValueError("content_dim + prosody_dim must be < 2 * gru_hidden")
        if len(self.dilations) != self.conv_blocks:
            raise ValueError("need one dilation per conv block")


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform fan-in-scaled init for every parameter, from one generator.

    Overrides torch's default init so that model construction never touches
    global RNG state; identical seeds give identical parameters.
    """
    for p in module.parameters():
        fan_in = int(np.prod(p.shape[1:])) if p.ndim >= 2 else p.shape[0]
        bound = 1.0 / float(np.sqrt(fan_in))
        with torch.no_grad():
            p.uniform_(-bound, bound, generator=generator)


class ConvTrunk(nn.Module):
    """Stacked same-padding dilated Conv1d blocks with tanh activations."""

    def __init__(self, in_channels: int, cfg: EncoderConfig, width: int):
        super().__init__()
        blocks = []
        ch = in_channels
        for d in cfg.dilations:
            blocks.append(
                nn.Conv1d(
                    ch, width, cfg.kernel,
                    padding=d * (cfg.kernel - 1) // 2, dilation=d,
                )
            )
            ch = width
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, W, ch_in) -> (B, W, width)
        h = x.transpose(1, 2)
        for block in self.blocks:
            h = torch.tanh(block(h))
        return h.transpose(1, 2)


def _ensure_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 2:
        return x.unsqueeze(0), True
    return x, False


class AttributeEncoder(nn.Module):
    """Units -> frame-aligned content and prosody streams.

    One shared conv + Bi-GRU trunk with two linear bottleneck heads.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = ConvTrunk(cfg.unit_channels, cfg, cfg.conv_channels)
        self.gru = nn.GRU(
            cfg.conv_channels, cfg.gru_hidden, batch_first=True, bidirectional=True
        )
        self.content_head = nn.Linear(2 * cfg.gru_hidden, cfg.content_dim)
        self.prosody_head = nn.Linear(2 * cfg.gru_hidden, cfg.prosody_dim)

    def forward(self, units: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        units, squeeze = _ensure_batch(units)
        if units.shape[1] < self.cfg.kernel:
            raise ValueError(
                f"need at least {self.cfg.kernel} frames, got {units.shape[1]}"
            )
        h = self.trunk(units)
        h, _ = self.gru(h)
        content = self.content_head(h)
        prosody = self.prosody_head(h)
        if squeeze:
            return content.squeeze(0), prosody.squeeze(0)
        return content, prosody


def pitch_features(f0: np.ndarray, energy: np.ndarray) -> np.ndarray:
    """Stack teacher inputs (W, 3): z-scored voiced log-pitch, voicing, energy.

    Pitch is standardized over voiced frames only and forced to 0 at
    unvoiced frames; energy passes through on its log scale.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    energy = np.asarray(energy, dtype=np.float64)
    voiced = f0 != 0.0
    if voiced.any():
        mu = f0[voiced].mean()
        sd = np.sqrt(f0[voiced].var() + 1e-10)
        f0n = np.where(voiced, (f0 - mu) / sd, 0.0)
    else:
        f0n = np.zeros_like(f0)
    return np.stack([f0n, voiced.astype(np.float64), energy], axis=1).astype(
        np.float32
    )


class ProsodyTeacher(nn.Module):
    """Contours -> prosody stream, with a style-token attention readout.

    Same trunk family as the attribute encoder at reduced width. The final
    GRU state queries a bank of trainable style tokens (keys = values);
    the readout is broadcast additively onto the per-frame projection.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        width = max(cfg.conv_channels // 2, 4)
        hidden = max(cfg.gru_hidden // 2, 2)
        self.trunk = ConvTrunk(3, cfg, width)
        self.gru = nn.GRU(width, hidden, batch_first=True, bidirectional=True)
        self.tokens = nn.Parameter(torch.empty(cfg.n_style_tokens, 2 * hidden))
        self.frame_head = nn.Linear(2 * hidden, cfg.prosody_dim)
        self.token_head = nn.Linear(2 * hidden, cfg.prosody_dim)

    def attention(self, query: torch.Tensor) -> torch.Tensor:
        scores = query @ self.tokens.T / np.sqrt(self.tokens.shape[1])
        return torch.softmax(scores, dim=-1)

    def forward(self, contours: torch.Tensor) -> torch.Tensor:
        """contours: (B, W, 3) or (W, 3) from :func:`pitch_features`."""
        contours, squeeze = _ensure_batch(contours)
        h = self.trunk(contours)
        h, h_n = self.gru(h)
        query = torch.cat([h_n[0], h_n[1]], dim=-1)  # (B, 2*hidden)
        weights = self.attention(query)
        readout = weights @ self.tokens
        z = self.frame_head(h) + self.token_head(readout).unsqueeze(1)
        return z.squeeze(0) if squeeze else z


class Decoder(nn.Module):
    """[content | prosody | speaker] per frame -> mel frames."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = cfg.content_dim + cfg.prosody_dim + cfg.speaker_dim
        self.input_proj = nn.Linear(in_dim, cfg.conv_channels)
        mirrored = replace(cfg, dilations=tuple(reversed(cfg.dilations)))
        self.trunk = ConvTrunk(cfg.conv_channels, mirrored, cfg.conv_channels)
        self.gru = nn.GRU(
            cfg.conv_channels, cfg.gru_hidden, batch_first=True, bidirectional=True
        )
        self.output = nn.Linear(2 * cfg.gru_hidden, cfg.mel_channels)

    def forward(
        self, content: torch.Tensor, prosody: torch.Tensor, speaker: torch.Tensor
    ) -> torch.Tensor:
        content, squeeze = _ensure_batch(content)
        prosody, _ = _ensure_batch(prosody)
        if speaker.ndim == 1:
            speaker = speaker.unsqueeze(0)
        if content.shape[:2] != prosody.shape[:2]:
            raise ValueError("content and prosody streams must be frame-aligned")
        spk = speaker.unsqueeze(1).expand(-1, content.shape[1], -1)
        h = self.input_proj(torch.cat([content, prosody, spk], dim=-1))
        h = self.trunk(h)
        h, _ = self.gru(h)
        mel = self.output(h)
        return mel.squeeze(0) if squeeze else mel


class SpeakerTable(nn.Module):
    """Learned per-speaker embeddings, with an external-vector import path."""

    def __init__(self, speakers: list[str], dim: int):
        super().__init__()
        self.speakers = list(speakers)
        self.index = {s: i for i, s in enumerate(self.speakers)}
        self.dim = dim
        self.table = nn.Parameter(torch.empty(len(self.speakers), dim))

    def embed(self, speaker: str, external: np.ndarray | None = None) -> torch.Tensor:
        """Look up a known speaker, or pass an imported vector through.

        Unknown speakers require an external embedding (the zero-shot path).
        """
        if external is not None:
            vec = torch.as_tensor(np.asarray(external), dtype=self.table.dtype)
            if vec.shape != (self.dim,):
                raise ValueError(
                    f"external embedding has shape {tuple(vec.shape)}, "
                    f"expected ({self.dim},)"
                )
            return vec
        if speaker not in self.index:
            raise KeyError(
                f"unknown speaker {speaker!r} and no external embedding given"
            )
        return self.table[self.index[speaker]]

    def forward(self, speaker_ids: torch.Tensor) -> torch.Tensor:
        return self.table[speaker_ids]


class EmotionHead(nn.Module):
    """Mean-pool a prosody stream over frames, then a linear class map."""

    def __init__(self, prosody_dim: int, n_emotions: int):
        super().__init__()
        self.linear = nn.Linear(prosody_dim, n_emotions)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z.mean(dim=-2))


class TeacherModel(nn.Module):
    """Prosody teacher plus its emotion head and contour reconstruction head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ProsodyTeacher(cfg)
        self.emotion_head = EmotionHead(cfg.prosody_dim, cfg.n_emotions)
        # reconstructs the (pitch, energy) input channels from the stream
        self.contour_head = nn.Linear(cfg.prosody_dim, 2)


class MainModel(nn.Module):
    """Everything the conversion pipeline trains and ships.

    Includes a frozen copy of the teacher so that one checkpoint is
    sufficient for fine-tuning and evaluation.
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        speakers: list[str],
        asa_mode: str = "learned-scale",
        grl_lambda: float = 1.0,
        unit_codebook: np.ndarray | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.encoder = AttributeEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.speaker_table = SpeakerTable(speakers, cfg.speaker_dim)
        self.perturb = StylePerturb(
            cfg.unit_channels, mode=asa_mode, grl_lambda=grl_lambda
        )
        self.student_emotion_head = EmotionHead(cfg.prosody_dim, cfg.n_emotions)
        self.teacher = TeacherModel(cfg)
        if unit_codebook is not None:
            self.register_buffer(
                "unit_codebook", torch.as_tensor(unit_codebook, dtype=torch.float32)
            )
        else:
            self.unit_codebook = None

    def prepare_units(self, units: torch.Tensor) -> torch.Tensor:
        """Optional discrete-unit ablation: snap frames to codebook entries."""
        if self.unit_codebook is None:
            return units
        flat = units.reshape(-1, units.shape[-1])
        d = torch.cdist(flat, self.unit_codebook)
        return self.unit_codebook[d.argmin(dim=1)].reshape(units.shape)


@dataclass
class Checkpoint:
    """Serialized parameters + config + RNG state for one training stage."""

    stage: str
    params: dict[str, np.ndarray]
    config: dict
    rng_state: bytes
    step_count: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


def _param_filename(i: int) -> str:
    return f"p{i:04d}.savt"


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> None:
    """Persist a checkpoint as a tensor-file bundle plus a JSON sidecar."""
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    index = []
    for i, (name, arr) in enumerate(ckpt.params.items()):
        fname = _param_filename(i)
        write_tensor(out / "params" / fname, np.asarray(arr, dtype=np.float32))
        index.append({"name": name, "file": fname, "shape": list(arr.shape)})
    meta = {
        "stage": ckpt.stage,
        "step_count": ckpt.step_count,
        "rng_state": ckpt.rng_state.hex(),
        "config": ckpt.config,
        "params": index,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    params = {}
    for entry in meta["params"]:
        arr = read_tensor(path / "params" / entry["file"])
        params[entry["name"]] = arr.reshape(entry["shape"])
    return Checkpoint(
        stage=meta["stage"],
        params=params,
        config=meta["config"],
        rng_state=bytes.fromhex(meta["rng_state"]),
        step_count=int(meta["step_count"]),
    )


def state_to_params(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def params_to_state(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {name: torch.as_tensor(arr) for name, arr in params.items()}
    module.load_state_dict(state)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["dilations"] = tuple(d["dilations"])
    return EncoderConfig(**d)


def teacher_from_checkpoint(ckpt: Checkpoint) -> TeacherModel:
    if ckpt.stage != "teacher":
        raise ValueError(f"expected a teacher checkpoint, got stage {ckpt.stage!r}")
    cfg = encoder_config_from_dict(ckpt.config["encoder"])
    model = TeacherModel(cfg)
    params_to_state(model, ckpt.params)
    model.eval()
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> MainModel:
    if ckpt.stage not in ("main", "finetuned"):
        raise ValueError(
            f"expected a main or finetuned checkpoint, got stage {ckpt.stage!r}"
        )
    cfg = encoder_config_from_dict(ckpt.config["encoder"])
    train_cfg = ckpt.config.get("train", {})
    mode = train_cfg.get("asa_mode", "learned-scale")
    if mode == "off":
        mode = "learned-scale"  # module mode is irrelevant when bypassed
    codebook = None
    if "unit_codebook" in ckpt.params:
        codebook = ckpt.params["unit_codebook"]
    model = MainModel(
        cfg,
        speakers=list(ckpt.config["speakers"]),
        asa_mode=mode,
        grl_lambda=train_cfg.get("grl_lambda", 1.0) or 1.0,
        unit_codebook=codebook,
    )
    params_to_state(model, ckpt.params)
    model.eval()
    return model


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["dilations"] = list(cfg.dilations)
    return d
