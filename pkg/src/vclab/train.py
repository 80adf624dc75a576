"""Losses and the three-stage training protocol.

Stage 1 pretrains the prosody teacher on contours alone (emotion scores
plus contour autoencoding, so its stream is informative). Stage 2 trains
the attribute encoder / decoder / speaker table on statistic-perturbed
units with reconstruction of the clean mel plus distillation against the
frozen teacher; the perturbation magnitudes share the optimizer but
receive sign-reversed gradients. Stage 3 fine-tunes with the emotion
prediction term added.

All stages are deterministic given the config seed (single-threaded
torch, explicit generators everywhere).
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .nets import (
    Checkpoint,
    EncoderConfig,
    MainModel,
    TeacherModel,
    encoder_config_dict,
    encoder_config_from_dict,
    init_parameters,
    model_from_checkpoint,
    params_to_state,
    pitch_features,
    state_to_params,
)
from .tensorio import Corpus, split_holdout

ASA_MODES = ("learned-scale", "literal", "fixed", "off")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 0.1
    cons_weight: float = 0.0
    lr_teacher: float = 1e-3
    lr_main: float = 1e-4
    batch_size: int = 16
    teacher_steps: int = 200
    main_steps: int = 2000
    finetune_steps: int = 600
    grad_clip: float = 1.0
    seed: int = 0
    asa_mode: str = "learned-scale"
    grl_lambda: float = 1.0
    holdout_fraction: float = 0.1
    prosody_enabled: bool = True
    discrete_units: bool = False
    adv_check_interval: int = 100

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam, self.cons_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch spread is undefined)")
        if self.lr_teacher <= 0 or self.lr_main <= 0:
            raise ValueError("learning rates must be positive")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.asa_mode not in ASA_MODES:
            raise ValueError(f"asa_mode must be one of {ASA_MODES}")


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(mel_hat: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
    """Squared error, averaged within an utterance, summed over the batch."""
    if mel_hat.shape != mel.shape:
        raise ValueError(f"shape mismatch {tuple(mel_hat.shape)} vs {tuple(mel.shape)}")
    per_utt = ((mel_hat - mel) ** 2).mean(dim=(-1, -2))
    return per_utt.sum()


def distill_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared error between student and (frozen) teacher streams."""
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch {tuple(student.shape)} vs {tuple(teacher.shape)}")
    return ((student - teacher) ** 2).mean()


def _check_onehot(y: torch.Tensor) -> None:
    ok = torch.all((y == 0) | (y == 1)) and torch.all(y.sum(dim=-1) == 1)
    if not ok:
        raise ValueError("labels must be one-hot vectors")


def emotion_pred_loss(
    y: torch.Tensor, y_teacher: torch.Tensor, y_student: torch.Tensor
) -> torch.Tensor:
    """Sum of squared distances of both predictions from the one-hot label.

    Batched inputs reduce by mean over the batch.
    """
    _check_onehot(y)
    per = ((y - y_teacher) ** 2).sum(dim=-1) + ((y - y_student) ** 2).sum(dim=-1)
    return per.mean() if per.ndim else per


def total_loss(rec, dis, pred, cfg: TrainConfig, cons=0.0):
    """Weighted objective: alpha*rec + beta*dis + lambda*pred (+ consistency)."""
    out = cfg.alpha * rec + cfg.beta * dis + cfg.lam * pred
    if cfg.cons_weight:
        out = out + cfg.cons_weight * cons
    return out


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class StepRecord:
    step: int
    rec: float
    dis: float
    pred: float
    total: float
    wall_ms: float


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    # (end_step, loss with window-start magnitudes, loss with current ones)
    adv_checks: list[tuple[int, float, float]] = field(default_factory=list)

    def totals(self) -> list[float]:
        return [s.total for s in self.steps]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "L_rec", "L_dis", "L_pred", "L_total", "wall_ms"])
            for s in self.steps:
                writer.writerow(
                    [s.step, repr(s.rec), repr(s.dis), repr(s.pred),
                     repr(s.total), repr(s.wall_ms)]
                )


class _Tensors:
    """Corpus tensors staged for batched torch training."""

    def __init__(self, corpus: Corpus, n_emotions: int):
        w = corpus.uniform_frames()
        self.frames = w
        self.units = torch.from_numpy(np.stack(corpus.units))
        self.mel = torch.from_numpy(np.stack(corpus.mel))
        contours = np.stack(
            [pitch_features(f0, en) for f0, en in zip(corpus.f0, corpus.energy)]
        )
        self.contours = torch.from_numpy(contours)
        self.speaker_ids = torch.from_numpy(corpus.speaker_ids)
        onehot = np.zeros((len(corpus), n_emotions), dtype=np.float32)
        onehot[np.arange(len(corpus)), corpus.emotion_ids] = 1.0
        self.onehot = torch.from_numpy(onehot)

    def batch(self, idx: np.ndarray) -> dict[str, torch.Tensor]:
        t = torch.from_numpy(np.ascontiguousarray(idx))
        return {
            "units": self.units[t],
            "mel": self.mel[t],
            "contours": self.contours[t],
            "speaker_ids": self.speaker_ids[t],
            "onehot": self.onehot[t],
        }


def _stage_seeds(seed: int, stage_tag: int) -> tuple[int, int, int, int]:
    ss = np.random.SeedSequence([seed, stage_tag])
    init, batch, noise, diag = (int(s) for s in ss.generate_state(4, np.uint64))
    return init, batch, noise, diag


def kmeans_codebook(
    frames: np.ndarray, k: int = 64, seed: int = 0, iters: int = 20,
    max_samples: int = 20000,
) -> np.ndarray:
    """Plain Lloyd k-means with seeded k-means++ init (discrete-unit ablation)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(frames, dtype=np.float64)
    if len(x) > max_samples:
        x = x[rng.choice(len(x), size=max_samples, replace=False)]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum()
        centers[j] = x[rng.choice(len(x), p=probs)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers.astype(np.float32)


# ---------------------------------------------------------------------------
# stage 1: teacher


def pretrain_teacher(
    corpus: Corpus,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Train the prosody teacher on contours + emotion labels.

    Objective: squared-error emotion scores (the teacher half of the
    prediction loss) plus reconstruction of its own pitch/energy inputs
    from the prosody stream, so the stream stays informative.
    """
    torch.set_num_threads(1)
    if enc_cfg.n_emotions != len(corpus.emotions):
        raise ValueError(
            f"config expects {enc_cfg.n_emotions} emotions, corpus has "
            f"{len(corpus.emotions)}"
        )
    init_seed, batch_seed, noise_seed, _ = _stage_seeds(cfg.seed, 1)
    teacher = TeacherModel(enc_cfg)
    gen = torch.Generator().manual_seed(init_seed)
    init_parameters(teacher, gen)
    teacher.train()

    data = _Tensors(corpus, enc_cfg.n_emotions)
    train_idx, _ = split_holdout(corpus, cfg.holdout_fraction)
    rng = np.random.default_rng(batch_seed)
    opt = torch.optim.Adam(teacher.parameters(), lr=cfg.lr_teacher,
                           betas=(0.9, 0.999), eps=1e-8)
    history = TrainHistory()
    for step in range(cfg.teacher_steps):
        t0 = time.perf_counter()
        idx = rng.choice(train_idx, size=cfg.batch_size, replace=True)
        batch = data.batch(idx)
        z = teacher.encoder(batch["contours"])
        scores = teacher.emotion_head(z)
        pred = ((batch["onehot"] - scores) ** 2).sum(dim=-1).mean()
        target = batch["contours"][:, :, [0, 2]]
        rec = ((teacher.contour_head(z) - target) ** 2).mean()
        loss = rec + pred
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(teacher.parameters(), cfg.grad_clip)
        opt.step()
        history.steps.append(
            StepRecord(step, float(rec.detach()), 0.0, float(pred.detach()),
                       float(loss.detach()), (time.perf_counter() - t0) * 1e3)
        )
    if log_path is not None:
        history.write_csv(log_path)

    ckpt = Checkpoint(
        stage="teacher",
        params=state_to_params(teacher),
        config={
            "encoder": encoder_config_dict(enc_cfg),
            "train": train_config_dict(cfg),
            "speakers": corpus.speakers,
            "emotions": corpus.emotions,
        },
        rng_state=gen.get_state().numpy().tobytes(),
        step_count=cfg.teacher_steps,
    )
    return ckpt, history


# ---------------------------------------------------------------------------
# stages 2 and 3 share one step


def _forward_losses(
    model: MainModel,
    batch: dict[str, torch.Tensor],
    cfg: TrainConfig,
    noise_gen: torch.Generator | None,
    include_pred: bool,
):
    units = model.prepare_units(batch["units"])
    if cfg.asa_mode != "off":
        x = model.perturb(units, generator=noise_gen)
    else:
        x = units
    content, prosody = model.encoder(x)
    with torch.no_grad():
        z_t = model.teacher.encoder(batch["contours"])
    prosody_in = prosody if cfg.prosody_enabled else torch.zeros_like(prosody)
    spk = model.speaker_table(batch["speaker_ids"])
    mel_hat = model.decoder(content, prosody_in, spk)
    rec = reconstruction_loss(mel_hat, batch["mel"])
    if cfg.prosody_enabled:
        dis = distill_loss(prosody, z_t)
    else:
        dis = torch.zeros((), dtype=rec.dtype)
    pred = torch.zeros((), dtype=rec.dtype)
    if include_pred:
        with torch.no_grad():
            y_teacher = model.teacher.emotion_head(z_t)
        y_student = model.student_emotion_head(prosody)
        pred = emotion_pred_loss(batch["onehot"], y_teacher, y_student)
    cons = torch.zeros((), dtype=rec.dtype)
    if cfg.cons_weight and cfg.asa_mode != "off":
        with torch.no_grad():
            clean_c, clean_p = model.encoder(units)
        cons = ((content - clean_c) ** 2).mean() + ((prosody - clean_p) ** 2).mean()
    return rec, dis, pred, total_loss(rec, dis, pred, cfg, cons)


def _eval_total(model, batch, cfg, noise_seed: int, include_pred: bool) -> float:
    gen = torch.Generator().manual_seed(noise_seed)
    with torch.no_grad():
        *_, total = _forward_losses(model, batch, cfg, gen, include_pred)
    return float(total)


def _run_stage(
    model: MainModel,
    data: _Tensors,
    train_idx: list[int],
    cfg: TrainConfig,
    steps: int,
    lr: float,
    include_pred: bool,
    seeds: tuple[int, int, int],
    log_path: str | Path | None,
    noise_gen: torch.Generator | None = None,
) -> TrainHistory:
    batch_seed, noise_seed, diag_seed = seeds
    rng = np.random.default_rng(batch_seed)
    if noise_gen is None:
        noise_gen = torch.Generator().manual_seed(noise_seed)
    model.train()
    model.teacher.requires_grad_(False)
    model.teacher.eval()
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=lr, betas=(0.9, 0.999), eps=1e-8)

    adversarial = cfg.asa_mode in ("learned-scale", "literal")
    check_every = cfg.adv_check_interval if adversarial else 0
    diag_rng = np.random.default_rng(diag_seed)
    diag_batch = data.batch(diag_rng.choice(train_idx, size=cfg.batch_size))
    mags_snapshot = None

    history = TrainHistory()
    for step in range(steps):
        t0 = time.perf_counter()
        if check_every and step % check_every == 0:
            mags_snapshot = (
                model.perturb.mag_mu.detach().clone(),
                model.perturb.mag_sigma.detach().clone(),
            )
        idx = rng.choice(train_idx, size=cfg.batch_size, replace=True)
        batch = data.batch(idx)
        rec, dis, pred, loss = _forward_losses(
            model, batch, cfg, noise_gen, include_pred
        )
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
        opt.step()
        history.steps.append(
            StepRecord(step, float(rec.detach()), float(dis.detach()),
                       float(pred.detach()), float(loss.detach()),
                       (time.perf_counter() - t0) * 1e3)
        )
        if check_every and step % check_every == check_every - 1:
            window_seed = diag_seed ^ (step + 1)
            with torch.no_grad():
                current = (
                    model.perturb.mag_mu.detach().clone(),
                    model.perturb.mag_sigma.detach().clone(),
                )
                loss_new = _eval_total(model, diag_batch, cfg, window_seed,
                                       include_pred)
                model.perturb.mag_mu.copy_(mags_snapshot[0])
                model.perturb.mag_sigma.copy_(mags_snapshot[1])
                loss_old = _eval_total(model, diag_batch, cfg, window_seed,
                                       include_pred)
                model.perturb.mag_mu.copy_(current[0])
                model.perturb.mag_sigma.copy_(current[1])
            history.adv_checks.append((step + 1, loss_old, loss_new))
    if log_path is not None:
        history.write_csv(log_path)
    return history


def train_main(
    corpus: Corpus,
    teacher_ckpt: Checkpoint,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Stage 2: encoder/decoder training with statistic perturbation and
    distillation against the frozen teacher."""
    torch.set_num_threads(1)
    if teacher_ckpt.stage != "teacher":
        raise ValueError(
            f"train_main needs a teacher checkpoint, got stage {teacher_ckpt.stage!r}"
        )
    enc_cfg = encoder_config_from_dict(teacher_ckpt.config["encoder"])
    init_seed, batch_seed, noise_seed, diag_seed = _stage_seeds(cfg.seed, 2)

    codebook = None
    train_idx, _ = split_holdout(corpus, cfg.holdout_fraction)
    if cfg.discrete_units:
        frames = np.concatenate([corpus.units[i] for i in train_idx])
        codebook = kmeans_codebook(frames, k=64, seed=init_seed)

    module_mode = cfg.asa_mode if cfg.asa_mode != "off" else "learned-scale"
    model = MainModel(
        enc_cfg,
        speakers=corpus.speakers,
        asa_mode=module_mode,
        grl_lambda=cfg.grl_lambda,
        unit_codebook=codebook,
    )
    gen = torch.Generator().manual_seed(init_seed)
    init_parameters(model, gen)
    params_to_state(model.teacher, teacher_ckpt.params)

    data = _Tensors(corpus, enc_cfg.n_emotions)
    noise_gen = torch.Generator().manual_seed(noise_seed)
    history = _run_stage(
        model, data, train_idx, cfg, cfg.main_steps, cfg.lr_main,
        include_pred=False, seeds=(batch_seed, noise_seed, diag_seed),
        log_path=log_path, noise_gen=noise_gen,
    )
    ckpt = Checkpoint(
        stage="main",
        params=state_to_params(model),
        config={
            "encoder": encoder_config_dict(enc_cfg),
            "train": train_config_dict(cfg),
            "speakers": corpus.speakers,
            "emotions": corpus.emotions,
        },
        rng_state=noise_gen.get_state().numpy().tobytes(),
        step_count=cfg.main_steps,
    )
    return ckpt, history


def finetune(
    main_ckpt: Checkpoint,
    corpus: Corpus,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Stage 3: continue training with the emotion prediction term added."""
    torch.set_num_threads(1)
    if main_ckpt.stage != "main":
        raise ValueError(
            f"finetune needs a main checkpoint, got stage {main_ckpt.stage!r}"
        )
    enc_cfg = encoder_config_from_dict(main_ckpt.config["encoder"])
    _, batch_seed, noise_seed, diag_seed = _stage_seeds(cfg.seed, 3)
    model = model_from_checkpoint(main_ckpt)
    data = _Tensors(corpus, enc_cfg.n_emotions)
    train_idx, _ = split_holdout(corpus, cfg.holdout_fraction)
    noise_gen = torch.Generator().manual_seed(noise_seed)
    history = _run_stage(
        model, data, train_idx, cfg, cfg.finetune_steps, cfg.lr_main,
        include_pred=True, seeds=(batch_seed, noise_seed, diag_seed),
        log_path=log_path, noise_gen=noise_gen,
    )
    ckpt = Checkpoint(
        stage="finetuned",
        params=state_to_params(model),
        config={
            "encoder": encoder_config_dict(enc_cfg),
            "train": train_config_dict(cfg),
            "speakers": corpus.speakers,
            "emotions": corpus.emotions,
        },
        rng_state=noise_gen.get_state().numpy().tobytes(),
        step_count=main_ckpt.step_count + cfg.finetune_steps,
    )
    return ckpt, history
