"""Long-form composition in the compressed domain.

Three masking tasks drive one shared mask-conditioned DiT: ``scratch`` masks
everything, ``continuation`` masks the tail, ``completion`` masks an interior
span.  Generation runs the diffusion sampler with hard consistency, so
visible frames of the conditioning mel survive to the output bit-exactly.
``compose_full`` chains the whole pipeline: compress, extract, generate,
restore, vocode.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .audio import DatasetManifest, Waveform, read_wav
from .diffusion import NoiseSchedule, Rng, data_scaled_schedule, make_schedule, refine_loss, sample
from .errors import CheckpointError, ConfigError, DomainError
from .nn import (Adam, DitConfig, MelDiT, Tensor, clip_gradients, fingerprint,
                 load_checkpoint, save_checkpoint)
from .restoration import RestorationCheckpoint, _manifest_sample_rate, restore
from .spectral import (
    MelConfig,
    MelSpectrogram,
    mel_config_from_dict,
    mel_config_to_dict,
    mel_spectrogram,
    model_mel,
    vocode,
)
from .timescale import tsm_compress, validate_ratio

TASKS = ("scratch", "continuation", "completion")

MASK_FRACTION_RANGE = (0.25, 0.75)


@dataclass(frozen=True)
class MaskSpec:
    """Frame-range mask; ranges are half-open [start, end) over total_frames."""

    kind: str
    total_frames: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.kind not in TASKS:
            raise DomainError(f"unknown mask kind {self.kind!r}")
        last = 0
        for start, end in self.ranges:
            if not (0 <= start <= end <= self.total_frames):
                raise DomainError(f"mask range [{start}, {end}) out of bounds")
            if start < last:
                raise DomainError("mask ranges must be sorted and non-overlapping")
            last = end
        if self.kind == "scratch" and self.ranges != ((0, self.total_frames),):
            raise DomainError("scratch mask must cover all frames")
        if self.kind == "continuation":
            if len(self.ranges) != 1 or self.ranges[0][1] != self.total_frames:
                raise DomainError("continuation mask must be one tail range")
            if self.ranges[0][0] <= 0:
                raise DomainError("continuation mask must leave a visible head")
        if self.kind == "completion":
            if len(self.ranges) != 1:
                raise DomainError("completion mask must be one interior range")
            a, b = self.ranges[0]
            if not (0 < a < b < self.total_frames):
                raise DomainError("completion mask must be strictly interior and non-empty")

    def plane(self) -> np.ndarray:
        """Per-frame mask vector, 1.0 on masked frames."""
        plane = np.zeros(self.total_frames)
        for start, end in self.ranges:
            plane[start:end] = 1.0
        return plane


def make_mask(kind: str, total_frames: int, rng: Rng | None = None,
              boundaries: tuple | int | None = None) -> MaskSpec:
    """Build a mask for one composition task.

    Training mode (``rng`` given) draws boundaries with a masked fraction in
    [0.25, 0.75].  Inference mode takes explicit boundaries: the visible
    length ``k`` for continuation, or an ``(a, b)`` frame interval for
    completion.  Continuation accepts k == total_frames (nothing masked).
    """
    if total_frames < 8:
        raise DomainError(f"total_frames must be >= 8, got {total_frames}")
    if kind == "scratch":
        return MaskSpec(kind, total_frames, ((0, total_frames),))
    lo, hi = MASK_FRACTION_RANGE
    if kind == "continuation":
        if rng is not None:
            frac = rng.uniform(lo, hi)
            k = int(np.clip(total_frames - round(frac * total_frames), 1, total_frames - 1))
        else:
            if boundaries is None:
                raise DomainError("continuation needs a visible length k")
            k = int(boundaries)
            if not 0 < k <= total_frames:
                raise DomainError(f"visible length k={k} out of (0, {total_frames}]")
        return MaskSpec(kind, total_frames, ((k, total_frames),))
    if kind == "completion":
        if rng is not None:
            frac = rng.uniform(lo, hi)
            length = int(np.clip(round(frac * total_frames), 1, total_frames - 2))
            a = int(rng.integers(1, total_frames - length))
        else:
            if boundaries is None:
                raise DomainError("completion needs an (a, b) frame interval")
            a, b = int(boundaries[0]), int(boundaries[1])
            length = b - a
        return MaskSpec(kind, total_frames, ((a, a + length),))
    raise DomainError(f"unknown mask kind {kind!r}")


def apply_mask(m: MelSpectrogram, mask: MaskSpec) -> tuple[MelSpectrogram, np.ndarray]:
    """Floor masked frames and return the conditioning mel plus mask plane."""
    if mask.total_frames != m.frame_count:
        raise DomainError(
            f"mask covers {mask.total_frames} frames, mel has {m.frame_count}"
        )
    plane = mask.plane()
    frames = m.frames.copy()
    frames[plane > 0] = m.config.floor_log
    return dataclasses.replace(m, frames=frames), plane


def masked_mse(pred: Tensor, target: np.ndarray, plane: np.ndarray) -> Tensor:
    """MSE restricted to masked frames (plane == 1)."""
    weights = np.broadcast_to(np.asarray(plane)[:, None], target.shape)
    count = max(weights.sum(), 1.0)
    diff = pred - Tensor(np.asarray(target, dtype=pred.data.dtype))
    return (diff * diff * Tensor(weights.astype(pred.data.dtype))).sum() * (1.0 / count)


def composer_dit_config() -> DitConfig:
    """Same DiT family as the refiner; condition is the masked mel plus a
    binary mask channel."""
    return DitConfig(bins=80, cond_bins=81, patch=4, dim=256, depth=8, heads=4, t_dim=128)


@dataclass
class ComposerTrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 1
    clip_norm: float = 1.0
    crop_frames: int = 96  # compressed-domain crop per step
    schedule_steps: int = 50
    tsm_mode: str = "phase_vocoder"
    masked_only: bool = False  # restrict the loss to masked frames
    log_path: str | None = None


class ComposerCheckpoint:
    KIND = "composer"

    def __init__(self, dit: MelDiT, schedule: NoiseSchedule, mel_config: MelConfig,
                 ratio: float, sigma_data: float):
        self.dit = dit
        self.schedule = schedule
        self.mel_config = mel_config
        self.ratio = float(ratio)
        self.sigma_data = float(sigma_data)
        self.fingerprint = fingerprint(
            {
                "mel": mel_config_to_dict(mel_config),
                "schedule": schedule.to_dict(),
                "dit": dit.cfg.to_dict(),
            }
        )

    def save(self, path) -> None:
        hyper = {
            "mel_config": mel_config_to_dict(self.mel_config),
            "schedule": self.schedule.to_dict(),
            "dit": self.dit.cfg.to_dict(),
            "ratio": self.ratio,
            "sigma_data": self.sigma_data,
            "fingerprint": self.fingerprint,
        }
        save_checkpoint(path, self.KIND, hyper, self.dit.state_dict())

    @classmethod
    def load(cls, path) -> "ComposerCheckpoint":
        kind, hyper, tensors = load_checkpoint(path)
        if kind != cls.KIND:
            raise CheckpointError(f"{path}: expected a {cls.KIND} checkpoint, got {kind}")
        dit = MelDiT(DitConfig.from_dict(hyper["dit"]), Rng(0), sigma_data=hyper["sigma_data"])
        dit.load_state_dict(tensors)
        ckpt = cls(dit, NoiseSchedule.from_dict(hyper["schedule"]),
                   mel_config_from_dict(hyper["mel_config"]), hyper["ratio"], hyper["sigma_data"])
        if ckpt.fingerprint != hyper["fingerprint"]:
            raise CheckpointError(f"{path}: fingerprint mismatch after load")
        return ckpt


def _cond_stack(cond_mel: np.ndarray, plane: np.ndarray) -> np.ndarray:
    return np.concatenate([cond_mel, plane[:, None]], axis=1)


def train_composer(manifest: DatasetManifest, r: float = 4.0,
                   cfg: ComposerTrainConfig | None = None, seed: int = 0) -> ComposerCheckpoint:
    """Train the mask-conditioned generation DiT on compressed mels.

    Per step: crop a compressed mel, draw a task kind uniformly and a training
    mask, floor the masked frames, and minimize the x0 denoising MSE with the
    (masked mel, mask plane) condition.  Deterministic in ``seed``.
    """
    cfg = cfg or ComposerTrainConfig()
    r = validate_ratio(r)
    mel_cfg = model_mel(_manifest_sample_rate(manifest))
    entries = manifest.split("train")
    if not entries:
        raise ConfigError("manifest has no train entries")
    mels = []
    for entry in entries:
        wav = read_wav(manifest.path(entry.mixture))
        mels.append(mel_spectrogram(tsm_compress(wav, r, mode=cfg.tsm_mode), mel_cfg).frames)

    sigma_data = max(float(np.std(np.concatenate([m.reshape(-1) for m in mels]))), 1e-3)
    schedule = data_scaled_schedule(sigma_data, cfg.schedule_steps)

    root = Rng(seed).child("train_composer")
    dit = MelDiT(composer_dit_config(), root.child("init"), sigma_data=sigma_data)
    opt = Adam(dit.named_parameters(), lr=cfg.lr)

    draw = root.child("draw")
    floor = mel_cfg.floor_log
    log_rows = []
    for step in range(cfg.steps):
        opt.zero_grad()
        loss_val = 0.0
        for _ in range(cfg.batch):
            m = mels[int(draw.integers(0, len(mels)))]
            take = min(cfg.crop_frames, m.shape[0])
            start = int(draw.integers(0, m.shape[0] - take + 1))
            target = m[start:start + take]

            kind = TASKS[int(draw.integers(0, len(TASKS)))]
            mask = make_mask(kind, take, rng=draw)
            plane = mask.plane()
            cond_mel = target.copy()
            cond_mel[plane > 0] = floor
            cond = _cond_stack(cond_mel, plane)

            if cfg.masked_only:
                idx = int(draw.integers(0, schedule.n_steps))
                sigma = float(schedule.levels[idx])
                noisy = target + sigma * draw.normal(target.shape)
                pred = dit.forward(noisy, sigma, cond)
                loss = masked_mse(pred, target, plane)
            else:
                loss = refine_loss(dit, target, cond, schedule, draw)
            (loss * (1.0 / cfg.batch)).backward()
            loss_val += loss.item() / cfg.batch
        clip_gradients(opt.params, cfg.clip_norm)
        opt.step()
        log_rows.append((step, loss_val))

    if cfg.log_path:
        with open(cfg.log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(log_rows)

    ckpt = ComposerCheckpoint(dit, schedule, mel_cfg, r, sigma_data)
    ckpt.history = log_rows
    return ckpt


def generate(task: str, context_mel: MelSpectrogram | None, boundaries,
             length_frames: int, ckpt: ComposerCheckpoint, seed: int = 0,
             steps: int | None = None) -> MelSpectrogram:
    """Sample a compressed-domain mel for one composition task.

    Continuation and completion require ``context_mel`` with exactly
    ``length_frames`` frames; their visible frames are imposed on the output
    bit-exactly via hard consistency.
    """
    if task not in TASKS:
        raise DomainError(f"unknown task {task!r}")
    floor = ckpt.mel_config.floor_log
    if task == "scratch":
        context = np.full((length_frames, ckpt.mel_config.n_mels), floor)
        mask = make_mask("scratch", length_frames)
    else:
        if context_mel is None:
            raise DomainError(f"{task} requires a context mel")
        if context_mel.frame_count != length_frames:
            raise DomainError(
                f"context has {context_mel.frame_count} frames, expected {length_frames}"
            )
        context = context_mel.frames
        mask = make_mask(task, length_frames, boundaries=boundaries)

    plane = mask.plane()
    cond_mel = context.copy()
    cond_mel[plane > 0] = floor
    cond = _cond_stack(cond_mel, plane)

    schedule = ckpt.schedule
    if steps is not None and steps != schedule.n_steps:
        interior = schedule.levels[:-1]
        schedule = make_schedule(steps, float(interior[0]), float(interior[-1]))

    def denoise_fn(x, sigma):
        return ckpt.dit.denoise(x, sigma, cond)

    known = plane < 0.5
    consistency = {} if task == "scratch" else {"known_mask": known, "known_values": context}
    out = sample(denoise_fn, context.shape, schedule, Rng(seed).child("generate"), **consistency)
    visible = ~plane.astype(bool)
    clamped = np.maximum(out, floor)
    if task != "scratch":
        # Clamping must not disturb the consistency guarantee.
        clamped[visible] = out[visible]
    return MelSpectrogram(clamped, ckpt.mel_config, source_ratio=ckpt.ratio)


def compose_full(task: str, input_audio: Waveform | None, r: float, ckpts: dict,
                 out_duration_s: float, seed: int = 0, steps: int | None = None,
                 boundaries_s: tuple | None = None, tsm_mode: str = "phase_vocoder",
                 vocoder_iters: int = 32, stats: dict | None = None) -> Waveform:
    """End-to-end pipeline: compress, extract, generate, restore, vocode.

    ``ckpts`` maps {"composer": ComposerCheckpoint, "restoration":
    RestorationCheckpoint}.  Output duration lands within 2 % of
    ``out_duration_s``.  ``stats``, when given, is filled with frame/token
    counts and per-stage wall times.
    """
    comp: ComposerCheckpoint = ckpts["composer"]
    rest: RestorationCheckpoint = ckpts["restoration"]
    r = validate_ratio(r)
    if fingerprint(mel_config_to_dict(comp.mel_config)) != fingerprint(mel_config_to_dict(rest.mel_config)):
        raise CheckpointError("composer and restoration mel configs do not match")
    mel_cfg = comp.mel_config
    sr = mel_cfg.sample_rate
    hop = mel_cfg.spectral.hop
    n_c = round(out_duration_s * sr / r)
    length = 1 + n_c // hop

    context = None
    boundaries = None
    if task == "scratch":
        if input_audio is not None:
            raise DomainError("scratch generation takes no input audio")
    elif task == "continuation":
        if input_audio is None:
            raise DomainError("continuation requires input audio")
        if input_audio.sample_rate != sr:
            raise DomainError("input sample rate does not match the models")
        z_c = mel_spectrogram(tsm_compress(input_audio, r, mode=tsm_mode), mel_cfg)
        k = min(z_c.frame_count, length - 1)
        frames = np.full((length, mel_cfg.n_mels), mel_cfg.floor_log)
        frames[:k] = z_c.frames[:k]
        context = MelSpectrogram(frames, mel_cfg, source_ratio=r)
        boundaries = k
    elif task == "completion":
        if input_audio is None or boundaries_s is None:
            raise DomainError("completion requires input audio and an (a, b) second interval")
        z_c = mel_spectrogram(tsm_compress(input_audio, r, mode=tsm_mode), mel_cfg)
        frames = np.full((length, mel_cfg.n_mels), mel_cfg.floor_log)
        take = min(length, z_c.frame_count)
        frames[:take] = z_c.frames[:take]
        context = MelSpectrogram(frames, mel_cfg, source_ratio=r)
        a = round(boundaries_s[0] * sr / (r * hop))
        b = round(boundaries_s[1] * sr / (r * hop))
        a = int(np.clip(a, 1, length - 2))
        b = int(np.clip(b, a + 1, length - 1))
        boundaries = (a, b)
    else:
        raise DomainError(f"unknown task {task!r}")

    tokens_before = comp.dit.token_count
    t0 = time.perf_counter()
    z_hat = generate(task, context, boundaries, length, comp, seed=seed, steps=steps)
    t_generate = time.perf_counter() - t0

    t0 = time.perf_counter()
    refined = restore(z_hat.with_ratio(r), r, rest, steps=steps, seed=seed)
    t_restore = time.perf_counter() - t0

    t0 = time.perf_counter()
    out = vocode(refined, iters=vocoder_iters)
    t_vocode = time.perf_counter() - t0

    if stats is not None:
        stats.update(
            composer_tokens=comp.dit.token_count - tokens_before,
            frames_compressed=length,
            frames_full=refined.frame_count,
            generate_seconds=t_generate,
            restore_seconds=t_restore,
            vocode_seconds=t_vocode,
            total_seconds=t_generate + t_restore + t_vocode,
        )
    return out
