"""Squeeze-restore stack: CNN prior upsampler plus diffusion refiner.

The prior stretches a compressed mel back to full frame count by linear
interpolation and adds a learned residual (zero at initialization, so the
untrained prior is exactly the interpolation).  A noise-conditional DiT then
refines the prior via probability-flow sampling.  Both are trained jointly:
MSE on the prior output plus a denoising loss on the refiner, with the prior
detached when it conditions the refiner.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import DatasetManifest, read_wav
from .diffusion import NoiseSchedule, Rng, data_scaled_schedule, make_schedule, refine_loss, sample
from .errors import CheckpointError, ConfigError, DomainError
from .nn import (
    Adam,
    clip_gradients,
    Conv1d,
    DitConfig,
    MelDiT,
    Module,
    Tensor,
    fingerprint,
    gelu,
    load_checkpoint,
    save_checkpoint,
)
from .spectral import (
    MelConfig,
    MelSpectrogram,
    mel_config_from_dict,
    mel_config_to_dict,
    mel_spectrogram,
    model_mel,
)
from .timescale import stretch_frames, tsm_compress, validate_ratio


@dataclass(frozen=True)
class PriorCnnConfig:
    hidden: int = 128
    depth: int = 4
    kernel: int = 5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def refiner_dit_config() -> DitConfig:
    """Refiner shape: 4-frame patches, dim 256, depth 8, 4 heads; condition
    is the prior mel concatenated channel-wise and skipped into the output,
    so the untrained refiner reproduces the prior exactly."""
    return DitConfig(bins=80, cond_bins=80, patch=4, dim=256, depth=8, heads=4, t_dim=128,
                     cond_skip=True)


@dataclass
class RestorationTrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 1
    clip_norm: float = 1.0
    crop_frames: int = 24  # compressed-domain crop length per step
    schedule_steps: int = 50
    tsm_mode: str = "phase_vocoder"
    refine_window: int = 192  # full-resolution frames per refiner call at inference
    prior: PriorCnnConfig = dataclasses.field(default_factory=PriorCnnConfig)
    log_path: str | None = None


class PriorCnn(Module):
    """Residual 1-D conv stack over interpolated frames, ratio as a channel."""

    def __init__(self, cfg: PriorCnnConfig, rng: Rng, dtype=np.float32, bins: int = 80):
        self.cfg = cfg
        self.bins = bins
        self._dtype = dtype
        self.conv_in = Conv1d(bins + 1, cfg.hidden, cfg.kernel, rng.child("in"), dtype)
        self.blocks = [
            (
                Conv1d(cfg.hidden, cfg.hidden, cfg.kernel, rng.child("a", i), dtype),
                Conv1d(cfg.hidden, cfg.hidden, cfg.kernel, rng.child("b", i), dtype),
            )
            for i in range(cfg.depth)
        ]
        # Zero-init: the untrained prior is exactly the linear interpolation.
        self.conv_out = Conv1d(cfg.hidden, bins, cfg.kernel, rng.child("out"), dtype, zero_init=True)

    def forward(self, m_c_frames: np.ndarray, r: float) -> Tensor:
        n_out = max(1, round(m_c_frames.shape[0] * r))
        base = stretch_frames(np.asarray(m_c_frames, dtype=np.float64), n_out)
        ratio_channel = np.full((n_out, 1), float(r))
        x = Tensor(np.concatenate([base, ratio_channel], axis=1).astype(self._dtype).T)
        h = gelu(self.conv_in(x))
        for conv_a, conv_b in self.blocks:
            h = h + conv_b(gelu(conv_a(h)))
        residual = self.conv_out(h).T
        return residual + Tensor(base.astype(self._dtype))


class RestorationCheckpoint:
    """Trained prior + refiner with their schedule and config fingerprint."""

    KIND = "restoration"

    def __init__(self, prior: PriorCnn, refiner: MelDiT, schedule: NoiseSchedule,
                 mel_config: MelConfig, ratios: tuple, sigma_data: float,
                 refine_window: int = 192):
        self.prior = prior
        self.refiner = refiner
        self.schedule = schedule
        self.mel_config = mel_config
        self.ratios = tuple(float(r) for r in ratios)
        self.sigma_data = float(sigma_data)
        self.refine_window = int(refine_window)
        self.fingerprint = restoration_fingerprint(mel_config, schedule, prior.cfg, refiner.cfg)

    def save(self, path) -> None:
        tensors = {}
        for name, arr in self.prior.state_dict().items():
            tensors[f"prior.{name}"] = arr
        for name, arr in self.refiner.state_dict().items():
            tensors[f"refiner.{name}"] = arr
        hyper = {
            "mel_config": mel_config_to_dict(self.mel_config),
            "schedule": self.schedule.to_dict(),
            "prior": self.prior.cfg.to_dict(),
            "refiner": self.refiner.cfg.to_dict(),
            "ratios": list(self.ratios),
            "sigma_data": self.sigma_data,
            "refine_window": self.refine_window,
            "fingerprint": self.fingerprint,
        }
        save_checkpoint(path, self.KIND, hyper, tensors)

    @classmethod
    def load(cls, path) -> "RestorationCheckpoint":
        kind, hyper, tensors = load_checkpoint(path)
        if kind != cls.KIND:
            raise CheckpointError(f"{path}: expected a {cls.KIND} checkpoint, got {kind}")
        mel_cfg = mel_config_from_dict(hyper["mel_config"])
        schedule = NoiseSchedule.from_dict(hyper["schedule"])
        rng = Rng(0)
        prior = PriorCnn(PriorCnnConfig(**hyper["prior"]), rng.child("prior"))
        refiner = MelDiT(DitConfig.from_dict(hyper["refiner"]), rng.child("refiner"),
                         sigma_data=hyper["sigma_data"])
        prior.load_state_dict({k[len("prior."):]: v for k, v in tensors.items() if k.startswith("prior.")})
        refiner.load_state_dict({k[len("refiner."):]: v for k, v in tensors.items() if k.startswith("refiner.")})
        ckpt = cls(prior, refiner, schedule, mel_cfg, tuple(hyper["ratios"]),
                   hyper["sigma_data"], hyper.get("refine_window", 192))
        if ckpt.fingerprint != hyper["fingerprint"]:
            raise CheckpointError(f"{path}: fingerprint mismatch after load")
        return ckpt


def restoration_fingerprint(mel_config: MelConfig, schedule: NoiseSchedule,
                            prior_cfg: PriorCnnConfig, refiner_cfg: DitConfig) -> str:
    return fingerprint(
        {
            "mel": mel_config_to_dict(mel_config),
            "schedule": schedule.to_dict(),
            "prior": prior_cfg.to_dict(),
            "refiner": refiner_cfg.to_dict(),
        }
    )


def prior_upsample(m_c: MelSpectrogram, r: float, ckpt: RestorationCheckpoint) -> MelSpectrogram:
    """Coarse full-resolution prior from a compressed mel: round(F_c * r) frames."""
    r = validate_ratio(r)
    if abs(m_c.source_ratio - r) > 1e-9:
        raise DomainError(f"mel is tagged ratio {m_c.source_ratio}, asked to upsample by {r}")
    out = ckpt.prior.forward(m_c.frames, r).data.astype(np.float64)
    out = np.maximum(out, m_c.config.floor_log)
    return MelSpectrogram(out, m_c.config, source_ratio=1.0)


def _load_train_songs(manifest: DatasetManifest, mel_cfg: MelConfig, ratios, tsm_mode: str):
    """Per-song full mel plus compressed mels, precomputed once."""
    entries = manifest.split("train")
    if not entries:
        raise ConfigError("manifest has no train entries")
    songs = []
    for entry in entries:
        wav = read_wav(manifest.path(entry.mixture))
        m0 = mel_spectrogram(wav, mel_cfg).frames
        per_ratio = {}
        for r in ratios:
            r = validate_ratio(r)
            compressed = tsm_compress(wav, r, mode=tsm_mode)
            per_ratio[r] = mel_spectrogram(compressed, mel_cfg).frames
        songs.append((m0, per_ratio))
    return songs


def _crop_pair(m0: np.ndarray, m_c: np.ndarray, r: float, crop: int, rng: Rng):
    """Aligned (compressed crop, full-resolution target) pair."""
    f_c = m_c.shape[0]
    take = min(crop, f_c)
    l_out = round(take * r)
    max_start = max(0, min(f_c - take, int((m0.shape[0] - l_out) / r)))
    start = int(rng.integers(0, max_start + 1))
    mc_crop = m_c[start:start + take]
    t0 = min(round(start * r), max(0, m0.shape[0] - l_out))
    target = m0[t0:t0 + l_out]
    if target.shape[0] < l_out:  # clip at song end
        target = np.pad(target, ((0, l_out - target.shape[0]), (0, 0)), mode="edge")
    return mc_crop, target


def train_restoration(manifest: DatasetManifest, ratios=(1.0, 4.0, 8.0),
                      cfg: RestorationTrainConfig | None = None, seed: int = 0) -> RestorationCheckpoint:
    """Joint prior/refiner training on compressed-vs-original mel pairs.

    Per step: draw a song and a ratio, crop an aligned pair, minimize
    prior MSE plus the denoising loss of the refiner conditioned on the
    (detached) prior.  Writes a step,l_prior,l_refine CSV when ``log_path``
    is set.  Deterministic in ``seed``.
    """
    cfg = cfg or RestorationTrainConfig()
    ratios = tuple(validate_ratio(r) for r in ratios)
    mel_cfg = model_mel(_manifest_sample_rate(manifest))
    songs = _load_train_songs(manifest, mel_cfg, ratios, cfg.tsm_mode)

    sigma_data = float(np.std(np.concatenate([m0.reshape(-1) for m0, _ in songs])))
    sigma_data = max(sigma_data, 1e-3)
    schedule = data_scaled_schedule(sigma_data, cfg.schedule_steps)

    root = Rng(seed).child("train_restoration")
    prior = PriorCnn(cfg.prior, root.child("init_prior"))
    refiner = MelDiT(refiner_dit_config(), root.child("init_refiner"), sigma_data=sigma_data)
    params = {**{f"prior.{k}": v for k, v in prior.named_parameters().items()},
              **{f"refiner.{k}": v for k, v in refiner.named_parameters().items()}}
    opt = Adam(params, lr=cfg.lr)

    draw = root.child("draw")
    log_rows = []
    for step in range(cfg.steps):
        opt.zero_grad()
        l_prior_val = 0.0
        l_refine_val = 0.0
        for _ in range(cfg.batch):
            m0, per_ratio = songs[int(draw.integers(0, len(songs)))]
            r = ratios[int(draw.integers(0, len(ratios)))]
            mc_crop, target = _crop_pair(m0, per_ratio[r], r, cfg.crop_frames, draw)

            pred_prior = prior.forward(mc_crop, r)
            diff = pred_prior - Tensor(target.astype(np.float32))
            l_prior = (diff * diff).mean()

            cond = pred_prior.data.astype(np.float64)
            l_refine = refine_loss(refiner, target, cond, schedule, draw)

            total = l_prior * (1.0 / cfg.batch) + l_refine * (1.0 / cfg.batch)
            total.backward()
            l_prior_val += l_prior.item() / cfg.batch
            l_refine_val += l_refine.item() / cfg.batch
        clip_gradients(params, cfg.clip_norm)
        opt.step()
        log_rows.append((step, l_prior_val, l_refine_val))

    if cfg.log_path:
        with open(cfg.log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_prior", "l_refine"])
            writer.writerows(log_rows)

    ckpt = RestorationCheckpoint(prior, refiner, schedule, mel_cfg, ratios, sigma_data,
                                 cfg.refine_window)
    ckpt.history = log_rows
    return ckpt


def _manifest_sample_rate(manifest: DatasetManifest) -> int:
    if not manifest.entries:
        raise ConfigError("manifest has no entries")
    first = manifest.entries[0]
    return read_wav(manifest.path(first.mixture)).sample_rate


def restore(m_c: MelSpectrogram, r: float, ckpt: RestorationCheckpoint,
            steps: int | None = None, seed: int = 0) -> MelSpectrogram:
    """Full restore path: prior upsample, then windowed diffusion refinement.

    Output has round(F_c * r) frames.  Deterministic given (checkpoint, seed).
    """
    r = validate_ratio(r)
    expected = fingerprint(mel_config_to_dict(m_c.config))
    stored = fingerprint(mel_config_to_dict(ckpt.mel_config))
    if expected != stored:
        raise CheckpointError(
            f"mel config fingerprint {expected} does not match checkpoint {stored}"
        )
    prior = prior_upsample(m_c.with_ratio(r), r, ckpt)
    schedule = ckpt.schedule
    if steps is not None and steps != schedule.n_steps:
        interior = schedule.levels[:-1]
        schedule = make_schedule(steps, float(interior[0]), float(interior[-1]))

    rng = Rng(seed).child("restore")
    out = np.empty_like(prior.frames)
    total = prior.frame_count
    window = max(ckpt.refine_window, 2 * ckpt.refiner.cfg.patch)
    overlap = min(32, window // 4) if total > window else 0
    step = window - overlap
    start = 0
    index = 0
    while start < total:
        stop = min(start + window, total)
        cond = prior.frames[start:stop]

        def denoise_fn(x, sigma, cond=cond):
            return ckpt.refiner.denoise(x, sigma, cond)

        refined = sample(denoise_fn, cond.shape, schedule, rng.child("window", index))
        # Windows overlap; keep each window's interior to avoid seam frames.
        keep_from = overlap // 2 if start > 0 else 0
        keep_to = refined.shape[0] if stop >= total else refined.shape[0] - overlap // 2
        out[start + keep_from:start + keep_to] = refined[keep_from:keep_to]
        if stop >= total:
            break
        start += step
        index += 1
    out = np.maximum(out, m_c.config.floor_log)
    return MelSpectrogram(out, m_c.config, source_ratio=1.0)
