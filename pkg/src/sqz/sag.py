"""Whole-song accompaniment generation in the compressed domain.

A deterministic semantic extractor (chroma + band energies + cepstra) stands
in for a pretrained encoder.  A prior encoder fuses vocal semantics and vocal
mel through bidirectional cross-attention into a coarse accompaniment mel,
which a DiT then refines by denoising.  All modeling happens on
time-compressed audio; the restoration stack brings results back to full
temporal resolution.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .audio import DatasetManifest, Waveform, read_wav
from .diffusion import NoiseSchedule, Rng, data_scaled_schedule, make_schedule, refine_loss, sample
from .errors import CheckpointError, ConfigError, DomainError
from .nn import (
    Adam,
    clip_gradients,
    DitConfig,
    Linear,
    LayerNorm,
    MelDiT,
    Mlp,
    Module,
    MultiheadAttention,
    Tensor,
    fingerprint,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_embedding,
)
from .restoration import RestorationCheckpoint, _manifest_sample_rate, restore
from .spectral import (
    MelConfig,
    MelSpectrogram,
    mel_config_from_dict,
    mel_config_to_dict,
    mel_filterbank,
    mel_spectrogram,
    model_mel,
    stft,
    vocode,
)
from .timescale import tsm_compress, validate_ratio

SEM_DIM = 32
_CHROMA_LOW_HZ = 55.0
_CHROMA_HIGH_HZ = 4186.0


@dataclass(frozen=True)
class SemanticSequence:
    """Frame-aligned semantic features: 12 chroma + 8 band log-energies +
    12 cepstral coefficients per model-mel frame."""

    features: np.ndarray
    ratio: float

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != SEM_DIM:
            raise DomainError(f"semantic features must be (F, {SEM_DIM}), got {f.shape}")
        object.__setattr__(self, "features", f)

    @property
    def frame_count(self) -> int:
        return self.features.shape[0]


def semantic_features(vocal: Waveform, r: float = 1.0) -> SemanticSequence:
    """Deterministic semantic stand-in, frame-aligned to the model mel hop.

    Chroma sums spectral power per pitch class (C = index 0) and is
    L1-normalized per frame so silence stays exactly zero.  Band energies are
    log-floored like the mel pipeline.  Cepstra are DCT-II coefficients 1..12
    of the log-mel (c0 excluded), so constant frames map to zero.
    """
    cfg = model_mel(vocal.sample_rate)
    power = np.abs(stft(vocal, cfg.spectral).values) ** 2  # (F, bins)
    n_frames = power.shape[0]
    freqs = np.linspace(0.0, vocal.sample_rate / 2.0, cfg.spectral.bins)

    chroma = np.zeros((n_frames, 12))
    pitched = (freqs >= _CHROMA_LOW_HZ) & (freqs <= _CHROMA_HIGH_HZ)
    midi = np.round(69.0 + 12.0 * np.log2(np.maximum(freqs, 1.0) / 440.0)).astype(int)
    for pc in range(12):
        cols = pitched & (midi % 12 == pc)
        if np.any(cols):
            chroma[:, pc] = power[:, cols].sum(axis=1)
    totals = chroma.sum(axis=1, keepdims=True)
    np.divide(chroma, totals, out=chroma, where=totals > 0)

    edges = np.geomspace(50.0, vocal.sample_rate / 2.0, 9)
    bands = np.zeros((n_frames, 8))
    for b in range(8):
        cols = (freqs >= edges[b]) & (freqs < edges[b + 1])
        bands[:, b] = power[:, cols].sum(axis=1)
    bands = np.log(np.maximum(bands, cfg.log_floor))

    logmel = np.log(np.maximum(power @ mel_filterbank(cfg).T, cfg.log_floor))
    cepstra = dct(logmel, type=2, axis=1, norm="ortho")[:, 1:13]

    return SemanticSequence(np.concatenate([chroma, bands, cepstra], axis=1), float(r))


@dataclass(frozen=True)
class SagPriorConfig:
    depth: int = 6
    dim: int = 256
    heads: int = 4
    sem_dim: int = SEM_DIM
    bins: int = 80

    def __post_init__(self):
        if self.depth != 6:
            raise DomainError("the prior encoder uses exactly 6 cross-attention layers")

    def to_dict(self) -> dict:
        return {"depth": self.depth, "dim": self.dim, "heads": self.heads,
                "sem_dim": self.sem_dim, "bins": self.bins}


def sag_dit_config() -> DitConfig:
    """Accompaniment refiner: depth 8, conditioned on the prior mel, which is
    also skipped into the output (the net learns a residual)."""
    return DitConfig(bins=80, cond_bins=80, patch=4, dim=256, depth=8, heads=4, t_dim=128,
                     cond_skip=True)


class _CrossLayer(Module):
    """One bidirectional layer: each stream attends to the other, outputs are
    summed back residually, then per-stream MLPs."""

    def __init__(self, dim: int, heads: int, rng: Rng, dtype=np.float32):
        self.ln_mel = LayerNorm(dim, dtype)
        self.ln_sem = LayerNorm(dim, dtype)
        self.attn_mel_from_sem = MultiheadAttention(dim, heads, rng.child("ms"), dtype)
        self.attn_sem_from_mel = MultiheadAttention(dim, heads, rng.child("sm"), dtype)
        self.ln_mel2 = LayerNorm(dim, dtype)
        self.ln_sem2 = LayerNorm(dim, dtype)
        self.mlp_mel = Mlp(dim, dim, rng.child("mm"), dtype)
        self.mlp_sem = Mlp(dim, dim, rng.child("sm2"), dtype)

    def __call__(self, mel: Tensor, sem: Tensor) -> tuple[Tensor, Tensor]:
        mel_n = self.ln_mel(mel)
        sem_n = self.ln_sem(sem)
        mel2 = mel + self.attn_mel_from_sem(mel_n, sem_n)
        sem2 = sem + self.attn_sem_from_mel(sem_n, mel_n)
        mel2 = mel2 + self.mlp_mel(self.ln_mel2(mel2))
        sem2 = sem2 + self.mlp_sem(self.ln_sem2(sem2))
        return mel2, sem2


class SagPriorEncoder(Module):
    """Semantic-to-prior mapping with 6 bidirectional cross-attention layers."""

    def __init__(self, cfg: SagPriorConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.sem_in = Linear(cfg.sem_dim, cfg.dim, rng.child("sem_in"), dtype)
        self.mel_in = Linear(cfg.bins, cfg.dim, rng.child("mel_in"), dtype)
        self.layers = [_CrossLayer(cfg.dim, cfg.heads, rng.child("layer", i), dtype)
                       for i in range(cfg.depth)]
        self.ln_out = LayerNorm(cfg.dim, dtype)
        self.ln_sem_out = LayerNorm(cfg.dim, dtype)
        self.out_head = Linear(cfg.dim, cfg.bins, rng.child("head"), dtype, zero_init=True)
        self._dtype = dtype

    def forward(self, sem: np.ndarray, vocal_mel: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (prior mel (F, bins), semantic stream (F, dim))."""
        sem = np.asarray(sem)
        vocal_mel = np.asarray(vocal_mel)
        if sem.shape[0] != vocal_mel.shape[0]:
            raise DomainError(
                f"semantic frames {sem.shape[0]} misaligned with mel frames {vocal_mel.shape[0]}"
            )
        pos = Tensor(sinusoidal_embedding(np.arange(sem.shape[0]), self.cfg.dim).astype(self._dtype))
        s = self.sem_in(Tensor(sem.astype(self._dtype))) + pos
        m = self.mel_in(Tensor(vocal_mel.astype(self._dtype))) + pos
        for layer in self.layers:
            m, s = layer(m, s)
        prior = self.out_head(self.ln_out(m))
        return prior, self.ln_sem_out(s)


@dataclass
class SagTrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 1
    clip_norm: float = 1.0
    crop_frames: int = 192
    schedule_steps: int = 50
    tsm_mode: str = "phase_vocoder"
    target: str = "instrument"  # "instrument" = accompaniment track, "mixture" = mix
    log_path: str | None = None


class SagCheckpoint:
    KIND = "sag"

    def __init__(self, encoder: SagPriorEncoder, sem_head: Linear, dit: MelDiT,
                 schedule: NoiseSchedule, mel_config: MelConfig, ratio: float,
                 sigma_data: float):
        self.encoder = encoder
        self.sem_head = sem_head
        self.dit = dit
        self.schedule = schedule
        self.mel_config = mel_config
        self.ratio = float(ratio)
        self.sigma_data = float(sigma_data)
        self.fingerprint = fingerprint(
            {
                "mel": mel_config_to_dict(mel_config),
                "schedule": schedule.to_dict(),
                "encoder": encoder.cfg.to_dict(),
                "dit": dit.cfg.to_dict(),
            }
        )

    def save(self, path) -> None:
        tensors = {}
        for prefix, module in (("encoder", self.encoder), ("sem_head", self.sem_head), ("dit", self.dit)):
            for name, arr in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = arr
        hyper = {
            "mel_config": mel_config_to_dict(self.mel_config),
            "schedule": self.schedule.to_dict(),
            "encoder": self.encoder.cfg.to_dict(),
            "dit": self.dit.cfg.to_dict(),
            "ratio": self.ratio,
            "sigma_data": self.sigma_data,
            "fingerprint": self.fingerprint,
        }
        save_checkpoint(path, self.KIND, hyper, tensors)

    @classmethod
    def load(cls, path) -> "SagCheckpoint":
        kind, hyper, tensors = load_checkpoint(path)
        if kind != cls.KIND:
            raise CheckpointError(f"{path}: expected a {cls.KIND} checkpoint, got {kind}")
        rng = Rng(0)
        enc_cfg = SagPriorConfig(**hyper["encoder"])
        encoder = SagPriorEncoder(enc_cfg, rng.child("enc"))
        sem_head = Linear(enc_cfg.dim, enc_cfg.sem_dim, rng.child("sem_head"))
        dit = MelDiT(DitConfig.from_dict(hyper["dit"]), rng.child("dit"), sigma_data=hyper["sigma_data"])
        for prefix, module in (("encoder", encoder), ("sem_head", sem_head), ("dit", dit)):
            module.load_state_dict(
                {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            )
        ckpt = cls(encoder, sem_head, dit, NoiseSchedule.from_dict(hyper["schedule"]),
                   mel_config_from_dict(hyper["mel_config"]), hyper["ratio"], hyper["sigma_data"])
        if ckpt.fingerprint != hyper["fingerprint"]:
            raise CheckpointError(f"{path}: fingerprint mismatch after load")
        return ckpt


def prior_encode(sem: SemanticSequence, vocal_mel: MelSpectrogram, ckpt: SagCheckpoint) -> MelSpectrogram:
    """Prior accompaniment mel from vocal semantics + vocal mel (clamped)."""
    if sem.frame_count != vocal_mel.frame_count:
        raise DomainError(
            f"semantic frames {sem.frame_count} misaligned with mel frames {vocal_mel.frame_count}"
        )
    prior, _ = ckpt.encoder.forward(sem.features, vocal_mel.frames)
    out = np.maximum(prior.data.astype(np.float64), vocal_mel.config.floor_log)
    return MelSpectrogram(out, vocal_mel.config, source_ratio=vocal_mel.source_ratio)


def _prepare_song(manifest, entry, mel_cfg, r, tsm_mode, target):
    vocal = read_wav(manifest.path(entry.vocal))
    acc_name = entry.mixture if target == "mixture" else entry.accompaniment
    acc = read_wav(manifest.path(acc_name))
    vocal_c = tsm_compress(vocal, r, mode=tsm_mode)
    acc_c = tsm_compress(acc, r, mode=tsm_mode)
    vmel = mel_spectrogram(vocal_c, mel_cfg).frames
    amel = mel_spectrogram(acc_c, mel_cfg).frames
    vsem = semantic_features(vocal_c, r).features
    asem = semantic_features(acc_c, r).features
    n = min(vmel.shape[0], amel.shape[0])
    return vmel[:n], vsem[:n], amel[:n], asem[:n]


def train_sag(manifest: DatasetManifest, r: float = 4.0, cfg: SagTrainConfig | None = None,
              seed: int = 0) -> SagCheckpoint:
    """Three-loss training on compressed vocal/accompaniment pairs.

    Per step: semantic MSE (projected semantic stream vs the accompaniment's
    semantic features), prior MSE (prior vs accompaniment mel), and the DiT
    denoising loss conditioned on the detached prior; unit weights.
    """
    cfg = cfg or SagTrainConfig()
    if cfg.target not in ("instrument", "mixture"):
        raise ConfigError(f"target must be instrument or mixture, got {cfg.target!r}")
    r = validate_ratio(r)
    mel_cfg = model_mel(_manifest_sample_rate(manifest))
    entries = manifest.split("train")
    if not entries:
        raise ConfigError("manifest has no train entries")
    songs = [_prepare_song(manifest, e, mel_cfg, r, cfg.tsm_mode, cfg.target) for e in entries]

    sigma_data = max(float(np.std(np.concatenate([s[2].reshape(-1) for s in songs]))), 1e-3)
    schedule = data_scaled_schedule(sigma_data, cfg.schedule_steps)

    root = Rng(seed).child("train_sag")
    enc_cfg = SagPriorConfig()
    encoder = SagPriorEncoder(enc_cfg, root.child("enc"))
    sem_head = Linear(enc_cfg.dim, enc_cfg.sem_dim, root.child("sem_head"))
    dit = MelDiT(sag_dit_config(), root.child("dit"), sigma_data=sigma_data)
    params = {}
    for prefix, module in (("encoder", encoder), ("sem_head", sem_head), ("dit", dit)):
        for name, p in module.named_parameters().items():
            params[f"{prefix}.{name}"] = p
    opt = Adam(params, lr=cfg.lr)

    draw = root.child("draw")
    log_rows = []
    for step in range(cfg.steps):
        opt.zero_grad()
        vals = np.zeros(3)
        for _ in range(cfg.batch):
            vmel, vsem, amel, asem = songs[int(draw.integers(0, len(songs)))]
            take = min(cfg.crop_frames, vmel.shape[0])
            start = int(draw.integers(0, vmel.shape[0] - take + 1))
            sl = slice(start, start + take)

            prior, sem_stream = encoder.forward(vsem[sl], vmel[sl])
            sem_pred = sem_head(sem_stream)

            d_sem = sem_pred - Tensor(asem[sl].astype(np.float32))
            l_sem = (d_sem * d_sem).mean()
            d_prior = prior - Tensor(amel[sl].astype(np.float32))
            l_prior = (d_prior * d_prior).mean()
            l_diff = refine_loss(dit, amel[sl], prior.data.astype(np.float64), schedule, draw)

            total = (l_sem + l_prior + l_diff) * (1.0 / cfg.batch)
            total.backward()
            vals += np.array([l_sem.item(), l_prior.item(), l_diff.item()]) / cfg.batch
        clip_gradients(params, cfg.clip_norm)
        opt.step()
        log_rows.append((step, *vals))

    if cfg.log_path:
        with open(cfg.log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_sem", "l_prior", "l_diff"])
            writer.writerows(log_rows)

    ckpt = SagCheckpoint(encoder, sem_head, dit, schedule, mel_cfg, r, sigma_data)
    ckpt.history = log_rows
    return ckpt


def generate_accompaniment(vocal: Waveform, r: float, ckpts: dict, seed: int = 0,
                           steps: int | None = None, tsm_mode: str = "phase_vocoder",
                           vocoder_iters: int = 32, stats: dict | None = None) -> Waveform:
    """Vocal waveform in, aligned accompaniment waveform out.

    Compress the vocal, derive semantics + mel, map to a prior, refine with
    the DiT, restore to full resolution (frame count matched to the vocal's
    model mel), and vocode.  Deterministic given (checkpoints, seed).
    """
    sag_ckpt: SagCheckpoint = ckpts["sag"]
    rest: RestorationCheckpoint = ckpts["restoration"]
    r = validate_ratio(r)
    if fingerprint(mel_config_to_dict(sag_ckpt.mel_config)) != fingerprint(mel_config_to_dict(rest.mel_config)):
        raise CheckpointError("sag and restoration mel configs do not match")
    mel_cfg = sag_ckpt.mel_config
    if vocal.sample_rate != mel_cfg.sample_rate:
        raise DomainError("vocal sample rate does not match the models")

    t0 = time.perf_counter()
    vocal_c = tsm_compress(vocal, r, mode=tsm_mode)
    vmel = mel_spectrogram(vocal_c, mel_cfg).frames
    vsem = semantic_features(vocal_c, r).features
    prior, _ = sag_ckpt.encoder.forward(vsem, vmel)
    cond = prior.data.astype(np.float64)

    schedule = sag_ckpt.schedule
    if steps is not None and steps != schedule.n_steps:
        interior = schedule.levels[:-1]
        schedule = make_schedule(steps, float(interior[0]), float(interior[-1]))

    def denoise_fn(x, sigma):
        return sag_ckpt.dit.denoise(x, sigma, cond)

    acc_c = sample(denoise_fn, cond.shape, schedule, Rng(seed).child("sag_generate"))
    acc_c = np.maximum(acc_c, mel_cfg.floor_log)
    t_generate = time.perf_counter() - t0

    t0 = time.perf_counter()
    restored = restore(MelSpectrogram(acc_c, mel_cfg, source_ratio=r), r, rest,
                       steps=steps, seed=seed)
    # Frame-match the vocal's model mel so the tracks stay aligned.
    target_frames = mel_cfg.spectral.frame_count(len(vocal))
    frames = restored.frames
    if frames.shape[0] > target_frames:
        frames = frames[:target_frames]
    elif frames.shape[0] < target_frames:
        frames = np.pad(frames, ((0, target_frames - frames.shape[0]), (0, 0)), mode="edge")
    t_restore = time.perf_counter() - t0

    t0 = time.perf_counter()
    out = vocode(MelSpectrogram(frames, mel_cfg), iters=vocoder_iters)
    t_vocode = time.perf_counter() - t0

    if stats is not None:
        stats.update(generate_seconds=t_generate, restore_seconds=t_restore,
                     vocode_seconds=t_vocode, total_seconds=t_generate + t_restore + t_vocode)
    return out
