"""STFT/ISTFT, log-mel analysis, and a Griffin-Lim vocoder.

Two named analysis settings are used throughout the package:

* ``model_mel``  -- fft 1024, hop 256, 80 bins.  All models read and write
  this resolution (93.75 frames per second at 24 kHz).
* ``metric_mel`` -- fft 2048, hop 512, 80 bins.  Used only by the distance
  metrics.

Frame-count law: every transform here produces ``1 + len(x) // hop`` frames,
with centered (reflect-padded) analysis windows.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .audio import Waveform

MEL_BINS = 80
LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class SpectralConfig:
    """Hann-windowed, reflect-centered STFT settings."""

    fft_size: int
    hop: int

    def __post_init__(self):
        if not (0 < self.hop <= self.fft_size):
            raise DomainError(f"need 0 < hop <= fft_size, got hop={self.hop}, fft={self.fft_size}")
        if self.fft_size & (self.fft_size - 1):
            raise DomainError(f"fft_size must be a power of two, got {self.fft_size}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


@dataclass(frozen=True)
class MelConfig:
    spectral: SpectralConfig
    sample_rate: int
    n_mels: int = MEL_BINS
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)

    @property
    def floor_log(self) -> float:
        return float(np.log(self.log_floor))


def model_mel(sample_rate: int = 24000) -> MelConfig:
    return MelConfig(SpectralConfig(1024, 256), sample_rate)


def mel_config_to_dict(cfg: MelConfig) -> dict:
    return {
        "fft_size": cfg.spectral.fft_size,
        "hop": cfg.spectral.hop,
        "sample_rate": cfg.sample_rate,
        "n_mels": cfg.n_mels,
        "fmin": cfg.fmin,
        "fmax": cfg.fmax,
        "log_floor": cfg.log_floor,
    }


def mel_config_from_dict(d: dict) -> MelConfig:
    return MelConfig(
        SpectralConfig(int(d["fft_size"]), int(d["hop"])),
        int(d["sample_rate"]),
        n_mels=int(d["n_mels"]),
        fmin=float(d["fmin"]),
        fmax=float(d["fmax"]),
        log_floor=float(d["log_floor"]),
    )


def metric_mel(sample_rate: int = 24000) -> MelConfig:
    return MelConfig(SpectralConfig(2048, 512), sample_rate)


@dataclass(frozen=True)
class ComplexSpec:
    values: np.ndarray  # (frames, bins) complex
    config: SpectralConfig

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] != self.config.bins:
            raise DomainError(f"spectrogram shape {v.shape} does not match config bins {self.config.bins}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class MelSpectrogram:
    """frames x n_mels matrix of log mel power (natural log of floored power).

    ``source_ratio`` tags which speed-up ratio the underlying audio carries
    (1.0 for natural speed).
    """

    frames: np.ndarray
    config: MelConfig
    source_ratio: float = 1.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.config.n_mels:
            raise DomainError(f"mel shape {f.shape} does not match n_mels {self.config.n_mels}")
        if f.size and not np.all(np.isfinite(f)):
            raise DomainError("mel contains non-finite entries")
        if f.size and f.min() < self.config.floor_log - 1e-9:
            raise DomainError("mel contains entries below the log floor")
        object.__setattr__(self, "frames", f)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def with_ratio(self, r: float) -> "MelSpectrogram":
        return dataclasses.replace(self, source_ratio=float(r))


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (COLA-compatible at hop <= n/4 ... n/2)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame_signal(x: np.ndarray, cfg: SpectralConfig) -> np.ndarray:
    """Centered frames of shape (F, fft_size); F follows the frame-count law."""
    n = x.shape[0]
    pad = cfg.fft_size // 2
    mode = "reflect" if n > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    n_frames = cfg.frame_count(n)
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return xp[idx]


def stft(w: Waveform | np.ndarray, cfg: SpectralConfig) -> ComplexSpec:
    """Short-time Fourier transform with Hann window and centered frames."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.shape[0] < 1:
        raise DomainError("stft needs at least one sample")
    frames = _frame_signal(x, cfg) * hann(cfg.fft_size)[None, :]
    return ComplexSpec(np.fft.rfft(frames, axis=1), cfg)


def istft(spec: ComplexSpec, cfg: SpectralConfig, length: int | None = None) -> np.ndarray:
    """Inverse STFT by windowed overlap-add with window-squared normalization.

    ``length`` crops/pads the result; the default is ``(F - 1) * hop``, the
    shortest signal consistent with the frame-count law.
    """
    if spec.config != cfg:
        raise DomainError(f"spec config {spec.config} does not match istft config {cfg}")
    frames = np.fft.irfft(spec.values, n=cfg.fft_size, axis=1)
    win = hann(cfg.fft_size)
    frames = frames * win[None, :]
    n_frames = frames.shape[0]
    pad = cfg.fft_size // 2
    total = (n_frames - 1) * cfg.hop + cfg.fft_size
    y = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win**2
    for f in range(n_frames):
        start = f * cfg.hop
        y[start:start + cfg.fft_size] += frames[f]
        norm[start:start + cfg.fft_size] += win_sq
    good = norm > 1e-10
    y[good] /= norm[good]
    y = y[pad:]
    if length is None:
        length = (n_frames - 1) * cfg.hop
    if y.shape[0] < length:
        y = np.pad(y, (0, length - y.shape[0]))
    return y[:length]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, (n_mels, bins), peak weight 1 per filter.

    Adjacent unnormalized triangles form a partition of unity, so the total
    weight on any STFT bin strictly between fmin and fmax lies in (0, 1].
    """
    bins = cfg.spectral.bins
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, bins)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, bins))
    for i in range(cfg.n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_spectrogram(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Log mel power: log(max(fb @ |stft|^2, log_floor))."""
    spec = stft(w, cfg.spectral)
    power = np.abs(spec.values) ** 2
    mel_power = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel_power, cfg.log_floor)), cfg)


def mel_to_linear(m: MelSpectrogram, cfg: MelConfig | None = None, iters: int = 60) -> np.ndarray:
    """Invert the mel filterbank to a linear magnitude spectrogram, (F, bins).

    Solves the per-frame non-negative least-squares problem fb @ s ~= exp(m)
    with multiplicative updates, then takes the square root of the recovered
    power.  Deterministic, and exactly scale-linear in exp(m).
    """
    cfg = cfg or m.config
    fb = mel_filterbank(cfg)  # (n_mels, bins)
    target = np.exp(m.frames)  # (F, n_mels) mel power
    numer = target @ fb  # A^T b, per frame
    s = numer.copy()  # non-negative initialization
    for _ in range(iters):
        denom = (s @ fb.T) @ fb + 1e-30
        s = s * (numer / denom)
    return np.sqrt(np.maximum(s, 0.0))


def griffin_lim(mag: np.ndarray, cfg: SpectralConfig, iters: int = 32) -> np.ndarray:
    """Iterative phase reconstruction from an STFT magnitude, zero-phase init.

    Spectral convergence is non-increasing in practice; the final iterate is
    never worse than the first.
    """
    if iters < 1:
        raise DomainError(f"iters must be >= 1, got {iters}")
    mag = np.asarray(mag, dtype=np.float64)
    spec = mag.astype(np.complex128)
    y = istft(ComplexSpec(spec, cfg), cfg)
    for _ in range(iters):
        re = stft(y, cfg).values
        phase = re / np.maximum(np.abs(re), 1e-16)
        y = istft(ComplexSpec(mag * phase, cfg), cfg)
    return y


def vocode(m: MelSpectrogram, iters: int = 32) -> Waveform:
    """Mel-to-waveform decoding: filterbank inversion followed by Griffin-Lim."""
    mag = mel_to_linear(m)
    y = griffin_lim(mag, m.config.spectral, iters=iters)
    return Waveform(y, m.config.sample_rate)


_SQZM_MAGIC = b"SQZM"
_SQZM_HEADER = struct.Struct("<4sIII")


def save_mel(m: MelSpectrogram, path) -> None:
    """Serialize mel frames: 16-byte header + row-major float32 LE payload."""
    header = _SQZM_HEADER.pack(_SQZM_MAGIC, 1, m.frame_count, m.config.n_mels)
    Path(path).write_bytes(header + m.frames.astype("<f4").tobytes())


def load_mel(path, cfg: MelConfig, source_ratio: float = 1.0) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _SQZM_HEADER.size:
        raise FormatError(f"{path}: truncated mel file")
    magic, version, n_frames, bins = _SQZM_HEADER.unpack_from(raw)
    if magic != _SQZM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = np.frombuffer(raw, dtype="<f4", offset=_SQZM_HEADER.size)
    if payload.size != n_frames * bins:
        raise FormatError(f"{path}: payload size mismatch")
    frames = payload.reshape(n_frames, bins).astype(np.float64)
    # float32 round-trips may land a hair under the floor; snap them back.
    frames = np.maximum(frames, np.log(cfg.log_floor))
    return MelSpectrogram(frames, cfg, source_ratio=source_ratio)
