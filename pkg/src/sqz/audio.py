"""Waveform container, WAV file I/O, and deterministic toy-song synthesis.

Everything here is mono.  Stereo files are downmixed by channel averaging on
read; the rest of the pipeline never sees channel structure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import DomainError, FormatError, UnsupportedFormatError
from .rng import Rng

PCM16_SCALE = 32768.0

# Twelve-tone equal temperament relative to A4 = 440 Hz, MIDI note 69.
_MAJOR = (0, 2, 4, 5, 7, 9, 11)
_MINOR = (0, 2, 3, 5, 7, 8, 10)


def _midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


@dataclass(frozen=True)
class Waveform:
    """Mono sample sequence with its sample rate.

    Samples are dimensionless amplitudes, nominally in [-1, 1], stored as
    float64.  All values must be finite.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise DomainError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file into a Waveform.

    Supports PCM16 and IEEE float32 (float64 is tolerated), mono or stereo.
    Stereo is downmixed by averaging.  PCM16 samples are scaled by 1/32768.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(
            f"{path}: unsupported sample encoding {data.dtype}; expected pcm16 or float32"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim > 2:
        raise UnsupportedFormatError(f"{path}: more than 2 channels")
    return Waveform(samples, int(rate))


def write_wav(w: Waveform, path, encoding: str = "float32") -> None:
    """Write a Waveform as RIFF/WAVE.

    ``float32`` is lossless.  ``pcm16`` clamps to [-1, 1] and quantizes with a
    32768 scale, so a round trip errs by at most 1/32768 per sample.
    """
    path = Path(path)
    if encoding == "pcm16":
        q = np.clip(np.round(w.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
        wavfile.write(str(path), w.sample_rate, q)
    elif encoding == "float32":
        wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))
    else:
        raise DomainError(f"unknown encoding {encoding!r}; expected pcm16 or float32")


def synth_tone(freq_hz: float, duration_s: float, sample_rate: int, amplitude: float) -> Waveform:
    """Pure sine tone: samples[i] = amplitude * sin(2*pi*freq*i/sr)."""
    if not 0.0 < freq_hz < sample_rate / 2:
        raise DomainError(f"freq_hz must be in (0, {sample_rate / 2}), got {freq_hz}")
    if not 0.0 < amplitude <= 1.0:
        raise DomainError(f"amplitude must be in (0, 1], got {amplitude}")
    n = round(duration_s * sample_rate)
    i = np.arange(n, dtype=np.float64)
    return Waveform(amplitude * np.sin(2.0 * np.pi * freq_hz * i / sample_rate), sample_rate)


@dataclass(frozen=True)
class ToySong:
    """Three aligned tracks: a melody 'vocal', chordal accompaniment, and their mix."""

    vocal: Waveform
    accompaniment: Waveform
    mixture: Waveform
    seed: int
    duration_s: float

    def __post_init__(self):
        n = len(self.vocal)
        sr = self.vocal.sample_rate
        for track in (self.accompaniment, self.mixture):
            if len(track) != n or track.sample_rate != sr:
                raise DomainError("toy song tracks must share length and sample rate")


def _note_wave(freq: float, n: int, sr: int, amp: float, vibrato_hz: float = 5.0) -> np.ndarray:
    """Harmonic stack with slight vibrato and click-free attack/release ramps."""
    t = np.arange(n) / sr
    # FM vibrato with ~0.6% peak frequency deviation.
    beta = 0.006 * freq / vibrato_hz
    phase = 2 * np.pi * freq * t + beta * np.sin(2 * np.pi * vibrato_hz * t)
    wave = np.zeros(n)
    for k, h_amp in enumerate((1.0, 0.5, 0.3, 0.15), start=1):
        wave += h_amp * np.sin(k * phase)
    env = np.ones(n)
    attack = min(n, round(0.010 * sr))
    release = min(n, round(0.030 * sr))
    if attack:
        env[:attack] = np.linspace(0.0, 1.0, attack, endpoint=False)
    if release:
        env[n - release:] *= np.linspace(1.0, 0.0, release)
    return amp * env * wave


def _chord_wave(freqs, n: int, sr: int, amp: float) -> np.ndarray:
    """Sum of harmonic tones under a shared attack/decay/sustain/release envelope."""
    t = np.arange(n) / sr
    wave = np.zeros(n)
    for freq in freqs:
        for k, h_amp in enumerate((1.0, 0.4, 0.2), start=1):
            wave += h_amp * np.sin(2 * np.pi * k * freq * t)
    attack = min(n, round(0.020 * sr))
    decay = min(n - attack, round(0.100 * sr))
    release = min(n, round(0.080 * sr))
    env = np.full(n, 0.7)
    if attack:
        env[:attack] = np.linspace(0.0, 1.0, attack, endpoint=False)
    if decay:
        env[attack:attack + decay] = np.linspace(1.0, 0.7, decay)
    if release:
        env[n - release:] *= np.linspace(1.0, 0.0, release)
    return amp * env * wave


def synth_toy_song(seed: int, duration_s: float, sample_rate: int) -> ToySong:
    """Deterministic multi-track toy song.

    The vocal is a monophonic melody on a beat grid (harmonic tone with 5 Hz
    vibrato); the accompaniment plays triads from a seeded I-IV-V-style
    progression with ADSR envelopes.  Every song contains at least one vocal
    rest of >= 0.5 s while the accompaniment keeps playing.
    """
    if duration_s < 2:
        raise DomainError(f"duration_s must be >= 2, got {duration_s}")
    if sample_rate not in (16000, 24000):
        raise DomainError(f"sample_rate must be 16000 or 24000, got {sample_rate}")

    rng = Rng(seed).child("toysong")
    n_total = round(duration_s * sample_rate)
    bpm = 84 + 8 * int(rng.integers(0, 8))
    beat_s = 60.0 / bpm
    beat_n = round(beat_s * sample_rate)
    n_beats = math.ceil(n_total / beat_n)

    root_midi = 57 + int(rng.integers(0, 12))  # A3 .. G#4
    scale = _MAJOR if rng.uniform() < 0.5 else _MINOR

    # Melody: random walk over scale degrees, one note per beat, some rests,
    # plus one forced rest span long enough to expose vocal silence.
    degrees = np.zeros(n_beats, dtype=int)
    rest = np.zeros(n_beats, dtype=bool)
    deg = int(rng.integers(0, 7))
    for b in range(n_beats):
        deg = int(np.clip(deg + int(rng.integers(-2, 3)), 0, 9))
        degrees[b] = deg
        rest[b] = rng.uniform() < 0.12
    silent_beats = math.ceil(0.6 / beat_s)
    start_choices = max(1, n_beats - silent_beats - 1)
    sil_start = 1 + int(rng.integers(0, start_choices))
    rest[sil_start:sil_start + silent_beats] = True

    vocal = np.zeros(n_total)
    for b in range(n_beats):
        if rest[b]:
            continue
        start = b * beat_n
        stop = min(n_total, start + beat_n)
        if stop <= start:
            continue
        d = degrees[b]
        midi = root_midi + 12 + 12 * (d // 7) + scale[d % 7]
        vocal[start:stop] = _note_wave(_midi_to_hz(midi), stop - start, sample_rate, amp=0.32)

    # Accompaniment: one triad per bar (4 beats) from a seeded progression of
    # I, IV, V, and vi.
    prog_pool = (0, 3, 4, 5)
    n_bars = math.ceil(n_beats / 4)
    progression = [0] + [prog_pool[int(rng.integers(0, 4))] for _ in range(max(0, n_bars - 1))]
    accompaniment = np.zeros(n_total)
    bar_n = 4 * beat_n
    for bar, chord_deg in enumerate(progression):
        start = bar * bar_n
        stop = min(n_total, start + bar_n)
        if stop <= start:
            continue
        triad = [root_midi - 12 + 12 * ((chord_deg + off) // 7) + scale[(chord_deg + off) % 7]
                 for off in (0, 2, 4)]
        accompaniment[start:stop] += _chord_wave(
            [_midi_to_hz(m) for m in triad], stop - start, sample_rate, amp=0.11
        )

    mixture = np.clip(vocal + accompaniment, -1.0, 1.0)
    return ToySong(
        vocal=Waveform(vocal, sample_rate),
        accompaniment=Waveform(accompaniment, sample_rate),
        mixture=Waveform(mixture, sample_rate),
        seed=seed,
        duration_s=duration_s,
    )


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    vocal: str
    accompaniment: str
    mixture: str
    duration_s: float
    split: str  # "train" or "test"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def path(self, relative: str) -> Path:
        return self.root / relative

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "seed": self.seed,
            "entries": [
                {
                    "id": e.id,
                    "vocal": e.vocal,
                    "accompaniment": e.accompaniment,
                    "mixture": e.mixture,
                    "duration_s": e.duration_s,
                    "split": e.split,
                }
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("version") != 1:
            raise FormatError(f"{path}: unsupported manifest version {doc.get('version')}")
        entries = tuple(ManifestEntry(**entry) for entry in doc["entries"])
        return cls(entries=entries, seed=int(doc["seed"]), root=path.parent)


def make_dataset(seed: int, n_songs: int, duration_s: float, sample_rate: int, out_dir) -> DatasetManifest:
    """Synthesize ``n_songs`` toy songs into ``out_dir`` with an 8:2 train/test split.

    Train gets ceil(0.8 * n) entries; assignment is a seeded permutation.
    Re-running with identical arguments rewrites identical bytes.
    """
    if n_songs < 5:
        raise DomainError(f"n_songs must be >= 5, got {n_songs}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_train = math.ceil(0.8 * n_songs)
    order = Rng(seed).child("split").shuffled(n_songs)
    split_of = {int(idx): ("train" if pos < n_train else "test") for pos, idx in enumerate(order)}

    entries = []
    for i in range(n_songs):
        song_seed = (seed * 1_000_003 + i) % (2**31)
        song = synth_toy_song(song_seed, duration_s, sample_rate)
        name = f"song_{i:04d}"
        paths = {}
        for track in ("vocal", "accompaniment", "mixture"):
            rel = f"{name}_{track}.wav"
            write_wav(getattr(song, track), out_dir / rel, encoding="float32")
            paths[track] = rel
        entries.append(
            ManifestEntry(
                id=name,
                vocal=paths["vocal"],
                accompaniment=paths["accompaniment"],
                mixture=paths["mixture"],
                duration_s=duration_s,
                split=split_of[i],
            )
        )
    manifest = DatasetManifest(entries=tuple(entries), seed=seed, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
