"""Time-squeezed mel-domain music generation and restoration toolkit.

Compress audio in time, model it as mel spectrograms in the compressed
domain with conditional diffusion transformers, restore to the original
speed through a CNN prior plus diffusion refiner, and decode to a waveform
with Griffin-Lim.  Includes a benchmark harness for representation-rate and
reconstruction-distance reporting.
"""

__version__ = "0.1.0"

from .audio import Waveform, read_wav, synth_tone, synth_toy_song, write_wav
from .rng import Rng
from .spectral import MelSpectrogram, mel_spectrogram, metric_mel, model_mel, vocode
from .timescale import mel_stretch, tsm_compress, tsm_expand

__all__ = [
    "Rng",
    "Waveform",
    "MelSpectrogram",
    "read_wav",
    "write_wav",
    "synth_tone",
    "synth_toy_song",
    "mel_spectrogram",
    "model_mel",
    "metric_mel",
    "vocode",
    "tsm_compress",
    "tsm_expand",
    "mel_stretch",
    "__version__",
]
