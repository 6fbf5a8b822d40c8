"""Temporal squeezing and restoring of waveforms and mel frame sequences.

Two waveform modes are provided because speeding audio up is ambiguous:

* ``phase_vocoder``  -- pitch-preserving time-scale modification (default).
* ``naive_resample`` -- windowed-sinc fractional resampling; plays the same
  samples faster, shifting pitch by the speed factor.

Both keep the sample rate unchanged: a factor-``r`` compression returns
``round(len(x) / r)`` samples at the original rate.

``mel_stretch`` is the representation-domain counterpart used on the restore
path: per-bin linear interpolation along the frame axis.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .audio import Waveform
from .errors import DomainError
from .spectral import MelSpectrogram, hann

PV_FFT = 2048
PV_HOP = 512

RATIO_MIN = 1.0 / 16.0
RATIO_MAX = 16.0

TSM_MODES = ("phase_vocoder", "naive_resample")


def validate_ratio(r: float) -> float:
    r = float(r)
    if not (RATIO_MIN <= r <= RATIO_MAX) or not np.isfinite(r):
        raise DomainError(f"speed ratio must lie in [1/16, 16], got {r}")
    return r


def _lock_phases(mag: np.ndarray, propagated: np.ndarray, analysis: np.ndarray) -> np.ndarray:
    """Identity phase locking: bins inherit their nearest spectral peak's
    propagated phase plus the analysis-phase offset from that peak.

    Keeps leakage bins coherent with their peak, which per-bin propagation
    loses at large analysis hops.
    """
    left = np.empty_like(mag)
    left[1:] = mag[:-1]
    left[0] = -1.0
    right = np.empty_like(mag)
    right[:-1] = mag[1:]
    right[-1] = -1.0
    peaks = np.flatnonzero((mag > left) & (mag >= right))
    if peaks.size == 0:
        return propagated
    boundaries = (peaks[:-1] + peaks[1:]) // 2 + 1
    owner = peaks[np.searchsorted(boundaries, np.arange(mag.shape[0]), side="right")]
    return propagated[owner] + (analysis - analysis[owner])


def _phase_vocoder(x: np.ndarray, r: float) -> np.ndarray:
    """Phase vocoder: analysis hop round(512*r), synthesis hop 512, Hann
    windows, overlap-add normalization, peak-locked phase propagation.

    Frame 0 resynthesizes the true signal start (its synthesis phases are its
    analysis phases), so no edge padding is needed.  Analysis positions past
    the last fully-real window are clamped there and the propagation keeps the
    last measured per-bin frequencies, continuing the final spectrum smoothly
    to the end of the output.
    """
    n = x.shape[0]
    out_len = round(n / r)
    hop_a = max(1, round(PV_HOP * r))
    win = hann(PV_FFT)

    n_frames = -(-(out_len + PV_FFT) // PV_HOP) + 1
    pos = np.minimum(np.arange(n_frames) * hop_a, n - PV_FFT)
    idx = np.arange(PV_FFT)[None, :] + pos[:, None]
    spec = np.fft.rfft(x[idx] * win[None, :], axis=1)
    mags = np.abs(spec)
    phases = np.angle(spec)

    # Per-bin instantaneous frequency from consecutive frames; where the
    # analysis froze (dpos == 0) keep the last measured estimate.
    bins = np.arange(spec.shape[1])
    bin_center = 2.0 * np.pi * bins / PV_FFT  # rad/sample
    inst = np.empty_like(phases[:-1])
    last = bin_center.copy()
    for k in range(n_frames - 1):
        dpos = pos[k + 1] - pos[k]
        if dpos > 0:
            omega = bin_center * dpos
            dphi = phases[k + 1] - phases[k] - omega
            dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
            last = (omega + dphi) / dpos
        inst[k] = last

    syn = np.empty_like(phases)
    syn[0] = phases[0]
    for k in range(1, n_frames):
        propagated = syn[k - 1] + inst[k - 1] * PV_HOP
        syn[k] = _lock_phases(mags[k], propagated, phases[k])

    frames = np.fft.irfft(mags * np.exp(1j * syn), n=PV_FFT, axis=1) * win[None, :]
    total = (n_frames - 1) * PV_HOP + PV_FFT
    y = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win**2
    for f in range(n_frames):
        at = f * PV_HOP
        y[at:at + PV_FFT] += frames[f]
        norm[at:at + PV_FFT] += win_sq
    good = norm > 1e-10
    y[good] /= norm[good]
    return y[:out_len]


def _sinc_resample(x: np.ndarray, r: float, taps: int = 64, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc interpolation at fractional positions i*r.

    Exact on integer positions, so r = 1 is the identity.  No anti-alias
    filtering: content above the post-speedup Nyquist aliases (hence 'naive').
    """
    n = x.shape[0]
    out_len = round(n / r)
    if out_len == 0:
        return np.zeros(0)
    t = np.arange(out_len) * r
    k0 = np.floor(t).astype(int) - taps // 2 + 1
    offsets = np.arange(taps)
    idx = k0[:, None] + offsets[None, :]
    u = t[:, None] - idx
    half = taps / 2.0
    inside = np.abs(u) <= half
    kaiser = np.where(inside, np.i0(beta * np.sqrt(np.maximum(0.0, 1.0 - (u / half) ** 2))) / np.i0(beta), 0.0)
    kernel = np.sinc(u) * kaiser
    xp = np.pad(x, taps, mode="constant")
    return np.einsum("ij,ij->i", kernel, xp[idx + taps])


def tsm_compress(w: Waveform, r: float, mode: str = "phase_vocoder") -> Waveform:
    """Speed audio up by ``r`` (or slow it down for r < 1) keeping the rate.

    Output length is round(len(w) / r).
    """
    r = validate_ratio(r)
    if mode not in TSM_MODES:
        raise DomainError(f"unknown TSM mode {mode!r}; expected one of {TSM_MODES}")
    if mode == "phase_vocoder":
        if len(w) < PV_FFT:
            raise DomainError(f"phase vocoder needs >= {PV_FFT} samples, got {len(w)}")
        y = _phase_vocoder(w.samples, r)
    else:
        y = _sinc_resample(w.samples, r)
    return Waveform(y, w.sample_rate)


def tsm_expand(w: Waveform, r: float, mode: str = "phase_vocoder") -> Waveform:
    """Inverse of :func:`tsm_compress`: restore by the same ratio."""
    r = validate_ratio(r)
    return tsm_compress(w, 1.0 / r, mode=mode)


def stretch_frames(frames: np.ndarray, n_out: int) -> np.ndarray:
    """Resample a (F, bins) matrix to ``n_out`` frames by per-bin linear
    interpolation with aligned endpoints."""
    n_in = frames.shape[0]
    if n_out < 1:
        raise DomainError(f"target frame count must be >= 1, got {n_out}")
    if n_in == 1:
        return np.repeat(frames, n_out, axis=0)
    pos = np.arange(n_out) * (n_in - 1) / max(n_out - 1, 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo)[:, None]
    return (1.0 - frac) * frames[lo] + frac * frames[hi]


def mel_stretch(m: MelSpectrogram, r: float) -> MelSpectrogram:
    """Stretch (r > 1) or contract (r < 1) a mel along the frame axis.

    Output frame count is round(F * r); bin count is unchanged.  The
    source-ratio tag is divided by ``r``, so stretching a ratio-r mel by r
    yields a natural-speed tag of 1.
    """
    r = validate_ratio(r)
    if m.frame_count < 1:
        raise DomainError("mel_stretch needs at least one frame")
    n_out = max(1, round(m.frame_count * r))
    out = stretch_frames(m.frames, n_out)
    return dataclasses.replace(m, frames=out, source_ratio=m.source_ratio / r)
