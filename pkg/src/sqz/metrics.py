"""Distance metrics, representation-rate accounting, and the benchmark report.

Distances follow the evaluation convention: log-mel and log-magnitude L1 at
2048-point FFT / 512 hop / 80 mel bins, reported as means over time-frequency
cells so values are duration-invariant.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform
from .errors import DomainError
from .spectral import metric_mel, mel_spectrogram, stft

STFT_LOG_EPS = 1e-5


def _paired(a: Waveform, b: Waveform) -> tuple[np.ndarray, np.ndarray, int]:
    if a.sample_rate != b.sample_rate:
        raise DomainError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")
    hop = metric_mel(a.sample_rate).spectral.hop
    if abs(len(a) - len(b)) > 2 * hop:
        raise DomainError(
            f"lengths differ by {abs(len(a) - len(b))} samples; at most {2 * hop} allowed"
        )
    n = max(len(a), len(b))
    xa = np.pad(a.samples, (0, n - len(a)))
    xb = np.pad(b.samples, (0, n - len(b)))
    return xa, xb, a.sample_rate


def mel_distance(a: Waveform, b: Waveform) -> float:
    """Mean absolute difference of metric-config log-mel spectrograms."""
    xa, xb, sr = _paired(a, b)
    cfg = metric_mel(sr)
    ma = mel_spectrogram(Waveform(xa, sr), cfg).frames
    mb = mel_spectrogram(Waveform(xb, sr), cfg).frames
    return float(np.mean(np.abs(ma - mb)))


def stft_distance(a: Waveform, b: Waveform) -> float:
    """Mean absolute difference of log STFT magnitudes at the metric config."""
    xa, xb, sr = _paired(a, b)
    cfg = metric_mel(sr).spectral
    la = np.log(np.abs(stft(xa, cfg).values) + STFT_LOG_EPS)
    lb = np.log(np.abs(stft(xb, cfg).values) + STFT_LOG_EPS)
    return float(np.mean(np.abs(la - lb)))


def waveform_distance(a: Waveform, b: Waveform) -> float:
    """Mean absolute sample difference."""
    xa, xb, _ = _paired(a, b)
    return float(np.mean(np.abs(xa - xb)))


def faps(sample_rate: float, hop: float, r: float) -> float:
    """Audio feature frames per second of real-time music: sr / hop / r."""
    if sample_rate <= 0 or hop <= 0 or r <= 0:
        raise DomainError("faps arguments must be positive")
    return sample_rate / hop / r


def rtf(wall_seconds: float, audio_seconds: float) -> float:
    """Real-time factor: generation wall time over generated audio duration."""
    if audio_seconds <= 0:
        raise DomainError(f"audio_seconds must be positive, got {audio_seconds}")
    return wall_seconds / audio_seconds


@dataclass
class ReportRow:
    name: str
    mel_dis: float | None = None
    stft_dis: float | None = None
    wave_dis: float | None = None
    faps: float | None = None
    rtf: float | None = None


@dataclass
class MetricReport:
    rows: list[ReportRow]
    meta: dict = field(default_factory=dict)

    _COLUMNS = ("name", "mel_dis", "stft_dis", "wave_dis", "faps", "rtf")

    def __post_init__(self):
        for row in self.rows:
            for col in self._COLUMNS[1:]:
                v = getattr(row, col)
                if v is not None and (not np.isfinite(v) or v < 0):
                    raise DomainError(f"report value {col}={v} for row {row.name!r}")

    @staticmethod
    def _fmt(v: float | None) -> str:
        return "-" if v is None else f"{v:.4f}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self._COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [row.name]
                    + ["" if getattr(row, c) is None else f"{getattr(row, c):.6f}" for c in self._COLUMNS[1:]]
                )

    def write_markdown(self, path) -> None:
        lines = [
            "| Model | Mel_dis | STFT_dis | Waveform_dis | FaPS | RTF |",
            "|---|---|---|---|---|---|",
        ]
        for row in self.rows:
            cells = [row.name] + [self._fmt(getattr(row, c)) for c in self._COLUMNS[1:]]
            lines.append("| " + " | ".join(cells) + " |")
        if self.meta:
            lines.append("")
            lines.append("Metadata: " + ", ".join(f"{k}={v}" for k, v in sorted(self.meta.items())))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _trim_pair(a: Waveform, b: Waveform) -> tuple[Waveform, Waveform]:
    n = min(len(a), len(b))
    return Waveform(a.samples[:n], a.sample_rate), Waveform(b.samples[:n], b.sample_rate)


def bench_report(
    manifest,
    ckpts: dict,
    ratios=(1, 4, 8),
    out_dir=None,
    seed: int = 0,
    compose_duration_s: float = 8.0,
    steps: int | None = None,
    figures: bool = True,
) -> MetricReport:
    """Evaluate the restoration/generation stack on a dataset's test split.

    ``ckpts`` maps {"restoration": ..., "composer": ..., "sag": ...}; composer
    and sag entries are optional and only contribute timing rows.  Writes
    ``report.csv`` and ``report.md`` plus rendered figures when ``out_dir`` is
    given.  Distance columns are deterministic in the seed; RTF columns are
    wall-clock and exempt.
    """
    from .audio import read_wav
    from .restoration import restore
    from .spectral import model_mel, vocode
    from .timescale import tsm_compress

    rest = ckpts.get("restoration")
    if rest is None:
        raise DomainError("bench_report requires a restoration checkpoint")
    test_entries = manifest.split("test")
    if not test_entries:
        raise DomainError("manifest has no test split")

    sr = rest.mel_config.sample_rate
    hop = rest.mel_config.spectral.hop
    cfg = model_mel(sr)
    songs = [read_wav(manifest.path(e.mixture)) for e in test_entries]

    rows = []
    restored_example = None  # (truth mel, restored mel) for the figure

    # Vocoder round trip: decode the ground-truth mel.
    dists, wall, audio_s = [], 0.0, 0.0
    for song in songs:
        t0 = time.perf_counter()
        decoded = vocode(mel_spectrogram(song, cfg))
        wall += time.perf_counter() - t0
        audio_s += song.duration_s
        a, b = _trim_pair(song, decoded)
        dists.append((mel_distance(a, b), stft_distance(a, b), waveform_distance(a, b)))
    med = np.mean(dists, axis=0)
    rows.append(ReportRow("vocoder", med[0], med[1], med[2], faps(sr, hop, 1), rtf(wall, audio_s)))

    for r in ratios:
        dists, wall, audio_s = [], 0.0, 0.0
        for song in songs:
            t0 = time.perf_counter()
            m_c = mel_spectrogram(tsm_compress(song, r), cfg).with_ratio(r)
            restored = restore(m_c, r, rest, steps=steps, seed=seed)
            out = vocode(restored)
            wall += time.perf_counter() - t0
            audio_s += song.duration_s
            a, b = _trim_pair(song, out)
            dists.append((mel_distance(a, b), stft_distance(a, b), waveform_distance(a, b)))
            if restored_example is None and r != 1:
                restored_example = (mel_spectrogram(song, cfg), restored, r)
        med = np.mean(dists, axis=0)
        rows.append(
            ReportRow(f"restore-x{r:g}", med[0], med[1], med[2], faps(sr, hop, r), rtf(wall, audio_s))
        )

    comp = ckpts.get("composer")
    if comp is not None:
        from .composer import compose_full

        for r in ratios:
            if r == 1:
                continue
            t0 = time.perf_counter()
            compose_full(
                "scratch",
                None,
                r,
                {"composer": comp, "restoration": rest},
                compose_duration_s,
                seed=seed,
                steps=steps,
            )
            wall = time.perf_counter() - t0
            rows.append(
                ReportRow(f"compose-x{r:g}", None, None, None, faps(sr, hop, r), rtf(wall, compose_duration_s))
            )

    sag_ckpt = ckpts.get("sag")
    if sag_ckpt is not None:
        from .sag import generate_accompaniment

        vocal = read_wav(manifest.path(test_entries[0].vocal))
        r = sag_ckpt.ratio
        t0 = time.perf_counter()
        generate_accompaniment(vocal, r, {"sag": sag_ckpt, "restoration": rest}, seed=seed, steps=steps)
        wall = time.perf_counter() - t0
        rows.append(
            ReportRow(f"sag-x{r:g}", None, None, None, faps(sr, hop, r), rtf(wall, vocal.duration_s))
        )

    report = MetricReport(
        rows,
        meta={
            "dataset": str(getattr(manifest, "root", "")),
            "seed": seed,
            "mel_fingerprint": rest.fingerprint,
        },
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "report.csv")
        report.write_markdown(out_dir / "report.md")
        if figures:
            _render_figures(report, restored_example, out_dir / "figures")
    return report


def _render_figures(report: MetricReport, restored_example, fig_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir.mkdir(parents=True, exist_ok=True)

    dist_rows = [r for r in report.rows if r.mel_dis is not None]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    names = [r.name for r in dist_rows]
    axes[0].bar(names, [r.mel_dis for r in dist_rows], color="#4878d0")
    axes[0].set_ylabel("mel distance (L1)")
    axes[0].tick_params(axis="x", rotation=30)
    axes[1].bar(names, [r.stft_dis for r in dist_rows], color="#ee854a")
    axes[1].set_ylabel("stft distance (L1)")
    axes[1].tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(fig_dir / "distances.png", dpi=120)
    plt.close(fig)

    rtf_rows = [r for r in report.rows if r.rtf is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([r.name for r in rtf_rows], [r.rtf for r in rtf_rows], color="#6acc64")
    ax.set_ylabel("real-time factor")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(fig_dir / "rtf.png", dpi=120)
    plt.close(fig)

    if restored_example is not None:
        truth, restored, r = restored_example
        fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
        for ax, mel, title in (
            (axes[0], truth, "ground truth"),
            (axes[1], restored, f"restored (x{r:g})"),
        ):
            ax.imshow(mel.frames.T, origin="lower", aspect="auto", cmap="magma")
            ax.set_title(title)
            ax.set_ylabel("mel bin")
        axes[1].set_xlabel("frame")
        fig.tight_layout()
        fig.savefig(fig_dir / "spectrograms.png", dpi=120)
        plt.close(fig)
