"""Acceptance suite: every criterion at its stated tolerance.

Criteria 5-10 use the session-scoped standard training run (500 steps per
model on the 8-train-song toy set) from conftest.  Each test prints one
PASS line; a failed assert marks the criterion FAIL.
"""

import dataclasses
import time

import numpy as np
import pytest

from sqz.audio import read_wav, synth_tone, write_wav
from sqz.cli import cli_dispatch
from sqz.composer import compose_full, generate
from sqz.diffusion import Rng, make_schedule, sample
from sqz.metrics import faps, mel_distance
from sqz.nn import (
    Conv1d,
    DitConfig,
    DiTBlock,
    LayerNorm,
    Linear,
    MelDiT,
    MultiheadAttention,
    Tensor,
    gelu,
    grad_check,
)
from sqz.restoration import PriorCnn, PriorCnnConfig, restore
from sqz.spectral import SpectralConfig, istft, mel_spectrogram, model_mel, stft, vocode
from sqz.timescale import tsm_compress

from conftest import SAMPLE_RATE, loss_curve

MODEL = model_mel(SAMPLE_RATE)
F64 = np.float64


def _report(n: int, text: str) -> None:
    print(f"[ACCEPTANCE {n:02d}] PASS - {text}")


def dominant_hz(w) -> float:
    spec = np.abs(np.fft.rfft(w.samples * np.hanning(len(w.samples))))
    return np.argmax(spec) * w.sample_rate / len(w.samples)


def test_criterion_01_faps_arithmetic():
    expected = {1: 93.75, 4: 23.44, 8: 11.72}
    for r, value in expected.items():
        assert round(faps(24000, 256, r), 2) == value
    _report(1, "faps(24000, 256, {1,4,8}) = {93.75, 23.44, 11.72}")


def test_criterion_02_pitch_preservation():
    tone = synth_tone(440, 1.0, SAMPLE_RATE, 0.5)
    for r in (2, 4, 8):
        pv = tsm_compress(tone, r, mode="phase_vocoder")
        assert abs(dominant_hz(pv) - 440) <= 12, f"phase_vocoder r={r}"
        naive = tsm_compress(tone, r, mode="naive_resample")
        assert abs(dominant_hz(naive) - 440 * r) <= 12 * r, f"naive r={r}"
    _report(2, "phase vocoder holds 440 Hz (+/-12); naive shifts by r (+/-12r)")


def test_criterion_03_roundtrip_and_gradients():
    # STFT/ISTFT round trip.
    rng = np.random.default_rng(0)
    for cfg in (SpectralConfig(1024, 256), SpectralConfig(2048, 512)):
        x = rng.standard_normal(6 * cfg.fft_size)
        y = istft(stft(x, cfg), cfg, length=len(x))
        interior = slice(cfg.fft_size, -cfg.fft_size)
        assert np.max(np.abs(x[interior] - y[interior])) <= 1e-6

    # Gradient-check suite at toy size, 64-bit.
    worst = {}
    r = Rng(77)
    x_in = rng.standard_normal((4, 8))

    lin = Linear(8, 5, r.child("lin"), dtype=F64)
    worst["linear"] = grad_check(lambda: (lin(Tensor(x_in)) * lin(Tensor(x_in))).mean(),
                                 lin.named_parameters())

    c1 = Conv1d(3, 4, 3, r.child("c1"), dtype=F64)
    c2 = Conv1d(4, 2, 5, r.child("c2"), dtype=F64)
    xc = rng.standard_normal((3, 9))
    conv_params = {**{f"c1.{k}": v for k, v in c1.named_parameters().items()},
                   **{f"c2.{k}": v for k, v in c2.named_parameters().items()}}
    worst["conv"] = grad_check(
        lambda: (lambda out: (out * out).mean())(c2(gelu(c1(Tensor(xc))))), conv_params)

    attn = MultiheadAttention(8, 2, r.child("attn"), dtype=F64)
    worst["attention"] = grad_check(lambda: (lambda o: (o * o).mean())(attn(Tensor(x_in))),
                                    attn.named_parameters())

    ln = LayerNorm(8, dtype=F64)
    worst["layer_norm"] = grad_check(
        lambda: (lambda o: (o * o * o).mean())(ln(Tensor(x_in))), ln.named_parameters())

    block = DiTBlock(8, 2, r.child("block"), dtype=F64)
    cond = rng.standard_normal((1, 8))
    worst["dit_block"] = grad_check(
        lambda: (lambda o: (o * o).mean())(block(Tensor(x_in), Tensor(cond))),
        block.named_parameters())

    cnn = PriorCnn(PriorCnnConfig(hidden=5, depth=1, kernel=3), r.child("cnn"), dtype=F64, bins=4)
    mc = rng.uniform(-3, 0, (6, 4))
    worst["prior_cnn"] = grad_check(
        lambda: (lambda o: (o * o).mean())(cnn.forward(mc, 2.0)), cnn.named_parameters())

    for name, err in worst.items():
        assert err < 1e-4, f"{name}: {err}"
    summary = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    _report(3, f"istft round trip <= 1e-6; grad checks < 1e-4 ({summary})")


def test_criterion_04_oracle_sampler_exactness():
    target = np.random.default_rng(1).uniform(-8, 0, (12, 10))

    def oracle(x, sigma):
        return target.copy()

    for n in (2, 10, 50):
        sched = make_schedule(n, 80.0, 0.002)
        out = sample(oracle, target.shape, sched, Rng(2))
        err = np.max(np.abs(out - target))
        assert err <= 1e-5, f"N={n}: {err}"
    _report(4, "oracle denoiser reproduced exactly for N in {2, 10, 50}")


def test_criterion_05_overfit_convergence(rest_ckpt, comp_ckpt, sag_ckpt):
    reductions = {}
    for name, ckpt in (("restoration", rest_ckpt), ("composer", comp_ckpt), ("sag", sag_ckpt)):
        total = loss_curve(ckpt.history)
        assert len(total) <= 500
        first, last = total[:50].mean(), total[-50:].mean()
        assert last <= 0.5 * first, f"{name}: {first:.3f} -> {last:.3f}"
        reductions[name] = 1 - last / first
    summary = ", ".join(f"{k} -{v:.0%}" for k, v in reductions.items())
    _report(5, f"all trainings cut total loss >= 50% within 500 steps ({summary})")


def test_criterion_06_degradation_ordering(rest_ckpt, toy_manifest):
    means = {}
    for r in (1.0, 4.0, 8.0):
        dists = []
        for entry in toy_manifest.split("test"):
            song = read_wav(toy_manifest.path(entry.mixture))
            m_c = mel_spectrogram(tsm_compress(song, r), MODEL).with_ratio(r)
            out = vocode(restore(m_c, r, rest_ckpt, seed=11))
            n = min(len(song), len(out))
            dists.append(mel_distance(
                dataclasses.replace(song, samples=song.samples[:n]),
                dataclasses.replace(out, samples=out.samples[:n])))
        means[r] = float(np.mean(dists))
    assert means[1.0] <= means[4.0] <= means[8.0], means
    _report(6, "mean restored mel distance ordered: "
               f"x1 {means[1.0]:.3f} <= x4 {means[4.0]:.3f} <= x8 {means[8.0]:.3f}")


def test_criterion_07_conditioning_exactness(comp_ckpt):
    rng = Rng(123).child("masks")
    frames = 96
    checked = 0
    context_src = np.random.default_rng(5).uniform(MODEL.floor_log + 2, 0, (frames, 80))
    from sqz.spectral import MelSpectrogram

    context = MelSpectrogram(context_src, MODEL, source_ratio=4.0)
    for i in range(22):
        if i % 2 == 0:
            k = int(rng.integers(1, frames))
            out = generate("continuation", context, k, frames, comp_ckpt, seed=i)
            visible = np.zeros(frames, dtype=bool)
            visible[:k] = True
        else:
            a = int(rng.integers(1, frames - 2))
            b = int(rng.integers(a + 1, frames))
            out = generate("completion", context, (a, b), frames, comp_ckpt, seed=i)
            visible = np.ones(frames, dtype=bool)
            visible[a:b] = False
        assert np.array_equal(out.frames[visible], context.frames[visible]), f"mask {i}"
        checked += 1
    assert checked >= 20
    _report(7, f"visible frames bit-exact over {checked} random masks")


def test_criterion_08_efficiency_scaling(comp_ckpt, rest_ckpt):
    ckpts = {"composer": comp_ckpt, "restoration": rest_ckpt}
    stats = {}
    rtfs = {}
    duration = 16.0
    for r in (4.0, 8.0):
        run_stats: dict = {}
        t0 = time.perf_counter()
        compose_full("scratch", None, r, ckpts, duration, seed=1, stats=run_stats)
        wall = time.perf_counter() - t0
        stats[r] = run_stats
        rtfs[r] = wall / duration
    assert stats[4.0]["composer_tokens"] == 2 * stats[8.0]["composer_tokens"], stats
    assert rtfs[8.0] < rtfs[4.0], rtfs
    _report(8, f"composer frame-tokens {stats[4.0]['composer_tokens']} (x4) = "
               f"2 x {stats[8.0]['composer_tokens']} (x8); "
               f"RTF {rtfs[8.0]:.3f} (x8) < {rtfs[4.0]:.3f} (x4)")


def test_criterion_09_sag_discrimination(sag_ckpt, toy_manifest):
    from sqz.audio import synth_toy_song
    from sqz.sag import prior_encode, semantic_features

    held_out = []
    for entry in toy_manifest.split("test"):
        held_out.append((read_wav(toy_manifest.path(entry.vocal)),
                         read_wav(toy_manifest.path(entry.accompaniment))))
    for extra_seed in range(900, 906):
        song = synth_toy_song(extra_seed, 6.0, SAMPLE_RATE)
        held_out.append((song.vocal, song.accompaniment))

    priors, accs = [], []
    for vocal, acc in held_out:
        vocal_c = tsm_compress(vocal, 4.0)
        prior = prior_encode(semantic_features(vocal_c, 4.0),
                             mel_spectrogram(vocal_c, MODEL), sag_ckpt)
        amel = mel_spectrogram(tsm_compress(acc, 4.0), MODEL)
        n = min(prior.frame_count, amel.frame_count)
        priors.append(prior.frames[:n])
        accs.append(amel.frames[:n])

    wins = 0
    for i, (prior, true_acc) in enumerate(zip(priors, accs)):
        shuffled = accs[(i + 1) % len(accs)]
        n = min(prior.shape[0], shuffled.shape[0])
        d_true = np.mean(np.abs(prior[:n] - true_acc[:n]))
        d_shuf = np.mean(np.abs(prior[:n] - shuffled[:n]))
        wins += d_true < d_shuf
    rate = wins / len(priors)
    assert rate >= 0.8, f"{wins}/{len(priors)}"
    _report(9, f"prior closer to true accompaniment on {wins}/{len(priors)} held-out songs")


def test_criterion_10_determinism(tmp_path, rest_ckpt, comp_ckpt, sag_ckpt, toy_manifest):
    comp_path = tmp_path / "comp.sqzc"
    rest_path = tmp_path / "rest.sqzc"
    sag_path = tmp_path / "sag.sqzc"
    comp_ckpt.save(comp_path)
    rest_ckpt.save(rest_path)
    sag_ckpt.save(sag_path)

    seed_wav = tmp_path / "seed.wav"
    entry = toy_manifest.split("test")[0]
    write_wav(read_wav(toy_manifest.path(entry.mixture)), seed_wav)
    vocal_wav = tmp_path / "vocal.wav"
    write_wav(read_wav(toy_manifest.path(entry.vocal)), vocal_wav)
    squeezed = tmp_path / "squeezed.wav"
    assert cli_dispatch(["squeeze", "--in", str(seed_wav), "--ratio", "4",
                         "--out", str(squeezed)]) == 0

    commands = {
        "generate-scratch": ["generate", "scratch", "--ratio", "4", "--dur", "4",
                             "--seed", "1", "--composer", str(comp_path),
                             "--restoration", str(rest_path), "--steps", "12"],
        "generate-continue": ["generate", "continue", "--in", str(seed_wav),
                              "--ratio", "4", "--dur", "8", "--seed", "2",
                              "--composer", str(comp_path),
                              "--restoration", str(rest_path), "--steps", "12"],
        "generate-complete": ["generate", "complete", "--in", str(seed_wav),
                              "--ratio", "4", "--dur", "6", "--from", "2", "--to", "4",
                              "--seed", "3", "--composer", str(comp_path),
                              "--restoration", str(rest_path), "--steps", "12"],
        "restore": ["restore", "--in", str(squeezed), "--ratio", "4",
                    "--ckpt", str(rest_path), "--seed", "4", "--steps", "12"],
        "sag-generate": ["sag", "generate", "--vocal", str(vocal_wav),
                         "--sag", str(sag_path), "--restoration", str(rest_path),
                         "--seed", "5", "--steps", "12"],
    }
    for name, argv in commands.items():
        outputs = []
        for attempt in ("one", "two"):
            out = tmp_path / f"{name}-{attempt}.wav"
            assert cli_dispatch(argv + ["--out", str(out)]) == 0, name
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1], f"{name} not byte-identical"
    _report(10, f"{len(commands)} generate/restore/sag commands byte-identical across reruns")
