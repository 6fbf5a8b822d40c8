import numpy as np
import pytest

from sqz.audio import read_wav, synth_toy_song
from sqz.composer import (
    ComposerCheckpoint,
    ComposerTrainConfig,
    MaskSpec,
    apply_mask,
    compose_full,
    generate,
    make_mask,
    masked_mse,
    train_composer,
)
from sqz.diffusion import Rng
from sqz.errors import CheckpointError, DomainError
from sqz.nn import Linear, Tensor
from sqz.spectral import MelSpectrogram, mel_spectrogram, model_mel

from conftest import SAMPLE_RATE, loss_curve

MODEL = model_mel(SAMPLE_RATE)
FLOOR = MODEL.floor_log


def random_mel(frames, seed=0, ratio=4.0):
    data = np.random.default_rng(seed).uniform(FLOOR + 1, 0, (frames, 80))
    return MelSpectrogram(data, MODEL, source_ratio=ratio)


class TestMakeMask:
    def test_scratch_covers_all(self):
        mask = make_mask("scratch", 100)
        assert mask.ranges == ((0, 100),)
        assert np.all(mask.plane() == 1)

    def test_continuation_explicit_boundary(self):
        mask = make_mask("continuation", 100, boundaries=60)
        assert mask.ranges == ((60, 100),)
        plane = mask.plane()
        assert np.all(plane[:60] == 0)
        assert np.all(plane[60:] == 1)

    def test_continuation_allows_nothing_masked(self):
        mask = make_mask("continuation", 100, boundaries=100)
        assert mask.plane().sum() == 0

    def test_completion_explicit(self):
        mask = make_mask("completion", 100, boundaries=(30, 70))
        assert mask.ranges == ((30, 70),)

    def test_training_fraction_bounds(self):
        rng = Rng(0).child("masks")
        for kind in ("continuation", "completion"):
            fractions = []
            for _ in range(10_000):
                mask = make_mask(kind, 100, rng=rng)
                fractions.append(mask.plane().mean())
            assert min(fractions) >= 0.25 - 1e-9
            assert max(fractions) <= 0.75 + 1e-9

    def test_too_few_frames(self):
        with pytest.raises(DomainError):
            make_mask("scratch", 7)

    def test_bad_boundaries(self):
        with pytest.raises(DomainError):
            make_mask("continuation", 100, boundaries=0)
        with pytest.raises(DomainError):
            make_mask("completion", 100, boundaries=(0, 50))
        with pytest.raises(DomainError):
            make_mask("completion", 100, boundaries=(50, 100))

    def test_maskspec_validation(self):
        with pytest.raises(DomainError):
            MaskSpec("scratch", 100, ((0, 50),))
        with pytest.raises(DomainError):
            MaskSpec("completion", 100, ((0, 100),))


class TestApplyMask:
    def test_scratch_floors_everything(self):
        m = random_mel(20)
        cond, plane = apply_mask(m, make_mask("scratch", 20))
        assert np.all(cond.frames == FLOOR)
        assert np.all(plane == 1)

    def test_empty_mask_is_identity(self):
        m = random_mel(20)
        cond, plane = apply_mask(m, make_mask("continuation", 20, boundaries=20))
        assert np.array_equal(cond.frames, m.frames)
        assert plane.sum() == 0

    def test_idempotent(self):
        m = random_mel(30, seed=3)
        mask = make_mask("completion", 30, boundaries=(10, 20))
        once, _ = apply_mask(m, mask)
        twice, _ = apply_mask(once, mask)
        assert np.array_equal(once.frames, twice.frames)

    def test_frame_mismatch_rejected(self):
        with pytest.raises(DomainError):
            apply_mask(random_mel(20), make_mask("scratch", 21))


class TestMaskedLoss:
    def test_visible_frames_get_no_gradient(self):
        # Frame-local linear probe: masked-only loss must leave visible-frame
        # inputs with exactly zero gradient.
        x = Tensor(np.random.default_rng(0).standard_normal((16, 80)), requires_grad=True)
        probe = Linear(80, 80, Rng(1), dtype=np.float64)
        plane = make_mask("completion", 16, boundaries=(4, 9)).plane()
        target = np.zeros((16, 80))
        loss = masked_mse(probe(x), target, plane)
        loss.backward()
        visible = plane < 0.5
        assert np.all(x.grad[visible] == 0)
        assert np.any(x.grad[~visible] != 0)


class TestTrainComposer:
    def test_deterministic_replay(self, toy_manifest):
        cfg = ComposerTrainConfig(steps=5, crop_frames=32)
        a = train_composer(toy_manifest, 4.0, cfg, seed=2)
        b = train_composer(toy_manifest, 4.0, cfg, seed=2)
        assert a.history == b.history

    def test_masked_only_flag_runs(self, toy_manifest):
        cfg = ComposerTrainConfig(steps=3, crop_frames=32, masked_only=True)
        ckpt = train_composer(toy_manifest, 4.0, cfg, seed=2)
        assert all(v >= 0 for _, v in ckpt.history)

    def test_checkpoint_roundtrip(self, tiny_comp_ckpt, tmp_path):
        path = tmp_path / "comp.sqzc"
        tiny_comp_ckpt.save(path)
        loaded = ComposerCheckpoint.load(path)
        assert loaded.fingerprint == tiny_comp_ckpt.fingerprint
        assert loaded.ratio == 4.0
        out_a = generate("scratch", None, None, 16, tiny_comp_ckpt, seed=4)
        out_b = generate("scratch", None, None, 16, loaded, seed=4)
        assert np.allclose(out_a.frames, out_b.frames, atol=1e-6)


class TestGenerate:
    def test_continuation_nothing_masked_returns_context(self, tiny_comp_ckpt):
        context = random_mel(24, seed=5)
        out = generate("continuation", context, 24, 24, tiny_comp_ckpt, seed=0)
        assert np.array_equal(out.frames, context.frames)  # bit-exact

    def test_completion_visible_bit_exact(self, tiny_comp_ckpt):
        context = random_mel(32, seed=6)
        out = generate("completion", context, (10, 20), 32, tiny_comp_ckpt, seed=0)
        assert np.array_equal(out.frames[:10], context.frames[:10])
        assert np.array_equal(out.frames[20:], context.frames[20:])
        assert not np.array_equal(out.frames[10:20], context.frames[10:20])

    def test_continuation_visible_bit_exact_many_masks(self, tiny_comp_ckpt):
        context = random_mel(40, seed=7)
        for k in (1, 5, 13, 20, 39):
            out = generate("continuation", context, k, 40, tiny_comp_ckpt, seed=k)
            assert np.array_equal(out.frames[:k], context.frames[:k])

    def test_scratch_deterministic_and_clamped(self, tiny_comp_ckpt):
        a = generate("scratch", None, None, 24, tiny_comp_ckpt, seed=9)
        b = generate("scratch", None, None, 24, tiny_comp_ckpt, seed=9)
        assert np.array_equal(a.frames, b.frames)
        assert np.all(a.frames >= FLOOR)

    def test_context_required(self, tiny_comp_ckpt):
        with pytest.raises(DomainError):
            generate("continuation", None, 10, 24, tiny_comp_ckpt)

    def test_context_length_must_match(self, tiny_comp_ckpt):
        with pytest.raises(DomainError):
            generate("continuation", random_mel(10), 5, 24, tiny_comp_ckpt)


class TestComposeFull:
    def test_scratch_frame_arithmetic_60s(self, tiny_comp_ckpt, tiny_rest_ckpt):
        stats = {}
        out = compose_full(
            "scratch", None, 4.0,
            {"composer": tiny_comp_ckpt, "restoration": tiny_rest_ckpt},
            60.0, seed=1, steps=4, vocoder_iters=2, stats=stats,
        )
        assert abs(stats["frames_compressed"] - 1407) <= 2
        assert stats["frames_full"] == round(stats["frames_compressed"] * 4.0)
        assert abs(out.duration_s - 60.0) <= 0.02 * 60.0

    def test_token_count_halves_from_r4_to_r8(self, tiny_comp_ckpt, tiny_rest_ckpt):
        ckpts = {"composer": tiny_comp_ckpt, "restoration": tiny_rest_ckpt}
        counts = {}
        for r in (4.0, 8.0):
            stats = {}
            compose_full("scratch", None, r, ckpts, 16.0, seed=1, steps=4,
                         vocoder_iters=2, stats=stats)
            counts[r] = stats["composer_tokens"]
        assert counts[4.0] == 2 * counts[8.0]

    def test_continuation_requires_input(self, tiny_comp_ckpt, tiny_rest_ckpt):
        with pytest.raises(DomainError):
            compose_full("continuation", None, 4.0,
                         {"composer": tiny_comp_ckpt, "restoration": tiny_rest_ckpt},
                         8.0, seed=0)

    def test_continuation_duration(self, tiny_comp_ckpt, tiny_rest_ckpt):
        song = synth_toy_song(1, 4.0, SAMPLE_RATE).mixture
        out = compose_full(
            "continuation", song, 4.0,
            {"composer": tiny_comp_ckpt, "restoration": tiny_rest_ckpt},
            8.0, seed=1, steps=4, vocoder_iters=2,
        )
        assert abs(out.duration_s - 8.0) <= 0.02 * 8.0
        assert out.sample_rate == SAMPLE_RATE

    def test_completion_runs(self, tiny_comp_ckpt, tiny_rest_ckpt):
        song = synth_toy_song(2, 6.0, SAMPLE_RATE).mixture
        out = compose_full(
            "completion", song, 4.0,
            {"composer": tiny_comp_ckpt, "restoration": tiny_rest_ckpt},
            6.0, seed=1, steps=4, boundaries_s=(2.0, 4.0), vocoder_iters=2,
        )
        assert abs(out.duration_s - 6.0) <= 0.02 * 6.0


class TestTrainedComposer:
    def test_loss_halves(self, comp_ckpt):
        total = loss_curve(comp_ckpt.history)
        assert total[-50:].mean() <= 0.5 * total[:50].mean()

    def test_continuation_visible_region_close_to_input(self, comp_ckpt, rest_ckpt, toy_manifest):
        # Full-pipeline continuation: the visible seconds of the output stay
        # within 1.5x the vocoder round-trip floor of the input's mel.
        import dataclasses

        from sqz.metrics import mel_distance
        from sqz.spectral import vocode

        entry = toy_manifest.split("test")[0]
        song = read_wav(toy_manifest.path(entry.mixture))
        half = dataclasses.replace(song, samples=song.samples[:len(song) // 2])
        out = compose_full(
            "continuation", half, 4.0,
            {"composer": comp_ckpt, "restoration": rest_ckpt},
            song.duration_s, seed=5,
        )
        n = len(half)
        visible_out = dataclasses.replace(out, samples=out.samples[:n])
        floor = mel_distance(half, vocode(mel_spectrogram(half, MODEL)))
        assert mel_distance(half, visible_out) <= 1.5 * floor
