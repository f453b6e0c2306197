import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soundpatch.config import MelConfig
from soundpatch.dsp import (CorruptAudioError, MelSpec, expected_frames,
                            fix_duration, mel_center_freqs, mel_filterbank,
                            mel_to_wav, read_wav, stft_power, wav_bytes,
                            wav_to_mel, write_wav)
from soundpatch.textures import SAMPLE_RATE, mix_textures, render_texture

CFG = MelConfig()


def test_frame_count_formula():
    wav = np.zeros(16640)
    mel = wav_to_mel(wav, CFG)
    assert mel.values.shape == (101, 64)
    assert expected_frames(16640, CFG) == 1 + (16640 - 512) // 160 == 101


def test_silence_hits_log_floor():
    mel = wav_to_mel(np.zeros(16640), CFG)
    assert np.allclose(mel.values, np.log(CFG.eps_floor))


def test_tone_argmax_bin_contains_440():
    tone = render_texture(0, 1.0, 1.04)
    mel = wav_to_mel(tone, CFG)
    bin_idx = int(np.argmax(mel.values.mean(axis=0)))
    # triangle m spans (edge[m], edge[m+2]); 440 Hz must fall inside the
    # winning filter's support
    from soundpatch.dsp import hz_to_mel, mel_to_hz
    edges = mel_to_hz(np.linspace(0, hz_to_mel(SAMPLE_RATE / 2), CFG.n_mels + 2))
    assert edges[bin_idx] < 440.0 < edges[bin_idx + 2]


def test_roundtrip_tone_within_one_bin():
    tone = render_texture(0, 1.0, 1.04)
    out = mel_to_wav(wav_to_mel(tone, CFG), n_iters=32, cfg=CFG)
    assert len(out) == len(tone)
    spec = np.abs(np.fft.rfft(out))
    freq = np.argmax(spec) * SAMPLE_RATE / len(out)
    bin_hz = SAMPLE_RATE / CFG.n_fft
    assert abs(freq - 440.0) <= bin_hz


def test_roundtrip_preserves_band_ranking():
    from soundpatch.textures import band_energies
    mix = mix_textures([render_texture(1, 0.9, 1.04),
                        render_texture(3, 0.5, 1.04, seed=4)])
    before = band_energies(mix, 4)
    out = mel_to_wav(wav_to_mel(mix, CFG), n_iters=32, cfg=CFG)
    after = band_energies(out, 4)
    assert list(np.argsort(before)) == list(np.argsort(after))


def test_griffin_lim_error_non_increasing():
    mel = wav_to_mel(render_texture(2, 0.8, 1.04, seed=2), CFG)
    _, errors = mel_to_wav(mel, n_iters=24, cfg=CFG, return_errors=True)
    diffs = np.diff(errors)
    assert np.all(diffs <= 1e-7)
    assert errors[-1] <= errors[0]


def test_griffin_lim_deterministic():
    mel = wav_to_mel(render_texture(1, 0.5, 1.04), CFG)
    a = mel_to_wav(mel, n_iters=8, cfg=CFG)
    b = mel_to_wav(mel, n_iters=8, cfg=CFG)
    assert np.array_equal(a, b)


def test_mel_determinism():
    wav = render_texture(2, 0.7, 1.04, seed=1)
    a = wav_to_mel(wav, CFG).values
    b = wav_to_mel(wav, CFG).values
    assert a.tobytes() == b.tobytes()


def test_power_linearity_in_amplitude():
    wav = render_texture(1, 0.6, 1.04)
    p1 = stft_power(wav, CFG) @ mel_filterbank(CFG).T
    p2 = stft_power(2.0 * wav, CFG) @ mel_filterbank(CFG).T
    mask = p1 > 1e-6
    assert np.allclose(p2[mask] / p1[mask], 4.0, rtol=1e-6)


def test_fix_duration_pad_and_truncate():
    half = np.ones(8000)
    padded = fix_duration(half, 1.0)
    assert len(padded) == 16000
    assert np.all(padded[8000:] == 0.0)
    long = np.arange(32000, dtype=float)
    cut = fix_duration(long, 1.0)
    assert len(cut) == 16000 and cut[-1] == 15999


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=40000), st.floats(0.01, 2.5))
def test_fix_duration_idempotent(n, target_s):
    x = np.linspace(-1, 1, n)
    once = fix_duration(x, target_s)
    twice = fix_duration(once, target_s)
    assert np.array_equal(once, twice)
    assert len(once) == round(target_s * SAMPLE_RATE)


def test_fix_duration_rejects_nonpositive():
    with pytest.raises(ValueError):
        fix_duration(np.zeros(10), 0.0)


def test_corrupt_audio_rejected():
    bad = np.zeros(16640)
    bad[5] = np.nan
    with pytest.raises(CorruptAudioError):
        wav_to_mel(bad, CFG)


def test_too_short_rejected():
    with pytest.raises(ValueError):
        wav_to_mel(np.zeros(100), CFG)


def test_wav_io_roundtrip(tmp_path):
    wav = render_texture(0, 0.9, 1.0)
    path = tmp_path / "x.wav"
    write_wav(path, wav)
    back = read_wav(path)
    assert len(back) == len(wav)
    assert np.max(np.abs(back - wav)) < 1.0 / 32000
    assert wav_bytes(wav)[:4] == b"RIFF"


def test_wav_io_rejects_other_formats(tmp_path):
    import wave
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(b"\x00\x00" * 64)
    with pytest.raises(ValueError, match="mono"):
        read_wav(path)
    path2 = tmp_path / "slow.wav"
    with wave.open(str(path2), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(b"\x00\x00" * 64)
    with pytest.raises(ValueError, match="Hz"):
        read_wav(path2)


def test_mel_center_freqs_monotone():
    centers = mel_center_freqs(CFG)
    assert len(centers) == CFG.n_mels
    assert np.all(np.diff(centers) > 0)
    assert centers[-1] < SAMPLE_RATE / 2
