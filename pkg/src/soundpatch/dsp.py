"""Waveform <-> log-mel-spectrogram conversion and Griffin-Lim reconstruction.

All signal constants live here: 16 kHz mono, 512-point DFT, 512-sample
window, 160-sample (10 ms) hop, 64 mel bins, log floor 1e-5. Frames are
taken without centering, so T = 1 + floor((n_samples - win) / hop).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MelConfig
from .textures import SAMPLE_RATE


class CorruptAudioError(ValueError):
    pass


@dataclass
class MelSpec:
    values: np.ndarray           # T x F log mel power
    n_samples: int               # sample count of the source waveform
    sample_rate: int = SAMPLE_RATE
    frame_hop_s: float = 0.010

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def expected_frames(n_samples: int, cfg: MelConfig) -> int:
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def _window(cfg: MelConfig) -> np.ndarray:
    # periodic hann
    n = np.arange(cfg.win_length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win_length)


def _frame(waveform: np.ndarray, cfg: MelConfig) -> np.ndarray:
    t = expected_frames(len(waveform), cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    return waveform[idx]


def stft_power(waveform: np.ndarray, cfg: MelConfig) -> np.ndarray:
    frames = _frame(waveform, cfg) * _window(cfg)[None, :]
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """n_mels x (n_fft//2 + 1) triangular filters on the HTK mel scale."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / cfg.n_fft
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rise = (fft_freqs - lo) / max(mid - lo, 1e-12)
        fall = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def mel_center_freqs(cfg: MelConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def wav_to_mel(waveform: np.ndarray, cfg: MelConfig | None = None) -> MelSpec:
    cfg = cfg or MelConfig()
    waveform = np.asarray(waveform, dtype=np.float64)
    if not np.all(np.isfinite(waveform)):
        raise CorruptAudioError("corrupt audio: non-finite samples")
    if len(waveform) < cfg.win_length:
        raise ValueError(f"waveform shorter than one window ({cfg.win_length} samples)")
    power = stft_power(waveform, cfg)
    mel_power = power @ mel_filterbank(cfg).T
    values = np.log(np.clip(mel_power, cfg.eps_floor, None))
    return MelSpec(values=values, n_samples=len(waveform))


def mel_to_wav(mel: MelSpec, n_iters: int | None = None, cfg: MelConfig | None = None,
               return_errors: bool = False):
    """Griffin-Lim phase reconstruction from a mel-inverted linear spectrogram.

    Initial phase comes from a fixed-seed RNG (zero-phase initialisation locks
    onto off-bin frequencies), so the reconstruction stays deterministic.
    """
    cfg = cfg or MelConfig()
    n_iters = cfg.griffin_lim_iters if n_iters is None else n_iters
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    fb = mel_filterbank(cfg)
    mel_power = np.exp(np.asarray(mel.values, dtype=np.float64))
    lin_power = np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None)
    target = np.sqrt(lin_power)

    rng = np.random.default_rng(1234)
    spec = target * np.exp(2j * np.pi * rng.random(target.shape))
    errors = []
    x = _istft(spec, cfg, mel.n_samples)
    for _ in range(n_iters):
        frames = _frame(x, cfg) * _window(cfg)[None, :]
        cur = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
        errors.append(float(np.linalg.norm(np.abs(cur) - target) /
                            max(np.linalg.norm(target), 1e-12)))
        phase = np.exp(1j * np.angle(cur))
        x = _istft(target * phase, cfg, mel.n_samples)
    if return_errors:
        return x, errors
    return x


def _istft(spec: np.ndarray, cfg: MelConfig, n_samples: int) -> np.ndarray:
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, : cfg.win_length]
    win = _window(cfg)
    t = spec.shape[0]
    out = np.zeros((t - 1) * cfg.hop_length + cfg.win_length)
    norm = np.zeros_like(out)
    for i in range(t):
        s = i * cfg.hop_length
        out[s: s + cfg.win_length] += frames[i] * win
        norm[s: s + cfg.win_length] += win ** 2
    # floor the overlap normalizer so under-covered edge samples fade out
    # instead of being amplified by ~1/win^2
    out = out / np.maximum(norm, 1e-2)
    return fix_duration(out, n_samples / SAMPLE_RATE)


def fix_duration(waveform: np.ndarray, target_s: float,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    if target_s <= 0:
        raise ValueError("target_s must be > 0")
    n = round(target_s * sample_rate)
    if len(waveform) >= n:
        return np.asarray(waveform[:n])
    return np.concatenate([waveform, np.zeros(n - len(waveform))])


# ---------------------------------------------------------------------------
# 16-bit PCM mono WAV I/O

def write_wav(path: str | Path, waveform: np.ndarray,
              sample_rate: int = SAMPLE_RATE) -> None:
    pcm = (np.clip(waveform, -1.0, 1.0) * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def wav_bytes(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    import io
    buf = io.BytesIO()
    pcm = (np.clip(waveform, -1.0, 1.0) * 32767.0).round().astype("<i2")
    with wave.open(buf, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())
    return buf.getvalue()


def read_wav(path: str | Path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()} bit")
        if f.getframerate() != sample_rate:
            raise ValueError(f"{path}: expected {sample_rate} Hz, got {f.getframerate()}")
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0
