"""Sound-texture inventory and rendering.

Each object class owns one texture with a dominant spectral band that is
disjoint (by well over a critical band) from every other class, so a
band-energy detector can read class identity straight off a mixture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
NYQUIST = SAMPLE_RATE / 2

# Base RMS of a gain-1.0 texture; keeps 3-object mixtures comfortably below
# the 0.99 peak ceiling most of the time.
BASE_RMS = 0.15


class UnknownClassError(KeyError):
    pass


@dataclass(frozen=True)
class SoundTexture:
    class_id: int
    name: str
    kind: str                    # pure_tone | am_tone | noise_band | click_train
    center_hz: float
    mod_rate_hz: float = 0.0
    bandwidth_hz: float = 0.0
    click_rate_hz: float = 0.0
    # dominant band used by the oracle detector
    band_lo_hz: float = 0.0
    band_hi_hz: float = 0.0


DEFAULT_TEXTURES: tuple[SoundTexture, ...] = (
    SoundTexture(0, "chime", "pure_tone", center_hz=440.0,
                 band_lo_hz=340.0, band_hi_hz=540.0),
    SoundTexture(1, "hum", "am_tone", center_hz=1250.0, mod_rate_hz=8.0,
                 band_lo_hz=1050.0, band_hi_hz=1450.0),
    SoundTexture(2, "hiss", "noise_band", center_hz=2800.0, bandwidth_hz=800.0,
                 band_lo_hz=2300.0, band_hi_hz=3300.0),
    SoundTexture(3, "tick", "click_train", center_hz=5600.0, click_rate_hz=10.0,
                 band_lo_hz=4800.0, band_hi_hz=6400.0),
)


def texture_table(num_classes: int = 4) -> tuple[SoundTexture, ...]:
    if num_classes > len(DEFAULT_TEXTURES):
        raise ValueError(f"only {len(DEFAULT_TEXTURES)} textures defined, asked for {num_classes}")
    return DEFAULT_TEXTURES[:num_classes]


def class_names(num_classes: int = 4) -> list[str]:
    return [t.name for t in texture_table(num_classes)]


def get_texture(class_id: int, num_classes: int = 4) -> SoundTexture:
    table = texture_table(num_classes)
    if not 0 <= class_id < len(table):
        raise UnknownClassError(f"unknown class {class_id}")
    return table[class_id]


def render_texture(class_id: int, gain: float, duration_s: float,
                   seed: int = 0, num_classes: int = 4) -> np.ndarray:
    """Render one class texture at RMS = BASE_RMS * gain.

    Deterministic in (class_id, gain, duration_s, seed); `seed` only matters
    for the stochastic noise_band kind.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be > 0")
    tex = get_texture(class_id, num_classes)
    n = round(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE

    if tex.kind == "pure_tone":
        sig = np.sin(2 * np.pi * tex.center_hz * t)
    elif tex.kind == "am_tone":
        carrier = np.sin(2 * np.pi * tex.center_hz * t)
        sig = carrier * (1.0 + 0.5 * np.sin(2 * np.pi * tex.mod_rate_hz * t))
    elif tex.kind == "noise_band":
        rng = np.random.default_rng((seed, tex.class_id))
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
        lo = tex.center_hz - tex.bandwidth_hz / 2
        hi = tex.center_hz + tex.bandwidth_hz / 2
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        sig = np.fft.irfft(spec, n)
    elif tex.kind == "click_train":
        sig = _click_train(t, n, tex)
    else:
        raise UnknownClassError(f"unknown texture kind {tex.kind}")

    rms = float(np.sqrt(np.mean(sig ** 2)))
    if rms < 1e-12:
        return np.zeros(n, dtype=np.float64)
    return (BASE_RMS * gain / rms) * sig


def _click_train(t: np.ndarray, n: int, tex: SoundTexture) -> np.ndarray:
    # short hann-windowed tone bursts; burst length well under the period so
    # onsets stay separable
    burst_len = round(0.006 * SAMPLE_RATE)
    tb = np.arange(burst_len) / SAMPLE_RATE
    burst = np.hanning(burst_len) * np.sin(2 * np.pi * tex.center_hz * tb)
    period = SAMPLE_RATE / tex.click_rate_hz
    sig = np.zeros(n)
    k = 0
    while True:
        start = round(k * period)
        if start >= n:
            break
        end = min(start + burst_len, n)
        sig[start:end] += burst[: end - start]
        k += 1
    return sig


def mix_textures(parts: list[np.ndarray]) -> np.ndarray:
    """Sample-wise sum, then scale down only if the peak exceeds 0.99."""
    mix = np.sum(parts, axis=0)
    peak = float(np.max(np.abs(mix))) if len(mix) else 0.0
    if peak > 0.99:
        mix = mix * (0.99 / peak)
    return mix


def band_energies(waveform: np.ndarray, num_classes: int = 4,
                  sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Per-class dominant-band energy density (energy / bandwidth).

    Density (not raw energy) so that spectrally flat noise scores every class
    about equally.
    """
    spec = np.abs(np.fft.rfft(waveform)) ** 2
    freqs = np.fft.rfftfreq(len(waveform), 1 / sample_rate)
    out = np.zeros(num_classes)
    for tex in texture_table(num_classes):
        sel = (freqs >= tex.band_lo_hz) & (freqs <= tex.band_hi_hz)
        out[tex.class_id] = spec[sel].sum() / (tex.band_hi_hz - tex.band_lo_hz)
    return out
