"""Waveform to log-mel front end and a PCM16 WAV reader."""

import wave
from dataclasses import dataclass

import numpy as np

SUPPORTED_RATES = (8000, 16000)


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class LogMelConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    floor: float = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate):
    """HTK-scale triangular filters spanning 0 Hz to Nyquist, shape (n_mels, n_fft//2 + 1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_lengths(sample_rate, config):
    frame_len = int(round(sample_rate * config.frame_ms / 1000.0))
    hop_len = int(round(sample_rate * config.hop_ms / 1000.0))
    n_fft = 1 << (frame_len - 1).bit_length()
    return frame_len, hop_len, n_fft


def logmel(samples, sample_rate, config=LogMelConfig()):
    """Log-mel energies (natural log) of a mono waveform, shape (T, n_mels).

    Frames are Hann-windowed (periodic), zero-padded to the next power of two
    and mapped through the power spectrum; values are ``ln(max(E, floor))``.
    """
    if sample_rate not in SUPPORTED_RATES:
        raise AudioError(f"unsupported sample rate {sample_rate} Hz (expected one of {SUPPORTED_RATES})")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise AudioError("waveform must be mono (1-D)")
    frame_len, hop_len, n_fft = frame_lengths(sample_rate, config)
    if len(x) < frame_len:
        raise AudioError(f"waveform of {len(x)} samples shorter than one frame ({frame_len})")
    T = 1 + (len(x) - frame_len) // hop_len
    idx = np.arange(frame_len)[None, :] + hop_len * np.arange(T)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    spec = np.fft.rfft(x[idx] * window, n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    energy = power @ mel_filterbank(config.n_mels, n_fft, sample_rate).T
    return np.log(np.maximum(energy, config.floor))


def read_wav(path):
    """Read a PCM16 mono RIFF/WAVE file; samples are scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            if channels != 1:
                raise AudioError(f"{path}: expected mono, found {channels} channels")
            if width != 2:
                raise AudioError(f"{path}: expected PCM16, found {8 * width}-bit samples")
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: malformed or non-PCM WAV ({exc})") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return samples, rate


def write_wav(path, samples, sample_rate, channels=1):
    """Write int16 samples (or floats in [-1, 1]) as PCM16."""
    data = np.asarray(samples)
    if data.dtype.kind == "f":
        data = np.clip(np.round(data * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(data.astype("<i2").tobytes())
