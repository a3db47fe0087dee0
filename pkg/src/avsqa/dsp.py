"""Signal-processing primitives: framing, STFT magnitudes, SNR mixing,
spectral-subtraction enhancement and frequency-weighted segmental SNR.

Everything here is a pure function of its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
WIN_LEN = 512
HOP = 256
FFT_SIZE = 512

FWSEG_BANDS = 25
FWSEG_FMIN_HZ = 50.0
FWSEG_MIN_DB = -10.0
FWSEG_MAX_DB = 35.0
FWSEG_WEIGHT_EXP = 0.2
FWSEG_ACTIVE_RANGE_DB = 40.0

SILENCE_RMS = 1e-8


class SignalError(ValueError):
    """Raised when an input violates a signal-processing precondition."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise SignalError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Spectrogram:
    mags: np.ndarray
    win_len: int = WIN_LEN
    hop: int = HOP
    fft_size: int = FFT_SIZE

    @property
    def n_frames(self) -> int:
        return self.mags.shape[0]

    @property
    def n_bins(self) -> int:
        return self.mags.shape[1]


@dataclass(frozen=True)
class NoiseClip:
    waveform: Waveform
    noise_id: str
    partition: str  # "seen" | "unseen"
    family: str = ""


def n_frames(n_samples: int, win_len: int = WIN_LEN, hop: int = HOP) -> int:
    """Frame count without padding; the trailing partial frame is dropped."""
    if n_samples < win_len:
        raise SignalError("utterance too short")
    return (n_samples - win_len) // hop + 1


def hann(win_len: int) -> np.ndarray:
    """Periodic Hann window."""
    return signal.get_window("hann", win_len, fftbins=True)


def frame_signal(x: np.ndarray, win_len: int = WIN_LEN, hop: int = HOP) -> np.ndarray:
    n = n_frames(len(x), win_len, hop)
    idx = np.arange(win_len)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft_complex(x: np.ndarray, win_len: int = WIN_LEN, hop: int = HOP,
                 fft_size: int = FFT_SIZE) -> np.ndarray:
    if win_len > fft_size:
        raise SignalError("win_len must not exceed fft_size")
    frames = frame_signal(np.asarray(x, dtype=np.float64), win_len, hop) * hann(win_len)
    return np.fft.rfft(frames, n=fft_size, axis=1)


def stft_magnitude(wave: Waveform, win_len: int = WIN_LEN, hop: int = HOP,
                   fft_size: int = FFT_SIZE) -> Spectrogram:
    """Magnitude spectrogram of Hann-windowed, unpadded frames.

    Returns a ``T x (fft_size // 2 + 1)`` matrix with
    ``T = (N - win_len) // hop + 1``.
    """
    mags = np.abs(stft_complex(wave.samples, win_len, hop, fft_size))
    return Spectrogram(mags=mags, win_len=win_len, hop=hop, fft_size=fft_size)


def power(x: np.ndarray) -> float:
    """Full-utterance mean square."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


def fit_noise(noise: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """Loop or truncate ``noise`` to ``length`` samples starting at ``offset``."""
    idx = (offset + np.arange(length)) % len(noise)
    return np.asarray(noise, dtype=np.float64)[idx]


def mix_at_snr(clean: Waveform, noise: NoiseClip | Waveform, snr_db: float,
               offset: int = 0) -> Waveform:
    """Add noise to ``clean`` so the full-utterance SNR equals ``snr_db``.

    The output is not renormalised. ``meta`` records the noise gain, whether
    any sample left [-1, 1], and the scaled noise itself is not kept.
    """
    noise_wave = noise.waveform if isinstance(noise, NoiseClip) else noise
    if clean.sample_rate != noise_wave.sample_rate:
        raise SignalError("sample rates differ")
    if len(noise_wave) == 0:
        raise SignalError("degenerate power: empty noise")
    n = fit_noise(noise_wave.samples, len(clean), offset)
    p_clean = power(clean.samples)
    p_noise = power(n)
    if np.sqrt(p_clean) <= SILENCE_RMS or np.sqrt(p_noise) <= SILENCE_RMS:
        raise SignalError("degenerate power: silent clean or noise")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples + gain * n
    meta = {
        "noise_scale": float(gain),
        "snr_db": float(snr_db),
        "clipped": bool(np.any(np.abs(mixed) > 1.0)),
    }
    if isinstance(noise, NoiseClip):
        meta["noise_id"] = noise.noise_id
    return Waveform(mixed, clean.sample_rate, meta)


def spectral_subtraction_enhance(noisy: Waveform, noise_profile_ms: float = 100.0,
                                 over_subtraction: float = 1.0,
                                 floor: float = 0.02) -> Waveform:
    """Magnitude spectral subtraction with a leading-segment noise estimate.

    The noise magnitude is the mean over frames lying entirely inside the
    first ``noise_profile_ms``. Enhanced magnitudes are
    ``max(|Y| - over_subtraction * N, floor * N)`` with the noisy phase,
    resynthesised by weighted overlap-add.
    """
    x = noisy.samples
    profile = int(round(noise_profile_ms * noisy.sample_rate / 1000.0))
    if len(x) < profile + WIN_LEN:
        raise SignalError("utterance too short")
    noverlap = WIN_LEN - HOP
    _, _, spec = signal.stft(x, fs=noisy.sample_rate, window="hann", nperseg=WIN_LEN,
                             noverlap=noverlap, nfft=FFT_SIZE, boundary="zeros",
                             padded=True)
    # with boundary padding, frame k covers samples [k*HOP - WIN_LEN/2, k*HOP + WIN_LEN/2)
    k_max = (profile - WIN_LEN // 2) // HOP
    k_min = int(np.ceil((WIN_LEN // 2) / HOP))
    if k_max < k_min:
        k_min = k_max = max(k_max, 0)
    mag = np.abs(spec)
    noise_mag = mag[:, k_min:k_max + 1].mean(axis=1, keepdims=True)
    cleaned = np.maximum(mag - over_subtraction * noise_mag, floor * noise_mag)
    phase = np.exp(1j * np.angle(spec))
    _, y = signal.istft(cleaned * phase, fs=noisy.sample_rate, window="hann",
                        nperseg=WIN_LEN, noverlap=noverlap, nfft=FFT_SIZE,
                        boundary=True)
    y = y[: len(x)]
    if len(y) < len(x):
        y = np.pad(y, (0, len(x) - len(y)))
    meta = dict(noisy.meta)
    meta["enhanced"] = "spectral_subtraction"
    return Waveform(y, noisy.sample_rate, meta)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_band_bins(n_bands: int = FWSEG_BANDS, sample_rate: int = SAMPLE_RATE,
                  fft_size: int = FFT_SIZE, fmin: float = FWSEG_FMIN_HZ) -> list[np.ndarray]:
    """Rectangular groupings of rFFT bins on mel-spaced edges."""
    fmax = sample_rate / 2.0
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_bands + 1))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    bands = []
    for j in range(n_bands):
        upper = freqs <= edges[j + 1] if j == n_bands - 1 else freqs < edges[j + 1]
        bins = np.flatnonzero((freqs >= edges[j]) & upper)
        if bins.size == 0:
            raise SignalError(f"mel band {j} contains no FFT bins")
        bands.append(bins)
    return bands


def fw_seg_snr(clean: Waveform, processed: Waveform) -> float:
    """Frequency-weighted segmental SNR in dB, within [-10, 35].

    Per frame and mel band, the processed spectrum is projected onto the
    clean one with a non-negative gain; the band SNR is the power of that
    projection over the power of the remainder. Band SNRs are clamped,
    weighted by clean band magnitude**0.2 and averaged over bands, then over
    frames whose clean energy lies within 40 dB of the loudest frame.
    """
    if len(clean) != len(processed):
        raise SignalError("length mismatch")
    if np.sqrt(power(clean.samples)) <= SILENCE_RMS:
        raise SignalError("degenerate power: silent clean")
    c = stft_complex(clean.samples)
    p = stft_complex(processed.samples)
    frame_energy = np.sum(np.abs(c) ** 2, axis=1)
    active = frame_energy >= frame_energy.max() * 10.0 ** (-FWSEG_ACTIVE_RANGE_DB / 10.0)
    active &= frame_energy > 0
    c, p = c[active], p[active]

    band_snr = []
    band_w = []
    for bins in mel_band_bins():
        cb, pb = c[:, bins], p[:, bins]
        e_clean = np.sum(np.abs(cb) ** 2, axis=1)
        cross = np.sum(np.real(pb * np.conj(cb)), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(e_clean > 0, np.maximum(cross / e_clean, 0.0), 0.0)
            sig = gain ** 2 * e_clean
            resid = np.sum(np.abs(pb - gain[:, None] * cb) ** 2, axis=1)
            snr = 10.0 * np.log10(sig / resid)
        snr = np.where(resid == 0, FWSEG_MAX_DB, snr)
        snr = np.where(sig == 0, FWSEG_MIN_DB, snr)
        band_snr.append(np.clip(snr, FWSEG_MIN_DB, FWSEG_MAX_DB))
        band_w.append(e_clean ** (FWSEG_WEIGHT_EXP / 2.0))
    band_snr = np.stack(band_snr, axis=1)
    band_w = np.stack(band_w, axis=1)
    frame_snr = np.sum(band_w * band_snr, axis=1) / np.sum(band_w, axis=1)
    return float(np.mean(frame_snr))


def read_wav(path) -> Waveform:
    """Read a mono 16 kHz WAV (PCM16 or float32) into a Waveform."""
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise SignalError(f"{path}: sample rate {rate} Hz not supported (need {SAMPLE_RATE})")
    if data.ndim != 1:
        raise SignalError(f"{path}: only mono audio is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise SignalError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform, pcm16: bool = False) -> Path:
    """Write a Waveform as float32 (default) or 16-bit PCM."""
    if wave.sample_rate != SAMPLE_RATE:
        raise SignalError("only 16 kHz audio can be written")
    if pcm16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    path = Path(path)
    wavfile.write(str(path), wave.sample_rate, data)
    return path
