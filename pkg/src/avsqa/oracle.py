"""Intrusive label oracles (STOI, pseudo-PESQ), external label ingestion and
evaluation statistics (LCC, SRCC, MSE)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal
from scipy.stats import rankdata

from .dsp import SAMPLE_RATE, SignalError, Waveform, fw_seg_snr

PESQ_MIN, PESQ_MAX = 1.0, 4.5
STOI_MIN, STOI_MAX = 0.0, 1.0
QUALITY_SOURCES = ("external_pesq", "pseudo_pesq")


@dataclass(frozen=True)
class StoiConfig:
    """Constants of the reference short-time objective intelligibility measure."""
    fs: int = 10000
    frame_len: int = 256
    nfft: int = 512
    n_bands: int = 15
    min_freq: float = 150.0
    segment_frames: int = 30
    beta_db: float = -15.0
    dyn_range_db: float = 40.0
    taps_per_phase: int = 32
    kaiser_beta: float = 5.0


DEFAULT_STOI = StoiConfig()
_EPS = np.finfo(np.float64).eps


class LabelError(ValueError):
    pass


class DegenerateCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class LabelPair:
    quality: float
    intelligibility: float
    quality_source: str = "pseudo_pesq"

    def __post_init__(self):
        if not (np.isfinite(self.quality) and PESQ_MIN <= self.quality <= PESQ_MAX):
            raise LabelError(f"quality {self.quality} outside [{PESQ_MIN}, {PESQ_MAX}]")
        if not (np.isfinite(self.intelligibility) and STOI_MIN <= self.intelligibility <= STOI_MAX):
            raise LabelError(f"intelligibility {self.intelligibility} outside [0, 1]")
        if self.quality_source not in QUALITY_SOURCES:
            raise LabelError(f"unknown quality_source {self.quality_source!r}")

    def to_dict(self):
        return {"quality": self.quality, "intelligibility": self.intelligibility,
                "quality_source": self.quality_source}


# --------------------------------------------------------------------------- STOI

def resample_filter(up: int, down: int, taps_per_phase: int = 32,
                    kaiser_beta: float = 5.0) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for polyphase resampling by up/down."""
    n_taps = taps_per_phase * up + 1
    cutoff = 1.0 / max(up, down)
    # unity DC gain; resample_poly applies the factor ``up`` itself
    return signal.firwin(n_taps, cutoff, window=("kaiser", kaiser_beta))


def resample(x: np.ndarray, fs_in: int, fs_out: int, cfg: StoiConfig = DEFAULT_STOI) -> np.ndarray:
    if fs_in == fs_out:
        return np.asarray(x, dtype=np.float64)
    ratio = Fraction(fs_out, fs_in)
    up, down = ratio.numerator, ratio.denominator
    h = resample_filter(up, down, cfg.taps_per_phase, cfg.kaiser_beta)
    return signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def _sym_hann(n: int) -> np.ndarray:
    # symmetric Hann without the zero end points
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    starts = np.arange(0, len(x) - frame_len, hop)
    if starts.size == 0:
        return np.empty((0, frame_len))
    return x[starts[:, None] + np.arange(frame_len)[None, :]]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, frame_len = frames.shape
    out = np.zeros((n - 1) * hop + frame_len) if n else np.zeros(0)
    for i in range(n):
        out[i * hop:i * hop + frame_len] += frames[i]
    return out


def remove_silent_frames(x, y, dyn_range_db, frame_len, hop):
    """Drop frames where the clean energy is more than ``dyn_range_db`` below
    its maximum, then re-synthesise both signals by overlap-add."""
    w = _sym_hann(frame_len)
    xf = _frames(x, frame_len, hop) * w
    yf = _frames(y, frame_len, hop) * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = (energy.max() - dyn_range_db - energy) < 0 if energy.size else np.zeros(0, bool)
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def third_octave_matrix(fs, nfft, n_bands, min_freq):
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, freqs.size))
    for i in range(n_bands):
        lo_bin = int(np.argmin((freqs - lo[i]) ** 2))
        hi_bin = int(np.argmin((freqs - hi[i]) ** 2))
        obm[i, lo_bin:hi_bin] = 1.0
    return obm


def _band_envelopes(x, cfg: StoiConfig):
    hop = cfg.frame_len // 2
    spec = np.fft.rfft(_frames(x, cfg.frame_len, hop) * _sym_hann(cfg.frame_len), n=cfg.nfft, axis=1)
    obm = third_octave_matrix(cfg.fs, cfg.nfft, cfg.n_bands, cfg.min_freq)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # bands x frames


def stoi(clean: Waveform, degraded: Waveform, cfg: StoiConfig = DEFAULT_STOI) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``clean``.

    Follows the standard third-octave envelope-correlation algorithm at
    10 kHz; the result is clamped to [0, 1].
    """
    if len(clean) != len(degraded):
        raise SignalError("length mismatch")
    if clean.sample_rate != degraded.sample_rate:
        raise SignalError("sample rates differ")
    x = resample(clean.samples, clean.sample_rate, cfg.fs, cfg)
    y = resample(degraded.samples, degraded.sample_rate, cfg.fs, cfg)
    x, y = remove_silent_frames(x, y, cfg.dyn_range_db, cfg.frame_len, cfg.frame_len // 2)
    if len(x) <= cfg.frame_len:
        raise SignalError("too short for STOI")
    x_env = _band_envelopes(x, cfg)
    y_env = _band_envelopes(y, cfg)
    n_frames = x_env.shape[1]
    n_seg = cfg.segment_frames
    if n_frames < n_seg:
        raise SignalError("too short for STOI")

    starts = np.arange(n_frames - n_seg + 1)
    idx = starts[:, None] + np.arange(n_seg)[None, :]
    xs = x_env[:, idx].transpose(1, 0, 2)  # segments x bands x frames
    ys = y_env[:, idx].transpose(1, 0, 2)

    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    ys = ys * scale
    clip = 10.0 ** (-cfg.beta_db / 20.0)
    ys = np.minimum(ys, xs * (1.0 + clip))

    xs = xs - xs.mean(axis=2, keepdims=True)
    ys = ys - ys.mean(axis=2, keepdims=True)
    xs = xs / (np.linalg.norm(xs, axis=2, keepdims=True) + _EPS)
    ys = ys / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    d = float(np.sum(xs * ys) / (xs.shape[0] * xs.shape[1]))
    return float(np.clip(d, STOI_MIN, STOI_MAX))


# ---------------------------------------------------------------- pseudo-PESQ

FWSEG_RANGE_DB = (-10.0, 35.0)


def pseudo_pesq_from_fwseg(fwseg_db: float) -> float:
    """Affine map of [-10, 35] dB onto the PESQ scale [1.0, 4.5], clamped."""
    lo, hi = FWSEG_RANGE_DB
    q = PESQ_MIN + (fwseg_db - lo) * (PESQ_MAX - PESQ_MIN) / (hi - lo)
    return float(np.clip(q, PESQ_MIN, PESQ_MAX))


def pseudo_pesq(clean: Waveform, degraded: Waveform) -> float:
    """Stand-in quality score computed from frequency-weighted segmental SNR."""
    return pseudo_pesq_from_fwseg(fw_seg_snr(clean, degraded))


def label_pair(clean: Waveform, degraded: Waveform) -> LabelPair:
    return LabelPair(pseudo_pesq(clean, degraded), stoi(clean, degraded), "pseudo_pesq")


# --------------------------------------------------------------- statistics

def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    r = float(np.sum(da * db) / np.sqrt(np.sum(da * da) * np.sum(db * db)))
    return float(np.clip(r, -1.0, 1.0))


def eval_stats(predicted, truth) -> tuple[float, float, float]:
    """Return ``(lcc, srcc, mse)`` between predictions and ground truth.

    SRCC is the Pearson correlation of average ranks, so ties share the mean
    of the ranks they span.
    """
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("predicted and truth must be 1-D sequences of equal length")
    if p.size < 2:
        raise ValueError("need at least two samples")
    if np.all(t == t[0]):
        raise DegenerateCorrelation("degenerate correlation: truth is constant")
    if np.all(p == p[0]):
        raise DegenerateCorrelation("degenerate correlation: predicted is constant")
    lcc = pearson(p, t)
    srcc = pearson(rankdata(p, method="average"), rankdata(t, method="average"))
    mse = float(np.mean((p - t) ** 2))
    return lcc, srcc, mse


# ------------------------------------------------------- external label files

def ingest_external_labels(manifest_path) -> dict[str, LabelPair]:
    """Read JSONL records ``{utterance_id, pesq, stoi}`` into LabelPairs.

    All problems in the file are collected and raised together as one
    :class:`LabelError` listing each offending line.
    """
    labels: dict[str, LabelPair] = {}
    first_line: dict[str, int] = {}
    errors: list[str] = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            uid = rec.get("utterance_id")
            if not isinstance(uid, str) or not uid:
                errors.append(f"line {lineno}: missing utterance_id")
                continue
            if uid in first_line:
                errors.append(f"line {lineno}: duplicate utterance_id {uid!r} "
                              f"(first seen on line {first_line[uid]})")
                continue
            first_line[uid] = lineno
            try:
                pesq, stoi_val = rec["pesq"], rec["stoi"]
            except KeyError as exc:
                errors.append(f"line {lineno}: missing field {exc.args[0]!r}")
                continue
            if isinstance(pesq, bool) or isinstance(stoi_val, bool) or \
                    not isinstance(pesq, (int, float)) or not isinstance(stoi_val, (int, float)):
                errors.append(f"line {lineno}: pesq and stoi must be numbers")
                continue
            try:
                labels[uid] = LabelPair(float(pesq), float(stoi_val), "external_pesq")
            except LabelError as exc:
                errors.append(f"line {lineno}: range error: {exc}")
    if errors:
        raise LabelError("; ".join(errors))
    return labels
