"""Procedural audio-visual corpus: pseudo-speech, envelope-driven lip videos,
a partitioned noise catalog, SNR-grid mixing, enhancement routing and
labelled JSONL manifests."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp, oracle
from .dsp import SAMPLE_RATE, NoiseClip, Waveform

log = logging.getLogger(__name__)

FRAME_SIZE = 88
DEFAULT_FPS = 25
DEFAULT_SNR_GRID = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0)
NOISE_FAMILIES = ("white", "pink", "babble", "hum", "clatter")

ENVELOPE_CUTOFF_HZ = 8.0
APERTURE_MIN = 2.0       # ellipse semi-axis in pixels, closed mouth
APERTURE_MAX = 20.0
APERTURE_REF = 0.25      # envelope level that fully opens the mouth
MOUTH_HALF_WIDTH = 22.0


class CorpusError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (never from execution order)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


@dataclass
class VideoClip:
    frames: np.ndarray  # M x 88 x 88 uint8
    frame_rate: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (FRAME_SIZE, FRAME_SIZE):
            raise CorpusError("video format: frames must be M x 88 x 88 grayscale")
        if self.frames.shape[0] < 1:
            raise CorpusError("video format: no frames")
        if self.frames.dtype != np.uint8:
            raise CorpusError("video format: frames must be 8-bit grayscale")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def normalized(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0


@dataclass
class CorpusConfig:
    n_train_speakers: int = 40
    n_test_speakers: int = 8
    utterances_per_speaker: int = 1
    duration_s: tuple = (2.0, 3.0)
    snr_grid: tuple = DEFAULT_SNR_GRID
    seen_fraction: float = 0.8
    enhanced_fraction: float = 0.5
    validation_fraction: float = 0.1
    noise_instances_per_family: int = 2
    noise_duration_s: float = 8.0
    noise_profile_ms: float = 100.0
    fps: float = DEFAULT_FPS
    master_seed: int = 1

    def validate(self):
        if not 0.0 < self.seen_fraction < 1.0:
            raise CorpusError("seen_fraction must lie in (0, 1)")
        if not 0.0 <= self.enhanced_fraction <= 1.0:
            raise CorpusError("enhanced_fraction must lie in [0, 1]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise CorpusError("validation_fraction must lie in [0, 1)")
        if not self.snr_grid or min(self.snr_grid) < -20.0 or max(self.snr_grid) > 10.0:
            raise CorpusError("snr grid must be non-empty and within [-20, 10] dB")
        lo, hi = self.duration_s
        if not 1.0 <= lo <= hi <= 6.0:
            raise CorpusError("duration_s range must lie within [1, 6] s")
        if self.n_train_speakers < 1 or self.n_test_speakers < 1 or self.utterances_per_speaker < 1:
            raise CorpusError("speaker and utterance counts must be positive")
        if self.noise_instances_per_family < 1:
            raise CorpusError("noise_instances_per_family must be positive")


# ----------------------------------------------------------------- speech

def _speaker_traits(speaker_seed):
    rng = rng_for("speaker", speaker_seed)
    f0 = rng.uniform(90.0, 220.0)
    formants = [rng.uniform(300, 850), rng.uniform(900, 2300), rng.uniform(2400, 3400)]
    bandwidths = [rng.uniform(60, 120), rng.uniform(80, 160), rng.uniform(120, 250)]
    return f0, formants, bandwidths


def _resonator(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def _syllable_envelope(rng, n, fs):
    """Smooth 2-6 Hz syllable envelope with pauses and a silent lead-in."""
    t = np.arange(n) / fs
    env = np.zeros(n)
    pos = 0.2
    end = n / fs - 0.1
    while pos < end:
        rate = rng.uniform(2.0, 6.0)
        length = min(1.0 / rate, end - pos)
        if length < 0.05:
            break
        amp = rng.uniform(0.4, 1.0)
        mask = (t >= pos) & (t < pos + length)
        env[mask] += amp * np.sin(np.pi * (t[mask] - pos) / length) ** 2
        pos += length
        if rng.random() < 0.25:
            pos += rng.uniform(0.08, 0.3)
    return env


def synth_clean(speaker_seed, utterance_seed, duration_s: float,
                sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Pseudo-speech: a formant-filtered harmonic source with a syllabic
    envelope, a drifting F0 contour and sparse unvoiced bursts, peak
    normalised to 0.5."""
    if not 1.0 <= duration_s <= 6.0:
        raise CorpusError("duration_s must lie in [1, 6]")
    fs = sample_rate
    n = int(round(duration_s * fs))
    f0, formants, bws = _speaker_traits(speaker_seed)
    rng = rng_for("utterance", speaker_seed, utterance_seed)

    knots_t = np.linspace(0, n / fs, max(3, int(duration_s / 0.3) + 1))
    knots_f = f0 * (1.0 + rng.uniform(-0.2, 0.2, knots_t.size))
    f0_track = np.interp(np.arange(n) / fs, knots_t, knots_f)
    phase = 2 * np.pi * np.cumsum(f0_track) / fs
    n_harm = int(4000 // f0)
    source = np.zeros(n)
    for k in range(1, n_harm + 1):
        source += np.sin(k * phase) / k
    voiced = source
    for fc, bw in zip(formants, bws):
        b, a = _resonator(fc, bw, fs)
        voiced = voiced + 2.0 * signal.lfilter(b, a, source)

    env = _syllable_envelope(rng, n, fs)
    x = voiced * env

    n_bursts = rng.integers(1, 4)
    sos = signal.butter(4, [2500, 6500], btype="bandpass", fs=fs, output="sos")
    for _ in range(n_bursts):
        length = int(rng.uniform(0.03, 0.08) * fs)
        start = int(rng.uniform(0.2, max(0.21, n / fs - 0.2)) * fs)
        if start + length >= n:
            continue
        burst = signal.sosfilt(sos, rng.standard_normal(length)) * np.hanning(length)
        x[start:start + length] += 0.3 * np.max(np.abs(x)) * burst / (np.max(np.abs(burst)) + 1e-12)

    x = 0.5 * x / np.max(np.abs(x))
    return Waveform(x, fs, {"f0_hz": float(f0)})


# ------------------------------------------------------------------ video

def amplitude_envelope(wave: Waveform, cutoff_hz: float = ENVELOPE_CUTOFF_HZ) -> np.ndarray:
    sos = signal.butter(2, cutoff_hz, fs=wave.sample_rate, output="sos")
    return np.maximum(signal.sosfiltfilt(sos, np.abs(wave.samples)), 0.0)


def envelope_at_frames(wave: Waveform, fps: float) -> np.ndarray:
    """Clean amplitude envelope sampled at video frame centres."""
    m = int(round(wave.duration * fps))
    env = amplitude_envelope(wave)
    centres = np.clip(((np.arange(m) + 0.5) / fps * wave.sample_rate).astype(int), 0, len(wave) - 1)
    return env[centres]


def _background():
    rng = np.random.default_rng(88)
    tex = rng.normal(0.0, 1.0, (FRAME_SIZE, FRAME_SIZE))
    tex = signal.convolve2d(tex, np.ones((5, 5)) / 25.0, mode="same", boundary="symm")
    yy, xx = np.mgrid[:FRAME_SIZE, :FRAME_SIZE]
    shade = 160.0 + 20.0 * (1.0 - ((yy - 44) ** 2 + (xx - 44) ** 2) / 44.0 ** 2)
    return shade + 6.0 * tex / tex.std()


_BACKGROUND = _background()


def render_mouth(aperture: float, half_width: float = MOUTH_HALF_WIDTH) -> np.ndarray:
    """One anti-aliased frame: a dark ellipse of vertical semi-axis
    ``aperture`` on the fixed background."""
    yy, xx = np.mgrid[:FRAME_SIZE, :FRAME_SIZE].astype(np.float64)
    cy, cx = 52.0, 44.0
    r = np.sqrt(((xx - cx) / half_width) ** 2 + ((yy - cy) / aperture) ** 2)
    dist = (r - 1.0) * min(aperture, half_width)
    cover = np.clip(0.5 - dist, 0.0, 1.0)
    frame = _BACKGROUND * (1.0 - cover) + 30.0 * cover
    return np.clip(np.round(frame), 0, 255).astype(np.uint8)


def synth_lip_video(clean: Waveform, fps: float = DEFAULT_FPS, seed=0) -> VideoClip:
    """Render a mouth whose opening tracks the 8 Hz envelope of ``clean``."""
    if not 10 <= fps <= 60:
        raise CorpusError("fps must lie in [10, 60]")
    m = int(round(clean.duration * fps))
    if m < 5:
        raise CorpusError("clip too short: fewer than 5 video frames")
    env = envelope_at_frames(clean, fps)
    openness = np.clip(env / APERTURE_REF, 0.0, 1.0)
    jitter = 1.0 + 0.05 * rng_for("jitter", seed).standard_normal(m)
    apertures = APERTURE_MIN + (APERTURE_MAX - APERTURE_MIN) * openness * jitter
    frames = np.stack([render_mouth(a) for a in apertures])
    return VideoClip(frames, fps)


def measure_aperture(frames: np.ndarray, threshold: int = 100) -> np.ndarray:
    """Vertical extent of dark pixels in the mouth column, per frame."""
    column = frames[:, :, 40:49].astype(np.int32)
    return np.sum(column < threshold, axis=1).mean(axis=1)


def write_video(directory, clip: VideoClip) -> Path:
    """Store frames as zero-padded binary PGM files plus ``video.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{FRAME_SIZE} {FRAME_SIZE}\n255\n".encode("ascii")
    for i, frame in enumerate(clip.frames):
        (d / f"frame_{i:05d}.pgm").write_bytes(header + frame.tobytes())
    meta = {"frame_rate": clip.frame_rate, "frame_count": clip.n_frames}
    (d / "video.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return d


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise CorpusError(f"video format: {path} is not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if (w, h) != (FRAME_SIZE, FRAME_SIZE) or maxval != 255:
        raise CorpusError(f"video format: {path} must be 88x88 8-bit")
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def read_video(directory) -> VideoClip:
    d = Path(directory)
    meta = json.loads((d / "video.json").read_text())
    frames = [_read_pgm(d / f"frame_{i:05d}.pgm") for i in range(meta["frame_count"])]
    return VideoClip(np.stack(frames), meta["frame_rate"])


# ------------------------------------------------------------------ noise

def _noise_instance(family: str, index: int, master_seed, n: int, fs: int) -> np.ndarray:
    rng = rng_for("noise", master_seed, family, index)
    if family == "white":
        x = rng.standard_normal(n)
    elif family == "pink":
        # 1/f^a spectrum, a varies per instance
        a = rng.uniform(0.8, 1.6)
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / fs)
        f[0] = f[1]
        x = np.fft.irfft(spec / f ** (a / 2.0), n)
    elif family == "babble":
        x = np.zeros(n)
        talkers = int(rng.integers(4, 8))
        for k in range(talkers):
            sp = derive_seed("babble", master_seed, index, k)
            chunk = synth_clean(sp, 0, 6.0, fs).samples
            x += np.resize(np.roll(chunk, int(rng.integers(0, chunk.size))), n)
    elif family == "hum":
        t = np.arange(n) / fs
        base = rng.uniform(45.0, 130.0)
        x = sum(rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi))
                for k in range(1, 25))
        x = x * (1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t))
        x = x + 0.05 * rng.standard_normal(n)
    elif family == "clatter":
        x = 0.02 * rng.standard_normal(n)
        rate = rng.uniform(3.0, 12.0)
        n_hits = rng.poisson(rate * n / fs)
        decay = rng.uniform(0.005, 0.03)
        tail = int(6 * decay * fs)
        kernel = np.exp(-np.arange(tail) / (decay * fs))
        for _ in range(n_hits):
            pos = int(rng.integers(0, n - tail))
            ring = rng.standard_normal(tail) * kernel
            x[pos:pos + tail] += rng.uniform(0.3, 1.0) * ring
    else:
        raise CorpusError(f"unknown noise family {family!r}")
    x = x - x.mean()
    return 0.1 * x / np.sqrt(np.mean(x * x))


def build_noise_catalog(config: CorpusConfig) -> list[NoiseClip]:
    """Generate every noise instance and split them seen/unseen by a seeded
    shuffle at ``seen_fraction``."""
    fs = SAMPLE_RATE
    n = int(config.noise_duration_s * fs)
    ids, waves = [], {}
    for family in NOISE_FAMILIES:
        for i in range(config.noise_instances_per_family):
            nid = f"{family}-{i:02d}"
            ids.append((nid, family))
            waves[nid] = _noise_instance(family, i, config.master_seed, n, fs)
    order = rng_for("partition", config.master_seed).permutation(len(ids))
    n_seen = int(round(config.seen_fraction * len(ids)))
    if n_seen < 2 or len(ids) - n_seen < 2:
        raise CorpusError("noise catalog needs at least 2 instances in each partition")
    seen = set(order[:n_seen].tolist())
    return [NoiseClip(Waveform(waves[nid], fs), nid, "seen" if k in seen else "unseen", family)
            for k, (nid, family) in enumerate(ids)]


# ----------------------------------------------------------------- corpus

@dataclass
class UtteranceRecord:
    utterance_id: str
    clean_path: str
    degraded_path: str
    video_path: str
    noise_id: str
    snr_db: float
    condition: str
    source: str
    split: str
    labels: dict = field(default_factory=dict)
    speaker: str = ""
    parent_id: str = ""
    clipped: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def read_manifest(path) -> list[UtteranceRecord]:
    with open(path, encoding="utf-8") as fh:
        return [UtteranceRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_manifest(path, records) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    return path


def _route_enhanced(n: int, fraction: float, *seed_parts) -> set:
    k = int(np.floor(n * fraction))
    order = rng_for("enhance", *seed_parts).permutation(n)
    return set(order[:k].tolist())


def build_corpus(config: CorpusConfig, out_dir, external_labels: dict | None = None) -> dict:
    """Synthesise audio, video and labels under ``out_dir`` and write
    ``manifest.jsonl``. Returns the summary block (also saved as JSON)."""
    config.validate()
    out = Path(out_dir)
    for sub in ("clean", "degraded", "video"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    catalog = build_noise_catalog(config)
    seen = [c for c in catalog if c.partition == "seen"]
    unseen = [c for c in catalog if c.partition == "unseen"]
    seed = config.master_seed

    speakers = [(f"tr{i:03d}", "train") for i in range(config.n_train_speakers)]
    n_val = int(round(config.validation_fraction * config.n_train_speakers))
    val_ids = set(rng_for("validation", seed).permutation(config.n_train_speakers)[:n_val].tolist())
    speakers = [(sp, "validation" if i in val_ids else split) for i, (sp, split) in enumerate(speakers)]
    speakers += [(f"te{i:03d}", "test") for i in range(config.n_test_speakers)]

    # candidates grouped by (split, condition) before enhancement routing
    groups: dict[tuple, list[dict]] = {}
    for sp, split in speakers:
        for u in range(config.utterances_per_speaker):
            clean_id = f"{sp}-u{u:02d}"
            rng = rng_for("clean", seed, clean_id)
            duration = float(np.round(rng.uniform(*config.duration_s), 2))
            clean = synth_clean(derive_seed("spk", seed, sp), derive_seed("utt", seed, clean_id), duration)
            clean = Waveform(clean.samples.astype(np.float32), clean.sample_rate)
            clean_path = out / "clean" / f"{clean_id}.wav"
            dsp.write_wav(clean_path, clean)
            video_dir = out / "video" / clean_id
            write_video(video_dir, synth_lip_video(clean, config.fps, seed=derive_seed("vid", seed, clean_id)))
            conditions = [("seen", seen)] if split != "test" else [("seen", seen), ("unseen", unseen)]
            for condition, pool in conditions:
                for snr in config.snr_grid:
                    pick = rng_for("mix", seed, clean_id, condition, snr)
                    noise = pool[int(pick.integers(len(pool)))]
                    offset = int(pick.integers(len(noise.waveform)))
                    groups.setdefault((split, condition), []).append({
                        "clean_id": clean_id, "speaker": sp, "clean": clean,
                        "clean_path": clean_path, "video_dir": video_dir,
                        "noise": noise, "offset": offset, "snr": float(snr),
                        "condition": condition, "split": split,
                    })

    records = []
    counts: dict[str, int] = {}
    for (split, condition), cands in sorted(groups.items()):
        routed = _route_enhanced(len(cands), config.enhanced_fraction, seed, split, condition)
        for k, c in enumerate(cands):
            noisy_id = f"{c['clean_id']}-{condition}-{c['noise'].noise_id}-snr{int(c['snr']):+03d}"
            noisy = dsp.mix_at_snr(c["clean"], c["noise"], c["snr"], offset=c["offset"])
            source = "enhanced" if k in routed else "noisy"
            degraded = noisy
            uid = noisy_id
            if source == "enhanced":
                degraded = dsp.spectral_subtraction_enhance(noisy, config.noise_profile_ms)
                uid = noisy_id + "-enh"
            degraded = Waveform(degraded.samples.astype(np.float32), degraded.sample_rate)
            try:
                if external_labels is not None:
                    labels = external_labels[uid]
                else:
                    labels = oracle.label_pair(c["clean"], degraded)
            except Exception as exc:
                raise CorpusError(f"labelling failed for {uid}: {exc}") from exc
            path = out / "degraded" / f"{uid}.wav"
            dsp.write_wav(path, degraded)
            records.append(UtteranceRecord(
                utterance_id=uid,
                clean_path=str(c["clean_path"].relative_to(out)),
                degraded_path=str(path.relative_to(out)),
                video_path=str(c["video_dir"].relative_to(out)),
                noise_id=c["noise"].noise_id, snr_db=c["snr"], condition=condition,
                source=source, split=split, labels=labels.to_dict(), speaker=c["speaker"],
                parent_id=noisy_id, clipped=bool(noisy.meta["clipped"]),
            ))
            key = f"{split}/{condition}/{source}"
            counts[key] = counts.get(key, 0) + 1

    records.sort(key=lambda r: (r.split, r.utterance_id))
    write_manifest(out / "manifest.jsonl", records)
    summary = {
        "total": len(records),
        "counts": dict(sorted(counts.items())),
        "noise_catalog": {c.noise_id: c.partition for c in catalog},
        "n_seen_noises": len(seen),
        "n_unseen_noises": len(unseen),
        "config": asdict(config),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "catalog.json").write_text(json.dumps(
        [{"noise_id": c.noise_id, "family": c.family, "partition": c.partition} for c in catalog],
        indent=2) + "\n")
    log.info("corpus written to %s: %d records", out, len(records))
    return summary


def audit_protocol(manifest_path, catalog_path=None) -> dict:
    """Check train/validation records use only seen noises and that the
    catalog is split at the configured ratio. Returns findings."""
    records = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    catalog = json.loads(Path(catalog_path or root / "catalog.json").read_text())
    part = {c["noise_id"]: c["partition"] for c in catalog}
    leaks = [r.utterance_id for r in records
             if r.split in ("train", "validation") and (part[r.noise_id] != "seen" or r.condition != "seen")]
    mislabeled = [r.utterance_id for r in records if part[r.noise_id] != r.condition]
    train_ids = {r.noise_id for r in records if r.split in ("train", "validation")}
    unseen_test_ids = {r.noise_id for r in records if r.split == "test" and r.condition == "unseen"}
    n_seen = sum(1 for p in part.values() if p == "seen")
    return {
        "train_unseen_leaks": leaks,
        "condition_mismatches": mislabeled,
        "train_unseen_overlap": sorted(train_ids & unseen_test_ids),
        "n_seen": n_seen,
        "n_unseen": len(part) - n_seen,
    }
