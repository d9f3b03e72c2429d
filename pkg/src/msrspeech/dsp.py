"""Synthetic multi-rate corpus tools: harmonic utterances, resampling, MFCC, WAV IO.

The corpus is generated at a 48 kHz master rate and decimated to the lower
rates, so every utterance exists as a rate-parallel family with shared ground
truth. Each segment class is a harmonic template whose fundamentals sit close
together (hard to tell apart within one 25 ms window) while its amplitude
modulation rate differs strongly (easy to tell apart across frames), plus
fixed partials above 8 kHz that survive only in the higher-rate versions.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import resample_poly

from .errors import FormatError, TooShortError, UnsupportedRateError
from .plan import CANONICAL_RATES

MASTER_RATE_HZ = 48000

# harmonic template layout
BASE_F0_HZ = 200.0
F0_STEP_HZ = 11.0
LOW_PARTIAL_AMPS = (0.55, 0.28, 0.17)
HIGH_PARTIALS_HZ = (8600.0, 9400.0)
HIGH_PARTIAL_AMP = 0.12
AM_BASE_HZ = 1.5
AM_DEPTH = 0.85
EDGE_RAMP_S = 0.005

# analysis defaults. The mel range stops below the 16 kHz version's anti-alias
# passband edge (0.45 * 16000) and pre-emphasis is off: both would otherwise
# tilt the spectrum differently per sampling rate and break pooled clustering.
FRAME_SHIFT_MS = 20.0
FRAME_LEN_MS = 25.0
N_MFCC = 13
N_MELS = 26
MEL_FMAX_HZ = 7000.0
PRE_EMPHASIS = 0.0
LOG_FLOOR = 1e-10

ANTI_ALIAS_TAPS = 64
ANTI_ALIAS_CUTOFF = 0.45  # times the target rate

PCM16_SCALE = 32767.0


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] plus their sampling rate."""

    samples: np.ndarray
    rate_hz: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz


@dataclass
class SpectralFrames:
    """Frame-level feature matrix on the 20 ms grid."""

    frames: np.ndarray  # [num_frames, feat_dim]
    frame_shift_ms: float = FRAME_SHIFT_MS
    frame_len_ms: float = FRAME_LEN_MS
    rate_hz: int = 0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class UtteranceLabelTrack:
    """Ground-truth segment classes, indexed at the 48 kHz master rate.

    boundaries has one more entry than class_ids; segment i covers master
    samples [boundaries[i], boundaries[i+1]).
    """

    boundaries: np.ndarray
    class_ids: np.ndarray
    num_classes: int

    def classes_at_times(self, times_s: np.ndarray) -> np.ndarray:
        """Class id at each time, by nearest master-sample lookup."""
        idx = np.clip(
            np.rint(np.asarray(times_s) * MASTER_RATE_HZ).astype(np.int64),
            0,
            int(self.boundaries[-1]) - 1,
        )
        seg = np.searchsorted(self.boundaries, idx, side="right") - 1
        seg = np.clip(seg, 0, len(self.class_ids) - 1)
        return self.class_ids[seg]


def harmonic_template(class_id: int) -> tuple[list[tuple[float, float]], float]:
    """Partial list [(freq_hz, amplitude)] and AM rate for a segment class.

    Fundamentals are spaced by F0_STEP_HZ so neighbouring classes are nearly
    indistinguishable within a single analysis window; AM rates are spaced
    geometrically so classes separate over longer spans of frames.
    """
    f0 = BASE_F0_HZ + F0_STEP_HZ * class_id
    partials = [(f0 * (k + 1), a) for k, a in enumerate(LOW_PARTIAL_AMPS)]
    partials += [(f, HIGH_PARTIAL_AMP) for f in HIGH_PARTIALS_HZ]
    am_rate = (AM_BASE_HZ + 0.3 * (class_id // 5)) * 2.0 ** (class_id % 5)
    return partials, am_rate


def generate_utterance(
    duration_s: float,
    num_classes: int,
    seed,
    min_segment_s: float = 0.12,
    max_segment_s: float = 0.30,
) -> tuple[Waveform, UtteranceLabelTrack]:
    """Synthesize one utterance of harmonic segments at the 48 kHz master rate."""
    if duration_s < 0.5:
        raise ValueError(f"duration_s must be >= 0.5, got {duration_s}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * MASTER_RATE_HZ))

    starts = []
    classes = []
    cursor = 0
    while cursor < n:
        starts.append(cursor)
        classes.append(int(rng.integers(num_classes)))
        seg_s = rng.uniform(min_segment_s, max_segment_s)
        cursor += max(1, int(round(seg_s * MASTER_RATE_HZ)))
    boundaries = np.array(starts + [n], dtype=np.int64)

    x = np.zeros(n, dtype=np.float64)
    ramp_n = int(EDGE_RAMP_S * MASTER_RATE_HZ)
    for i, cls in enumerate(classes):
        a, b = int(boundaries[i]), int(boundaries[i + 1])
        t = np.arange(a, b, dtype=np.float64) / MASTER_RATE_HZ
        partials, am_rate = harmonic_template(cls)
        total_amp = sum(amp for _, amp in partials)
        gain = rng.uniform(0.70, 0.95) / total_amp
        seg = np.zeros(b - a, dtype=np.float64)
        for freq, amp in partials:
            seg += amp * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        env = (1.0 + AM_DEPTH * np.sin(2.0 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
        env /= 1.0 + AM_DEPTH
        seg *= gain * env
        m = min(ramp_n, (b - a) // 2)
        if m > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
            seg[:m] *= ramp
            seg[-m:] *= ramp[::-1]
        x[a:b] = seg

    track = UtteranceLabelTrack(
        boundaries=boundaries,
        class_ids=np.array(classes, dtype=np.int64),
        num_classes=num_classes,
    )
    return Waveform(samples=x, rate_hz=MASTER_RATE_HZ), track


def _lowpass_taps(num_taps: int, cutoff_hz: float, rate_hz: int) -> np.ndarray:
    """Hamming-windowed sinc low-pass with unit DC gain."""
    n = np.arange(num_taps) - (num_taps - 1) / 2.0
    h = (2.0 * cutoff_hz / rate_hz) * np.sinc(2.0 * cutoff_hz * n / rate_hz)
    h *= np.hamming(num_taps)
    return h / h.sum()


def decimate(w: Waveform, target_rate_hz: int, taps: int = ANTI_ALIAS_TAPS) -> Waveform:
    """Band-limit below the target Nyquist then change the sampling rate.

    The target/source ratio must be rational with small factors; 22.05 kHz
    from 48 kHz (147/320) is the worst supported case.
    """
    if target_rate_hz > w.rate_hz:
        raise UnsupportedRateError(
            f"cannot upsample {w.rate_hz} Hz to {target_rate_hz} Hz"
        )
    if target_rate_hz == w.rate_hz:
        return Waveform(samples=w.samples.copy(), rate_hz=w.rate_hz)
    from fractions import Fraction

    ratio = Fraction(target_rate_hz, w.rate_hz)
    up, down = ratio.numerator, ratio.denominator
    h = _lowpass_taps(taps, ANTI_ALIAS_CUTOFF * target_rate_hz, w.rate_hz)
    filtered = np.convolve(w.samples, h, mode="same")
    if up == 1:
        out = filtered[::down]
    else:
        out = resample_poly(filtered, up, down)
    return Waveform(samples=np.clip(out, -1.0, 1.0), rate_hz=target_rate_hz)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, rate_hz: int, fmax_hz: float) -> np.ndarray:
    """Triangles evaluated at exact bin frequencies, each normalized to unit sum.

    Band energies are then weighted averages of per-bin power, which keeps
    pooled features comparable across sampling rates with different bin grids.
    """
    fmax = min(fmax_hz, rate_hz / 2.0)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * rate_hz / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (bin_freqs - left) / max(center - left, 1e-9)
        falling = (right - bin_freqs) / max(right - center, 1e-9)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        total = tri.sum()
        if total > 0:
            fb[i] = tri / total
    return fb


def _delta(feat: np.ndarray, width: int = 2) -> np.ndarray:
    denom = 2.0 * sum(i * i for i in range(1, width + 1))
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    out = np.zeros_like(feat)
    for i in range(1, width + 1):
        out += i * (padded[width + i : width + i + len(feat)]
                    - padded[width - i : width - i + len(feat)])
    return out / denom


def mfcc(w: Waveform, n_mfcc: int = N_MFCC, n_mels: int = N_MELS) -> SpectralFrames:
    """39-dim MFCC+delta+delta-delta features on the 20 ms / 25 ms grid.

    The mel range tops out at MEL_FMAX_HZ for every input rate so that frames
    pooled across rates live in one comparable feature space.
    """
    frame_len = int(w.rate_hz * FRAME_LEN_MS / 1000.0)
    shift = int(w.rate_hz * FRAME_SHIFT_MS / 1000.0)
    if len(w.samples) < frame_len:
        raise TooShortError(
            f"need at least {frame_len} samples ({FRAME_LEN_MS} ms), got {len(w.samples)}"
        )
    x = np.asarray(w.samples, dtype=np.float64)
    if PRE_EMPHASIS > 0.0:
        emphasized = np.append(x[0], x[1:] - PRE_EMPHASIS * x[:-1])
    else:
        emphasized = x
    num_frames = (len(emphasized) - frame_len) // shift + 1
    idx = np.arange(frame_len)[None, :] + shift * np.arange(num_frames)[:, None]
    window = np.hamming(frame_len)
    frames = emphasized[idx] * window[None, :]

    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    # normalize by the window's coherent gain so a tone's band energy does not
    # depend on the sampling rate's window length
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2 / window.sum() ** 2
    fb = _mel_filterbank(n_mels, n_fft, w.rate_hz, MEL_FMAX_HZ)
    mel_energy = np.maximum(power @ fb.T, LOG_FLOOR)
    log_mel = np.log(mel_energy)

    from scipy.fft import dct

    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_mfcc]
    d1 = _delta(ceps)
    d2 = _delta(d1)
    feats = np.concatenate([ceps, d1, d2], axis=1)
    return SpectralFrames(frames=feats, rate_hz=w.rate_hz)


# --------------------------------------------------------------------------
# WAV IO: 16-bit PCM mono little-endian only.

def write_wav(path, w: Waveform) -> None:
    data = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.rint(data * PCM16_SCALE).astype("<i2")
    payload = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        1,  # PCM
        1,  # mono
        w.rate_hz,
        w.rate_hz * 2,
        2,
        16,
        b"data",
        len(payload),
    )
    Path(path).write_bytes(header + payload)


def read_wav(path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError("truncated", f"{path}: file too small for a RIFF header")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError("bad-header", f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body_start + 16 > len(raw):
                raise FormatError("truncated", f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", raw, body_start)
        elif chunk_id == b"data":
            if body_start + chunk_size > len(raw):
                raise FormatError("truncated", f"{path}: data chunk truncated")
            data = raw[body_start : body_start + chunk_size]
        pos = body_start + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise FormatError("bad-header", f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise FormatError("not-pcm", f"{path}: audio format {audio_format} is not PCM")
    if channels != 1:
        raise FormatError(
            "unsupported-channels", f"{path}: {channels} channels, expected mono"
        )
    if bits != 16:
        raise FormatError("unsupported-depth", f"{path}: {bits}-bit depth, expected 16")
    pcm = np.frombuffer(data, dtype="<i2")
    return Waveform(samples=pcm.astype(np.float64) / PCM16_SCALE, rate_hz=rate)


# --------------------------------------------------------------------------
# Corpus files: manifest TSV, generation spec, segment-track sidecar.

@dataclass
class ManifestEntry:
    utt_id: str
    path: str  # relative to the corpus directory
    rate_hz: int
    duration_s: float

    @property
    def base_id(self) -> str:
        return self.utt_id.rsplit("_", 1)[0]


@dataclass
class CorpusSpec:
    duration_s: float = 2.0
    num_classes: int = 4
    count: int = 100
    seed: int = 7
    min_segment_s: float = 0.12
    max_segment_s: float = 0.30


def parse_corpus_spec(text: str) -> CorpusSpec:
    """Parse a key=value spec file; unknown keys are rejected."""
    spec = CorpusSpec()
    casts = {
        "duration_s": float,
        "num_classes": int,
        "count": int,
        "seed": int,
        "min_segment_s": float,
        "max_segment_s": float,
    }
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"spec line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in casts:
            raise ValueError(f"spec line {lineno}: unknown key {key!r}")
        setattr(spec, key, casts[key](value))
    return spec


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    lines = [
        f"{e.utt_id}\t{e.path}\t{e.rate_hz}\t{e.duration_s:.3f}" for e in entries
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError("bad-header", f"{path}:{lineno}: expected 4 tab-separated fields")
        entries.append(
            ManifestEntry(parts[0], parts[1], int(parts[2]), float(parts[3]))
        )
    return entries


def write_segment_tracks(path, tracks: dict[str, UtteranceLabelTrack]) -> None:
    lines = []
    for base_id in sorted(tracks):
        tr = tracks[base_id]
        bounds = ",".join(str(int(b)) for b in tr.boundaries)
        cls = ",".join(str(int(c)) for c in tr.class_ids)
        lines.append(f"{base_id}\t{tr.num_classes}\t{bounds}\t{cls}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_segment_tracks(path) -> dict[str, UtteranceLabelTrack]:
    tracks = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        base_id, num_classes, bounds, cls = line.split("\t")
        tracks[base_id] = UtteranceLabelTrack(
            boundaries=np.array([int(b) for b in bounds.split(",")], dtype=np.int64),
            class_ids=np.array([int(c) for c in cls.split(",")], dtype=np.int64),
            num_classes=int(num_classes),
        )
    return tracks


def generate_corpus(
    spec: CorpusSpec,
    out_dir,
    rates: Sequence[int] = CANONICAL_RATES,
    workers: int = 1,
) -> tuple[list[ManifestEntry], dict[str, UtteranceLabelTrack]]:
    """Render `spec.count` utterances at every rate under out_dir/wavs.

    Utterances are independent given their spawned seeds, so worker count
    changes wall time only, never the output bytes.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.count)

    def build(i: int):
        master, track = generate_utterance(
            spec.duration_s,
            spec.num_classes,
            seeds[i],
            min_segment_s=spec.min_segment_s,
            max_segment_s=spec.max_segment_s,
        )
        base = f"utt{i:04d}"
        entries = []
        for rate in rates:
            wv = decimate(master, rate)
            rel = f"wavs/{base}_{rate}.wav"
            write_wav(out_dir / rel, wv)
            entries.append(
                ManifestEntry(f"{base}_{rate}", rel, rate, wv.duration_s)
            )
        return base, track, entries

    results = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(build, range(spec.count)))
    else:
        results = [build(i) for i in range(spec.count)]

    entries = [e for _, _, es in results for e in es]
    tracks = {base: track for base, track, _ in results}
    return entries, tracks
