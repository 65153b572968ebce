"""Audio ingestion, energy-based silence removal, and MFCC extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, UnsupportedFormatError

FEAT_MAGIC = b"UASRFEAT"
FEAT_VERSION = 1

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray   # float in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("audio samples must be finite")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray    # (T, D)
    frame_rate: float

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ContractError(f"frames must be (T, D), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("feature frames must be finite")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class MfccConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 26
    n_ceps: int = 13
    pre_emphasis: float = 0.97
    add_deltas: bool = True

    def __post_init__(self):
        if self.n_ceps > self.n_mels:
            raise ContractError("n_ceps must be <= n_mels")
        if self.window_ms < self.hop_ms:
            raise ContractError("window must be at least one hop long")

    @property
    def dim(self) -> int:
        return 3 * self.n_ceps if self.add_deltas else self.n_ceps


# --- WAV ingestion --------------------------------------------------------


def read_wav(path) -> AudioSignal:
    """Read a RIFF/WAVE file; only 16-bit PCM mono little-endian is accepted.

    Stereo or non-16-bit input is rejected outright: silently downmixing
    would corrupt experiments.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (magic {raw[0:4]!r})")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormatError(f"{path}: only PCM supported, got format {audio_format}")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: only mono supported, got {channels} channels")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: only 16-bit supported, got {bits}")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples=samples, sample_rate=int(sample_rate))


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(body)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, signal.sample_rate,
                            signal.sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(body)))
        f.write(body)


# --- silence removal ------------------------------------------------------


def remove_silence(signal: AudioSignal, frame_ms: float = 25.0,
                   energy_threshold_db: float = -40.0) -> AudioSignal:
    """Keep frames whose RMS energy is within ``energy_threshold_db`` of the
    loudest frame; concatenate survivors in order."""
    if frame_ms <= 0:
        raise ContractError("frame_ms must be positive")
    n = len(signal)
    if n == 0:
        return signal
    flen = max(1, int(round(signal.sample_rate * frame_ms / 1000.0)))
    n_frames = (n + flen - 1) // flen
    rms = np.array([
        np.sqrt(np.mean(signal.samples[i * flen : (i + 1) * flen] ** 2))
        for i in range(n_frames)
    ])
    peak = rms.max()
    if peak <= 0:
        return AudioSignal(samples=np.zeros(0), sample_rate=signal.sample_rate)
    keep = 20.0 * np.log10(np.maximum(rms, 1e-30) / peak) > energy_threshold_db
    parts = [signal.samples[i * flen : (i + 1) * flen] for i in np.flatnonzero(keep)]
    samples = np.concatenate(parts) if parts else np.zeros(0)
    return AudioSignal(samples=samples, sample_rate=signal.sample_rate)


# --- MFCC -----------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters on the mel scale."""
    mel_pts = np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / sample_rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        lo, mid, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, mid):
            if mid > lo:
                fb[m - 1, k] = (k - lo) / (mid - lo)
        for k in range(mid, hi):
            if hi > mid:
                fb[m - 1, k] = (hi - k) / (hi - mid)
    return fb


def _dct_ortho_matrix(n_out: int, n_in: int) -> np.ndarray:
    """DCT-II basis with orthonormal scaling, shape (n_out, n_in)."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    mat *= np.sqrt(2.0 / n_in)
    mat[0] *= np.sqrt(0.5)
    return mat


def _deltas(c: np.ndarray) -> np.ndarray:
    # 2-frame symmetric difference, edges replicated
    up = np.vstack([c[1:], c[-1:]])
    down = np.vstack([c[:1], c[:-1]])
    return (up - down) / 2.0


def mfcc(signal: AudioSignal, cfg: MfccConfig | None = None) -> FeatureSequence:
    """Standard pipeline: pre-emphasis, Hann window, magnitude FFT, mel
    filterbank, log (floored), DCT-II, optional delta and delta-delta."""
    cfg = cfg or MfccConfig()
    win = int(round(signal.sample_rate * cfg.window_ms / 1000.0))
    hop = int(round(signal.sample_rate * cfg.hop_ms / 1000.0))
    frame_rate = 1000.0 / cfg.hop_ms
    x = signal.samples
    if len(x) < win:
        return FeatureSequence(frames=np.zeros((0, cfg.dim)), frame_rate=frame_rate)
    emph = np.concatenate([[x[0]], x[1:] - cfg.pre_emphasis * x[:-1]])
    n_frames = (len(x) - win) // hop + 1
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / (win - 1))
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    spectra = np.abs(np.fft.rfft(emph[idx] * window, n=n_fft, axis=1))
    fb = mel_filterbank(cfg.n_mels, n_fft, signal.sample_rate)
    energies = np.log(np.maximum(spectra @ fb.T, LOG_FLOOR))
    ceps = energies @ _dct_ortho_matrix(cfg.n_ceps, cfg.n_mels).T
    if cfg.add_deltas:
        d = _deltas(ceps)
        dd = _deltas(d)
        ceps = np.hstack([ceps, d, dd])
    return FeatureSequence(frames=ceps, frame_rate=frame_rate)


# --- feature file I/O -----------------------------------------------------


def save_features(path, feats: FeatureSequence) -> None:
    t, d = feats.frames.shape
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<IIIf", FEAT_VERSION, t, d, feats.frame_rate))
        f.write(np.ascontiguousarray(feats.frames, dtype="<f4").tobytes())


def load_features(path) -> FeatureSequence:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEAT_MAGIC:
            raise FormatError(f"{path}: bad feature magic {magic!r}")
        version, t, d, rate = struct.unpack("<IIIf", f.read(16))
        if version != FEAT_VERSION:
            raise FormatError(f"{path}: unsupported feature version {version}")
        frames = np.frombuffer(f.read(4 * t * d), dtype="<f4").reshape(t, d)
    return FeatureSequence(frames=frames.astype(np.float64), frame_rate=float(rate))
