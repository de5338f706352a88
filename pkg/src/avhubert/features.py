"""Acoustic and visual feature extraction.

Audio runs at 100 Hz (25 ms Hann window, 10 ms hop, 512-point FFT, 26 mel
filters over 0-8 kHz) and is brought to the 25 Hz video rate either by
stacking four frames (model input) or by 4-frame majority vote over cluster
labels (targets).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

SAMPLE_RATE = 16000
WIN = 400
HOP = 160
NFFT = 512
N_MELS = 26
LOG_FLOOR = 1e-10
N_CEPS = 13
DELTA_N = 2
STACK = 4

KINDS = ("fbank", "fbank104", "mfcc39", "hog", "model-layer")


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSequence:
    data: np.ndarray
    rate: int
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.rate not in (25, 100):
            raise FeatureError(f"rate must be 25 or 100, got {self.rate}")
        if self.kind not in KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("feature data contains NaN or Inf")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2):
    """Mel-scale edge points; filter i spans points i..i+2 and peaks at i+1."""
    return np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)


def mel_filterbank(n_mels: int = N_MELS, nfft: int = NFFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters [n_mels, nfft//2+1], unit peak, evaluated on the mel axis."""
    pts = mel_centers(n_mels, 0.0, sr / 2)
    bins_mel = hz_to_mel(np.arange(nfft // 2 + 1) * sr / nfft)
    fb = np.zeros((n_mels, nfft // 2 + 1))
    for i in range(n_mels):
        lo, c, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (bins_mel - lo) / (c - lo)
        down = (hi - bins_mel) / (hi - c)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FBANK = mel_filterbank()
_WINDOW = np.hanning(WIN + 1)[:-1]  # periodic Hann


def n_frames_100hz(n_samples: int) -> int:
    """ceil((N - 400) / 160) + 1; the last frame is zero-padded."""
    return -(-(n_samples - WIN) // HOP) + 1


def _frames(wave: np.ndarray) -> np.ndarray:
    n = n_frames_100hz(len(wave))
    need = (n - 1) * HOP + WIN
    padded = np.zeros(need, dtype=np.float64)
    padded[: len(wave)] = wave
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n)[:, None]
    return padded[idx]


def _check_wave(wave, sample_rate) -> np.ndarray:
    if sample_rate != SAMPLE_RATE:
        raise FeatureError(f"sample_rate must be {SAMPLE_RATE}, got {sample_rate}")
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or len(wave) < WIN:
        raise FeatureError(f"wave must be 1-D with at least {WIN} samples, got shape {wave.shape}")
    return wave


def _log_mel(wave: np.ndarray) -> np.ndarray:
    spec = rfft(_frames(wave) * _WINDOW, n=NFFT, axis=1)
    power = (spec.real**2 + spec.imag**2) / NFFT
    return np.log(np.maximum(power @ _FBANK.T, LOG_FLOOR))


def logfbank(wave, sample_rate: int = SAMPLE_RATE) -> FeatureSequence:
    """26-d log mel filterbank energies at 100 Hz."""
    return FeatureSequence(_log_mel(_check_wave(wave, sample_rate)), 100, "fbank")


def stack4(fbank: FeatureSequence) -> FeatureSequence:
    """Concatenate frames 4t..4t+3 into 25 Hz frame t; a <4-frame tail is dropped."""
    if fbank.kind != "fbank":
        raise FeatureError(f"stack4 needs fbank input, got {fbank.kind}")
    T = len(fbank) // STACK
    data = fbank.data[: T * STACK].reshape(T, STACK * fbank.dim)
    return FeatureSequence(data, 25, "fbank104")


def deltas(x: np.ndarray, n: int = DELTA_N) -> np.ndarray:
    """Regression deltas over +-n frames with edge replication."""
    padded = np.pad(x, ((n, n), (0, 0)), mode="edge")
    T = x.shape[0]
    num = sum(k * (padded[n + k : n + k + T] - padded[n - k : n - k + T]) for k in range(1, n + 1))
    return num / (2 * sum(k * k for k in range(1, n + 1)))


def mfcc39(wave, sample_rate: int = SAMPLE_RATE) -> FeatureSequence:
    """13 cepstra (c0 kept) plus first and second regression deltas."""
    logmel = _log_mel(_check_wave(wave, sample_rate))
    c = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    d1 = deltas(c)
    d2 = deltas(d1)
    return FeatureSequence(np.hstack([c, d1, d2]), 100, "mfcc39")


def hog(frames, cell: int = 4, n_bins: int = 9, eps: float = 1e-6) -> FeatureSequence:
    """Per-frame histogram of oriented gradients.

    Central-difference gradients (one-sided at borders via edge padding),
    unsigned orientation in [0, pi) hard-binned into ``n_bins``, magnitude
    votes pooled per ``cell`` x ``cell`` block, each cell L2-normalised as
    h / (||h|| + eps).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise FeatureError(f"frames must be [T, H, W], got shape {frames.shape}")
    T, H, W = frames.shape
    if H % cell or W % cell:
        raise FeatureError(f"image size {H}x{W} is not a multiple of cell size {cell}")
    p = np.pad(frames, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) / 2.0
    gy = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    b = np.minimum((ang / (np.pi / n_bins)).astype(int), n_bins - 1)
    ch, cw = H // cell, W // cell
    onehot = np.zeros((T, H, W, n_bins))
    np.put_along_axis(onehot, b[..., None], mag[..., None], axis=-1)
    hist = onehot.reshape(T, ch, cell, cw, cell, n_bins).sum(axis=(2, 4))
    norm = np.sqrt((hist**2).sum(-1, keepdims=True))
    hist = hist / (norm + eps)
    return FeatureSequence(hist.reshape(T, ch * cw * n_bins), 25, "hog")


def align_labels_25hz(labels) -> np.ndarray:
    """Majority label per 4-frame block; ties go to the label seen first in the block."""
    labels = np.asarray(labels)
    T = len(labels) // STACK
    out = np.empty(T, dtype=labels.dtype if labels.size else np.int64)
    for t in range(T):
        block = list(labels[STACK * t : STACK * t + STACK])
        out[t] = max(block, key=lambda v: (block.count(v), -block.index(v)))
    return out


def pad_to_frames(x: np.ndarray, n: int) -> np.ndarray:
    """Trim or edge-replicate rows so that ``x`` has exactly ``n`` rows."""
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.repeat(x[-1:], n - len(x), axis=0)])


def audio_input_features(wave, T: int) -> np.ndarray:
    """Model audio input: fbank stacked to 25 Hz with exactly ``T`` frames."""
    fb = logfbank(wave)
    fb = FeatureSequence(pad_to_frames(fb.data, STACK * T), 100, "fbank")
    return stack4(fb).data


def mfcc_frames(wave, T: int) -> np.ndarray:
    """MFCC39 at 100 Hz with exactly 4T rows (edge-replicated tail)."""
    return pad_to_frames(mfcc39(wave).data, STACK * T)


def corpus_normalize(arrays, stats=None):
    """Zero-mean / unit-variance per dimension using statistics pooled over all arrays.

    Returns the normalised list and the ``(mean, std)`` pair.
    """
    if stats is None:
        cat = np.concatenate(arrays, axis=0).astype(np.float64)
        mu = cat.mean(0)
        sd = cat.std(0)
        sd[sd < 1e-8] = 1.0
        stats = (mu, sd)
    mu, sd = stats
    return [((a - mu) / sd).astype(np.float32) for a in arrays], stats


# -- AVF1 debug dump


FEATURE_MAGIC = b"AVF1"


def save_features(path, fs: FeatureSequence) -> None:
    kind = fs.kind.encode()
    T, D = fs.data.shape
    blob = FEATURE_MAGIC + struct.pack("<B", len(kind)) + kind
    blob += struct.pack("<HII", fs.rate, T, D) + fs.data.astype("<f4").tobytes()
    Path(path).write_bytes(blob)


def load_features(path) -> FeatureSequence:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise FeatureError("bad magic, not an AVF1 feature dump")
    kl = buf[4]
    kind = buf[5 : 5 + kl].decode()
    off = 5 + kl
    rate, T, D = struct.unpack_from("<HII", buf, off)
    off += 10
    if len(buf) - off != 4 * T * D:
        raise FeatureError(f"truncated feature dump: expected {T}x{D} floats")
    data = np.frombuffer(buf, "<f4", offset=off).reshape(T, D)
    return FeatureSequence(data.copy(), rate, kind)
